//! Toy encoder-decoder with a coarse auxiliary branch and an optional
//! reasoning module at 1/8 resolution, plus its losses, optimizer and
//! training loop.

mod checkpoint;
mod loss;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{
    bce_loss, combine, dice_loss, one_hot, seg_loss_tape, total_loss, total_loss_tape,
    upsample_bilinear, LossConfig,
};
pub use model::{ForwardPass, ModelConfig, SegNet, BN_MOMENTUM, BN_EPS};
pub use optim::{lr_at, Adam};
pub use train::{evaluate, predict, score_masks, train, EpochLog, EvalReport, TrainConfig, TrainOutcome};

pub(crate) use loss::{gradcheck_total_loss, gradcheck_total_loss_multiclass};
