//! Three-stage mini U-Net with a coarse branch and the reasoning module at
//! the 1/8-resolution decoder stage.
//!
//! Encoder stage `s`: conv3×3 → BN → ReLU, kept as the skip, then 2×2 max
//! pooling. Decoder: a conv block at 1/8 resolution produces `F`, the
//! reasoning module refines it, then three stages of bilinear ×2 upsampling,
//! additive skip and conv block lead to a 1×1 head.

use serde::{Deserialize, Serialize};

use crate::autograd::ops::nchw_to_rows;
use crate::autograd::image::softmax_channels_raw;
use crate::autograd::{BatchNormMode, BatchNormStats, Tape, Var};
use crate::error::{PsgrError, Result};
use crate::graph::uncertain_count;
use crate::reason::{psgr_tape, PsgrConfig, PsgrParams, PsgrStructure, PsgrVars};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

const BN_BLOCKS: [&str; 8] = ["enc0", "enc1", "enc2", "dec0", "coarse", "dec1", "dec2", "dec3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub enc_channels: [usize; 3],
    pub coarse_mid: usize,
    /// `None` builds the plain backbone.
    pub psgr: Option<PsgrConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            enc_channels: [8, 16, 32],
            coarse_mid: 32,
            psgr: Some(PsgrConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BnRunning<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// Parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<BnRunning<T>>,
}

/// Output of one forward pass.
pub struct ForwardPass<T> {
    /// `[B, n_classes, H, W]`.
    pub logits: Var,
    /// `[B, n_classes, H/8, W/8]`.
    pub coarse_logits: Var,
    /// Tape handles of the parameters, in [`SegNet::param_names`] order.
    pub params: Vec<Var>,
    /// Batch statistics per BN block (training mode only).
    pub bn_stats: Vec<Option<BatchNormStats<T>>>,
    pub structure: Option<PsgrStructure<T>>,
}

fn he_normal<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let fan_in: usize = shape[1..].iter().product();
    rng.normal_tensor::<T>(shape).scale((2.0 / fan_in as f64).sqrt())
}

impl<T: Scalar> SegNet<T> {
    /// Backbone weights come from a stream derived from `seed` that does
    /// not depend on whether the reasoning module is present.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(PsgrError::invalid("n_classes must be at least 2"));
        }
        let [c0, c1, c2] = config.enc_channels;
        let (mid, nc) = (config.coarse_mid, config.n_classes);
        let mut rng = Rng::derived(seed, "backbone");
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut conv_block = |name: &str, cout: usize, cin: usize, rng: &mut Rng| -> Result<()> {
            names.extend([format!("{name}.conv"), format!("{name}.gamma"), format!("{name}.beta")]);
            params.extend([
                he_normal(rng, &[cout, cin, 3, 3])?,
                Tensor::ones(&[cout]),
                Tensor::zeros(&[cout]),
            ]);
            Ok(())
        };
        conv_block("enc0", c0, 1, &mut rng)?;
        conv_block("enc1", c1, c0, &mut rng)?;
        conv_block("enc2", c2, c1, &mut rng)?;
        conv_block("dec0", c2, c2, &mut rng)?;
        conv_block("coarse", mid, c2, &mut rng)?;
        conv_block("dec1", c1, c2, &mut rng)?;
        conv_block("dec2", c0, c1, &mut rng)?;
        conv_block("dec3", c0, c0, &mut rng)?;
        names.extend(["coarse.out.weight".into(), "coarse.out.bias".into()]);
        params.extend([he_normal(&mut rng, &[nc, mid, 1, 1])?, Tensor::zeros(&[nc])]);
        names.extend(["head.weight".into(), "head.bias".into()]);
        params.extend([he_normal(&mut rng, &[nc, c0, 1, 1])?, Tensor::zeros(&[nc])]);
        if let Some(cfg) = &config.psgr {
            let mut prng = Rng::derived(seed, "psgr");
            let p = PsgrParams::<T>::init(c2, cfg, &mut prng, true)?;
            for (name, t) in p.named() {
                names.push(format!("psgr.{name}"));
                params.push(t.clone());
            }
        }
        let widths = [c0, c1, c2, c2, mid, c1, c0, c0];
        let running = widths
            .iter()
            .map(|&c| BnRunning {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            })
            .collect();
        Ok(Self {
            config,
            names,
            params,
            running,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} is always registered"))
    }

    /// Named running statistics, `bn.<block>.mean` / `bn.<block>.var`.
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        BN_BLOCKS
            .iter()
            .zip(&self.running)
            .flat_map(|(name, r)| {
                [
                    (format!("bn.{name}.mean"), Tensor::from_parts(vec![r.mean.len()], r.mean.clone())),
                    (format!("bn.{name}.var"), Tensor::from_parts(vec![r.var.len()], r.var.clone())),
                ]
            })
            .collect()
    }

    /// Replaces a parameter or running buffer by name, checking its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mismatch = |want: &[usize]| {
            PsgrError::Format(format!("{name}: shape {:?}, expected {want:?}", value.shape()))
        };
        if let Some(i) = self.names.iter().position(|n| n == name) {
            if self.params[i].shape() != value.shape() {
                return Err(mismatch(self.params[i].shape()));
            }
            self.params[i] = value;
            return Ok(());
        }
        for (b, block) in BN_BLOCKS.iter().enumerate() {
            let r = &mut self.running[b];
            let slot = if name == format!("bn.{block}.mean") {
                &mut r.mean
            } else if name == format!("bn.{block}.var") {
                &mut r.var
            } else {
                continue;
            };
            if value.shape() != [slot.len()] {
                return Err(mismatch(&[slot.len()]));
            }
            *slot = value.into_data();
            return Ok(());
        }
        Err(PsgrError::Format(format!("unknown tensor {name}")))
    }

    /// Folds training-mode batch statistics into the running estimates
    /// (exponential moving average; the variance uses the unbiased form).
    pub fn update_running(&mut self, stats: &[Option<BatchNormStats<T>>]) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, s) in self.running.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            let unbias = if s.count > 1 {
                T::from_f64(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = keep * *rm + m * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = keep * *rv + m * bv * unbias;
            }
        }
    }

    /// Forward pass on `x: [B, 1, H, W]` with `H`, `W` divisible by 8.
    /// `train` selects batch statistics in BN and marks parameters as
    /// trainable.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<ForwardPass<T>> {
        let &[b, 1, h, w] = x.shape() else {
            return Err(PsgrError::shape("segnet", format!("input {:?} is not [B, 1, H, W]", x.shape())));
        };
        if h % 8 != 0 || w % 8 != 0 || b == 0 {
            return Err(PsgrError::shape("segnet", "spatial size must be a positive multiple of 8"));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), train)).collect();
        let p = |name: &str| vars[self.index(name)];
        let mut bn_stats = vec![None; BN_BLOCKS.len()];
        let mut block = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            let bi = BN_BLOCKS.iter().position(|n| *n == name).expect("known block");
            let y = tape.conv2d(x, p(&format!("{name}.conv")), None)?;
            let mode = if train {
                BatchNormMode::Train
            } else {
                BatchNormMode::Eval {
                    mean: self.running[bi].mean.clone(),
                    var: self.running[bi].var.clone(),
                }
            };
            let (y, stats) =
                tape.batch_norm(y, p(&format!("{name}.gamma")), p(&format!("{name}.beta")), &mode, BN_EPS)?;
            bn_stats[bi] = stats;
            tape.relu(y)
        };

        let input = tape.constant(x.clone());
        let e0 = block(tape, input, "enc0")?;
        let x1 = tape.maxpool2(e0)?;
        let e1 = block(tape, x1, "enc1")?;
        let x2 = tape.maxpool2(e1)?;
        let e2 = block(tape, x2, "enc2")?;
        let x3 = tape.maxpool2(e2)?;
        let f = block(tape, x3, "dec0")?;

        let cm = block(tape, f, "coarse")?;
        let coarse_logits = tape.conv2d(cm, p("coarse.out.weight"), Some(p("coarse.out.bias")))?;

        let (gh, gw) = (h / 8, w / 8);
        let mut structure = None;
        let mut f_r = f;
        if let Some(cfg) = &self.config.psgr {
            if uncertain_count(cfg.ru, gh * gw) > 0 {
                let c = tape.shape(f)[1];
                let nc = self.config.n_classes;
                let probs = softmax_channels_raw(tape.value(coarse_logits).data(), [b, nc, gh, gw]);
                let probs_rows =
                    Tensor::from_parts(vec![b * gh * gw, nc], nchw_to_rows(&probs, [b, nc, gh, gw]));
                let psgr_vars = PsgrVars {
                    w_in: p("psgr.w_in"),
                    b_in: p("psgr.b_in"),
                    layers: (0..cfg.n_layers)
                        .map(|l| (p(&format!("psgr.layer{l}.theta1")), p(&format!("psgr.layer{l}.theta2"))))
                        .collect(),
                    w_out: p("psgr.w_out"),
                    b_out: p("psgr.b_out"),
                };
                let rows = tape.nchw_to_rows(f)?;
                let (out, s) = psgr_tape(tape, rows, &probs_rows, gh, gw, &psgr_vars, cfg)?;
                f_r = tape.rows_to_nchw(out, b, gh, gw)?;
                debug_assert_eq!(tape.shape(f_r)[1], c);
                structure = s;
            }
        }

        let u1 = tape.upsample_bilinear(f_r, 2)?;
        let s1 = tape.add(u1, e2)?;
        let d1 = block(tape, s1, "dec1")?;
        let u2 = tape.upsample_bilinear(d1, 2)?;
        let s2 = tape.add(u2, e1)?;
        let d2 = block(tape, s2, "dec2")?;
        let u3 = tape.upsample_bilinear(d2, 2)?;
        let s3 = tape.add(u3, e0)?;
        let d3 = block(tape, s3, "dec3")?;
        let logits = tape.conv2d(d3, p("head.weight"), Some(p("head.bias")))?;
        Ok(ForwardPass {
            logits,
            coarse_logits,
            params: vars,
            bn_stats,
            structure,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(b: usize, s: usize, seed: u64) -> Tensor<f32> {
        Rng::new(seed).normal_tensor(&[b, 1, s, s])
    }

    #[test]
    fn output_shapes() {
        let net = SegNet::<f32>::new(ModelConfig { n_classes: 3, ..ModelConfig::default() }, 1).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &input(2, 32, 0), true).unwrap();
        assert_eq!(tape.shape(out.logits), &[2, 3, 32, 32]);
        assert_eq!(tape.shape(out.coarse_logits), &[2, 3, 4, 4]);
        assert!(out.bn_stats.iter().all(|s| s.is_some()));
    }

    #[test]
    fn backbone_init_independent_of_psgr() {
        let with = SegNet::<f32>::new(ModelConfig::default(), 4).unwrap();
        let without = SegNet::<f32>::new(ModelConfig { psgr: None, ..ModelConfig::default() }, 4).unwrap();
        let n = without.params().len();
        assert_eq!(&with.params()[..n], without.params());
        assert!(with.params().len() > n);
    }

    #[test]
    fn zero_initialized_module_leaves_logits_unchanged() {
        let cfg = ModelConfig {
            psgr: Some(PsgrConfig { ru: 0.1, ..PsgrConfig::default() }),
            ..ModelConfig::default()
        };
        let with = SegNet::<f32>::new(cfg, 8).unwrap();
        let without = SegNet::<f32>::new(ModelConfig { psgr: None, ..ModelConfig::default() }, 8).unwrap();
        let x = input(2, 64, 5);
        let (mut t1, mut t2) = (Tape::new(), Tape::new());
        let a = with.forward(&mut t1, &x, true).unwrap();
        let b = without.forward(&mut t2, &x, true).unwrap();
        assert!(a.structure.unwrap().n_uncertain() > 0);
        assert!(t1.value(a.logits).bitwise_eq(t2.value(b.logits)));
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = SegNet::<f32>::new(ModelConfig::default(), 2).unwrap();
        let x = input(1, 32, 3);
        let run = || {
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &x, false).unwrap();
            tape.value(out.logits).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let mut net = SegNet::<f64>::new(ModelConfig { psgr: None, ..ModelConfig::default() }, 2).unwrap();
        let stats = BatchNormStats { mean: vec![1.0; 8], var: vec![3.0; 8], count: 4 };
        let mut all = vec![None; 8];
        all[0] = Some(stats);
        net.update_running(&all);
        let bufs = net.buffers();
        assert_eq!(bufs[0].1.data()[0], 0.1);
        assert!((bufs[1].1.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
