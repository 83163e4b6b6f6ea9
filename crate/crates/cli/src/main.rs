//! `psgr` command-line entry point.

mod alloc;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use psgr::data::{self, Dataset, Manifest, SampleMeta};
use psgr::error::ErrorCategory;
use psgr::experiment::{self, BenchConfig, DEFAULT_RU_GRID};
use psgr::graph::{build_sparse_graph, KChoice, NodeFeatureMatrix, NormMode, DEFAULT_DENSE_LIMIT};
use psgr::nn::{self, TrainConfig};
use psgr::reason::{attention_row_dump, psgr_forward, PsgrConfig, PsgrParams};
use psgr::rng::Rng;
use psgr::{autograd, pstn, PsgrError, Scalar, Tensor};
use serde_json::json;

#[global_allocator]
static ALLOC: alloc::Tracking = alloc::Tracking;

#[derive(Parser, Debug)]
#[command(name = "psgr", version, about = "Pixel-wise sparse graph reasoning toolkit")]
struct Cli {
    /// Root seed; overrides the `seed` key of --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration (unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to PSGR_THREADS, then the core count.
    #[arg(long, global = true, env = "PSGR_THREADS")]
    threads: Option<usize>,
    /// Element type: f64 (default) for graph construction, reasoning and
    /// gradient checks; training and evaluation run in f32.
    #[arg(long, global = true, value_enum)]
    dtype: Option<Dtype>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic lesion dataset, or import PGM images.
    GenData(GenDataArgs),
    /// Build the pruned sparse graph and write it as an edge list.
    BuildGraph(BuildGraphArgs),
    /// Run the reasoning module on one feature map.
    Reason(ReasonArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the segmentation network and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate once per R_u value.
    SweepRu(SweepArgs),
    /// Dense versus sparse graph reasoning cost.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Import `<name>.pgm` images with `<name>.mask.pgm` labels from this
    /// directory instead of generating.
    #[arg(long)]
    from_pgm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildGraphArgs {
    /// Node features, `h×w×c` or `N×c`.
    #[arg(long)]
    features: PathBuf,
    /// Coarse class probabilities, `h×w×classes` or `N×classes`.
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    ru: Option<f64>,
    /// Neighbors per uncertain node, or `auto` for N/2.
    #[arg(long)]
    k: Option<KChoice>,
    #[arg(long)]
    norm: Option<NormMode>,
    /// Above this node count the N×N matrices are not materialized.
    #[arg(long, default_value_t = DEFAULT_DENSE_LIMIT)]
    dense_limit: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReasonArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    coarse: PathBuf,
    /// Initialize the output projection at zero (the module is then the
    /// identity).
    #[arg(long)]
    zero_output: bool,
    #[arg(long)]
    out: PathBuf,
    /// Write the normalized attention row of NODE as an h×w map.
    #[arg(long, num_args = 2, value_names = ["NODE", "PATH"])]
    dump_attention: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Single registered op; all ops when omitted.
    #[arg(long, conflicts_with = "all")]
    op: Option<String>,
    #[arg(long)]
    all: bool,
    /// Write the reports as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation set; DSC is logged per epoch when given.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also write predicted masks as `pred_%05d.pstn` here.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Comma-separated ascending values starting at 0.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long)]
    csv: PathBuf,
    /// SVG plot of DSC and HD against R_u.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',', default_value = "1024,4096")]
    nodes: Vec<usize>,
    #[arg(long, default_value_t = 0.005)]
    ru: f64,
    #[arg(long, default_value = "auto")]
    k: KChoice,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Allow node counts above the cap.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Config file, then flag overrides.
fn run_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| PsgrError::invalid(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo(command: &str, value: serde_json::Value) {
    eprintln!("effective config [{command}]: {value}");
}

fn psgr_config_of(cfg: &TrainConfig) -> PsgrConfig {
    PsgrConfig {
        ru: cfg.ru,
        k: cfg.k,
        norm_mode: cfg.norm_mode,
        n_layers: cfg.gnn_layers,
        nonlinearity: cfg.nonlinearity,
        use_edge_weights: cfg.use_edge_weights,
        include_local: cfg.include_local,
        ..PsgrConfig::default()
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    if let Some(dir) = &a.from_pgm {
        echo("gen-data", json!({"from_pgm": dir, "classes": a.classes, "out": a.out}));
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut names: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|p| {
            let s = p.to_string_lossy();
            s.ends_with(".pgm") && !s.ends_with(".mask.pgm")
        });
        names.sort();
        let mut size = None;
        for img_path in &names {
            let img = data::import_pgm(img_path)?;
            let mask_path = img_path.with_extension("mask.pgm");
            let (h, w, m) = data::import_pgm_labels(&mask_path)?;
            if [h, w, 1] != img.shape() {
                bail!(PsgrError::invalid(format!("{} and its mask differ in size", img_path.display())));
            }
            if *size.get_or_insert((h, w)) != (h, w) {
                bail!(PsgrError::invalid("imported images differ in size"));
            }
            images.push(img);
            masks.push(m);
        }
        let (h, w) = size.ok_or_else(|| PsgrError::invalid(format!("no .pgm images in {}", dir.display())))?;
        let n = images.len();
        let dataset = Dataset::new(h, w, a.classes, images, masks)?;
        let manifest = Manifest {
            n_samples: n,
            height: h,
            width: w,
            n_classes: a.classes,
            seed: None,
            samples: (0..n).map(|index| SampleMeta { index, seed: 0, blobs: vec![] }).collect(),
        };
        data::write_dataset(&a.out, &dataset, &manifest)?;
        println!("imported {n} images of {h}x{w} into {}", a.out.display());
        return Ok(());
    }
    let (h, w) = a.size;
    echo("gen-data", json!({"n": a.n, "size": [h, w], "classes": a.classes, "seed": seed, "out": a.out}));
    let samples = data::generate(a.n, h, w, a.classes, seed)?;
    let metas = samples.iter().map(|s| s.meta.clone()).collect();
    let dataset = Dataset::from_samples(samples, a.classes)?;
    let manifest = Manifest {
        n_samples: a.n,
        height: h,
        width: w,
        n_classes: a.classes,
        seed: Some(seed),
        samples: metas,
    };
    data::write_dataset(&a.out, &dataset, &manifest)?;
    println!("wrote {} samples of {h}x{w} to {}", a.n, a.out.display());
    Ok(())
}

/// Reads an `h×w×c` or `N×c` tensor as `N×c`, returning the grid size when
/// the input was three-dimensional.
fn read_rows<T: Scalar>(path: &Path) -> Result<(Tensor<T>, Option<(usize, usize)>)> {
    let t = pstn::read(path).with_context(|| format!("reading {}", path.display()))?.into_float::<T>()?;
    match *t.shape() {
        [h, w, c] => Ok((t.reshape(&[h * w, c])?, Some((h, w)))),
        [_, _] => Ok((t, None)),
        ref s => bail!(PsgrError::shape("read_rows", format!("{}: shape {s:?}", path.display()))),
    }
}

fn build_graph_typed<T: Scalar>(a: &BuildGraphArgs, cfg: &TrainConfig) -> Result<()> {
    let (h, _) = read_rows::<T>(&a.features)?;
    let (probs, _) = read_rows::<T>(&a.coarse)?;
    let h = NodeFeatureMatrix::new(h)?;
    let (_, adj) = build_sparse_graph(&h, &probs, cfg.ru, cfg.k, cfg.norm_mode, a.dense_limit)?;
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    adj.write_text(&mut out)?;
    out.flush()?;
    println!(
        "N={} K={} |Omega_u|={} edges={} -> {}",
        adj.n_nodes,
        adj.k,
        adj.uncertain.len(),
        adj.nnz(),
        a.out.display()
    );
    Ok(())
}

fn build_graph(cli: &Cli, a: &BuildGraphArgs) -> Result<()> {
    let mut cfg = run_config(cli)?;
    if let Some(ru) = a.ru {
        cfg.ru = ru;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(norm) = a.norm {
        cfg.norm_mode = norm;
    }
    echo(
        "build-graph",
        json!({"ru": cfg.ru, "k": cfg.k, "norm_mode": cfg.norm_mode, "dense_limit": a.dense_limit,
               "dtype": format!("{:?}", cli.dtype.unwrap_or(Dtype::F64)).to_lowercase(), "seed": cfg.seed}),
    );
    match cli.dtype.unwrap_or(Dtype::F64) {
        Dtype::F32 => build_graph_typed::<f32>(a, &cfg),
        Dtype::F64 => build_graph_typed::<f64>(a, &cfg),
    }
}

fn reason_typed<T: Scalar>(a: &ReasonArgs, cfg: &TrainConfig) -> Result<()> {
    let f = pstn::read(&a.features)?.into_float::<T>()?;
    let coarse = pstn::read(&a.coarse)?.into_float::<T>()?;
    let &[h, w, c] = f.shape() else {
        bail!(PsgrError::shape("reason", format!("features must be h×w×c, got {:?}", f.shape())));
    };
    let pcfg = psgr_config_of(cfg);
    let params = PsgrParams::<T>::init(c, &pcfg, &mut Rng::derived(cfg.seed, "psgr"), a.zero_output)?;
    let out = psgr_forward(&f, &coarse, &pcfg, &params)?;
    pstn::write(&a.out, &out.output)?;
    let n_uncertain = out.structure.as_ref().map_or(0, |s| s.n_uncertain());
    println!("reasoned over {h}x{w}x{c} with {n_uncertain} uncertain nodes -> {}", a.out.display());
    if let Some(dump) = &a.dump_attention {
        let node: usize = dump[0].parse().map_err(|_| PsgrError::invalid(format!("node index {:?}", dump[0])))?;
        let adj = out
            .structure
            .as_ref()
            .map(|s| &s.adjacency[0])
            .ok_or(PsgrError::NotUncertain(node))?;
        let map = attention_row_dump(adj, node, h, w)?.cast::<f32>()?;
        pstn::write(&dump[1], &map)?;
        println!("attention of node {node} -> {}", dump[1]);
    }
    Ok(())
}

fn reason(cli: &Cli, a: &ReasonArgs) -> Result<()> {
    let cfg = run_config(cli)?;
    echo(
        "reason",
        json!({"psgr": psgr_config_of(&cfg), "zero_output": a.zero_output, "seed": cfg.seed,
               "dtype": format!("{:?}", cli.dtype.unwrap_or(Dtype::F64)).to_lowercase()}),
    );
    match cli.dtype.unwrap_or(Dtype::F64) {
        Dtype::F32 => reason_typed::<f32>(a, &cfg),
        Dtype::F64 => reason_typed::<f64>(a, &cfg),
    }
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    if cli.dtype == Some(Dtype::F32) {
        bail!(PsgrError::invalid("gradient checks run in f64 only"));
    }
    let seed = cli.seed.unwrap_or(0);
    let ops: Vec<String> = match &a.op {
        Some(op) => vec![op.clone()],
        None => autograd::registered_ops().into_iter().map(String::from).collect(),
    };
    echo("gradcheck", json!({"ops": ops, "seed": seed, "eps": autograd::FD_EPS, "tol": autograd::GRADCHECK_TOL}));
    println!("{:<28} {:>12} {:>12}  status", "op", "max_abs", "max_rel");
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for op in &ops {
        let r = autograd::gradcheck(op, seed)?;
        let ok = r.passed(autograd::GRADCHECK_TOL);
        println!("{:<28} {:>12.3e} {:>12.3e}  {}", r.op, r.max_abs_err, r.max_rel_err, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(op.clone());
        }
        reports.push(r);
    }
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    if !failed.is_empty() {
        bail!(NumericFailure(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn require_f32(cli: &Cli, command: &str) -> Result<()> {
    if cli.dtype == Some(Dtype::F64) {
        bail!(PsgrError::invalid(format!("{command} supports --dtype f32 only")));
    }
    Ok(())
}

fn load(dir: &Path) -> Result<Dataset> {
    data::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    require_f32(cli, "train")?;
    let cfg = run_config(cli)?;
    echo("train", serde_json::to_value(&cfg)?);
    let data = load(&a.data)?;
    let val = a.val.as_deref().map(load).transpose()?;
    let outcome = nn::train(&data, val.as_ref(), &cfg)?;
    for l in &outcome.log {
        match l.val_dsc {
            Some(d) => println!("epoch {:>3}  lr {:.3e}  loss {:.5}  val_dsc {:.4}", l.epoch, l.lr, l.train_loss, d),
            None => println!("epoch {:>3}  lr {:.3e}  loss {:.5}", l.epoch, l.lr, l.train_loss),
        }
    }
    nn::save_checkpoint(&a.out, &cfg, &outcome.model)?;
    if let Some(path) = &a.log {
        fs::write(path, serde_json::to_string_pretty(&outcome.log)?)?;
    }
    println!("checkpoint -> {}", a.out.display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    require_f32(cli, "eval")?;
    let ckpt = nn::load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    echo("eval", json!({"checkpoint_config": ckpt.config, "data": a.data}));
    let data = load(&a.data)?;
    let preds = nn::predict(&ckpt.model, &data)?;
    let report = nn::score_masks(&preds, &data)?;
    fs::write(&a.report, serde_json::to_string_pretty(&report)?)?;
    if let Some(dir) = &a.masks {
        fs::create_dir_all(dir)?;
        for (i, m) in preds.iter().enumerate() {
            pstn::write_u8(dir.join(format!("pred_{i:05}.pstn")), &[data.height, data.width], m)?;
        }
    }
    let m = &report.mean;
    println!(
        "n={} mIoU {:.4} DSC {:.4} SEN {:.4} SPE {:.4} HD {:.3} MAE {:.4}",
        report.n_images, m.miou, m.dsc, m.sen, m.spe, m.hd, m.mae
    );
    Ok(())
}

fn sweep_ru(cli: &Cli, a: &SweepArgs) -> Result<()> {
    require_f32(cli, "sweep-ru")?;
    let cfg = run_config(cli)?;
    let values = a.values.clone().unwrap_or_else(|| DEFAULT_RU_GRID.to_vec());
    echo("sweep-ru", json!({"base": cfg, "values": values}));
    let data = load(&a.data)?;
    let val = load(&a.val)?;
    let rows = experiment::sweep_ru(&values, &cfg, &data, &val, |r| match &r.error {
        None => println!("ru {:<6} |Omega_u| {:<3} dsc {:.4} hd {:.3}", r.ru, r.n_uncertain, r.dsc, r.hd),
        Some(e) => println!("ru {:<6} failed: {e}", r.ru),
    })?;
    experiment::write_sweep_csv(&rows, BufWriter::new(fs::File::create(&a.csv)?))?;
    if let Some(plot) = &a.plot {
        fs::write(plot, experiment::render_sweep_svg(&rows))?;
    }
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        ru: a.ru,
        k: a.k,
        channels: a.channels,
        seed: cli.seed.unwrap_or(0),
        force: a.force,
        ..BenchConfig::default()
    };
    echo("bench", json!({"nodes": a.nodes, "bench": cfg}));
    let rows = experiment::bench(&a.nodes, &cfg, &alloc::PeakProbe)?;
    println!(
        "{:>6} {:>5} {:>6} {:>12} {:>10} {:>10} {:>12} {:>12} {:>9} {:>9}",
        "N", "K", "|Ω_u|", "dense_edges", "sparse", "ratio", "dense_peak", "sparse_peak", "dense_s", "sparse_s"
    );
    for r in &rows {
        println!(
            "{:>6} {:>5} {:>6} {:>12} {:>10} {:>9.5}% {:>12} {:>12} {:>9.3} {:>9.3}",
            r.n_nodes,
            r.k,
            r.n_uncertain,
            r.dense_edges,
            r.sparse_edges,
            100.0 * r.edge_ratio,
            r.dense_peak_bytes.unwrap_or(0),
            r.sparse_peak_bytes.unwrap_or(0),
            r.dense_seconds,
            r.sparse_seconds
        );
    }
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

/// A check that ran but did not meet its tolerance.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let category = err.chain().find_map(|e| {
        if e.is::<NumericFailure>() {
            Some(ErrorCategory::Numeric)
        } else if let Some(p) = e.downcast_ref::<PsgrError>() {
            Some(p.category())
        } else {
            e.downcast_ref::<std::io::Error>().map(|_| ErrorCategory::Io)
        }
    });
    match category {
        Some(ErrorCategory::Numeric) => 2,
        Some(ErrorCategory::Io) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(PsgrError::invalid("--threads must be positive"));
        }
        pool = pool.num_threads(n);
    }
    pool.build_global().map_err(|e| anyhow!("thread pool: {e}"))?;
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::BuildGraph(a) => build_graph(cli, a),
        Command::Reason(a) => reason(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::SweepRu(a) => sweep_ru(cli, a),
        Command::Bench(a) => bench(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
