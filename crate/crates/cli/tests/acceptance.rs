//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use psgr::autograd::{gradcheck, registered_ops};
use psgr::data::{self, Dataset};
use psgr::experiment::{self, BenchConfig, NoProbe, DEFAULT_RU_GRID};
use psgr::graph::{build_similarity, build_sparse_graph, KChoice, NodeFeatureMatrix, NormMode};
use psgr::metrics;
use psgr::nn::{bce_loss, total_loss, train, LossConfig, TrainConfig};
use psgr::pstn;
use psgr::reason::{psgr_forward, PsgrConfig, PsgrParams};
use psgr::rng::Rng;
use psgr::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t0: Instant, limit: Duration) -> Result<(), String> {
    let took = t0.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn random_probs(rng: &mut Rng, n: usize, quantized: bool) -> Tensor<f64> {
    let data = (0..n)
        .flat_map(|_| {
            let q = if quantized {
                rng.below(5) as f64 / 4.0
            } else {
                rng.uniform()
            };
            [1.0 - q, q]
        })
        .collect();
    Tensor::new(&[n, 2], data).unwrap()
}

fn random_features(rng: &mut Rng, n: usize, c: usize) -> Vec<f64> {
    // Small integers make equal scores (and therefore tie-breaking) common.
    let quantized = rng.uniform() < 0.5;
    let mut h: Vec<f64> = (0..n * c)
        .map(|_| {
            if quantized {
                rng.below(4) as f64 - 1.0
            } else {
                rng.normal()
            }
        })
        .collect();
    for _ in 0..rng.below(3) {
        let (src, dst) = (rng.below(n), rng.below(n));
        let row: Vec<f64> = h[src * c..(src + 1) * c].to_vec();
        h[dst * c..(dst + 1) * c].copy_from_slice(&row);
    }
    h
}

/// Brute force: every similarity, degree and score from scratch, full sort.
fn oracle_edges(h: &[f64], n: usize, c: usize, selected: &[usize], k: usize) -> Vec<(usize, usize, f64)> {
    let row = |i: usize| &h[i * c..(i + 1) * c];
    let sim = |i: usize, j: usize| {
        if i == j {
            return 0.0;
        }
        let mut s = 0.0;
        for t in 0..c {
            s += row(i)[t] * row(j)[t];
        }
        if s > 0.0 {
            s
        } else {
            0.0
        }
    };
    let l1: Vec<f64> = (0..n)
        .map(|j| row(j).iter().fold(0.0, |a, v| a + v.abs()))
        .collect();
    let mut out = Vec::new();
    for &i in selected {
        let s: Vec<f64> = (0..n).map(|j| sim(i, j)).collect();
        let mut d = 0.0;
        for v in &s {
            d += v;
        }
        let w: Vec<f64> = s.iter().map(|&v| if d > 0.0 { v / d } else { 0.0 }).collect();
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| (w[b] * l1[b]).total_cmp(&(w[a] * l1[a])).then(a.cmp(&b)));
        let mut keep = order[..k].to_vec();
        keep.sort_unstable();
        out.extend(keep.into_iter().map(|j| (i, j, w[j])));
    }
    out
}

fn oracle_selection(probs: &Tensor<f64>, ratio: f64) -> Vec<usize> {
    let n = probs.shape()[0];
    let margin = |i: usize| (probs.at2(i, 0) - probs.at2(i, 1)).abs();
    let count = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| margin(a).total_cmp(&margin(b)).then(a.cmp(&b)));
    let mut sel = order[..count].to_vec();
    sel.sort_unstable();
    sel
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(1);
    let mut total_edges = 0;
    for case in 0..100 {
        let n = 2 + rng.below(127);
        let c = 1 + rng.below(16);
        let h = random_features(&mut rng, n, c);
        let quantized = rng.uniform() < 0.3;
        let probs = random_probs(&mut rng, n, quantized);
        let ratio = rng.uniform();
        let (choice, k) = if rng.uniform() < 0.25 {
            (KChoice::Auto, (n / 2).max(1))
        } else {
            let k = 1 + rng.below(n - 1);
            (KChoice::Fixed(k), k)
        };
        let dense_limit = if case % 2 == 0 { usize::MAX } else { 0 };
        let feats = NodeFeatureMatrix::new(Tensor::new(&[n, c], h.clone()).unwrap()).map_err(err)?;
        let (sel, adj) = build_sparse_graph(&feats, &probs, ratio, choice, NormMode::RandomWalk, dense_limit)
            .map_err(err)?;
        let want_sel = oracle_selection(&probs, ratio);
        ensure(sel.selected == want_sel, || format!("case {case}: selection differs"))?;
        let want = oracle_edges(&h, n, c, &want_sel, k);
        let got: Vec<(usize, usize, f64)> = adj.edges.iter().map(|e| (e.source, e.target, e.weight)).collect();
        ensure(got.len() == want.len(), || format!("case {case}: {} edges, oracle {}", got.len(), want.len()))?;
        for (g, w) in got.iter().zip(&want) {
            ensure(g.0 == w.0 && g.1 == w.1 && g.2.to_bits() == w.2.to_bits(), || {
                format!("case {case} (N={n}, c={c}, K={k}): edge {g:?} vs oracle {w:?}")
            })?;
        }
        let expect_nnz = (ratio * n as f64).round() as usize * k.min(n - 1);
        ensure(adj.nnz() == expect_nnz, || format!("case {case}: nnz {} vs {expect_nnz}", adj.nnz()))?;
        total_edges += adj.nnz();
    }
    within(t0, Duration::from_secs(10))?;
    Ok(format!("100 cases, {total_edges} edges matched, {:.2?}", t0.elapsed()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(2);
    let mut isolated_seen = 0;
    for case in 0..1000 {
        let n = 2 + rng.below(63);
        let c = 1 + rng.below(8);
        let mut h: Vec<f64> = (0..n * c).map(|_| rng.normal()).collect();
        let mut zero_rows = vec![false; n];
        for (i, z) in zero_rows.iter_mut().enumerate() {
            if rng.uniform() < 0.15 {
                *z = true;
                h[i * c..(i + 1) * c].fill(0.0);
            }
        }
        let feats = NodeFeatureMatrix::new(Tensor::new(&[n, c], h).unwrap()).map_err(err)?;
        let g = build_similarity(&feats).map_err(err)?;
        let s = g.similarity();
        for i in 0..n {
            ensure(s.at2(i, i).to_bits() == 0, || format!("case {case}: S[{i},{i}] = {}", s.at2(i, i)))?;
            for j in 0..n {
                let v = s.at2(i, j);
                ensure(v >= 0.0 && v.to_bits() == s.at2(j, i).to_bits(), || {
                    format!("case {case}: S[{i},{j}] = {v}, S[{j},{i}] = {}", s.at2(j, i))
                })?;
            }
        }
        for mode in [NormMode::RandomWalk, NormMode::Symmetric] {
            let g = g.clone().normalize(mode);
            let s_hat = g.normalized().expect("normalized");
            ensure(s_hat.data().iter().all(|v| v.is_finite()), || format!("case {case}: non-finite Ŝ"))?;
            for i in 0..n {
                let row = s_hat.row(i);
                let degree = g.degrees()[i];
                if degree == 0.0 {
                    ensure(row.iter().all(|&v| v == 0.0), || format!("case {case}: isolated row {i} nonzero"))?;
                } else if mode == NormMode::RandomWalk {
                    let sum: f64 = row.iter().sum();
                    ensure((sum - 1.0).abs() <= 1e-9, || format!("case {case}: row {i} sums to {sum}"))?;
                }
            }
        }
        isolated_seen += zero_rows.iter().filter(|&&z| z).count();
    }
    within(t0, Duration::from_secs(10))?;
    Ok(format!("1000 cases, {isolated_seen} isolated nodes, {:.2?}", t0.elapsed()))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let ops = registered_ops();
    for required in [
        "matmul", "conv2d", "upsample_bilinear", "batch_norm", "sigmoid", "relu", "bce", "dice", "gnn_layer",
        "psgr_frozen",
    ] {
        ensure(ops.contains(&required), || format!("no gradient check for {required}"))?;
    }
    let mut worst = (0.0, "");
    for op in &ops {
        let report = gradcheck(op, 0).map_err(err)?;
        ensure(report.max_rel_err <= 1e-4, || format!("{op}: max relative error {:.3e}", report.max_rel_err))?;
        if report.max_rel_err >= worst.0 {
            worst = (report.max_rel_err, op);
        }
    }
    within(t0, Duration::from_secs(120))?;
    Ok(format!(
        "{} ops, worst {} at {:.2e}, {:.2?}",
        ops.len(),
        worst.1,
        worst.0,
        t0.elapsed()
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = Rng::new(4);
    let f: Tensor<f64> = rng.normal_tensor(&[8, 8, 16]);
    let coarse = random_probs(&mut rng, 64, false).reshape(&[8, 8, 2]).unwrap();

    let off = PsgrConfig { ru: 0.0, ..PsgrConfig::default() };
    let params = PsgrParams::init(16, &off, &mut rng, false).map_err(err)?;
    let out = psgr_forward(&f, &coarse, &off, &params).map_err(err)?;
    ensure(out.output.bitwise_eq(&f), || "ru = 0 changed the features".into())?;

    let on = PsgrConfig { ru: 0.1, k: KChoice::Fixed(8), ..PsgrConfig::default() };
    let zero = PsgrParams::init(16, &on, &mut rng, true).map_err(err)?;
    let out = psgr_forward(&f, &coarse, &on, &zero).map_err(err)?;
    ensure(out.structure.is_some(), || "no uncertain nodes at ru = 0.1".into())?;
    ensure(out.output.bitwise_eq(&f), || "zero output projection changed the features".into())?;

    let f32_in: Tensor<f32> = f.cast().unwrap();
    let zero32 = PsgrParams::<f32>::init(16, &on, &mut rng, true).map_err(err)?;
    let out = psgr_forward(&f32_in, &coarse.cast().unwrap(), &on, &zero32).map_err(err)?;
    ensure(out.output.bitwise_eq(&f32_in), || "f32 zero projection changed the features".into())?;

    let set = Dataset::from_samples(data::generate(16, 64, 64, 2, 4).map_err(err)?, 2).map_err(err)?;
    let base = TrainConfig { epochs: 2, warmup_epochs: 1, seed: 9, ..TrainConfig::default() };
    let plain = train(&set, None, &TrainConfig { psgr_enabled: false, ..base.clone() }).map_err(err)?;
    let ru_zero = train(&set, None, &TrainConfig { ru: 0.0, ..base.clone() }).map_err(err)?;
    let with = train(&set, None, &TrainConfig { ru: 0.1, ..base }).map_err(err)?;
    let bits = |log: &[psgr::nn::EpochLog]| -> Vec<u64> {
        log.iter().flat_map(|e| [e.train_loss.to_bits(), e.first_batch_loss.to_bits()]).collect()
    };
    ensure(bits(&plain.log) == bits(&ru_zero.log), || "ru = 0 training log differs from the plain backbone".into())?;
    let (a, b) = (plain.log[0].first_batch_loss, with.log[0].first_batch_loss);
    ensure(a.to_bits() == b.to_bits(), || format!("first batch loss {a} (plain) vs {b} (zero-init module)"))?;
    Ok(format!("bitwise identity in f64 and f32; first batch loss {a:.9} in both runs"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let half = Tensor::<f64>::full(&[16, 16, 1], 0.5);
    let mut rng = Rng::new(5);
    let target = Tensor::from_fn(&[16, 16, 1], |_| rng.below(2) as f64).unwrap();
    let bce = bce_loss(&half, &target).map_err(err)?;
    ensure((bce - ln2).abs() <= 1e-6, || format!("BCE at p = 0.5 is {bce}"))?;

    let mask: Vec<usize> = (0..16 * 16).map(|_| rng.below(2)).collect();
    let y = Tensor::from_fn(&[16, 16, 2], |i| (mask[i / 2] == i % 2) as u8 as f64).unwrap();
    let cfg = LossConfig { lambda: 0.5, ..LossConfig::default() };
    let perfect = total_loss(&y, &y, &y, &cfg).map_err(err)?;
    ensure(perfect.abs() <= 1e-5, || format!("perfect prediction loss {perfect}"))?;
    Ok(format!("BCE {bce:.9}, perfect total loss {perfect:.3e}"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let cfg = BenchConfig { ru: 0.005, k: KChoice::Auto, ..BenchConfig::default() };
    let row = experiment::bench(&[4096], &cfg, &NoProbe).map_err(err)?.remove(0);
    ensure(row.k == 2048, || format!("K resolved to {}", row.k))?;
    ensure(row.sparse_edges == 20 * 2048, || format!("{} sparse edges", row.sparse_edges))?;
    let closed = 20.0 * 2048.0 / (4096.0 * 4096.0);
    ensure((row.edge_ratio - closed).abs() < 1e-12, || format!("ratio {}", row.edge_ratio))?;
    ensure((row.edge_ratio * 100.0 - 0.244).abs() < 0.0005, || format!("ratio {}%", row.edge_ratio * 100.0))?;
    within(t0, Duration::from_secs(60))?;
    Ok(format!(
        "{} edges, ratio {:.5}%, dense {:.2}s, sparse {:.3}s",
        row.sparse_edges,
        row.edge_ratio * 100.0,
        row.dense_seconds,
        row.sparse_seconds
    ))
}

// ---------------------------------------------------------------- 7

const TOY_DATA_SEED: u64 = 42;

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let all = Dataset::from_samples(data::generate(250, 64, 64, 2, TOY_DATA_SEED).map_err(err)?, 2).map_err(err)?;
    let (train_set, val) = all.split_tail(50);
    let cfg = TrainConfig::default();
    let cmp = experiment::compare_seeds(&train_set, &val, &cfg, &[0, 1, 2], |seed, enabled, dsc| {
        eprintln!("  criterion 7: seed {seed} psgr {enabled} val DSC {dsc:.5}");
    })
    .map_err(err)?;
    let detail = format!(
        "mean DSC {:.5} with the module vs {:.5} without (per seed {:?} vs {:?}), {:.0?}",
        cmp.mean_with_psgr,
        cmp.mean_baseline,
        cmp.with_psgr,
        cmp.baseline,
        t0.elapsed()
    );
    ensure(cmp.mean_with_psgr >= cmp.mean_baseline, || detail.clone())?;
    ensure(cmp.with_psgr.iter().chain(&cmp.baseline).all(|&d| d > 0.6), || detail.clone())?;
    within(t0, Duration::from_secs(30 * 60))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

// 128×128 inputs give a 16×16 reasoning grid, where every nonzero grid value
// selects at least one node.
const SWEEP_SIZE: usize = 128;
const SWEEP_TRAIN: usize = 100;
const SWEEP_VAL: usize = 30;
const SWEEP_EPOCHS: usize = 30;

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let all = data::generate(SWEEP_TRAIN + SWEEP_VAL, SWEEP_SIZE, SWEEP_SIZE, 2, TOY_DATA_SEED).map_err(err)?;
    let (train_set, val) = Dataset::from_samples(all, 2).map_err(err)?.split_tail(SWEEP_VAL);
    let cfg = TrainConfig { epochs: SWEEP_EPOCHS, ..TrainConfig::default() };
    let rows = experiment::sweep_ru(&DEFAULT_RU_GRID, &cfg, &train_set, &val, |r| {
        eprintln!("  criterion 8: ru {} ({} nodes) DSC {:.5} HD {:.3}", r.ru, r.n_uncertain, r.dsc, r.hd);
    })
    .map_err(err)?;
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"));
    let csv = dir.join("acceptance_sweep.csv");
    let mut buf = Vec::new();
    experiment::write_sweep_csv(&rows, &mut buf).map_err(err)?;
    std::fs::write(&csv, &buf).map_err(err)?;
    std::fs::write(dir.join("acceptance_sweep.svg"), experiment::render_sweep_svg(&rows)).map_err(err)?;

    let back = std::fs::read_to_string(&csv).map_err(err)?;
    let parsed: Vec<(f64, f64)> = back
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').map(|v| v.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    ensure(parsed.len() == DEFAULT_RU_GRID.len(), || format!("{} CSV rows", parsed.len()))?;
    let base = parsed[0].1;
    let best = parsed[1..].iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let curve: Vec<String> = parsed.iter().map(|(ru, d)| format!("{ru}:{d:.4}")).collect();
    let detail = format!("best nonzero DSC {best:.5} vs {base:.5} at ru 0 [{}], {:.0?}", curve.join(" "), t0.elapsed());
    ensure(best >= base, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

struct Oracle {
    dsc: f64,
    miou: f64,
    sen: f64,
    spe: f64,
    mae: f64,
}

fn count_metrics(p: &[u8], t: &[u8], classes: usize) -> Oracle {
    let count = |f: &dyn Fn(u8, u8) -> bool| p.iter().zip(t).filter(|(&a, &b)| f(a, b)).count() as u64;
    let frac = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let (mut dsc, mut sen, mut spe, mut iou) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..classes as u8 {
        let tp = count(&|a, b| a == c && b == c);
        let fp = count(&|a, b| a == c && b != c);
        let fn_ = count(&|a, b| a != c && b == c);
        let tn = count(&|a, b| a != c && b != c);
        iou += frac(tp, tp + fp + fn_);
        if c > 0 {
            dsc += frac(2 * tp, 2 * tp + fp + fn_);
            sen += frac(tp, tp + fn_);
            spe += frac(tn, tn + fp);
        }
    }
    let fg = (classes - 1) as f64;
    Oracle {
        dsc: dsc / fg,
        miou: iou / classes as f64,
        sen: sen / fg,
        spe: spe / fg,
        mae: count(&|a, b| (a > 0) != (b > 0)) as f64 / p.len() as f64,
    }
}

fn criterion_9() -> Outcome {
    let mut rng = Rng::new(9);
    for case in 0..100 {
        let classes = 2 + rng.below(2);
        let len = 1 + rng.below(400);
        // Sparse labels so some classes are absent and the empty-set rule runs.
        let draw = |rng: &mut Rng| if rng.uniform() < 0.7 { 0 } else { rng.below(classes) as u8 };
        let p: Vec<u8> = (0..len).map(|_| draw(&mut rng)).collect();
        let t: Vec<u8> = (0..len).map(|_| draw(&mut rng)).collect();
        let o = count_metrics(&p, &t, classes);
        let got = [
            metrics::dsc(&p, &t, classes).map_err(err)?,
            metrics::miou(&p, &t, classes).map_err(err)?,
            metrics::sensitivity(&p, &t, classes).map_err(err)?,
            metrics::specificity(&p, &t, classes).map_err(err)?,
            metrics::mae(&p, &t).map_err(err)?,
        ];
        let want = [o.dsc, o.miou, o.sen, o.spe, o.mae];
        ensure(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("case {case}: {got:?} vs oracle {want:?}")
        })?;
    }
    let mut a = vec![0u8; 64];
    let mut b = vec![0u8; 64];
    a[0] = 1;
    b[3 * 8 + 4] = 1;
    let hd = metrics::hausdorff(&a, &b, 8, 8).map_err(err)?;
    ensure(hd == 5.0, || format!("single-pixel HD {hd}"))?;
    let mut rng = Rng::new(19);
    let m: Vec<u8> = (0..32 * 32).map(|_| rng.below(2) as u8).collect();
    let same = metrics::hausdorff(&m, &m, 32, 32).map_err(err)?;
    ensure(same == 0.0, || format!("identical masks HD {same}"))?;
    Ok("100 mask pairs exact, HD 5 and 0".into())
}

// ---------------------------------------------------------------- 10

fn psgr_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_psgr"))
        .args(args)
        .current_dir(dir)
        .env_remove("PSGR_THREADS")
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("psgr {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn same_file(dir: &Path, a: &str, b: &str) -> Result<(), String> {
    let (x, y) = (std::fs::read(dir.join(a)).map_err(err)?, std::fs::read(dir.join(b)).map_err(err)?);
    ensure(x == y, || format!("{a} and {b} differ"))
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let d = tmp.path();
    psgr_cli(&["gen-data", "--n", "12", "--size", "64x64", "--seed", "10", "--out", "data"], d)?;
    std::fs::write(d.join("c.json"), r#"{"epochs": 2, "warmup_epochs": 1, "ru": 0.1, "seed": 3}"#).map_err(err)?;
    for out in ["a.ckpt", "b.ckpt"] {
        psgr_cli(&["train", "--config", "c.json", "--data", "data", "--out", out], d)?;
    }
    same_file(d, "a.ckpt", "b.ckpt")?;

    let mut rng = Rng::new(10);
    let f: Tensor<f64> = rng.normal_tensor(&[32, 32, 8]);
    pstn::write(d.join("f.pstn"), &f).map_err(err)?;
    pstn::write(d.join("p.pstn"), &random_probs(&mut rng, 1024, false).reshape(&[32, 32, 2]).unwrap())
        .map_err(err)?;
    std::fs::write(d.join("r.json"), r#"{"ru": 0.05}"#).map_err(err)?;
    for threads in ["1", "8"] {
        let g = format!("g{threads}.txt");
        let r = format!("r{threads}.pstn");
        psgr_cli(
            &["--threads", threads, "build-graph", "--features", "f.pstn", "--coarse", "p.pstn", "--ru", "0.05", "--out", &g],
            d,
        )?;
        psgr_cli(
            &["--threads", threads, "--config", "r.json", "reason", "--features", "f.pstn", "--coarse", "p.pstn", "--out", &r],
            d,
        )?;
    }
    same_file(d, "g1.txt", "g8.txt")?;
    same_file(d, "r1.pstn", "r8.pstn")?;
    let size = std::fs::metadata(d.join("a.ckpt")).map_err(err)?.len();
    Ok(format!("checkpoints identical ({size} bytes); build-graph and reason identical at 1 and 8 threads"))
}

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("graph construction matches brute-force oracle", criterion_1),
    ("similarity and normalization properties", criterion_2),
    ("gradient checks", criterion_3),
    ("residual identity", criterion_4),
    ("loss identities", criterion_5),
    ("sparsity at N = 4096", criterion_6),
    ("toy end-to-end direction over 3 seeds", criterion_7),
    ("ru sweep", criterion_8),
    ("metric oracles", criterion_9),
    ("determinism", criterion_10),
];

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} ({:.1?})", t0.elapsed());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
