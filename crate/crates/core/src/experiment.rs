//! Experiment drivers: R_u sweeps, multi-seed comparisons against the plain
//! backbone, and the dense-versus-sparse graph benchmark.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PsgrError, Result};
use crate::graph::{build_similarity, build_sparse_graph, uncertain_count, KChoice, NodeFeatureMatrix, NormMode};
use crate::nn::{evaluate, train, TrainConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The R_u grid used by the sweep when none is given.
pub const DEFAULT_RU_GRID: [f64; 5] = [0.0, 0.005, 0.01, 0.015, 0.02];

/// Largest node count [`bench`] accepts without `force`.
pub const BENCH_NODE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ru: f64,
    /// Uncertain nodes per image at the reasoning resolution.
    pub n_uncertain: usize,
    pub dsc: f64,
    pub hd: f64,
    /// Set when training or evaluation failed; metrics are then NaN.
    pub error: Option<String>,
}

/// Trains and evaluates one model per R_u value with otherwise identical
/// settings. A failing row is recorded and the sweep continues.
pub fn sweep_ru(
    values: &[f64],
    base: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || !values.windows(2).all(|w| w[0] < w[1]) {
        return Err(PsgrError::invalid("ru values must be strictly ascending"));
    }
    if values[0] != 0.0 {
        return Err(PsgrError::invalid("ru values must start at 0 (the baseline row)"));
    }
    let nodes = (train_set.height / 8) * (train_set.width / 8);
    let mut rows = Vec::with_capacity(values.len());
    for &ru in values {
        let cfg = TrainConfig { ru, ..base.clone() };
        let result = train(train_set, None, &cfg).and_then(|out| evaluate(&out.model, val));
        let row = match result {
            Ok(report) => SweepRow {
                ru,
                n_uncertain: uncertain_count(ru, nodes),
                dsc: report.mean.dsc,
                hd: report.mean.hd,
                error: None,
            },
            Err(e) => SweepRow {
                ru,
                n_uncertain: uncertain_count(ru, nodes),
                dsc: f64::NAN,
                hd: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// `ru,dsc,hd` with a header line; failed rows print `NaN`.
pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "ru,dsc,hd")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.ru, r.dsc, r.hd)?;
    }
    Ok(())
}

/// Two stacked line charts (DSC and HD against R_u) with the R_u = 0 value
/// drawn as a dashed baseline.
pub fn render_sweep_svg(rows: &[SweepRow]) -> String {
    const W: f64 = 480.0;
    const PANEL: f64 = 200.0;
    const M: f64 = 50.0;
    let mut svg = String::new();
    let total_h = 2.0 * (PANEL + M) + M;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{total_h}" font-family="sans-serif" font-size="11">"#
    );
    let ru_max = rows.iter().map(|r| r.ru).fold(0.0, f64::max).max(1e-12);
    let panels: [(&str, fn(&SweepRow) -> f64); 2] = [("DSC", |r| r.dsc), ("HD", |r| r.hd)];
    for (p, (label, get)) in panels.iter().enumerate() {
        let top = M + p as f64 * (PANEL + M);
        let vals: Vec<f64> = rows.iter().map(get).filter(|v| v.is_finite()).collect();
        let (lo, hi) = match (vals.iter().cloned().reduce(f64::min), vals.iter().cloned().reduce(f64::max)) {
            (Some(lo), Some(hi)) if hi > lo => (lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo)),
            (Some(v), _) => (v - 0.5, v + 0.5),
            _ => (0.0, 1.0),
        };
        let x = |ru: f64| M + ru / ru_max * (W - 2.0 * M);
        let y = |v: f64| top + PANEL - (v - lo) / (hi - lo) * PANEL;
        let _ = writeln!(
            svg,
            r#"<rect x="{M}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="black"/>"#,
            W - 2.0 * M
        );
        let _ = writeln!(svg, r#"<text x="{M}" y="{}">{label} vs R_u</text>"#, top - 8.0);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{hi:.3}</text>"#, top + 10.0);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{lo:.3}</text>"#, top + PANEL);
        for r in rows {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x(r.ru),
                top + PANEL + 14.0,
                r.ru
            );
        }
        if let Some(base) = rows.first().map(get).filter(|v| v.is_finite()) {
            let _ = writeln!(
                svg,
                r#"<line x1="{M}" x2="{}" y1="{y0}" y2="{y0}" stroke="blue" stroke-dasharray="6,4"/>"#,
                W - M,
                y0 = y(base)
            );
        }
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| get(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", x(r.ru), y(get(r))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="red" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for pt in &pts {
            let (cx, cy) = pt.split_once(',').expect("formatted above");
            let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="red"/>"#);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seeds: Vec<u64>,
    pub with_psgr: Vec<f64>,
    pub baseline: Vec<f64>,
    pub mean_with_psgr: f64,
    pub mean_baseline: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Validation DSC of the configured model and of the same configuration
/// with the reasoning module disabled, for each seed.
pub fn compare_seeds(
    train_set: &Dataset,
    val: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(u64, bool, f64),
) -> Result<SeedComparison> {
    let mut with_psgr = Vec::new();
    let mut baseline = Vec::new();
    for &seed in seeds {
        for enabled in [false, true] {
            let cfg = TrainConfig {
                seed,
                psgr_enabled: enabled,
                ..base.clone()
            };
            let out = train(train_set, None, &cfg)?;
            let dsc = evaluate(&out.model, val)?.mean.dsc;
            on_run(seed, enabled, dsc);
            if enabled { &mut with_psgr } else { &mut baseline }.push(dsc);
        }
    }
    Ok(SeedComparison {
        seeds: seeds.to_vec(),
        mean_with_psgr: mean(&with_psgr),
        mean_baseline: mean(&baseline),
        with_psgr,
        baseline,
    })
}

/// Peak-allocation probe supplied by the caller (the library does not
/// install a global allocator).
pub trait MemoryProbe {
    fn reset(&self);
    fn peak_bytes(&self) -> Option<usize>;
}

/// Probe that measures nothing.
pub struct NoProbe;

impl MemoryProbe for NoProbe {
    fn reset(&self) {}

    fn peak_bytes(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ru: f64,
    pub k: KChoice,
    pub channels: usize,
    pub norm_mode: NormMode,
    pub seed: u64,
    pub force: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ru: 0.005,
            k: KChoice::Auto,
            channels: 16,
            norm_mode: NormMode::RandomWalk,
            seed: 0,
            force: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_nodes: usize,
    pub ru: f64,
    pub k: usize,
    pub n_uncertain: usize,
    pub dense_edges: u64,
    pub sparse_edges: u64,
    pub edge_ratio: f64,
    /// `round(R_u·N)·K / N²`.
    pub closed_form_ratio: f64,
    pub dense_storage_bytes: u64,
    pub sparse_storage_bytes: u64,
    pub dense_peak_bytes: Option<u64>,
    pub sparse_peak_bytes: Option<u64>,
    pub dense_seconds: f64,
    pub sparse_seconds: f64,
}

/// One message-passing sweep `Ŝ·Z` over the dense normalized matrix.
fn dense_aggregate(s_hat: &Tensor<f32>, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    s_hat.matmul(z)
}

/// Dense (all `N²` pairs) versus sparse (`|Ω_u|·K` edges) reasoning on
/// random features, per node count.
pub fn bench(n_nodes: &[usize], cfg: &BenchConfig, probe: &dyn MemoryProbe) -> Result<Vec<BenchRow>> {
    if let Some(&n) = n_nodes.iter().find(|&&n| n > BENCH_NODE_CAP) {
        if !cfg.force {
            return Err(PsgrError::invalid(format!(
                "{n} nodes exceeds the cap of {BENCH_NODE_CAP}; pass force to run anyway"
            )));
        }
    }
    if !(0.0..=1.0).contains(&cfg.ru) || cfg.channels == 0 {
        return Err(PsgrError::invalid("bench needs ru in [0, 1] and at least one channel"));
    }
    let mut rows = Vec::new();
    for &n in n_nodes {
        if n < 2 {
            return Err(PsgrError::DegenerateGraph(format!("need at least 2 nodes, got {n}")));
        }
        let mut rng = Rng::derived(cfg.seed, &format!("bench/{n}"));
        let h = NodeFeatureMatrix::new(rng.normal_tensor::<f32>(&[n, cfg.channels]))?;
        let fg: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
        let probs = Tensor::new(&[n, 2], fg.iter().flat_map(|&p| [1.0 - p, p]).collect())?;
        let k = cfg.k.resolve(n);

        probe.reset();
        let t0 = Instant::now();
        let g = build_similarity(&h)?.normalize(cfg.norm_mode);
        let s_hat = g.normalized().expect("normalized above");
        let dense_out = dense_aggregate(s_hat, h.values())?;
        let dense_seconds = t0.elapsed().as_secs_f64();
        let dense_peak = probe.peak_bytes().map(|b| b as u64);
        drop(dense_out);
        drop(g);

        probe.reset();
        let t0 = Instant::now();
        let (_, adj) = build_sparse_graph(&h, &probs, cfg.ru, cfg.k, cfg.norm_mode, 0)?;
        let mut sparse_out = vec![0f32; n * cfg.channels];
        for e in &adj.edges {
            let src = h.values().row(e.target);
            let dst = &mut sparse_out[e.source * cfg.channels..(e.source + 1) * cfg.channels];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += e.weight * s;
            }
        }
        let sparse_seconds = t0.elapsed().as_secs_f64();
        let sparse_peak = probe.peak_bytes().map(|b| b as u64);

        let dense_edges = (n as u64) * (n as u64);
        let sparse_edges = adj.nnz() as u64;
        let n_uncertain = uncertain_count(cfg.ru, n);
        rows.push(BenchRow {
            n_nodes: n,
            ru: cfg.ru,
            k,
            n_uncertain,
            dense_edges,
            sparse_edges,
            edge_ratio: sparse_edges as f64 / dense_edges as f64,
            closed_form_ratio: (n_uncertain * k) as f64 / dense_edges as f64,
            // Similarity plus its normalized copy.
            dense_storage_bytes: 2 * dense_edges * std::mem::size_of::<f32>() as u64,
            sparse_storage_bytes: adj.storage_bytes() as u64,
            dense_peak_bytes: dense_peak,
            sparse_peak_bytes: sparse_peak,
            dense_seconds,
            sparse_seconds,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_requires_baseline_row_and_ascending_values() {
        let data = Dataset::new(32, 32, 2, vec![], vec![]).unwrap();
        let base = TrainConfig::default();
        assert!(sweep_ru(&[0.01, 0.02], &base, &data, &data, |_| {}).is_err());
        assert!(sweep_ru(&[0.0, 0.02, 0.01], &base, &data, &data, |_| {}).is_err());
    }

    #[test]
    fn failed_rows_are_recorded_and_sweep_continues() {
        let data = Dataset::new(32, 32, 2, vec![], vec![]).unwrap();
        let rows = sweep_ru(&[0.0, 0.5], &TrainConfig::default(), &data, &data, |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.error.is_some() && r.dsc.is_nan()));
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "ru,dsc,hd\n0,NaN,NaN\n0.5,NaN,NaN\n");
    }

    #[test]
    fn svg_has_baseline_and_one_marker_per_row() {
        let rows: Vec<SweepRow> = DEFAULT_RU_GRID
            .iter()
            .enumerate()
            .map(|(i, &ru)| SweepRow { ru, n_uncertain: i, dsc: 0.5 + 0.01 * i as f64, hd: 3.0, error: None })
            .collect();
        let svg = render_sweep_svg(&rows);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 10);
    }

    #[test]
    fn bench_counts_match_closed_form() {
        let cfg = BenchConfig { ru: 0.05, ..BenchConfig::default() };
        let rows = bench(&[64, 100], &cfg, &NoProbe).unwrap();
        for r in rows {
            assert_eq!(r.sparse_edges, (uncertain_count(0.05, r.n_nodes) * r.n_nodes / 2) as u64);
            assert_eq!(r.edge_ratio, r.closed_form_ratio);
        }
        let zero = bench(&[64], &BenchConfig { ru: 0.0, ..cfg }, &NoProbe).unwrap();
        assert_eq!(zero[0].sparse_edges, 0);
    }

    #[test]
    fn bench_cap_needs_force() {
        let cfg = BenchConfig::default();
        assert!(matches!(bench(&[5000], &cfg, &NoProbe), Err(PsgrError::InvalidInput(_))));
    }
}
