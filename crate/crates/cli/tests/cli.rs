use std::path::Path;
use std::process::{Command, Output};

use psgr::graph::{read_edge_list, uncertain_count};
use psgr::pstn;
use psgr::rng::Rng;
use psgr::Tensor;

fn psgr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psgr"))
        .args(args)
        .current_dir(dir)
        .env_remove("PSGR_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Random `h×w×c` features and softmax-normalized `h×w×2` probabilities.
fn write_inputs(dir: &Path, h: usize, w: usize, c: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let f: Tensor<f64> = rng.normal_tensor(&[h, w, c]);
    let p: Vec<f64> = (0..h * w).flat_map(|_| {
        let q = rng.uniform();
        [1.0 - q, q]
    }).collect();
    pstn::write(dir.join("f.pstn"), &f).unwrap();
    pstn::write(dir.join("p.pstn"), &Tensor::new(&[h, w, 2], p).unwrap()).unwrap();
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&psgr(&["gen-data", "--n", "3", "--size", "32x48", "--seed", "11", "--out", out], dir.path()));
    }
    for name in ["img_00002.pstn", "msk_00002.pstn", "manifest.json"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let img = pstn::read(dir.path().join("a/img_00000.pstn")).unwrap();
    assert_eq!(img.shape(), &[32, 48, 1]);
}

#[test]
fn gen_data_rejects_bad_class_count() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&psgr(&["gen-data", "--classes", "7", "--out", "x"], dir.path())), 1);
}

#[test]
fn build_graph_edge_list() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), 8, 8, 4, 1);
    ok(&psgr(
        &["build-graph", "--features", "f.pstn", "--coarse", "p.pstn", "--ru", "0.1", "--k", "5", "--out", "g.txt"],
        dir.path(),
    ));
    let text = std::fs::read(dir.path().join("g.txt")).unwrap();
    let (n, k, omega, edges) = read_edge_list(text.as_slice()).unwrap();
    assert_eq!((n, k, omega), (64, 5, uncertain_count(0.1, 64)));
    assert_eq!(edges.len(), omega * k);
    let first_edge = String::from_utf8(text).unwrap().lines().nth(1).unwrap().to_string();
    let weight = first_edge.split(' ').nth(2).unwrap();
    // 17 significant digits.
    assert_eq!(weight.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
}

#[test]
fn build_graph_zero_ratio_is_edgeless() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), 4, 4, 3, 2);
    ok(&psgr(
        &["build-graph", "--features", "f.pstn", "--coarse", "p.pstn", "--ru", "0", "--out", "g.txt"],
        dir.path(),
    ));
    let text = std::fs::read_to_string(dir.path().join("g.txt")).unwrap();
    assert_eq!(text, "16 8 0\n");
}

#[test]
fn reason_zero_output_is_identity_and_dumps_attention() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), 6, 6, 4, 3);
    std::fs::write(dir.path().join("c.json"), r#"{"ru": 0.1}"#).unwrap();
    let args = ["reason", "--config", "c.json", "--features", "f.pstn", "--coarse", "p.pstn"];
    let mut zero = args.to_vec();
    zero.extend(["--zero-output", "--out", "z.pstn"]);
    ok(&psgr(&zero, dir.path()));
    let input = pstn::read(dir.path().join("f.pstn")).unwrap();
    assert_eq!(pstn::read(dir.path().join("z.pstn")).unwrap(), input);

    let mut live = args.to_vec();
    live.extend(["--out", "r.pstn"]);
    ok(&psgr(&live, dir.path()));
    assert_ne!(pstn::read(dir.path().join("r.pstn")).unwrap(), input);

    let text = {
        ok(&psgr(
            &["build-graph", "--features", "f.pstn", "--coarse", "p.pstn", "--ru", "0.1", "--out", "g.txt"],
            dir.path(),
        ));
        std::fs::read(dir.path().join("g.txt")).unwrap()
    };
    let (_, _, _, edges) = read_edge_list(text.as_slice()).unwrap();
    let node = edges[0].source.to_string();
    let mut dump = live.clone();
    dump.extend(["--dump-attention", &node, "a.pstn"]);
    ok(&psgr(&dump, dir.path()));
    assert_eq!(pstn::read(dir.path().join("a.pstn")).unwrap().shape(), &[6, 6]);

    // A certain node has no attention row.
    let certain = (0..36).find(|i| edges.iter().all(|e| e.source != *i)).unwrap().to_string();
    let mut bad = live;
    bad.extend(["--dump-attention", &certain, "b.pstn"]);
    assert_eq!(code(&psgr(&bad, dir.path())), 1);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), 4, 4, 2, 4);
    std::fs::write(dir.path().join("c.json"), r#"{"ru": 0.1, "learning_rate": 3}"#).unwrap();
    let out = psgr(
        &["--config", "c.json", "build-graph", "--features", "f.pstn", "--coarse", "p.pstn", "--out", "g.txt"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn gradcheck_reports_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&psgr(&["gradcheck", "--op", "sigmoid", "--seed", "2", "--report", "r.json"], dir.path()));
    assert!(out.contains("sigmoid") && out.contains("ok"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(report[0]["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert_eq!(code(&psgr(&["gradcheck", "--op", "nope"], dir.path())), 1);
    assert_eq!(code(&psgr(&["gradcheck", "--op", "relu", "--dtype", "f32"], dir.path())), 1);
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&psgr(&["gen-data", "--n", "6", "--size", "32x32", "--seed", "1", "--out", "tr"], d));
    ok(&psgr(&["gen-data", "--n", "3", "--size", "32x32", "--seed", "2", "--out", "va"], d));
    std::fs::write(
        d.join("c.json"),
        r#"{"epochs": 2, "warmup_epochs": 1, "batch_size": 3, "ru": 0.1, "seed": 4}"#,
    )
    .unwrap();
    let out = ok(&psgr(
        &["train", "--config", "c.json", "--data", "tr", "--val", "va", "--out", "m.ckpt", "--log", "log.json"],
        d,
    ));
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("log.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);
    assert!(log[1]["val_dsc"].is_number());

    ok(&psgr(&["eval", "--data", "va", "--ckpt", "m.ckpt", "--report", "r.json", "--masks", "pred"], d));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["n_images"], 3);
    for key in ["miou", "dsc", "sen", "spe", "hd", "mae"] {
        assert!(report["mean"][key].is_number(), "{key}");
    }
    assert_eq!(pstn::read(d.join("pred/pred_00002.pstn")).unwrap().shape(), &[32, 32]);

    assert_eq!(code(&psgr(&["eval", "--data", "missing", "--ckpt", "m.ckpt", "--report", "x"], d)), 3);
    assert_eq!(code(&psgr(&["train", "--data", "tr", "--out", "x", "--dtype", "f64"], d)), 1);
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&psgr(&["gen-data", "--n", "2", "--size", "32x32", "--out", "tr"], d));
    std::fs::write(d.join("c.json"), r#"{"epochs": 3, "lr": 1e300, "batch_size": 2}"#).unwrap();
    let out = psgr(&["train", "--config", "c.json", "--data", "tr", "--out", "m.ckpt"], d);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn sweep_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&psgr(&["gen-data", "--n", "4", "--size", "32x32", "--seed", "1", "--out", "tr"], d));
    ok(&psgr(&["gen-data", "--n", "2", "--size", "32x32", "--seed", "2", "--out", "va"], d));
    std::fs::write(d.join("c.json"), r#"{"epochs": 1, "warmup_epochs": 1, "batch_size": 4}"#).unwrap();
    ok(&psgr(
        &["sweep-ru", "--config", "c.json", "--data", "tr", "--val", "va", "--values", "0,0.1,0.2", "--csv", "s.csv", "--plot", "s.svg"],
        d,
    ));
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ru,dsc,hd");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("0.1,"));
    assert!(std::fs::read_to_string(d.join("s.svg")).unwrap().contains("<polyline"));
    let bad = psgr(&["sweep-ru", "--data", "tr", "--val", "va", "--values", "0.1,0.2", "--csv", "t.csv"], d);
    assert_eq!(code(&bad), 1);
}

#[test]
fn bench_small_and_capped() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&psgr(&["bench", "--nodes", "256", "--ru", "0.02", "--report", "b.json"], dir.path()));
    assert!(out.contains("256"));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["sparse_edges"], 5 * 128);
    assert!(rows[0]["dense_peak_bytes"].as_u64().unwrap() > rows[0]["sparse_peak_bytes"].as_u64().unwrap());
    assert_eq!(code(&psgr(&["bench", "--nodes", "4097"], dir.path())), 1);
}
