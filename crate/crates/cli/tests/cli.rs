use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use swapfuse::config::{parse_pairs, TrainConfig};
use swapfuse::data::CorpusSpec;
use tempfile::TempDir;

fn swapfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swapfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.path().join(name);
    let mut args = vec![
        "gen-data",
        "--n",
        "160",
        "--seed",
        "3",
        "--out",
        path_str(&path),
    ];
    args.extend_from_slice(extra);
    let out = swapfuse(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

const SMALL_MODEL: [&str; 6] = [
    "--set",
    "encoder.hidden_dims=16",
    "--set",
    "encoder.embed_dim=8",
    "--set",
    "loss.queue_length=32",
];

fn pretrain(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "pretrain",
        "--data",
        path_str(data),
        "--out",
        path_str(out),
        "--epochs",
        "2",
    ];
    args.extend_from_slice(&SMALL_MODEL);
    args.extend_from_slice(extra);
    swapfuse(&args)
}

#[test]
fn gen_data_is_deterministic_and_writes_manifest() {
    let dir = TempDir::new().unwrap();
    let a = small_corpus(&dir, "a.mmp", &[]);
    let b = small_corpus(&dir, "b.mmp", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let manifest =
        parse_pairs(&fs::read_to_string(dir.path().join("a.mmp.manifest")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], "3");
    assert_eq!(manifest["corpus.n"], "160");
}

#[test]
fn gen_data_rejects_single_cluster() {
    let dir = TempDir::new().unwrap();
    let out = swapfuse(&[
        "gen-data",
        "--clusters",
        "1",
        "--out",
        path_str(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn help_defaults_match_library_defaults() {
    let train = TrainConfig::default();
    let help = stdout(&swapfuse(&["pretrain", "--help"]));
    for (flag, value) in [
        ("--epochs", train.epochs.to_string()),
        ("--batch-size", train.batch_size.to_string()),
        ("--base-lr", train.base_lr.to_string()),
        ("--k-prototypes", train.k_prototypes.to_string()),
        ("--seed", train.seed.to_string()),
    ] {
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(flag))
            .unwrap();
        assert!(line.contains(&format!("[default: {value}]")), "{line}");
    }
    let corpus = CorpusSpec::default();
    let help = stdout(&swapfuse(&["gen-data", "--help"]));
    for (flag, value) in [
        ("--n ", corpus.n_samples.to_string()),
        ("--clusters", corpus.n_latent_clusters.to_string()),
        ("--sigma", corpus.noise_sigma.to_string()),
        ("--d1", corpus.d1.to_string()),
        ("--d2", corpus.d2.to_string()),
    ] {
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(flag))
            .unwrap();
        assert!(line.contains(&format!("[default: {value}]")), "{line}");
    }
}

#[test]
fn pretrain_writes_one_metrics_line_per_step() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir, "c.mmp", &[]);
    let ckpt = dir.path().join("m.ckpt");
    let out = pretrain(&data, &ckpt, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("m.ckpt.metrics.jsonl")).unwrap();
    // 160 samples, batch 32: five steps per epoch.
    assert_eq!(metrics.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["iter", "epoch", "loss", "lr", "code_entropy", "queue_fill"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let manifest =
        parse_pairs(&fs::read_to_string(dir.path().join("m.ckpt.manifest")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["config.epochs"], "2");
    assert_eq!(manifest["iteration"], "10");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir, "c.mmp", &[]);
    let full = dir.path().join("full.ckpt");
    assert_eq!(code(&pretrain(&data, &full, &[])), 0);

    let half = dir.path().join("half.ckpt");
    let metrics = dir.path().join("split.jsonl");
    let m = path_str(&metrics);
    assert_eq!(
        code(&pretrain(&data, &half, &["--stop-at", "7", "--metrics", m])),
        0
    );
    let resumed = dir.path().join("resumed.ckpt");
    let out = swapfuse(&[
        "pretrain",
        "--data",
        path_str(&data),
        "--out",
        path_str(&resumed),
        "--resume",
        path_str(&half),
        "--metrics",
        m,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        fs::read_to_string(&metrics).unwrap(),
        fs::read_to_string(dir.path().join("full.ckpt.metrics.jsonl")).unwrap()
    );
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&full).unwrap());
}

#[test]
fn resume_rejects_config_flags() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir, "c.mmp", &[]);
    let ckpt = dir.path().join("a.ckpt");
    assert_eq!(code(&pretrain(&data, &ckpt, &["--stop-at", "2"])), 0);
    let out = swapfuse(&[
        "pretrain",
        "--data",
        path_str(&data),
        "--out",
        path_str(&dir.path().join("b.ckpt")),
        "--resume",
        path_str(&ckpt),
        "--epochs",
        "5",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inline_flag_beats_config_file() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir, "c.mmp", &[]);
    let config = dir.path().join("train.cfg");
    fs::write(&config, "# from file\nbase_lr=0.5\nepochs=1\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = pretrain(
        &data,
        &ckpt,
        &["--config", path_str(&config), "--base-lr", "0.01"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest =
        parse_pairs(&fs::read_to_string(dir.path().join("m.ckpt.manifest")).unwrap()).unwrap();
    assert_eq!(manifest["config.base_lr"], "0.01");
    // --epochs 2 is passed inline by the helper and also wins.
    assert_eq!(manifest["config.epochs"], "2");
    let overrides: Vec<&str> = manifest["overrides"].split(',').collect();
    assert!(overrides.contains(&"base_lr") && overrides.contains(&"epochs"));
}

#[test]
fn unreadable_data_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = pretrain(
        &dir.path().join("missing.mmp"),
        &dir.path().join("m.ckpt"),
        &[],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn probe_reports_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir, "c.mmp", &[]);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&pretrain(&data, &ckpt, &[])), 0);
    let args = [
        "probe",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&data),
    ];
    for kind in ["linear", "knn", "cluster"] {
        let mut a = args.to_vec();
        a.extend(["--probe", kind, "--seed", "4"]);
        let first = swapfuse(&a);
        assert_eq!(
            code(&first),
            0,
            "{}",
            String::from_utf8_lossy(&first.stderr)
        );
        assert_eq!(stdout(&first), stdout(&swapfuse(&a)));
        let report: serde_json::Value = serde_json::from_str(stdout(&first).trim()).unwrap();
        if kind == "cluster" {
            assert!(report["nmi"].is_number() && report["purity"].is_number());
        } else {
            let acc = report["accuracy"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    let mut bad = args.to_vec();
    bad.extend(["--probe", "spectral"]);
    assert_eq!(code(&swapfuse(&bad)), 2);
}

#[test]
fn label_free_corpus_fails_probe() {
    let dir = TempDir::new().unwrap();
    let data = small_corpus(&dir, "c.mmp", &[]);
    let bare = small_corpus(&dir, "bare.mmp", &["--no-labels"]);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&pretrain(&data, &ckpt, &["--stop-at", "1"])), 0);
    let out = swapfuse(&[
        "probe",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&bare),
        "--probe",
        "cluster",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn codes_prints_known_matrices() {
    let dir = TempDir::new().unwrap();
    let zeros = dir.path().join("zeros.csv");
    fs::write(&zeros, "0,0\n0,0\n").unwrap();
    let out = swapfuse(&["codes", "--scores", path_str(&zeros)]);
    assert_eq!(stdout(&out), "0.25,0.25\n0.25,0.25\n");

    // Diagonal advantage ε·ln 3 has the fixed point [[3,1],[1,3]]/8.
    let sym = dir.path().join("sym.csv");
    fs::write(&sym, format!("{0},0\n0,{0}\n", 3f64.ln())).unwrap();
    let out = swapfuse(&[
        "codes",
        "--scores",
        path_str(&sym),
        "--epsilon",
        "1",
        "--converged",
    ]);
    assert_eq!(stdout(&out), "0.375,0.125\n0.125,0.375\n");

    let out = swapfuse(&["codes", "--scores", path_str(&sym), "--epsilon", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let out = swapfuse(&["gradcheck"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for op in swapfuse::gradcheck::OPS {
        assert!(
            text.lines()
                .any(|l| l.starts_with(op) && l.contains("max_rel_error=")),
            "{op}"
        );
    }

    let out = swapfuse(&["gradcheck", "--inject-fault", "l2_normalize"]);
    assert_ne!(code(&out), 0);
    assert!(stdout(&out).contains("FAIL (l2_normalize)"));
}
