//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.
//!
//! Thresholds below are frozen; the training thresholds were fixed after a
//! single reference measurement on the standard corpus (seed 0).

use std::io::Write;
use std::time::{Duration, Instant};

use swapfuse::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use swapfuse::config::TrainConfig;
use swapfuse::data::{generate, load_corpus, save_corpus, CorpusSpec};
use swapfuse::eval::{cluster_agreement, linear_probe, ProbeInput};
use swapfuse::gradcheck;
use swapfuse::model::{EncoderConfig, Modality, PrototypeBank};
use swapfuse::numerics::{l2_normalize_rows, Matrix};
use swapfuse::objective::{swapped_loss, FeatureQueue, LossConfig};
use swapfuse::rng::SplitMix64;
use swapfuse::sinkhorn::{compute_codes, SinkhornConfig};
use swapfuse::trainer::{train, MetricsRecord, Trainer};

const MARGINAL_TOLERANCE: f64 = 1e-6;
const MARGINAL_BUDGET: Duration = Duration::from_secs(10);
const CLOSED_FORM_TOLERANCE: f64 = 1e-6;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const ENTROPY_MAX_DEFICIT: f64 = 0.2;
const LOSS_RATIO_MAX: f64 = 0.7;
const PROBE_MARGIN_MIN: f64 = 0.15;
const NMI_MIN: f64 = 0.5;
const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);
const SYMMETRY_TOLERANCE: f64 = 1e-12;

struct Ledger {
    failures: Vec<String>,
}

impl Ledger {
    fn record(&mut self, id: &str, passed: bool, detail: String) {
        // Written straight to stderr so the lines show even when the
        // harness captures output.
        let verdict = if passed { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "acceptance {verdict} [{id}] {detail}");
        if !passed {
            self.failures.push(id.to_string());
        }
    }
}

fn max_marginal_deviation(q: &Matrix) -> f64 {
    let (k, b) = q.shape();
    let rows = q
        .row_sums()
        .iter()
        .map(|s| (s - 1.0 / k as f64).abs())
        .fold(0.0, f64::max);
    let cols = q
        .col_sums()
        .iter()
        .map(|s| (s - 1.0 / b as f64).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

fn sinkhorn_marginals(ledger: &mut Ledger) {
    let start = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let k = 2 + rng.below(63);
        let b = 2 + rng.below(63);
        let eps = [0.01, 0.05, 1.0][i % 3];
        let scores = Matrix::from_fn(k, b, |_, _| rng.uniform(-1.0, 1.0));
        let q = compute_codes(&scores, &SinkhornConfig::converged(eps)).expect("codes");
        worst = worst.max(max_marginal_deviation(q.matrix()));
    }
    let elapsed = start.elapsed();
    ledger.record(
        "1 sinkhorn marginals",
        worst < MARGINAL_TOLERANCE && elapsed < MARGINAL_BUDGET,
        format!("max deviation {worst:.2e} (< {MARGINAL_TOLERANCE:e}), {elapsed:.2?} (< {MARGINAL_BUDGET:?})"),
    );
}

fn sinkhorn_closed_form(ledger: &mut Ledger) {
    let eps = 0.05;
    let s = eps * 3f64.ln();
    let sym = compute_codes(
        &Matrix::from_rows(&[[s, 0.0], [0.0, s]]),
        &SinkhornConfig::converged(eps),
    )
    .unwrap();
    let sym_err = sym
        .matrix()
        .max_abs_diff(&Matrix::from_rows(&[[0.375, 0.125], [0.125, 0.375]]));
    let dom = compute_codes(
        &Matrix::from_rows(&[[10.0, 10.0], [0.0, 0.0]]),
        &SinkhornConfig::converged(eps),
    )
    .unwrap();
    let dom_err = dom.matrix().max_abs_diff(&Matrix::filled(2, 2, 0.25));
    ledger.record(
        "2 sinkhorn closed form",
        sym_err < CLOSED_FORM_TOLERANCE && dom_err < CLOSED_FORM_TOLERANCE,
        format!("symmetric error {sym_err:.2e}, dominated error {dom_err:.2e} (< {CLOSED_FORM_TOLERANCE:e})"),
    );
}

fn gradient_correctness(ledger: &mut Ledger) {
    let start = Instant::now();
    let report = gradcheck::run(0, None).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let worst = report
        .checks
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    ledger.record(
        "3 gradient correctness",
        report.passed() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} ops, worst relative error {worst:.2e} (< {:e}), {elapsed:.2?} (< {GRADCHECK_BUDGET:?}){}",
            report.checks.len(),
            gradcheck::TOLERANCE,
            if report.passed() { String::new() } else { format!(", failing: {}", report.failures().join(",")) }
        ),
    );
}

fn standard_config(k: usize) -> TrainConfig {
    TrainConfig {
        k_prototypes: k,
        ..TrainConfig::default()
    }
    .with_converged_sinkhorn()
}

fn epoch_mean_loss(metrics: &[MetricsRecord], epoch: u64) -> f64 {
    let losses: Vec<f64> = metrics
        .iter()
        .filter(|m| m.epoch == epoch)
        .map(|m| m.loss)
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn training_run(ledger: &mut Ledger, corpus: &swapfuse::data::PairedCorpus) {
    let config = standard_config(16);
    let outcome = train(corpus, &config).expect("standard run trains");
    let ln_k = (config.k_prototypes as f64).ln();
    let (worst_iter, min_entropy) = outcome
        .metrics
        .iter()
        .map(|m| (m.iter, m.code_entropy))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let deficit = ln_k - min_entropy;
    ledger.record(
        "4 collapse avoidance",
        deficit <= ENTROPY_MAX_DEFICIT,
        format!(
            "min batch code entropy {min_entropy:.4} at step {worst_iter}, ln K = {ln_k:.4}, deficit {deficit:.4} (<= {ENTROPY_MAX_DEFICIT})"
        ),
    );

    let first = epoch_mean_loss(&outcome.metrics, 0);
    let last = epoch_mean_loss(&outcome.metrics, config.epochs as u64 - 1);
    ledger.record(
        "5 learning signal",
        last <= LOSS_RATIO_MAX * first,
        format!("first-epoch loss {first:.4}, final-epoch loss {last:.4}, ratio {:.3} (<= {LOSS_RATIO_MAX})", last / first),
    );

    let input = ProbeInput::Modality(Modality::First);
    let trained = linear_probe(&outcome.checkpoint, corpus, 0, input)
        .unwrap()
        .accuracy;
    let init = linear_probe(&Checkpoint::initial(&config).unwrap(), corpus, 0, input)
        .unwrap()
        .accuracy;
    let margin = trained - init;
    let k8 = train(corpus, &standard_config(8)).expect("K=8 run trains");
    let nmi = cluster_agreement(&k8.checkpoint, corpus).unwrap().nmi;
    ledger.record(
        "6 representation quality",
        margin >= PROBE_MARGIN_MIN && nmi >= NMI_MIN,
        format!(
            "linear probe trained {trained:.3} vs random init {init:.3}, margin {margin:.3} (>= {PROBE_MARGIN_MIN}); NMI at K=8 {nmi:.3} (>= {NMI_MIN})"
        ),
    );
}

fn swap_symmetry(ledger: &mut Ledger) {
    let mut rng = SplitMix64::new(77);
    let config = LossConfig {
        queue_length: 0,
        ..LossConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, k, d) = (2 + rng.below(15), 2 + rng.below(15), 2 + rng.below(10));
        let mut draw =
            |rows: usize| l2_normalize_rows(&Matrix::from_fn(rows, d, |_, _| rng.normal())).matrix;
        let z1 = draw(b);
        let z2 = draw(b);
        let bank = PrototypeBank::new(draw(k)).unwrap();
        let mut q = FeatureQueue::new(0, d);
        let ab = swapped_loss(&z1, &z2, &bank, &mut q, &config, false).unwrap();
        let ba = swapped_loss(&z2, &z1, &bank, &mut q, &config, false).unwrap();
        worst = worst.max((ab - ba).abs());
    }
    ledger.record(
        "7 modality-swap symmetry",
        worst <= SYMMETRY_TOLERANCE,
        format!(
            "max |L(z1,z2) - L(z2,z1)| over 100 batches {worst:.2e} (<= {SYMMETRY_TOLERANCE:e})"
        ),
    );
}

fn reproducibility(ledger: &mut Ledger) {
    let spec = CorpusSpec {
        n_samples: 200,
        ..CorpusSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let config = TrainConfig {
        epochs: 3,
        k_prototypes: 8,
        encoder: EncoderConfig {
            hidden_dims: vec![32, 16],
            embed_dim: 16,
            ..EncoderConfig::default()
        },
        loss: LossConfig {
            queue_length: 64,
            ..TrainConfig::default().loss
        },
        ..TrainConfig::default()
    };

    let a = train(&corpus, &config).unwrap();
    let b = train(&corpus, &config).unwrap();
    let identical =
        a.checkpoint.encode().unwrap() == b.checkpoint.encode().unwrap() && a.metrics == b.metrics;

    let mut first = Trainer::new(&corpus, &config).unwrap();
    let mut head = Vec::new();
    first
        .run_until(7, |r| {
            head.push(r.clone());
            Ok(())
        })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint(), &ckpt_path).unwrap();
    let mut resumed = Trainer::resume(&corpus, load_checkpoint(&ckpt_path).unwrap()).unwrap();
    resumed
        .run(|r| {
            head.push(r.clone());
            Ok(())
        })
        .unwrap();
    let resume_matches = head == a.metrics
        && resumed.into_checkpoint().encode().unwrap() == a.checkpoint.encode().unwrap();

    let corpus_path = dir.path().join("corpus.mmp");
    save_corpus(&corpus, &corpus_path).unwrap();
    let corpus_bytes = std::fs::read(&corpus_path).unwrap();
    let reloaded = load_corpus(&corpus_path).unwrap();
    save_corpus(&reloaded, &corpus_path).unwrap();
    let corpus_round_trip =
        reloaded == corpus && std::fs::read(&corpus_path).unwrap() == corpus_bytes;

    let final_path = dir.path().join("final.ckpt");
    save_checkpoint(&a.checkpoint, &final_path).unwrap();
    let ckpt_round_trip = load_checkpoint(&final_path).unwrap() == a.checkpoint;

    ledger.record(
        "8 bit-exact reproducibility",
        identical && resume_matches && corpus_round_trip && ckpt_round_trip,
        format!(
            "same-seed runs identical: {identical}; resume step-for-step: {resume_matches}; corpus round trip: {corpus_round_trip}; checkpoint round trip: {ckpt_round_trip}"
        ),
    );
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut ledger = Ledger {
        failures: Vec::new(),
    };
    sinkhorn_marginals(&mut ledger);
    sinkhorn_closed_form(&mut ledger);
    gradient_correctness(&mut ledger);
    let corpus = generate(&CorpusSpec::default()).unwrap();
    training_run(&mut ledger, &corpus);
    swap_symmetry(&mut ledger);
    reproducibility(&mut ledger);
    let elapsed = start.elapsed();
    ledger.record(
        "pipeline runtime",
        elapsed < PIPELINE_BUDGET,
        format!("{elapsed:.1?} (< {PIPELINE_BUDGET:?})"),
    );
    assert!(
        ledger.failures.is_empty(),
        "failing criteria: {}",
        ledger.failures.join("; ")
    );
}
