//! Probes of representation quality against held-out labels.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::PairedCorpus;
use crate::error::{Error, Result};
use crate::model::{embed, prototype_scores, trunk_features, Modality};
use crate::numerics::{matmul_transpose_b, Matrix, Tape};
use crate::rng::SplitMix64;

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Which view(s) feed a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeInput {
    Modality(Modality),
    /// Trunk features of both views, concatenated.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probe: String,
    pub accuracy: f64,
    /// `None` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub nmi: f64,
    pub purity: f64,
    pub cluster_sizes: Vec<usize>,
}

/// Seeded 80/20 split of `0..n`.
pub fn split_indices(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(split_seed).shuffle(&mut order);
    let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
    let test = order.split_off(n_train);
    (order, test)
}

/// Frozen trunk features of a corpus for the chosen input.
pub fn probe_features(
    ckpt: &Checkpoint,
    corpus: &PairedCorpus,
    input: ProbeInput,
) -> Result<Matrix> {
    match input {
        ProbeInput::Modality(m) => trunk_features(&ckpt.encoder, corpus.modality(m.index()), m),
        ProbeInput::Both => {
            let a = trunk_features(&ckpt.encoder, &corpus.modality1, Modality::First)?;
            let b = trunk_features(&ckpt.encoder, &corpus.modality2, Modality::Second)?;
            a.hstack(&b)
        }
    }
}

fn n_classes(labels: &[u32]) -> usize {
    labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
}

fn report(
    probe: &str,
    predicted: &[usize],
    truth: &[usize],
    classes: usize,
    n_train: usize,
) -> ProbeReport {
    let mut counts = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let total_correct: usize = correct.iter().sum();
    ProbeReport {
        probe: probe.to_string(),
        accuracy: if truth.is_empty() {
            0.0
        } else {
            total_correct as f64 / truth.len() as f64
        },
        per_class_accuracy: counts
            .iter()
            .zip(&correct)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        class_counts: counts,
        n_train,
        n_test: truth.len(),
    }
}

fn check_rows(features: &Matrix, labels: &[u32]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::Input(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if labels.len() < 2 {
        return Err(Error::Input("need at least two labelled samples".into()));
    }
    Ok(())
}

/// Per-feature z-scoring with statistics of the training rows.
fn standardize(train: &Matrix, test: &Matrix) -> (Matrix, Matrix) {
    let n = train.rows() as f64;
    let mean: Vec<f64> = train.col_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; train.cols()];
    for r in 0..train.rows() {
        for ((v, x), m) in var.iter_mut().zip(train.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    let apply =
        |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| (m[(r, c)] - mean[c]) * scale[c]);
    (apply(train), apply(test))
}

/// Multinomial logistic regression on fixed features: standardized inputs,
/// zero-initialized weights, [`PROBE_STEPS`] full-batch gradient steps at
/// [`PROBE_LR`].
pub fn linear_probe_features(
    features: &Matrix,
    labels: &[u32],
    split_seed: u64,
) -> Result<ProbeReport> {
    check_rows(features, labels)?;
    let classes = n_classes(labels);
    let (train_idx, test_idx) = split_indices(labels.len(), split_seed);
    let (train_x, test_x) = standardize(
        &features.select_rows(&train_idx),
        &features.select_rows(&test_idx),
    );
    let one_hot = Matrix::from_fn(train_idx.len(), classes, |r, c| {
        if labels[train_idx[r]] as usize == c {
            1.0
        } else {
            0.0
        }
    });

    let mut weight = Matrix::zeros(classes, features.cols());
    let mut bias = Matrix::zeros(1, classes);
    for _ in 0..PROBE_STEPS {
        let mut tape = Tape::new();
        let x = tape.constant(train_x.clone());
        let w = tape.watch(weight.clone());
        let b = tape.watch(bias.clone());
        let logits = tape.matmul_transpose_b(x, w)?;
        let logits = tape.add_row_broadcast(logits, b)?;
        let logp = tape.log_softmax_rows(logits, 1.0)?;
        let loss = tape.cross_entropy(logp, one_hot.clone())?;
        let grads = tape.backward(loss)?;
        for (param, var) in [(&mut weight, w), (&mut bias, b)] {
            let g = grads.get(var).expect("watched");
            for (p, gv) in param.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *p -= PROBE_LR * gv;
            }
        }
    }

    let mut logits = matmul_transpose_b(&test_x, &weight)?;
    for r in 0..logits.rows() {
        for (v, b) in logits.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
    let predicted = logits.argmax_rows();
    let truth: Vec<usize> = test_idx.iter().map(|&i| labels[i] as usize).collect();
    Ok(report(
        "linear",
        &predicted,
        &truth,
        classes,
        train_idx.len(),
    ))
}

pub fn linear_probe(
    ckpt: &Checkpoint,
    corpus: &PairedCorpus,
    split_seed: u64,
    input: ProbeInput,
) -> Result<ProbeReport> {
    let labels = corpus.require_labels()?;
    let features = probe_features(ckpt, corpus, input)?;
    linear_probe_features(&features, labels, split_seed)
}

/// Cosine-similarity kNN. Votes are counted over the `k` most similar
/// training rows (ties in similarity go to the lower index); a tie in votes
/// goes to whichever tied label owns the single most similar neighbor.
pub fn knn_probe_features(
    features: &Matrix,
    labels: &[u32],
    k: usize,
    split_seed: u64,
) -> Result<ProbeReport> {
    check_rows(features, labels)?;
    let (train_idx, test_idx) = split_indices(labels.len(), split_seed);
    if k == 0 || k > train_idx.len() {
        return Err(Error::Parameter(format!(
            "k_neighbors must lie in 1..={}, got {k}",
            train_idx.len()
        )));
    }
    let classes = n_classes(labels);
    let normed = crate::numerics::l2_normalize_rows(features).matrix;
    let train = normed.select_rows(&train_idx);
    let test = normed.select_rows(&test_idx);
    let sims = matmul_transpose_b(&test, &train)?;

    let mut predicted = Vec::with_capacity(test_idx.len());
    let mut order: Vec<usize> = Vec::with_capacity(train_idx.len());
    for r in 0..sims.rows() {
        let row = sims.row(r);
        order.clear();
        order.extend(0..train_idx.len());
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![0usize; classes];
        for &j in &order[..k] {
            votes[labels[train_idx[j]] as usize] += 1;
        }
        let best = *votes.iter().max().expect("at least one class");
        let winner = order[..k]
            .iter()
            .map(|&j| labels[train_idx[j]] as usize)
            .find(|&l| votes[l] == best)
            .expect("a neighbor holds the top vote");
        predicted.push(winner);
    }
    let truth: Vec<usize> = test_idx.iter().map(|&i| labels[i] as usize).collect();
    Ok(report("knn", &predicted, &truth, classes, train_idx.len()))
}

pub fn knn_probe(
    ckpt: &Checkpoint,
    corpus: &PairedCorpus,
    k_neighbors: usize,
    split_seed: u64,
    input: ProbeInput,
) -> Result<ProbeReport> {
    let labels = corpus.require_labels()?;
    let features = probe_features(ckpt, corpus, input)?;
    knn_probe_features(&features, labels, k_neighbors, split_seed)
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; nb]; na];
    let mut ra = vec![0usize; na];
    let mut rb = vec![0usize; nb];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
        ra[x] += 1;
        rb[y] += 1;
    }
    (table, ra, rb)
}

fn label_entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `I(a; b) / ((H(a) + H(b)) / 2)`. Two constant labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let (table, ra, rb) = contingency(a, b);
    let ha = label_entropy(&ra, n);
    let hb = label_entropy(&rb, n);
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ra[i] as f64 * rb[j] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (ha + hb);
    (mi / denom).clamp(0.0, 1.0)
}

/// Fraction of samples whose predicted cluster's majority label matches
/// their own.
pub fn purity(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let (table, _, _) = contingency(predicted, truth);
    let hits: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / predicted.len() as f64
}

pub fn cluster_report(assignments: &[usize], truth: &[usize], k: usize) -> ClusterReport {
    let mut sizes = vec![0usize; k.max(assignments.iter().map(|a| a + 1).max().unwrap_or(0))];
    for &a in assignments {
        sizes[a] += 1;
    }
    ClusterReport {
        nmi: nmi(assignments, truth),
        purity: purity(assignments, truth),
        cluster_sizes: sizes,
    }
}

/// Hard prototype assignment of each sample's modality-1 embedding.
pub fn prototype_assignments(ckpt: &Checkpoint, corpus: &PairedCorpus) -> Result<Vec<usize>> {
    let z = embed(&ckpt.encoder, &corpus.modality1, Modality::First)?;
    let scores = prototype_scores(&z, &ckpt.prototypes)?;
    Ok(scores.transpose().argmax_rows())
}

pub fn cluster_agreement(ckpt: &Checkpoint, corpus: &PairedCorpus) -> Result<ClusterReport> {
    let labels = corpus.require_labels()?;
    let assignments = prototype_assignments(ckpt, corpus)?;
    let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    Ok(cluster_report(&assignments, &truth, ckpt.prototypes.len()))
}
