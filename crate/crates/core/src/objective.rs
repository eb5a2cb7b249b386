//! Swapped-prediction loss and the feature queue.
//!
//! For a batch seen through two modalities, codes `q1`, `q2` are computed by
//! Sinkhorn from the prototype scores of each view (optionally padded with
//! queued embeddings from earlier steps) and then used as fixed targets: the
//! prediction of one view is trained towards the code of the other,
//!
//! ```text
//! L = mean_b [ ℓ(z1_b, q2_b) + ℓ(z2_b, q1_b) ],   ℓ(z, q) = −Σ_k q_k log p_k(z)
//! p_k(z) = softmax_k(z · c_k / τ)
//! ```

use log::warn;

use crate::error::{Error, Result};
use crate::model::{prototype_scores, Modality, PrototypeBank};
use crate::numerics::{matmul_transpose_b, softmax_rows, Matrix, Tape, Var, LOG_FLOOR};
use crate::sinkhorn::{compute_codes, CodeMatrix, SinkhornConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature τ.
    pub temperature: f64,
    pub sinkhorn: SinkhornConfig,
    /// Rows kept per modality.
    pub queue_length: usize,
    /// First optimizer step at which queued rows join the code computation;
    /// `None` means "after the first epoch".
    pub queue_start_iteration: Option<u64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            sinkhorn: SinkhornConfig::default(),
            queue_length: 1920,
            queue_start_iteration: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.sinkhorn.validate()
    }
}

/// Per-modality ring buffer of detached, unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    buffers: [Matrix; 2],
    fill: usize,
    cursor: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            buffers: [Matrix::zeros(capacity, dim), Matrix::zeros(capacity, dim)],
            fill: 0,
            cursor: 0,
        }
    }

    /// Rebuilds a queue from its serialized parts.
    pub fn from_parts(buffers: [Matrix; 2], fill: usize, cursor: usize) -> Result<Self> {
        let (capacity, dim) = buffers[0].shape();
        if buffers[1].shape() != (capacity, dim) {
            return Err(Error::dim(
                "queue buffers",
                buffers[0].shape(),
                buffers[1].shape(),
            ));
        }
        if fill > capacity || (capacity > 0 && cursor >= capacity) || (capacity == 0 && cursor != 0)
        {
            return Err(Error::Input(format!(
                "queue fill {fill} / cursor {cursor} inconsistent with capacity {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            buffers,
            fill,
            cursor,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Raw ring storage, including unfilled rows.
    pub fn buffer(&self, modality: Modality) -> &Matrix {
        &self.buffers[modality.index()]
    }

    /// The stored rows of one modality in slot order.
    pub fn contents(&self, modality: Modality) -> Matrix {
        let idx: Vec<usize> = (0..self.fill).collect();
        self.buffers[modality.index()].select_rows(&idx)
    }

    /// Inserts copies of the rows, evicting the oldest once full.
    pub fn enqueue(&mut self, z1: &Matrix, z2: &Matrix) -> Result<()> {
        if z1.shape() != z2.shape() {
            return Err(Error::dim("enqueue", z1.shape(), z2.shape()));
        }
        if z1.cols() != self.dim {
            return Err(Error::dim("enqueue", z1.shape(), (z1.rows(), self.dim)));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for r in 0..z1.rows() {
            self.buffers[0]
                .row_mut(self.cursor)
                .copy_from_slice(z1.row(r));
            self.buffers[1]
                .row_mut(self.cursor)
                .copy_from_slice(z2.row(r));
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// Predicted prototype probabilities, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentDistribution {
    pub p: Matrix,
}

/// `p[b, k] = softmax_k(z_b · c_k / τ)`.
pub fn predict_assignments(
    z: &Matrix,
    bank: &PrototypeBank,
    temperature: f64,
) -> Result<AssignmentDistribution> {
    if z.cols() != bank.dim() {
        return Err(Error::dim(
            "predict_assignments",
            z.shape(),
            bank.matrix().shape(),
        ));
    }
    let logits = matmul_transpose_b(z, bank.matrix())?;
    Ok(AssignmentDistribution {
        p: softmax_rows(&logits, temperature)?,
    })
}

/// Mean over samples of `−Σ_k q[b,k] log p[b,k]`, with `log` floored at 1e-12.
pub fn cross_entropy_term(p: &AssignmentDistribution, targets: &Matrix) -> Result<f64> {
    if p.p.shape() != targets.shape() {
        return Err(Error::dim(
            "cross_entropy_term",
            p.p.shape(),
            targets.shape(),
        ));
    }
    if targets.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for r in 0..targets.rows() {
        let mut row = 0.0;
        for (q, pv) in targets.row(r).iter().zip(p.p.row(r)) {
            row -= q * pv.max(LOG_FLOOR).ln();
        }
        total += row;
    }
    Ok(total / targets.rows() as f64)
}

/// Turns the first `batch` columns of a K × N code matrix into B × K target
/// rows, each rescaled to sum to one.
pub fn batch_targets(codes: &CodeMatrix, batch: usize) -> Matrix {
    let q = codes.matrix();
    let mut out = Matrix::from_fn(batch, q.rows(), |b, k| q[(k, b)]);
    for r in 0..batch {
        let row = out.row_mut(r);
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Entropy of the mean of the given target rows.
pub fn usage_entropy(targets: &[&Matrix]) -> f64 {
    let k = targets[0].cols();
    let mut mean = vec![0.0; k];
    let mut n = 0usize;
    for t in targets {
        for r in 0..t.rows() {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
            n += 1;
        }
    }
    mean.iter()
        .map(|m| m / n as f64)
        .filter(|&m| m > 0.0)
        .map(|m| -m * m.ln())
        .sum()
}

/// Codes for one modality, restricted to the batch columns.
pub fn modality_targets(
    z: &Matrix,
    queued: Option<&Matrix>,
    bank: &PrototypeBank,
    sinkhorn: &SinkhornConfig,
) -> Result<Matrix> {
    let columns = match queued {
        Some(q) if q.rows() > 0 => z.vstack(q)?,
        _ => z.clone(),
    };
    let scores = prototype_scores(&columns, bank)?;
    let codes = compute_codes(&scores, sinkhorn)?;
    Ok(batch_targets(&codes, z.rows()))
}

/// A swapped loss recorded on a tape.
#[derive(Debug)]
pub struct SwappedLoss {
    pub loss: Var,
    /// Targets of modality 1 and 2 (B × K rows summing to one).
    pub targets: [Matrix; 2],
    /// Entropy of the batch-mean code over both modalities.
    pub code_entropy: f64,
    /// Single sample with nothing queued: codes are forced to uniform.
    pub degenerate: bool,
}

/// Records the loss for fixed targets. Targets carry no gradient.
pub fn swapped_loss_with_targets(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    prototypes: Var,
    targets: &[Matrix; 2],
    temperature: f64,
) -> Result<Var> {
    let logits1 = tape.matmul_transpose_b(z1, prototypes)?;
    let logits2 = tape.matmul_transpose_b(z2, prototypes)?;
    let logp1 = tape.log_softmax_rows(logits1, temperature)?;
    let logp2 = tape.log_softmax_rows(logits2, temperature)?;
    let term1 = tape.cross_entropy(logp1, targets[1].clone())?;
    let term2 = tape.cross_entropy(logp2, targets[0].clone())?;
    tape.add(term1, term2)
}

/// Computes codes from the current values of `z1`, `z2` and the prototypes,
/// then records the loss against them.
pub fn swapped_loss_on_tape(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    prototypes: Var,
    queue: Option<&FeatureQueue>,
    config: &LossConfig,
) -> Result<SwappedLoss> {
    let (zv1, zv2) = (tape.value(z1).clone(), tape.value(z2).clone());
    if zv1.shape() != zv2.shape() {
        return Err(Error::dim("swapped_loss", zv1.shape(), zv2.shape()));
    }
    if zv1.rows() == 0 {
        return Err(Error::Input("swapped loss over an empty batch".into()));
    }
    let bank = PrototypeBank::new(tape.value(prototypes).clone())?;
    let queued = queue
        .filter(|q| !q.is_empty())
        .map(|q| (q.contents(Modality::First), q.contents(Modality::Second)));
    let degenerate = zv1.rows() == 1 && queued.is_none();
    if degenerate {
        warn!("swapped loss on a single sample with an empty queue: codes are uniform");
    }
    let targets = [
        modality_targets(&zv1, queued.as_ref().map(|q| &q.0), &bank, &config.sinkhorn)?,
        modality_targets(&zv2, queued.as_ref().map(|q| &q.1), &bank, &config.sinkhorn)?,
    ];
    let code_entropy = usage_entropy(&[&targets[0], &targets[1]]);
    let loss = swapped_loss_with_targets(tape, z1, z2, prototypes, &targets, config.temperature)?;
    Ok(SwappedLoss {
        loss,
        targets,
        code_entropy,
        degenerate,
    })
}

/// Value of the swapped loss. Uses the queue contents when `use_queue` is set,
/// then appends `z1`, `z2` to the queue.
pub fn swapped_loss(
    z1: &Matrix,
    z2: &Matrix,
    bank: &PrototypeBank,
    queue: &mut FeatureQueue,
    config: &LossConfig,
    use_queue: bool,
) -> Result<f64> {
    config.validate()?;
    let mut tape = Tape::new();
    let v1 = tape.constant(z1.clone());
    let v2 = tape.constant(z2.clone());
    let c = tape.constant(bank.matrix().clone());
    let out = swapped_loss_on_tape(&mut tape, v1, v2, c, use_queue.then_some(&*queue), config)?;
    let value = tape.value(out.loss)[(0, 0)];
    queue.enqueue(z1, z2)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;
    use crate::rng::SplitMix64;

    fn unit_rows(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        l2_normalize_rows(&Matrix::from_fn(rows, cols, |_, _| rng.normal())).matrix
    }

    fn random_bank(rng: &mut SplitMix64, k: usize, d: usize) -> PrototypeBank {
        PrototypeBank::new(unit_rows(rng, k, d)).unwrap()
    }

    fn converged() -> LossConfig {
        LossConfig {
            sinkhorn: SinkhornConfig::converged(0.05),
            queue_length: 0,
            ..LossConfig::default()
        }
    }

    #[test]
    fn prediction_examples() {
        let bank = PrototypeBank::new(Matrix::identity(4)).unwrap();
        let z = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]);
        let p = predict_assignments(&z, &bank, 0.1).unwrap();
        let e10 = 10f64.exp();
        let denom = e10 + 3.0;
        assert!((p.p[(0, 0)] - e10 / denom).abs() < 1e-15);
        for k in 1..4 {
            assert!((p.p[(0, k)] - 1.0 / denom).abs() < 1e-15);
        }
        assert_eq!(p.p.argmax_rows(), vec![0]);

        let bank =
            PrototypeBank::new(Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])).unwrap();
        let orth = Matrix::from_rows(&[[0.0, 0.0, 1.0]]);
        let p = predict_assignments(&orth, &bank, 0.1).unwrap();
        assert_eq!(p.p.as_slice(), &[0.5, 0.5]);

        let mut rng = SplitMix64::new(1);
        let bank = random_bank(&mut rng, 6, 5);
        let z = unit_rows(&mut rng, 8, 5);
        let sharp = predict_assignments(&z, &bank, 0.1).unwrap();
        let soft = predict_assignments(&z, &bank, 1.0).unwrap();
        assert_eq!(sharp.p.argmax_rows(), soft.p.argmax_rows());
        assert!(predict_assignments(&Matrix::zeros(1, 4), &bank, 0.1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = AssignmentDistribution {
            p: Matrix::from_rows(&[[0.9999546, 4.54e-5]]),
        };
        let q = Matrix::from_rows(&[[1.0, 0.0]]);
        let v = cross_entropy_term(&p, &q).unwrap();
        assert!((v - -(0.9999546f64).ln()).abs() < 1e-15);
        assert!((v - 4.54e-5).abs() < 1e-7);

        let uniform = AssignmentDistribution {
            p: Matrix::filled(1, 2, 0.5),
        };
        let v = cross_entropy_term(&uniform, &Matrix::filled(1, 2, 0.5)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        let dist = Matrix::from_rows(&[[0.2, 0.3, 0.5]]);
        let v = cross_entropy_term(&AssignmentDistribution { p: dist.clone() }, &dist).unwrap();
        let h: f64 = -dist.as_slice().iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((v - h).abs() < 1e-15);

        assert!(cross_entropy_term(&uniform, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn queue_ring_semantics() {
        let mut q = FeatureQueue::new(8, 2);
        let rows =
            |start: f64, n: usize| Matrix::from_fn(n, 2, |r, c| start + r as f64 + c as f64 * 0.5);
        q.enqueue(&rows(0.0, 4), &rows(100.0, 4)).unwrap();
        assert_eq!(q.fill(), 4);
        q.enqueue(&rows(4.0, 4), &rows(104.0, 4)).unwrap();
        assert_eq!(q.fill(), 8);
        q.enqueue(&rows(8.0, 3), &rows(108.0, 3)).unwrap();
        assert_eq!(q.fill(), 8);
        assert_eq!(q.capacity(), 8);
        let m1 = q.contents(Modality::First);
        let firsts: Vec<f64> = (0..8).map(|r| m1[(r, 0)]).collect();
        // Slots 0..3 were overwritten by the newest rows; 0, 1, 2 are gone.
        assert_eq!(firsts, vec![8.0, 9.0, 10.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(q.contents(Modality::Second)[(0, 0)], 108.0);

        let mut empty = FeatureQueue::new(0, 2);
        empty.enqueue(&rows(0.0, 3), &rows(0.0, 3)).unwrap();
        assert_eq!(empty.fill(), 0);
    }

    #[test]
    fn symmetric_views_double_one_term() {
        let mut rng = SplitMix64::new(3);
        let bank = random_bank(&mut rng, 5, 4);
        let z = unit_rows(&mut rng, 6, 4);
        let cfg = converged();
        let mut queue = FeatureQueue::new(0, 4);
        let loss = swapped_loss(&z, &z, &bank, &mut queue, &cfg, false).unwrap();
        let q = modality_targets(&z, None, &bank, &cfg.sinkhorn).unwrap();
        let p = predict_assignments(&z, &bank, cfg.temperature).unwrap();
        let single = cross_entropy_term(&p, &q).unwrap();
        assert!((loss - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn matched_prototypes_give_near_zero_loss() {
        let bank = PrototypeBank::new(Matrix::identity(2)).unwrap();
        let z = Matrix::identity(2);
        let cfg = converged();
        let targets = modality_targets(&z, None, &bank, &cfg.sinkhorn).unwrap();
        // Rows already sum to one, i.e. Q scaled by K (= B here).
        assert!(targets.max_abs_diff(&Matrix::identity(2)) < 1e-3);
        let mut queue = FeatureQueue::new(0, 2);
        let loss = swapped_loss(&z, &z, &bank, &mut queue, &cfg, false).unwrap();
        // Each term is −ln(1/(1+e^-10)) ≈ 4.54e-5.
        let expected = 2.0 * (1.0 + (-10f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        assert!(loss < 0.01);
    }

    #[test]
    fn loss_is_symmetric_in_modalities() {
        let mut rng = SplitMix64::new(4);
        let cfg = LossConfig {
            queue_length: 0,
            ..LossConfig::default()
        };
        for _ in 0..20 {
            let bank = random_bank(&mut rng, 7, 5);
            let z1 = unit_rows(&mut rng, 6, 5);
            let z2 = unit_rows(&mut rng, 6, 5);
            let mut q = FeatureQueue::new(0, 5);
            let a = swapped_loss(&z1, &z2, &bank, &mut q, &cfg, false).unwrap();
            let b = swapped_loss(&z2, &z1, &bank, &mut q, &cfg, false).unwrap();
            assert!((a - b).abs() <= 1e-12);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn empty_queue_matches_queue_free_path() {
        let mut rng = SplitMix64::new(5);
        let bank = random_bank(&mut rng, 7, 5);
        let z1 = unit_rows(&mut rng, 6, 5);
        let z2 = unit_rows(&mut rng, 6, 5);
        let cfg = LossConfig {
            queue_length: 0,
            ..LossConfig::default()
        };
        let mut q = FeatureQueue::new(0, 5);
        let with = swapped_loss(&z1, &z2, &bank, &mut q, &cfg, true).unwrap();

        let targets = [
            modality_targets(&z1, None, &bank, &cfg.sinkhorn).unwrap(),
            modality_targets(&z2, None, &bank, &cfg.sinkhorn).unwrap(),
        ];
        let p1 = predict_assignments(&z1, &bank, cfg.temperature).unwrap();
        let p2 = predict_assignments(&z2, &bank, cfg.temperature).unwrap();
        let mut tape = Tape::new();
        let (a, b, c) = (
            tape.constant(z1.clone()),
            tape.constant(z2.clone()),
            tape.constant(bank.matrix().clone()),
        );
        let free =
            swapped_loss_with_targets(&mut tape, a, b, c, &targets, cfg.temperature).unwrap();
        assert_eq!(with.to_bits(), tape.value(free)[(0, 0)].to_bits());
        let direct = cross_entropy_term(&p1, &targets[1]).unwrap()
            + cross_entropy_term(&p2, &targets[0]).unwrap();
        assert!((with - direct).abs() < 1e-12);
    }

    #[test]
    fn queue_only_shapes_codes() {
        let mut rng = SplitMix64::new(6);
        let bank = random_bank(&mut rng, 4, 3);
        let z = unit_rows(&mut rng, 3, 3);
        let mut queue = FeatureQueue::new(16, 3);
        let filler = unit_rows(&mut rng, 10, 3);
        queue.enqueue(&filler, &filler).unwrap();
        let sk = SinkhornConfig::converged(0.05);
        let contents = queue.contents(Modality::First);
        let targets = modality_targets(&z, Some(&contents), &bank, &sk).unwrap();
        assert_eq!(targets.shape(), (3, 4));
        for s in targets.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let plain = modality_targets(&z, None, &bank, &sk).unwrap();
        assert!(targets.max_abs_diff(&plain) > 1e-6);
    }

    #[test]
    fn equipartition_keeps_usage_entropy_at_log_k() {
        let mut rng = SplitMix64::new(7);
        let cfg = converged();
        for _ in 0..10 {
            let k = 2 + rng.below(10);
            let bank = random_bank(&mut rng, k, 6);
            let z1 = unit_rows(&mut rng, 24, 6);
            let z2 = unit_rows(&mut rng, 24, 6);
            let mut tape = Tape::new();
            let (a, b, c) = (
                tape.constant(z1),
                tape.constant(z2),
                tape.constant(bank.matrix().clone()),
            );
            let out = swapped_loss_on_tape(&mut tape, a, b, c, None, &cfg).unwrap();
            assert!(((k as f64).ln() - out.code_entropy).abs() < 1e-3);
        }
    }

    #[test]
    fn enqueued_rows_are_detached() {
        let mut rng = SplitMix64::new(8);
        let bank = random_bank(&mut rng, 4, 3);
        let cfg = LossConfig {
            sinkhorn: SinkhornConfig::converged(0.05),
            queue_length: 8,
            ..LossConfig::default()
        };
        let mut queue = FeatureQueue::new(8, 3);
        // Step 1: a watched batch goes through the loss and into the queue.
        let first = unit_rows(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let w = tape.watch(first.clone());
        let c = tape.constant(bank.matrix().clone());
        let out = swapped_loss_on_tape(&mut tape, w, w, c, Some(&queue), &cfg).unwrap();
        queue.enqueue(tape.value(w), tape.value(w)).unwrap();
        let _ = out;
        // Step 2: the queued copies only feed codes, so the earlier batch has
        // no path to the new loss.
        let second = unit_rows(&mut rng, 4, 3);
        let s = tape.constant(second);
        let out = swapped_loss_on_tape(&mut tape, s, s, c, Some(&queue), &cfg).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        assert!(grads.get(w).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let bank = PrototypeBank::new(Matrix::identity(2)).unwrap();
        let mut q = FeatureQueue::new(0, 2);
        let err = swapped_loss(
            &Matrix::zeros(0, 2),
            &Matrix::zeros(0, 2),
            &bank,
            &mut q,
            &converged(),
            false,
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn single_sample_is_flagged() {
        let bank = PrototypeBank::new(Matrix::identity(3)).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_rows(&[[1.0, 0.0, 0.0]]));
        let c = tape.constant(bank.matrix().clone());
        let out = swapped_loss_on_tape(&mut tape, z, z, c, None, &converged()).unwrap();
        assert!(out.degenerate);
        for v in out.targets[0].as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-9);
        }
    }
}
