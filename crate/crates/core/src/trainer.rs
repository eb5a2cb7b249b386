//! SGD-with-momentum loop over the swapped-prediction loss.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{epoch_batches, PairedCorpus};
use crate::error::{Error, Result};
use crate::model::{embed_on_tape, renormalize_prototypes, Modality};
use crate::numerics::{Matrix, Tape};
use crate::objective::swapped_loss_on_tape;
use crate::rng::derive_seed;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub code_entropy: f64,
    pub queue_fill: usize,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("flat record serializes")
    }
}

/// Cosine decay from `base_lr` at step 0 to `base_lr / 1000` at the last step.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    let floor = base_lr / 1000.0;
    if total_steps <= 1 {
        return base_lr;
    }
    let progress = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    floor + 0.5 * (base_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Shuffle seed of a given epoch.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    derive_seed(seed, epoch)
}

/// Drives training from an initial or restored [`Checkpoint`].
pub struct Trainer<'a> {
    corpus: &'a PairedCorpus,
    state: Checkpoint,
    steps_per_epoch: u64,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a PairedCorpus, config: &TrainConfig) -> Result<Self> {
        Self::resume(corpus, Checkpoint::initial(config)?)
    }

    pub fn resume(corpus: &'a PairedCorpus, state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        if corpus.is_empty() {
            return Err(Error::Input("corpus is empty".into()));
        }
        if corpus.dims() != state.config.encoder.input_dims {
            return Err(Error::Config(format!(
                "corpus dims {:?} do not match encoder input dims {:?}",
                corpus.dims(),
                state.config.encoder.input_dims
            )));
        }
        let steps_per_epoch = epoch_batches(corpus.len(), state.config.batch_size, 0)?.len() as u64;
        if steps_per_epoch == 0 {
            return Err(Error::Input(format!(
                "{} samples give no batch of at least two",
                corpus.len()
            )));
        }
        Ok(Self {
            corpus,
            state,
            steps_per_epoch,
            epoch_cache: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.state.config.epochs as u64
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.total_steps()
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.clone()
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    fn freeze_iterations(&self) -> u64 {
        self.state
            .config
            .prototype_freeze_iterations
            .unwrap_or(self.steps_per_epoch)
    }

    fn queue_start(&self) -> u64 {
        self.state
            .config
            .loss
            .queue_start_iteration
            .unwrap_or(self.steps_per_epoch)
    }

    fn batch_indices(&mut self, iteration: u64) -> Result<Vec<usize>> {
        let epoch = iteration / self.steps_per_epoch;
        let offset = (iteration % self.steps_per_epoch) as usize;
        let stale = self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch);
        if stale {
            let order = epoch_batches(
                self.corpus.len(),
                self.state.config.batch_size,
                epoch_seed(self.state.config.seed, epoch),
            )?;
            self.epoch_cache = Some((epoch, order));
        }
        Ok(self.epoch_cache.as_ref().expect("filled above").1[offset].clone())
    }

    /// Takes one optimizer step.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let t = self.state.iteration;
        let indices = self.batch_indices(t)?;
        let batch = self.corpus.batch(&indices);
        let config = self.state.config.clone();

        let mut tape = Tape::new();
        let enc_vars = self.state.encoder.watch(&mut tape);
        let protos = tape.watch(self.state.prototypes.matrix().clone());
        let x1 = tape.constant(batch.x1);
        let x2 = tape.constant(batch.x2);
        let z1 = embed_on_tape(&mut tape, &enc_vars, x1, Modality::First)?;
        let z2 = embed_on_tape(&mut tape, &enc_vars, x2, Modality::Second)?;
        let use_queue = t >= self.queue_start();
        let out = swapped_loss_on_tape(
            &mut tape,
            z1,
            z2,
            protos,
            use_queue.then_some(&self.state.queue),
            &config.loss,
        )?;
        let loss = tape.value(out.loss)[(0, 0)];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                loss,
                batch_indices: indices,
            });
        }
        let grads = tape.backward(out.loss)?;

        let lr = cosine_lr(config.base_lr, t, self.total_steps());
        let frozen = t < self.freeze_iterations();
        let mut vars = enc_vars.all();
        vars.push(protos);
        let n_encoder = vars.len() - 1;

        let mut params = self.state.encoder.parameters_mut();
        params.push(self.state.prototypes.matrix_mut());
        for (i, ((param, var), buf)) in params
            .into_iter()
            .zip(&vars)
            .zip(self.state.momentum.iter_mut())
            .enumerate()
        {
            let grad = grads.get(*var).expect("watched parameter");
            let is_prototypes = i == n_encoder;
            if is_prototypes && frozen {
                continue;
            }
            sgd_momentum(param, buf, grad, lr, config.momentum);
        }
        if !frozen {
            renormalize_prototypes(&mut self.state.prototypes);
        }

        self.state.queue.enqueue(tape.value(z1), tape.value(z2))?;
        self.state.iteration += 1;
        Ok(MetricsRecord {
            iter: t,
            epoch: t / self.steps_per_epoch,
            loss,
            lr,
            code_entropy: out.code_entropy,
            queue_fill: self.state.queue.fill(),
        })
    }

    /// Steps until `stop_at` (exclusive) or the end of training, handing
    /// each record to `on_record`.
    pub fn run_until(
        &mut self,
        stop_at: u64,
        mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        let end = stop_at.min(self.total_steps());
        while self.state.iteration < end {
            let record = self.step()?;
            on_record(&record)?;
        }
        Ok(())
    }

    pub fn run(&mut self, on_record: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        self.run_until(u64::MAX, on_record)
    }
}

/// `buf ← m·buf + g; p ← p − lr·buf`.
fn sgd_momentum(param: &mut Matrix, buf: &mut Matrix, grad: &Matrix, lr: f64, momentum: f64) {
    for ((p, b), g) in param
        .as_mut_slice()
        .iter_mut()
        .zip(buf.as_mut_slice())
        .zip(grad.as_slice())
    {
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

/// Final state and the full metrics stream of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

pub fn train(corpus: &PairedCorpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, config)?;
    let mut metrics = Vec::new();
    trainer.run(|r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        metrics,
    })
}
