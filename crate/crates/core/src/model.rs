//! Shared encoder, projection head and prototype bank.
//!
//! Each modality enters through its own linear adapter (`d_m → hidden[0]`).
//! Everything after that is shared: fully connected trunk layers between
//! consecutive hidden widths, then a two-layer projection head
//! (`h → h → D`) whose output rows are L2-normalized. The nonlinearity is ReLU
//! throughout.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul_transpose_b, Matrix, Tape, Var};
use crate::rng::{derive_seed, SplitMix64};

/// Seed for re-drawing prototypes that collapsed to zero.
const PROTOTYPE_RESEED: u64 = 0x5052_4F54_4F00_0001;

/// Which of the two views a batch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    First,
    Second,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::First, Modality::Second];

    pub fn index(self) -> usize {
        match self {
            Modality::First => 0,
            Modality::Second => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(Modality::First),
            1 => Ok(Modality::Second),
            _ => Err(Error::Parameter(format!(
                "modality index {index} out of range"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dims: [usize; 2],
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 24],
            hidden_dims: vec![64],
            embed_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0) {
            return Err(Error::Config("input dims must be at least 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "at least one hidden width is required".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the trunk output, i.e. the frozen representation used by probes.
    pub fn trunk_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated config")
    }
}

/// Affine layer `x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    fn init(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform(-bound, bound));
        let bias = Matrix::from_fn(1, fan_out, |_, _| rng.uniform(-bound, bound));
        Self { weight, bias }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub adapters: [Linear; 2],
    pub trunk: Vec<Linear>,
    pub head: [Linear; 2],
}

/// Prototype vectors as the rows of a K × D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    c: Matrix,
}

impl PrototypeBank {
    pub fn new(c: Matrix) -> Result<Self> {
        if c.rows() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 prototypes, got {}",
                c.rows()
            )));
        }
        if c.cols() == 0 {
            return Err(Error::Config(
                "prototype dimension must be at least 1".into(),
            ));
        }
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.c
    }

    pub fn len(&self) -> usize {
        self.c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.c.cols()
    }
}

/// Builds an encoder and a unit-norm prototype bank from one seed.
pub fn init_model(config: &EncoderConfig, k: usize, seed: u64) -> Result<(Encoder, PrototypeBank)> {
    config.validate()?;
    if k < 2 {
        return Err(Error::Config(format!(
            "need at least 2 prototypes, got {k}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let h0 = config.hidden_dims[0];
    let adapters = [
        Linear::init(&mut rng, config.input_dims[0], h0),
        Linear::init(&mut rng, config.input_dims[1], h0),
    ];
    let trunk = config
        .hidden_dims
        .windows(2)
        .map(|w| Linear::init(&mut rng, w[0], w[1]))
        .collect();
    let h = config.trunk_dim();
    let head = [
        Linear::init(&mut rng, h, h),
        Linear::init(&mut rng, h, config.embed_dim),
    ];
    let bound = 1.0 / (config.embed_dim as f64).sqrt();
    let raw = Matrix::from_fn(k, config.embed_dim, |_, _| rng.uniform(-bound, bound));
    let mut bank = PrototypeBank::new(raw)?;
    renormalize_prototypes(&mut bank);
    let encoder = Encoder {
        config: config.clone(),
        adapters,
        trunk,
        head,
    };
    Ok((encoder, bank))
}

impl Encoder {
    /// Parameters in canonical order with stable names.
    pub fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, a) in self.adapters.iter().enumerate() {
            out.push((format!("adapter{}.weight", i + 1), &a.weight));
            out.push((format!("adapter{}.bias", i + 1), &a.bias));
        }
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk{i}.weight"), &l.weight));
            out.push((format!("trunk{i}.bias"), &l.bias));
        }
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head{i}.weight"), &l.weight));
            out.push((format!("head{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable parameters, same order as [`Encoder::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in self
            .adapters
            .iter_mut()
            .chain(self.trunk.iter_mut())
            .chain(self.head.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Puts every parameter on the tape as a watched variable.
    pub fn watch(&self, tape: &mut Tape) -> EncoderVars {
        self.register(tape, true)
    }

    /// Puts every parameter on the tape as a constant.
    pub fn constants(&self, tape: &mut Tape) -> EncoderVars {
        self.register(tape, false)
    }

    fn register(&self, tape: &mut Tape, watched: bool) -> EncoderVars {
        let mut put = |m: &Matrix| {
            if watched {
                tape.watch(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let mut layer = |l: &Linear| LinearVars {
            weight: put(&l.weight),
            bias: put(&l.bias),
        };
        let adapters = [layer(&self.adapters[0]), layer(&self.adapters[1])];
        let trunk = self.trunk.iter().map(&mut layer).collect();
        let head = [layer(&self.head[0]), layer(&self.head[1])];
        EncoderVars {
            adapters,
            trunk,
            head,
        }
    }

    fn check_width(&self, batch: &Matrix, modality: Modality) -> Result<()> {
        let expected = self.config.input_dims[modality.index()];
        if batch.cols() != expected {
            return Err(Error::dim("embed", batch.shape(), (batch.rows(), expected)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every encoder parameter.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub adapters: [LinearVars; 2],
    pub trunk: Vec<LinearVars>,
    pub head: [LinearVars; 2],
}

impl EncoderVars {
    /// Handles in the same order as [`Encoder::parameters`].
    pub fn all(&self) -> Vec<Var> {
        self.adapters
            .iter()
            .chain(&self.trunk)
            .chain(&self.head)
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

fn affine(tape: &mut Tape, x: Var, layer: LinearVars) -> Result<Var> {
    let xw = tape.matmul(x, layer.weight)?;
    tape.add_row_broadcast(xw, layer.bias)
}

/// Trunk activations (the representation before the projection head).
pub fn trunk_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: Var,
    modality: Modality,
) -> Result<Var> {
    let pre = affine(tape, x, vars.adapters[modality.index()])?;
    let mut h = tape.relu(pre);
    for &layer in &vars.trunk {
        let pre = affine(tape, h, layer)?;
        h = tape.relu(pre);
    }
    Ok(h)
}

/// Unit-norm embeddings `z = f(x)` recorded on the tape.
pub fn embed_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: Var,
    modality: Modality,
) -> Result<Var> {
    let h = trunk_on_tape(tape, vars, x, modality)?;
    let pre = affine(tape, h, vars.head[0])?;
    let hidden = tape.relu(pre);
    let out = affine(tape, hidden, vars.head[1])?;
    Ok(tape.l2_normalize_rows(out))
}

/// Unit-norm embeddings of a batch (B × D).
pub fn embed(encoder: &Encoder, batch: &Matrix, modality: Modality) -> Result<Matrix> {
    encoder.check_width(batch, modality)?;
    let mut tape = Tape::new();
    let vars = encoder.constants(&mut tape);
    let x = tape.constant(batch.clone());
    let z = embed_on_tape(&mut tape, &vars, x, modality)?;
    Ok(tape.value(z).clone())
}

/// Trunk representation of a batch (B × hidden_last), used by the probes.
pub fn trunk_features(encoder: &Encoder, batch: &Matrix, modality: Modality) -> Result<Matrix> {
    encoder.check_width(batch, modality)?;
    let mut tape = Tape::new();
    let vars = encoder.constants(&mut tape);
    let x = tape.constant(batch.clone());
    let h = trunk_on_tape(&mut tape, &vars, x, modality)?;
    Ok(tape.value(h).clone())
}

/// `scores[k, b] = c_k · z_b` (K × B).
pub fn prototype_scores(z: &Matrix, bank: &PrototypeBank) -> Result<Matrix> {
    if z.cols() != bank.dim() {
        return Err(Error::dim("prototype_scores", z.shape(), bank.c.shape()));
    }
    matmul_transpose_b(&bank.c, z)
}

/// Rescales every prototype to unit norm. Rows that are exactly zero are
/// re-drawn from a fixed auxiliary seed; their indices are returned.
///
/// Rows already of unit norm to within rounding are left bit-for-bit alone so
/// that repeated calls do not drift.
pub fn renormalize_prototypes(bank: &mut PrototypeBank) -> Vec<usize> {
    let normalized = l2_normalize_rows(&bank.c);
    let dim = bank.c.cols();
    for r in 0..bank.c.rows() {
        if normalized.zero_rows.contains(&r) {
            continue;
        }
        let sq: f64 = bank.c.row(r).iter().map(|v| v * v).sum();
        if (sq - 1.0).abs() > 4.0 * f64::EPSILON {
            bank.c.row_mut(r).copy_from_slice(normalized.matrix.row(r));
        }
    }
    for &r in &normalized.zero_rows {
        let mut rng = SplitMix64::new(derive_seed(PROTOTYPE_RESEED, r as u64));
        let fresh: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = fresh.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (dst, v) in bank.c.row_mut(r).iter_mut().zip(&fresh) {
            *dst = v / norm;
        }
    }
    normalized.zero_rows
}
