//! Finite-difference verification of the tape's gradients.
//!
//! Each check builds a scalar loss from a few random inputs, takes the tape
//! gradient, and compares it component-wise against central differences.
//! Codes are stop-gradient targets, so the swapped-loss checks hold them
//! fixed at their base-point values while differencing.

use serde::Serialize;

use crate::error::Result;
use crate::model::{
    embed, embed_on_tape, init_model, EncoderConfig, EncoderVars, LinearVars, Modality,
    PrototypeBank,
};
use crate::numerics::{l2_normalize_rows, Matrix, Tape, Var};
use crate::objective::{modality_targets, swapped_loss_with_targets};
use crate::rng::{derive_seed, SplitMix64};
use crate::sinkhorn::SinkhornConfig;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Components where both gradients are smaller than this are not compared:
/// their relative error is dominated by rounding.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub const OPS: [&str; 9] = [
    "matmul",
    "softmax",
    "log_softmax",
    "log",
    "l2_normalize",
    "cross_entropy",
    "embed",
    "swapped_loss",
    "swapped_loss_queue",
];

const BATCH: usize = 4;
const PROTOTYPES: usize = 8;
const EMBED_DIM: usize = 5;
const QUEUE_ROWS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_relative_error: f64,
    pub components: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect()
    }
}

/// Runs every check. `fault` names an op whose analytic gradient is scaled
/// by 1.01 before comparison, to prove the harness can fail.
pub fn run(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let mut checks = Vec::with_capacity(OPS.len());
    for (i, &op) in OPS.iter().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(seed, i as u64));
        checks.push(check_op(op, &mut rng, fault == Some(op))?);
    }
    Ok(GradcheckReport { checks })
}

fn gaussian(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Reduces a matrix to a scalar with fixed random weights so every
/// component of the upstream gradient differs.
fn weighted_sum(tape: &mut Tape, x: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

fn check_op(op: &str, rng: &mut SplitMix64, fault: bool) -> Result<OpCheck> {
    match op {
        "matmul" => {
            let params = vec![gaussian(rng, 3, 4), gaussian(rng, 4, 5)];
            let w = gaussian(rng, 3, 5);
            compare(op, params, fault, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            })
        }
        "softmax" | "log_softmax" => {
            let params = vec![gaussian(rng, 4, 6)];
            let w = gaussian(rng, 4, 6);
            let log = op == "log_softmax";
            compare(op, params, fault, |t, v| {
                let y = if log {
                    t.log_softmax_rows(v[0], 0.7)?
                } else {
                    t.softmax_rows(v[0], 0.7)?
                };
                weighted_sum(t, y, &w)
            })
        }
        "log" => {
            let params = vec![Matrix::from_fn(3, 4, |_, _| rng.uniform(0.2, 2.0))];
            let w = gaussian(rng, 3, 4);
            compare(op, params, fault, |t, v| {
                let y = t.log(v[0]);
                weighted_sum(t, y, &w)
            })
        }
        "l2_normalize" => {
            let params = vec![gaussian(rng, 4, 5)];
            let w = gaussian(rng, 4, 5);
            compare(op, params, fault, |t, v| {
                let y = t.l2_normalize_rows(v[0]);
                weighted_sum(t, y, &w)
            })
        }
        "cross_entropy" => {
            let params = vec![gaussian(rng, 4, 6)];
            let targets = Matrix::from_fn(4, 6, |_, _| rng.uniform(0.1, 1.0));
            let sums = targets.row_sums();
            let targets = Matrix::from_fn(4, 6, |r, c| targets[(r, c)] / sums[r]);
            compare(op, params, fault, |t, v| {
                let logp = t.log_softmax_rows(v[0], 1.0)?;
                t.cross_entropy(logp, targets.clone())
            })
        }
        "embed" => {
            let (config, params, _) = small_model(rng)?;
            let x = gaussian(rng, BATCH, config.input_dims[0]);
            let w = gaussian(rng, BATCH, EMBED_DIM);
            compare(op, params, fault, |t, v| {
                let vars = encoder_vars(&config, v);
                let xv = t.constant(x.clone());
                let z = embed_on_tape(t, &vars, xv, Modality::First)?;
                weighted_sum(t, z, &w)
            })
        }
        "swapped_loss" | "swapped_loss_queue" => {
            let (config, mut params, bank) = small_model(rng)?;
            let x1 = gaussian(rng, BATCH, config.input_dims[0]);
            let x2 = gaussian(rng, BATCH, config.input_dims[1]);
            let queue = (op == "swapped_loss_queue").then(|| {
                [
                    l2_normalize_rows(&gaussian(rng, QUEUE_ROWS, EMBED_DIM)).matrix,
                    l2_normalize_rows(&gaussian(rng, QUEUE_ROWS, EMBED_DIM)).matrix,
                ]
            });
            // Codes at the base point, then frozen.
            let encoder = rebuild_encoder(&config, &params, rng)?;
            let sinkhorn = SinkhornConfig::converged(0.05);
            let z1 = embed(&encoder, &x1, Modality::First)?;
            let z2 = embed(&encoder, &x2, Modality::Second)?;
            let targets = [
                modality_targets(&z1, queue.as_ref().map(|q| &q[0]), &bank, &sinkhorn)?,
                modality_targets(&z2, queue.as_ref().map(|q| &q[1]), &bank, &sinkhorn)?,
            ];
            params.push(bank.matrix().clone());
            compare(op, params, fault, |t, v| {
                let (enc, protos) = v.split_at(v.len() - 1);
                let vars = encoder_vars(&config, enc);
                let a = t.constant(x1.clone());
                let b = t.constant(x2.clone());
                let z1 = embed_on_tape(t, &vars, a, Modality::First)?;
                let z2 = embed_on_tape(t, &vars, b, Modality::Second)?;
                swapped_loss_with_targets(t, z1, z2, protos[0], &targets, 0.1)
            })
        }
        other => unreachable!("unknown op {other}"),
    }
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        input_dims: [6, 4],
        hidden_dims: vec![7, 6],
        embed_dim: EMBED_DIM,
    }
}

fn small_model(rng: &mut SplitMix64) -> Result<(EncoderConfig, Vec<Matrix>, PrototypeBank)> {
    let config = small_config();
    let (encoder, bank) = init_model(&config, PROTOTYPES, rng.next_u64())?;
    let params = encoder
        .parameters()
        .into_iter()
        .map(|(_, m)| m.clone())
        .collect();
    Ok((config, params, bank))
}

fn rebuild_encoder(
    config: &EncoderConfig,
    params: &[Matrix],
    rng: &mut SplitMix64,
) -> Result<crate::model::Encoder> {
    let (mut encoder, _) = init_model(config, PROTOTYPES, rng.next_u64())?;
    for (dst, src) in encoder.parameters_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    Ok(encoder)
}

fn encoder_vars(config: &EncoderConfig, v: &[Var]) -> EncoderVars {
    let layer = |i: usize| LinearVars {
        weight: v[2 * i],
        bias: v[2 * i + 1],
    };
    let trunk_layers = config.hidden_dims.len() - 1;
    EncoderVars {
        adapters: [layer(0), layer(1)],
        trunk: (0..trunk_layers).map(|i| layer(2 + i)).collect(),
        head: [layer(2 + trunk_layers), layer(3 + trunk_layers)],
    }
}

fn compare(
    op: &str,
    params: Vec<Matrix>,
    fault: bool,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<OpCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.watch(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |params: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss)[(0, 0)])
    };

    let mut worst = 0.0f64;
    let mut components = 0;
    let mut probe = params.clone();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("watched");
        for j in 0..params[i].as_slice().len() {
            let original = params[i].as_slice()[j];
            probe[i].as_mut_slice()[j] = original + STEP;
            let up = eval(&probe)?;
            probe[i].as_mut_slice()[j] = original - STEP;
            let down = eval(&probe)?;
            probe[i].as_mut_slice()[j] = original;

            let numeric = (up - down) / (2.0 * STEP);
            let mut a = analytic.as_slice()[j];
            if fault {
                a *= 1.01;
            }
            let scale = a.abs().max(numeric.abs());
            if scale < MAGNITUDE_FLOOR {
                continue;
            }
            components += 1;
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(OpCheck {
        op: op.to_string(),
        max_relative_error: worst,
        components,
        passed: components > 0 && worst < TOLERANCE,
    })
}
