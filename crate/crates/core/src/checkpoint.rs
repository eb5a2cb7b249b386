//! Versioned binary snapshot of a training run.
//!
//! Layout (little-endian): magic `MMCK`, `u32` version, `u32`-length-prefixed
//! UTF-8 text of sorted `key=value` lines (the training configuration plus
//! `state.*` counters), `u32` tensor count, then per tensor: `u32` name length,
//! name bytes, `u32` rank, `rank` × `u32` dims, row-major `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{parse, parse_pairs, render_map, TrainConfig};
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{init_model, Encoder, PrototypeBank};
use crate::numerics::Matrix;
use crate::objective::FeatureQueue;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PROTOTYPES: &str = "prototypes";
const MOMENTUM_PREFIX: &str = "momentum.";
const QUEUE_NAMES: [&str; 2] = ["queue.modality1", "queue.modality2"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub prototypes: PrototypeBank,
    /// Momentum buffers in parameter order: encoder parameters, then prototypes.
    pub momentum: Vec<Matrix>,
    pub queue: FeatureQueue,
    /// Optimizer steps already taken.
    pub iteration: u64,
}

impl Checkpoint {
    /// Untrained state for `config`.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (encoder, prototypes) = init_model(&config.encoder, config.k_prototypes, config.seed)?;
        let mut momentum: Vec<Matrix> = encoder
            .parameters()
            .into_iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        momentum.push(Matrix::zeros(prototypes.len(), prototypes.dim()));
        let queue = FeatureQueue::new(config.loss.queue_length, config.encoder.embed_dim);
        Ok(Self {
            config: config.clone(),
            encoder,
            prototypes,
            momentum,
            queue,
            iteration: 0,
        })
    }

    /// Names and values of every stored tensor, in file order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.parameters();
        out.push((PROTOTYPES.to_string(), self.prototypes.matrix()));
        let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
        for (name, m) in names.iter().zip(&self.momentum) {
            out.push((format!("{MOMENTUM_PREFIX}{name}"), m));
        }
        out.push((
            QUEUE_NAMES[0].to_string(),
            self.queue.buffer(crate::model::Modality::First),
        ));
        out.push((
            QUEUE_NAMES[1].to_string(),
            self.queue.buffer(crate::model::Modality::Second),
        ));
        out
    }

    fn header_text(&self) -> String {
        let mut map = self.config.to_map();
        map.insert("state.iteration".into(), self.iteration.to_string());
        map.insert("state.queue_cursor".into(), self.queue.cursor().to_string());
        map.insert("state.queue_fill".into(), self.queue.fill().to_string());
        render_map(&map)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.header_text();
        out.extend_from_slice(&len_u32(text.len())?.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&len_u32(tensors.len())?.to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&len_u32(m.rows())?.to_le_bytes());
            out.extend_from_slice(&len_u32(m.cols())?.to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let text_len = r.u32()? as usize;
        let text_offset = r.offset();
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|e| Error::Format {
            offset: text_offset,
            message: format!("config text is not UTF-8: {e}"),
        })?;
        let mut pairs = parse_pairs(text)?;
        let mut take_state = |key: &str| -> Result<u64> {
            let v = pairs.remove(key).ok_or_else(|| Error::Format {
                offset: text_offset,
                message: format!("missing {key}"),
            })?;
            parse(key, &v)
        };
        let iteration = take_state("state.iteration")?;
        let cursor = take_state("state.queue_cursor")? as usize;
        let fill = take_state("state.queue_fill")? as usize;
        let mut config = TrainConfig::default();
        config.apply(&pairs)?;

        let count = r.u32()? as usize;
        let mut tensors: BTreeMap<String, (u64, Matrix)> = BTreeMap::new();
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Format {
                    offset: at,
                    message: format!("tensor name is not UTF-8: {e}"),
                })?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [rows, cols] => (rows, cols),
                _ => {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("tensor {name:?} has unsupported rank {rank}"),
                    })
                }
            };
            let data = r.f64s(rows * cols)?;
            let m = Matrix::from_vec(rows, cols, data)?;
            if tensors.insert(name.clone(), (at, m)).is_some() {
                return Err(Error::Format {
                    offset: at,
                    message: format!("duplicate tensor {name:?}"),
                });
            }
        }
        r.finish()?;

        let end = r.offset();
        let mut fetch = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let (at, m) = tensors.remove(name).ok_or_else(|| Error::Format {
                offset: end,
                message: format!("missing tensor {name:?}"),
            })?;
            if m.shape() != shape {
                return Err(Error::Format {
                    offset: at,
                    message: format!(
                        "tensor {name:?} has shape {:?}, expected {shape:?}",
                        m.shape()
                    ),
                });
            }
            Ok(m)
        };

        // Shapes and names come from a freshly built model of the same config.
        let mut ckpt = Checkpoint::initial(&config)?;
        let names: Vec<(String, (usize, usize))> = ckpt
            .encoder
            .parameters()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        for ((name, shape), slot) in names.iter().zip(ckpt.encoder.parameters_mut()) {
            *slot = fetch(name, *shape)?;
        }
        let proto_shape = ckpt.prototypes.matrix().shape();
        ckpt.prototypes = PrototypeBank::new(fetch(PROTOTYPES, proto_shape)?)?;
        let all_names = names
            .iter()
            .map(|(n, s)| (n.clone(), *s))
            .chain(std::iter::once((PROTOTYPES.to_string(), proto_shape)));
        for ((name, shape), slot) in all_names.zip(ckpt.momentum.iter_mut()) {
            *slot = fetch(&format!("{MOMENTUM_PREFIX}{name}"), shape)?;
        }
        let qshape = (config.loss.queue_length, config.encoder.embed_dim);
        let buffers = [
            fetch(QUEUE_NAMES[0], qshape)?,
            fetch(QUEUE_NAMES[1], qshape)?,
        ];
        ckpt.queue = FeatureQueue::from_parts(buffers, fill, cursor)?;
        ckpt.iteration = iteration;
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format {
                offset: end,
                message: format!("unexpected tensor {name:?}"),
            });
        }
        Ok(ckpt)
    }
}

fn len_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("length {v} exceeds u32")))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn small() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                input_dims: [4, 3],
                hidden_dims: vec![5, 6],
                embed_dim: 3,
            },
            k_prototypes: 4,
            loss: crate::objective::LossConfig {
                queue_length: 6,
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::initial(&small()).unwrap();
        ckpt.iteration = 7;
        ckpt.momentum[2] =
            Matrix::filled(ckpt.momentum[2].rows(), ckpt.momentum[2].cols(), 0.1 + 0.2);
        let z = Matrix::filled(4, 3, 0.5);
        ckpt.queue.enqueue(&z, &z).unwrap();
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = Checkpoint::initial(&small()).unwrap().encode().unwrap();
        bytes[4] ^= 0xFF;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::UnsupportedVersion { expected: 1, .. })
        ));
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = Checkpoint::initial(&small()).unwrap().encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn header_text_is_sorted_key_values() {
        let bytes = Checkpoint::initial(&small()).unwrap().encode().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        assert!(keys.contains(&"state.iteration"));
    }
}
