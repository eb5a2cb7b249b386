//! Synthetic paired-modality corpora and their binary container.
//!
//! Generation (all draws from one [`SplitMix64`] seeded with `spec.seed`, in
//! this order):
//!
//! 1. one center per latent cluster: `latent_dim` standard normals, scaled to
//!    unit norm;
//! 2. the modality maps `M1` (`latent_dim × d1`) then `M2` (`latent_dim × d2`),
//!    entries standard normal divided by `sqrt(latent_dim)`;
//! 3. per sample: cluster index (`below(n_clusters)`), latent noise
//!    (`latent_dim` normals), modality-1 noise (`d1` normals), modality-2 noise
//!    (`d2` normals). With `u = center + σ·ε_u`, the views are
//!    `x1 = u·M1 + σ·ε_1` and `x2 = u·M2 + σ·ε_2`.
//!
//! Normals come from [`SplitMix64::normal`] (Box–Muller).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::SplitMix64;

pub const CORPUS_MAGIC: &[u8; 4] = b"MMP1";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub n_latent_clusters: usize,
    pub latent_dim: usize,
    pub d1: usize,
    pub d2: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_latent_clusters: 8,
            latent_dim: 8,
            d1: 32,
            d2: 24,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_latent_clusters < 2 {
            return Err(Error::Config(format!(
                "need at least 2 latent clusters, got {}",
                self.n_latent_clusters
            )));
        }
        if self.n_samples == 0 || self.latent_dim == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::Config(
                "sample count and dimensions must be at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Two aligned views of the same samples, plus held-out cluster labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedCorpus {
    pub modality1: Matrix,
    pub modality2: Matrix,
    pub labels: Option<Vec<u32>>,
}

impl PairedCorpus {
    pub fn new(modality1: Matrix, modality2: Matrix, labels: Option<Vec<u32>>) -> Result<Self> {
        if modality1.rows() != modality2.rows() {
            return Err(Error::dim(
                "paired corpus",
                modality1.shape(),
                modality2.shape(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != modality1.rows() {
                return Err(Error::Input(format!(
                    "{} labels for {} samples",
                    l.len(),
                    modality1.rows()
                )));
            }
        }
        Ok(Self {
            modality1,
            modality2,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.modality1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.modality1.cols(), self.modality2.cols()]
    }

    pub fn modality(&self, index: usize) -> &Matrix {
        if index == 0 {
            &self.modality1
        } else {
            &self.modality2
        }
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Input("corpus has no labels".into()))
    }

    pub fn batch(&self, indices: &[usize]) -> ModalityBatch {
        ModalityBatch {
            x1: self.modality1.select_rows(indices),
            x2: self.modality2.select_rows(indices),
            sample_indices: indices.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub x1: Matrix,
    pub x2: Matrix,
    pub sample_indices: Vec<usize>,
}

pub fn generate(spec: &CorpusSpec) -> Result<PairedCorpus> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let ld = spec.latent_dim;

    let mut centers = Matrix::from_fn(spec.n_latent_clusters, ld, |_, _| rng.normal());
    for r in 0..centers.rows() {
        let row = centers.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let scale = 1.0 / (ld as f64).sqrt();
    let map1 = Matrix::from_fn(ld, spec.d1, |_, _| rng.normal() * scale);
    let map2 = Matrix::from_fn(ld, spec.d2, |_, _| rng.normal() * scale);

    let sigma = spec.noise_sigma;
    let mut x1 = Matrix::zeros(spec.n_samples, spec.d1);
    let mut x2 = Matrix::zeros(spec.n_samples, spec.d2);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut latent = vec![0.0; ld];
    for i in 0..spec.n_samples {
        let cluster = rng.below(spec.n_latent_clusters);
        labels.push(cluster as u32);
        for (u, c) in latent.iter_mut().zip(centers.row(cluster)) {
            *u = c + sigma * rng.normal();
        }
        for (out, map) in [(&mut x1, &map1), (&mut x2, &map2)] {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (l, u) in latent.iter().enumerate() {
                    acc += u * map[(l, j)];
                }
                *v = acc;
            }
            for v in row.iter_mut() {
                *v += sigma * rng.normal();
            }
        }
    }
    PairedCorpus::new(x1, x2, Some(labels))
}

/// Index order for one epoch: a seeded shuffle cut into `batch_size` chunks,
/// dropping a final chunk of fewer than two samples.
pub fn epoch_batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(epoch_seed).shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn batches(
    corpus: &PairedCorpus,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<ModalityBatch>> {
    Ok(epoch_batches(corpus.len(), batch_size, epoch_seed)?
        .iter()
        .map(|idx| corpus.batch(idx))
        .collect())
}

/// Serializes a corpus in the little-endian `MMP1` layout.
pub fn encode_corpus(corpus: &PairedCorpus) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Input(format!("{what} {v} exceeds u32")))
    };
    let n = corpus.len();
    let [d1, d2] = corpus.dims();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * n * (d1 + d2) + 4 * n);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n, "sample count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d1, "d1")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d2, "d2")?.to_le_bytes());
    out.push(u8::from(corpus.labels.is_some()));
    out.extend_from_slice(&[0u8; 3]);
    for v in corpus
        .modality1
        .as_slice()
        .iter()
        .chain(corpus.modality2.as_slice())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &corpus.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian reader that reports offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: len as u64,
                available: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.offset(),
            message: format!("payload of {count} values overflows"),
        })?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset(),
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<PairedCorpus> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != CORPUS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {CORPUS_MAGIC:?}"),
        });
    }
    let version_offset = r.offset();
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Format {
            offset: version_offset,
            message: format!("unsupported corpus version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let d1 = r.u32()? as usize;
    let d2 = r.u32()? as usize;
    let flag_offset = r.offset();
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: flag_offset,
                message: format!("has_labels must be 0 or 1, got {other}"),
            })
        }
    };
    r.take(3)?;
    let m1 = Matrix::from_vec(n, d1, r.f64s(n * d1)?)?;
    let m2 = Matrix::from_vec(n, d2, r.f64s(n * d2)?)?;
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()?);
        }
        Some(labels)
    } else {
        None
    };
    r.finish()?;
    PairedCorpus::new(m1, m2, labels)
}

pub fn save_corpus(corpus: &PairedCorpus, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_corpus(corpus)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<PairedCorpus> {
    decode_corpus(&fs::read(path)?)
}
