//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CORRFUSE"
//! version  u32
//! hash     32 bytes sha256 of the canonical config JSON
//! meta     u32 length + JSON {config, dims, variant, best_epoch, cooccurrence}
//! arrays   u32 count, then per array:
//!          u32 name length + name, u32 rank, u64 per dim, f64 per element
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::Tensor;
use crate::disease_corr::{binarize, conditional_matrix, normalize_adjacency, Cooccurrence, DiseaseCorrelation};
use crate::error::{Error, Result};
use crate::model::train::{TrainConfig, TrainOutcome};
use crate::model::{ModelDims, ModelParams, Variant};

pub const MAGIC: &[u8; 8] = b"CORRFUSE";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FILE_NAME: &str = "model.ckpt";

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    dims: ModelDims,
    variant: Variant,
    best_epoch: usize,
    label_counts: Vec<usize>,
    label_pairs: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub variant: Variant,
    pub best_epoch: usize,
    pub correlation: DiseaseCorrelation,
    pub params: ModelParams<Tensor>,
}

pub fn config_hash(config: &TrainConfig) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json).into())
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            dims: outcome.dims,
            variant: outcome.variant,
            best_epoch: outcome.best_epoch,
            correlation: outcome.correlation.clone(),
            params: outcome.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&config_hash(&self.config)?);
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            dims: self.dims,
            variant: self.variant,
            best_epoch: self.best_epoch,
            label_counts: self.correlation.stats.counts.clone(),
            label_pairs: self.correlation.stats.pairs.clone(),
        })?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);

        let arrays = self.params.named();
        put_u32(&mut out, arrays.len())?;
        for (name, t) in arrays {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 8] = take(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hash: [u8; 32] = take(&mut r)?;
        let meta_len = get_u32(&mut r)? as usize;
        let meta: Meta = serde_json::from_slice(&take_vec(&mut r, meta_len)?)?;
        if config_hash(&meta.config)? != hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        meta.config.validate()?;
        meta.dims.validate()?;

        let count = get_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = get_u32(&mut r)? as usize;
            let name = String::from_utf8(take_vec(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(take(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| Ok(f64::from_le_bytes(take(&mut r)?)))
                .collect::<Result<Vec<_>>>()?;
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }

        // Rebuild a template with the right shapes, then fill it by name.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = ModelParams::init(&meta.dims, &mut rng)?;
        let mut missing = Vec::new();
        let params = template.map(|name, t| {
            match arrays.iter().find(|(n, _)| n == name) {
                Some((_, a)) if a.shape() == t.shape() => a.clone(),
                _ => {
                    missing.push(name.to_string());
                    t.clone()
                }
            }
        });
        if !missing.is_empty() || arrays.len() != params.named().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint arrays do not match the model layout (missing or misshapen: {})",
                missing.join(", ")
            )));
        }

        let stats = Cooccurrence {
            counts: meta.label_counts,
            pairs: meta.label_pairs,
        };
        let conditional = conditional_matrix(&stats);
        let binary = binarize(&conditional, meta.config.tau);
        let normalized = normalize_adjacency(&binary)?;
        Ok(Self {
            correlation: DiseaseCorrelation {
                stats,
                tau: meta.config.tau,
                conditional,
                binary,
                normalized,
            },
            config: meta.config,
            dims: meta.dims,
            variant: meta.variant,
            best_epoch: meta.best_epoch,
            params,
        })
    }

    /// Writes `dir/model.ckpt`, creating `dir` if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(FILE_NAME), self.to_bytes()?)?;
        Ok(())
    }

    /// Accepts either the checkpoint directory or the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(FILE_NAME) } else { path.to_path_buf() };
        Self::from_bytes(&fs::read(file)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(buf)
}

fn take_vec(r: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}
