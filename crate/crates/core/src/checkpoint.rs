//! Checkpoint container: a JSON header carrying every config needed to
//! rebuild the run (model, sampler, augmentation, loss, training,
//! normalization), the training counters, and a raw little-endian tensor
//! blob with model parameters, state buffers and optimizer moments.
//! Loading reconstructs a bit-compatible model.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::loss::LossConfig;
use crate::model::{TapModel, TapModelConfig};
use crate::nn::{Adam, AdamConfig, HasParams, Real};
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;
use crate::video::NormalizationConfig;

const MAGIC: &[u8; 8] = b"TAPCKPT\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub model: TapModelConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub normalization: NormalizationConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<TensorEntry>,
    states: Vec<TensorEntry>,
    /// Adam moment vectors present iff saved from a live training run.
    opt: Option<(u64, usize)>, // (t, tensor count, moments follow params/states in blob)
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("checkpoint dtype {found} does not match requested {want}")]
    DtypeMismatch { found: String, want: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Serialize model (+ optional optimizer) to a file.
pub fn save<F: Real>(
    path: impl AsRef<Path>,
    meta: &CheckpointMeta,
    model: &mut TapModel<F>,
    adam: Option<&Adam<F>>,
) -> Result<(), CheckpointError> {
    let p = path.as_ref().display().to_string();
    let mut params = Vec::new();
    let mut states = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.for_each_param(&mut |pv| {
        params.push(TensorEntry {
            name: pv.name.clone(),
            shape: pv.shape.clone(),
            len: pv.value.len(),
        });
        for v in pv.value.iter() {
            v.write_le(&mut blob);
        }
    });
    model.for_each_state(&mut |sv| {
        states.push(TensorEntry {
            name: sv.name.clone(),
            shape: vec![sv.value.len()],
            len: sv.value.len(),
        });
        for v in sv.value.iter() {
            v.write_le(&mut blob);
        }
    });
    let opt = adam.map(|a| {
        for group in [&a.m, &a.v] {
            for vec in group {
                for v in vec {
                    v.write_le(&mut blob);
                }
            }
        }
        (a.t, a.m.len())
    });
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.dtype = F::DTYPE.to_string();
    let header = Header {
        meta,
        params,
        states,
        opt,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let file = std::fs::File::create(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |source| CheckpointError::Io {
        path: p.clone(),
        source,
    };
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|source| CheckpointError::Io {
            path: p.clone(),
            source,
        })?;
    w.write_all(&header_json).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    w.write_all(&blob).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    Ok(())
}

/// A loaded checkpoint: meta plus a reconstructed model and, when present,
/// the optimizer state.
pub struct Loaded<F: Real> {
    pub meta: CheckpointMeta,
    pub model: TapModel<F>,
    pub adam: Option<Adam<F>>,
}

pub fn load<F: Real>(path: impl AsRef<Path>) -> Result<Loaded<F>, CheckpointError> {
    let p = path.as_ref().display().to_string();
    let mut file = std::fs::File::open(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|source| CheckpointError::Io {
        path: p.clone(),
        source,
    })?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    if buf.len() < 16 + hlen {
        return Err(CheckpointError::Malformed("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&buf[16..16 + hlen])
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if header.meta.format_version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(header.meta.format_version));
    }
    if header.meta.dtype != F::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            found: header.meta.dtype.clone(),
            want: F::DTYPE.to_string(),
        });
    }
    let mut off = 16 + hlen;
    let take = |off: &mut usize, n: usize, buf: &[u8]| -> Result<Vec<F>, CheckpointError> {
        let bytes = n * F::BYTES;
        if *off + bytes > buf.len() {
            return Err(CheckpointError::Malformed("truncated blob".into()));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(F::from_le_slice(&buf[*off + i * F::BYTES..]));
        }
        *off += bytes;
        Ok(out)
    };
    // rebuild the model with a throwaway rng, then overwrite every tensor
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut model = TapModel::<F>::new(header.meta.model.clone(), &mut rng);
    let mut values: Vec<Vec<F>> = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        values.push(take(&mut off, entry.len, &buf)?);
    }
    let mut idx = 0;
    let mut mismatch: Option<String> = None;
    model.for_each_param(&mut |pv| {
        if idx < values.len() {
            if pv.value.len() == values[idx].len() {
                pv.value.copy_from_slice(&values[idx]);
            } else if mismatch.is_none() {
                mismatch = Some(pv.name.clone());
            }
        } else if mismatch.is_none() {
            mismatch = Some(pv.name.clone());
        }
        idx += 1;
    });
    if idx != values.len() {
        mismatch.get_or_insert_with(|| "parameter count".into());
    }
    if let Some(name) = mismatch {
        return Err(CheckpointError::Malformed(format!(
            "parameter layout mismatch at {name}"
        )));
    }
    let mut svalues: Vec<Vec<F>> = Vec::with_capacity(header.states.len());
    for entry in &header.states {
        svalues.push(take(&mut off, entry.len, &buf)?);
    }
    let mut sidx = 0;
    model.for_each_state(&mut |sv| {
        if sidx < svalues.len() && sv.value.len() == svalues[sidx].len() {
            sv.value.copy_from_slice(&svalues[sidx]);
        }
        sidx += 1;
    });
    let adam = if let Some((t, count)) = header.opt {
        let mut adam = Adam::new(&mut model, AdamConfig::default());
        if adam.m.len() != count {
            return Err(CheckpointError::Malformed("optimizer layout mismatch".into()));
        }
        for gi in 0..2 {
            for ti in 0..count {
                let n = if gi == 0 {
                    adam.m[ti].len()
                } else {
                    adam.v[ti].len()
                };
                let vals = take(&mut off, n, &buf)?;
                if gi == 0 {
                    adam.m[ti].copy_from_slice(&vals);
                } else {
                    adam.v[ti].copy_from_slice(&vals);
                }
            }
        }
        adam.t = t;
        Some(adam)
    } else {
        None
    };
    Ok(Loaded {
        meta: header.meta,
        model,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureExtractorConfig, HeadChoice, HeadConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta(model: TapModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            dtype: String::new(),
            model,
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::none(0),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            normalization: NormalizationConfig::default(),
            epoch: 3,
            step: 117,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let cfg = TapModelConfig {
            extractor: FeatureExtractorConfig {
                depth: 2,
                base_channels: 4,
                out_channels: 4,
                ..Default::default()
            },
            head: HeadChoice::Equivariant(HeadConfig {
                hidden: vec![6],
                leaky_slope: 0.01,
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = TapModel::<f32>::new(cfg.clone(), &mut rng);
        let mut adam = Adam::new(&mut model, AdamConfig::default());
        adam.t = 9;
        adam.m[0][0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tapckpt");
        save(&path, &meta(cfg), &mut model, Some(&adam)).unwrap();
        let mut loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.meta.epoch, 3);
        assert_eq!(loaded.meta.step, 117);
        let mut want = Vec::new();
        model.for_each_param(&mut |p| want.push(p.value.to_vec()));
        let mut got = Vec::new();
        loaded.model.for_each_param(&mut |p| got.push(p.value.to_vec()));
        assert_eq!(want, got);
        let la = loaded.adam.unwrap();
        assert_eq!(la.t, 9);
        assert_eq!(la.m[0][0], 0.25);
        // dtype guard
        assert!(matches!(
            load::<f64>(&path),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }
}
