//! Checkpoints as a JSON manifest plus a little-endian f64 blob.

use std::fs;
use std::path::{Path, PathBuf};

use numkit::RngState;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::optim::{AdamState, TrainConfig};
use crate::backbone::{ModelConfig, Parameters};
use crate::error::{Error, Result};

const FORMAT: &str = "totokit-checkpoint";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: Parameters,
    pub optimizer: Option<AdamState>,
    pub step: usize,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            model: model.config.clone(),
            train: None,
            params: model.params.clone(),
            optimizer: None,
            step: 0,
            rng: None,
        }
    }

    pub fn to_model(&self) -> Model {
        Model {
            config: self.model.clone(),
            params: self.params.frozen(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: u64,
    stream: u64,
    /// Decimal string: the position is 128-bit.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: usize,
    model_config: ModelConfig,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    rng: Option<RngRecord>,
    #[serde(default)]
    adam_step: Option<u64>,
    tensors: Vec<TensorRecord>,
}

/// `(manifest, blob)` paths for a checkpoint base path, directory, or either file.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.is_dir() {
        path.join("checkpoint")
    } else {
        match path.extension().and_then(|e| e.to_str()) {
            Some("manifest") | Some("bin") => path.with_extension(""),
            _ => path.to_path_buf(),
        }
    };
    (base.with_extension("manifest"), base.with_extension("bin"))
}

fn entries(ckpt: &Checkpoint) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data()))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, moments) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
            for ((n, t), mom) in ckpt.params.iter().zip(moments) {
                out.push((format!("{prefix}{n}"), t.shape().to_vec(), mom.as_slice()));
            }
        }
    }
    out
}

/// Manifest text and blob bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in entries(ckpt) {
        tensors.push(TensorRecord {
            name,
            shape,
            offset: blob.len(),
            count: data.len(),
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: ckpt.step,
        model_config: ckpt.model.clone(),
        train_config: ckpt.train.clone(),
        rng: ckpt.rng.map(|s| RngRecord {
            seed: s.seed,
            stream: s.stream,
            word_pos: s.word_pos.to_string(),
        }),
        adam_step: ckpt.optimizer.as_ref().map(|o| o.t),
        tensors,
    };
    Ok((serde_json::to_string_pretty(&manifest)? + "\n", blob))
}

pub fn decode_checkpoint(manifest: &str, blob: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    let man: Manifest = serde_json::from_str(manifest).map_err(|e| bad(format!("manifest: {e}")))?;
    if man.format != FORMAT || man.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", man.format, man.version)));
    }
    man.model_config.validate()?;
    let needed: usize = man.tensors.iter().map(|t| t.count * 8).sum();
    if blob.len() < needed {
        return Err(bad(format!(
            "blob has {} bytes but the manifest needs {needed} ({} bytes missing)",
            blob.len(),
            needed - blob.len()
        )));
    }
    if blob.len() > needed {
        return Err(bad(format!(
            "blob has {} bytes but the manifest accounts for {needed}",
            blob.len()
        )));
    }
    let mut expected_offset = 0;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for rec in &man.tensors {
        if rec.offset != expected_offset {
            return Err(bad(format!("{}: offset {} should be {expected_offset}", rec.name, rec.offset)));
        }
        if rec.shape.iter().product::<usize>() != rec.count {
            return Err(bad(format!("{}: shape {:?} does not hold {} values", rec.name, rec.shape, rec.count)));
        }
        expected_offset += rec.count * 8;
        let data: Vec<f64> = blob[rec.offset..rec.offset + rec.count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(n) = rec.name.strip_prefix(ADAM_M) {
            m.push((n.to_string(), data));
        } else if let Some(n) = rec.name.strip_prefix(ADAM_V) {
            v.push((n.to_string(), data));
        } else {
            params.push((rec.name.clone(), data));
        }
    }
    let params = Parameters::from_arrays(&man.model_config, params)?;
    let optimizer = match man.adam_step {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(bad("optimizer moments without a step counter".into())),
        Some(t) => {
            let order = |moments: Vec<(String, Vec<f64>)>, what: &str| -> Result<Vec<Vec<f64>>> {
                if moments.len() != params.len() {
                    return Err(bad(format!("{what} covers {} of {} parameters", moments.len(), params.len())));
                }
                moments
                    .into_iter()
                    .zip(params.iter())
                    .map(|((n, d), (pn, pt))| {
                        if n != pn || d.len() != pt.numel() {
                            Err(bad(format!("{what} entry {n} does not match parameter {pn}")))
                        } else {
                            Ok(d)
                        }
                    })
                    .collect()
            };
            Some(AdamState {
                m: order(m, "first moment")?,
                v: order(v, "second moment")?,
                t,
            })
        }
    };
    let rng = match man.rng {
        None => None,
        Some(r) => Some(RngState {
            seed: r.seed,
            stream: r.stream,
            word_pos: r
                .word_pos
                .parse()
                .map_err(|_| bad(format!("invalid rng position {:?}", r.word_pos)))?,
        }),
    };
    Ok(Checkpoint {
        model: man.model_config,
        train: man.train_config,
        params,
        optimizer,
        step: man.step,
        rng,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let (man_path, blob_path) = checkpoint_paths(path);
    let (manifest, blob) = encode_checkpoint(ckpt)?;
    fs::write(&blob_path, blob)?;
    fs::write(&man_path, manifest)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (man_path, blob_path) = checkpoint_paths(path);
    let manifest = fs::read_to_string(&man_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", man_path.display())))?;
    let blob = fs::read(&blob_path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", blob_path.display())))?;
    decode_checkpoint(&manifest, &blob)
}
