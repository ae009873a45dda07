//! Single-file training snapshots: format magic and version, the model
//! configuration as JSON text, a flat name → array parameter map, first and
//! second moment accumulators of the optimizer, and the iteration counter.
//! Numbers are little-endian f64; loading verifies structure against the
//! stored configuration so a snapshot cannot silently mismatch its model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, ParamStore};

const MAGIC: &[u8; 8] = b"SGSRCKPT";
const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of arbitrary bytes; used for config provenance stamps.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable hash of a model configuration (hash of its canonical JSON).
pub fn config_hash(cfg: &ModelConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: ModelConfig,
    config_sha256: String,
    iteration: u64,
    train_seed: u64,
}

/// A complete training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    /// Seed of the stateless per-iteration sampling stream; together with
    /// `iteration` this pins the data order on resume.
    pub train_seed: u64,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub adam_m: Vec<(String, ArrayD<f64>)>,
    pub adam_v: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    /// Snapshot of a model with no optimizer history.
    pub fn from_model(model: &Model, iteration: u64, train_seed: u64) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            iteration,
            train_seed,
            params: model.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }

    /// Rebuilds the model, verifying that the stored parameters exactly
    /// match the inventory the configuration implies.
    pub fn into_model(&self) -> Result<Model> {
        let reference = build_model(&self.config)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "snapshot holds {} parameters but the configuration implies {}",
                self.params.len(),
                reference.params.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((ref_name, ref_value), (name, value)) in reference.params.iter().zip(&self.params) {
            if ref_name != name {
                return Err(Error::Incompatible(format!(
                    "snapshot parameter {name} where the configuration implies {ref_name}"
                )));
            }
            if ref_value.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?} but the configuration implies {:?}",
                    value.shape(),
                    ref_value.shape()
                )));
            }
            store.insert(name.clone(), value.clone());
        }
        Ok(Model { cfg: self.config.clone(), params: store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;

        let meta = Meta {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_sha256: config_hash(&self.config),
            iteration: self.iteration,
            train_seed: self.train_seed,
        };
        let meta_bytes =
            serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&meta_bytes)?;

        let groups: [(&str, &Vec<(String, ArrayD<f64>)>); 3] =
            [("param", &self.params), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)];
        let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
        w.write_all(&(total as u64).to_le_bytes())?;
        for (prefix, group) in groups {
            for (name, value) in group.iter() {
                write_entry(&mut w, &format!("{prefix}/{name}"), value)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "file magic")?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model snapshot (bad magic)".into()));
        }
        let version = read_u32(&mut r, "format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "snapshot format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }

        let meta_len = read_u64(&mut r, "metadata length")? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes, "metadata")?;
        let meta: Meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let expected_hash = config_hash(&meta.config);
        if meta.config_sha256 != expected_hash {
            return Err(Error::Format("configuration hash does not match its content".into()));
        }

        let n_entries = read_u64(&mut r, "entry count")?;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for _ in 0..n_entries {
            let (full_name, value) = read_entry(&mut r)?;
            let (prefix, name) = full_name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("entry {full_name} lacks a group prefix")))?;
            let slot = match prefix {
                "param" => &mut params,
                "adam_m" => &mut adam_m,
                "adam_v" => &mut adam_v,
                other => return Err(Error::Format(format!("unknown entry group {other}"))),
            };
            slot.push((name.to_string(), value));
        }

        Ok(Checkpoint {
            config: meta.config,
            iteration: meta.iteration,
            train_seed: meta.train_seed,
            params,
            adam_m,
            adam_v,
        })
    }
}

fn write_entry(w: &mut impl Write, name: &str, value: &ArrayD<f64>) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(value.ndim() as u64).to_le_bytes())?;
    for &d in value.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in value.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_entry(r: &mut impl Read) -> Result<(String, ArrayD<f64>)> {
    let name_len = read_u64(r, "entry name length")? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("entry name of {name_len} bytes is implausible")));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(r, &mut name_bytes, "entry name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;

    let ndim = read_u64(r, "entry rank")? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("entry rank {ndim} is implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r, "entry extent")? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        read_exact(r, &mut buf, "entry data")?;
        let v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::Format(format!("entry {name} holds a non-finite value")));
        }
        data.push(v);
    }
    let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
    Ok((name, value))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("snapshot truncated while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
