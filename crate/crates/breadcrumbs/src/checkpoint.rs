//! Parameter checkpoints: a flat binary archive of (name, shape, f32
//! little-endian data) records, a JSON manifest carrying the model
//! hyperparameters, and the vocabulary as JSON.

use crate::error::Error;
use crate::model::{ModelConfig, PolicyModel, Role};
use crate::vocab::Vocabulary;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BCKP";
pub const FORMAT_VERSION: u32 = 1;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub role: Role,
    pub param_count: usize,
}

pub fn save_checkpoint(dir: &Path, model: &PolicyModel, vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        role: model.role,
        param_count: model.param_count(),
    };
    let mf = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(BufWriter::new(mf), &manifest)?;
    let vf = std::fs::File::create(dir.join(VOCAB_FILE))?;
    serde_json::to_writer(BufWriter::new(vf), vocab)?;

    let mut w = BufWriter::new(std::fs::File::create(dir.join(PARAMS_FILE))?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(PolicyModel, Vocabulary)> {
    let mf = std::fs::File::open(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(mf))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    let vf = std::fs::File::open(dir.join(VOCAB_FILE))?;
    let vocab: Vocabulary = serde_json::from_reader(BufReader::new(vf))?;
    let vocab = vocab.rebuild()?;

    let records = read_records(&dir.join(PARAMS_FILE))?;
    let mut model = PolicyModel::new(manifest.model, manifest.role, 0)?;
    model.set_params(records)?;
    if model.param_count() != manifest.param_count {
        return Err(Error::Checkpoint(format!(
            "manifest says {} parameters, archive holds {}",
            manifest.param_count,
            model.param_count()
        )));
    }
    Ok((model, vocab))
}

fn read_records(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad archive magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let n_records = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint("implausible record name length".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let n_dims = read_u32(&mut r)? as usize;
        if n_dims > 8 {
            return Err(Error::Checkpoint("implausible record rank".into()));
        }
        let mut shape = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
