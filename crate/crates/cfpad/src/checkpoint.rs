//! Checkpoint container: model state tensors keyed by layer path plus the
//! full experiment config for provenance.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CFPADCK1"
//! u32     config length in bytes
//! bytes   config, the flat key/value text format
//! u32     number of tensors
//! per tensor:
//!   u16   name length, then the UTF-8 name
//!   u64   element count, then that many f64 values
//! ```
//!
//! Identical weights and config produce identical bytes.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::PadModel;

pub const MAGIC: &[u8; 8] = b"CFPADCK1";

pub fn save(path: &Path, model: &PadModel, cfg: &ExperimentConfig) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let config_text = cfg.serialize();
    w.write_u32::<LittleEndian>(config_text.len() as u32)?;
    w.write_all(config_text.as_bytes())?;
    let state = model.state();
    w.write_u32::<LittleEndian>(state.len() as u32)?;
    for tensor in state {
        let name = tensor.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u64::<LittleEndian>(tensor.data.len() as u64)?;
        for &v in tensor.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild the model from a checkpoint: the embedded config selects the
/// architecture, then every state tensor is overwritten from the file.
/// Missing, unknown, or mis-sized tensors are errors.
pub fn load(path: &Path) -> Result<(PadModel, ExperimentConfig)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint or unknown version",
            path.display()
        )));
    }
    let config_len = r.read_u32::<LittleEndian>()? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: config not UTF-8: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse_str(&config_text, &format!("{} (embedded config)", path.display()))?;

    // architecture from config; weights are all overwritten below, so the
    // seed only has to produce the right shapes
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = PadModel::new(&cfg, &mut rng)?;

    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut loaded: std::collections::HashMap<String, Vec<f64>> =
        std::collections::HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: tensor name not UTF-8: {e}", path.display())))?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut data = vec![0.0f64; count];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        if loaded.insert(name.clone(), data).is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: duplicate tensor `{name}`",
                path.display()
            )));
        }
    }

    for target in model.state_mut() {
        let Some(data) = loaded.remove(&target.name) else {
            return Err(Error::Checkpoint(format!(
                "{}: missing tensor `{}`",
                path.display(),
                target.name
            )));
        };
        if data.len() != target.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor `{}` has {} elements, expected {}",
                path.display(),
                target.name,
                data.len(),
                target.data.len()
            )));
        }
        target.data.copy_from_slice(&data);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{}: unknown tensor `{extra}`",
            path.display()
        )));
    }
    Ok((model, cfg))
}
