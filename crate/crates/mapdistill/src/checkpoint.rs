//! Parameter checkpoints.
//!
//! A checkpoint directory holds `params.bin` (magic `MDPARAM1`, entry count,
//! then per entry a length-prefixed name and a tensor blob, all integers
//! u64 LE) and `manifest.txt` with the role, config hash and parameter
//! digest, followed by one `param NAME = D1xD2` line per tensor. Loading
//! verifies the digest.

use std::path::Path;

use mapdistill_core::params::ParamSet;
use mapdistill_core::{Error as CoreError, Tensor};

use crate::dataset::{read_text, write_text};
use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"MDPARAM1";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&t.to_blob());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> std::result::Result<&'a [u8], CoreError> {
    let s = bytes
        .get(*at..at.saturating_add(n))
        .ok_or_else(|| CoreError::Decode(format!("checkpoint truncated while reading {what}")))?;
    *at += n;
    Ok(s)
}

fn take_u64(bytes: &[u8], at: &mut usize, what: &str) -> std::result::Result<u64, CoreError> {
    Ok(u64::from_le_bytes(take(bytes, at, 8, what)?.try_into().expect("8 bytes")))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamSet, CoreError> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != MAGIC {
        return Err(CoreError::Decode("not a parameter checkpoint (bad magic)".into()));
    }
    let count = take_u64(bytes, &mut at, "entry count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = take_u64(bytes, &mut at, "name length")? as usize;
        let name = std::str::from_utf8(take(bytes, &mut at, len, "name")?)
            .map_err(|_| CoreError::Decode("parameter name is not UTF-8".into()))?
            .to_string();
        if params.get(&name).is_some() {
            return Err(CoreError::Decode(format!("duplicate parameter {name}")));
        }
        let (t, used) = Tensor::from_blob(&bytes[at..])?;
        at += used;
        params.push(name, t);
    }
    if at != bytes.len() {
        return Err(CoreError::Decode(format!("{} trailing bytes after the last parameter", bytes.len() - at)));
    }
    Ok(params)
}

pub fn save(dir: &Path, role: &str, config_hash: &str, params: &ParamSet) -> Result<()> {
    let bin = dir.join(PARAMS_FILE);
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    std::fs::write(&bin, encode(params)).map_err(|e| CliError::io(&bin, e))?;
    let mut manifest = format!(
        "role = {role}\nconfig_hash = {config_hash}\nparams_digest = {}\nparameters = {}\nscalars = {}\n",
        params.digest(),
        params.len(),
        params.num_scalars()
    );
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("param {name} = {}\n", dims.join("x")));
    }
    write_text(&dir.join(MANIFEST_FILE), &manifest)
}

fn manifest_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim())
    })
}

/// Loads a checkpoint and checks it was saved with the expected role.
pub fn load(dir: &Path, role: &str) -> Result<ParamSet> {
    let bin = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&bin).map_err(|e| CliError::io(&bin, e))?;
    let params = decode(&bytes)?;
    let manifest = read_text(&dir.join(MANIFEST_FILE))?;
    match manifest_value(&manifest, "role") {
        Some(r) if r == role => {}
        other => {
            return Err(CoreError::Validation(format!("{}: expected a {role} checkpoint, found {other:?}", dir.display())).into())
        }
    }
    if manifest_value(&manifest, "params_digest") != Some(params.digest().as_str()) {
        return Err(CoreError::Decode(format!("{}: parameter digest does not match the manifest", dir.display())).into());
    }
    Ok(params)
}
