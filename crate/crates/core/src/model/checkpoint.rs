//! Binary checkpoint: magic, version, JSON header, raw little-endian f64 data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TOKSUMCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    code_vocab: Vocabulary,
    summary_vocab: Vocabulary,
    trained_steps: u64,
    params: Vec<(String, Vec<usize>)>,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        code_vocab: model.code_vocab.clone(),
        summary_vocab: model.summary_vocab.clone(),
        trained_steps: model.trained_steps,
        params: model
            .params
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 8 * model.params.num_scalars() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let fail = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| fail("truncated"))?;
    if body.len() < header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let mut model = Model::new(header.config, header.code_vocab, header.summary_vocab, 0)?;
    model.trained_steps = header.trained_steps;
    if model.params.len() != header.params.len() {
        return Err(fail("parameter count does not match config"));
    }
    let mut data = body[header_len..].chunks_exact(8);
    for (p, (name, shape)) in model.params.params_mut().iter_mut().zip(&header.params) {
        if &p.name != name || p.value.shape() != shape.as_slice() {
            return Err(fail(&format!("parameter {name} does not match config")));
        }
        for v in p.value.data_mut() {
            let chunk = data.next().ok_or_else(|| fail("truncated data"))?;
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(fail("trailing bytes"));
    }
    Ok(model)
}

/// Write atomically (temporary file then rename).
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}
