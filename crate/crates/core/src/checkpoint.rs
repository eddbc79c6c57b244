//! Self-contained model checkpoints: a JSON header (configuration +
//! vocabulary) followed by each named parameter in the tensor file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::model::{Model, ModelConfig};
use crate::tensor::io;

const MAGIC: &[u8; 4] = b"CMN1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
}

pub fn save(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        config: model.config.clone(),
        vocab: vocab.items().to_vec(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, p) in model.params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        io::write_tensor(&mut w, &p.shape, &p.data)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint. The stored parameter set must exactly match what the
/// stored configuration would create.
pub fn load(path: &Path) -> Result<(Model, Vocab)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint shorter than its magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("checkpoint truncated before header".into()))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("checkpoint truncated in header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let vocab = Vocab::from_items(header.vocab)?;
    if vocab.size() != header.config.vocab_size {
        return Err(Error::Consistency(format!(
            "checkpoint vocabulary has {} entries but the configuration says {}",
            vocab.size(),
            header.config.vocab_size
        )));
    }

    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("checkpoint truncated before parameters".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)
            .map_err(|_| Error::Format("checkpoint truncated in parameter name".into()))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("checkpoint truncated in parameter name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        let (shape, data) = io::read_tensor(&mut r)?;
        params.insert(name, shape, data);
    }

    // The stored parameters must cover exactly the names/shapes the config
    // implies; rebuilding a fresh model gives the reference layout.
    let reference = Model::new(header.config.clone(), 0)?;
    if reference.params.len() != params.len() {
        return Err(Error::Consistency(format!(
            "checkpoint carries {} parameters, configuration implies {}",
            params.len(),
            reference.params.len()
        )));
    }
    for (name, p) in reference.params.iter() {
        let stored = params.get(name).map_err(|_| {
            Error::Consistency(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if stored.shape != p.shape {
            return Err(Error::Consistency(format!(
                "parameter `{name}` has shape {:?}, configuration implies {:?}",
                stored.shape, p.shape
            )));
        }
    }
    Ok((
        Model {
            config: header.config,
            params,
        },
        vocab,
    ))
}

/// Load a checkpoint and reject it when its configuration differs from the
/// expected one.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<(Model, Vocab)> {
    let (model, vocab) = load(path)?;
    if &model.config != expected {
        return Err(Error::Consistency(format!(
            "checkpoint was built for a different configuration: stored {:?}, expected {:?}",
            model.config, expected
        )));
    }
    Ok((model, vocab))
}
