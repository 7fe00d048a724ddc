//! Model checkpoints: a config echo, an optional vocabulary, and every
//! parameter tensor by name.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic  8 bytes "MSCKPT01"
//! u64    config text length, then that many UTF-8 bytes
//! u64    vocabulary text length (0 = none), then that many bytes
//! u32    parameter count
//! per parameter: u64 name length, name bytes, tensor (tensor format)
//! ```
//!
//! Round-trips are bit-exact; loading rebuilds the encoder from the config
//! echo and overwrites its parameters, rejecting any name or shape
//! mismatch.

use crate::config::ConfigDoc;
use crate::model::{Encoder, ModelConfig};
use crate::tensor::serial;
use crate::text::Vocabulary;
use crate::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"MSCKPT01";

pub fn save(path: &std::path::Path, enc: &Encoder, vocab: Option<&Vocabulary>) -> Result<()> {
    let p = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut doc = ConfigDoc::new();
    enc.config.to_doc(&mut doc);
    let config_text = doc.to_text();
    let vocab_text = vocab.map(|v| v.to_text()).unwrap_or_default();

    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    header.extend_from_slice(config_text.as_bytes());
    header.extend_from_slice(&(vocab_text.len() as u64).to_le_bytes());
    header.extend_from_slice(vocab_text.as_bytes());
    header.extend_from_slice(&(enc.params.len() as u32).to_le_bytes());
    f.write_all(&header).map_err(|e| Error::io(&p, e))?;
    for (name, tensor) in enc.params.iter() {
        f.write_all(&(name.len() as u64).to_le_bytes()).map_err(|e| Error::io(&p, e))?;
        f.write_all(name.as_bytes()).map_err(|e| Error::io(&p, e))?;
        serial::write_tensor(&mut f, tensor).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<(Encoder, Option<Vocabulary>)> {
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(&p, e))?;
    if &magic != MAGIC {
        return Err(Error::Format { path: p, detail: "bad checkpoint magic".into() });
    }
    let config_text = read_block(&mut f, &p, 1 << 24)?;
    let vocab_text = read_block(&mut f, &p, 1 << 28)?;

    let doc = ConfigDoc::parse(&config_text)?;
    // The echo is complete, so defaults never apply; any valid stand-in works.
    let config = ModelConfig::from_doc(&doc, &checkpoint_defaults())?;
    let vocab = if vocab_text.is_empty() {
        None
    } else {
        Some(Vocabulary::from_text(&vocab_text)?)
    };

    let mut enc = Encoder::new(config, 0)?;
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4).map_err(|e| Error::io(&p, e))?;
    let count = u32::from_le_bytes(b4) as usize;
    if count != enc.params.len() {
        return Err(Error::Format {
            path: p,
            detail: format!("checkpoint has {count} parameters, config implies {}", enc.params.len()),
        });
    }
    for i in 0..count {
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b8).map_err(|e| Error::io(&p, e))?;
        let name_len = u64::from_le_bytes(b8) as usize;
        if name_len > 4096 {
            return Err(Error::Format { path: p, detail: "unreasonable parameter name".into() });
        }
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name).map_err(|e| Error::io(&p, e))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format { path: p.clone(), detail: "non-UTF-8 name".into() })?;
        let tensor = serial::read_tensor(&mut f, &p)?;
        let (expect_name, slot) = enc
            .params
            .iter_mut()
            .nth(i)
            .expect("index in range");
        if expect_name != name || slot.shape() != tensor.shape() {
            return Err(Error::Format {
                path: p,
                detail: format!(
                    "parameter {i}: checkpoint has {name:?} {:?}, config implies {expect_name:?} {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = tensor;
    }
    Ok((enc, vocab))
}

fn read_block(f: &mut std::fs::File, path: &str, cap: usize) -> Result<String> {
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > cap {
        return Err(Error::Format { path: path.into(), detail: format!("block of {len} bytes") });
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf)
        .map_err(|_| Error::Format { path: path.into(), detail: "non-UTF-8 block".into() })
}

/// Stand-in defaults for parsing a complete checkpoint echo.
fn checkpoint_defaults() -> ModelConfig {
    use crate::attention::ScaleSpec;
    use crate::model::{Arch, InputSpec, TaskHead};
    ModelConfig {
        arch: Arch::MultiScale,
        layers: 1,
        heads: 1,
        hidden_dim: 1,
        head_dim: 1,
        alpha: 0.0,
        candidates: vec![ScaleSpec::Fixed(1)],
        use_cls: false,
        use_positional: false,
        dropout: 0.0,
        input: InputSpec::Vectors { dim: 1 },
        task: TaskHead::Regressor { out_dim: 1 },
        max_len: 1,
    }
}
