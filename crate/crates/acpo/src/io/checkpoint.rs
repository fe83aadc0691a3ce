//! Binary checkpoint format.
//!
//! Layout: magic `ACPO1\n`, a length-prefixed config echo (the model section
//! in canonical key=value form), the block count, then per block a
//! length-prefixed name, shape, trainable flag and row-major little-endian
//! f64 data, and finally a SHA-256 digest of everything before it. Loading
//! verifies the digest; save-then-load is a bitwise identity.

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::{Block, ModelConfig, ModelParams, ALL_BLOCKS};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8] = b"ACPO1\n";

fn config_echo(cfg: &ModelConfig) -> String {
    format!(
        "model.d_audio={}\nmodel.d_video={}\nmodel.d_model={}\nmodel.vocab_size={}\nmodel.max_len={}\nmodel.seed={}\n",
        cfg.d_audio, cfg.d_video, cfg.d_model, cfg.vocab_size, cfg.max_len, cfg.seed
    )
}

fn parse_config_echo(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("malformed checkpoint config line {line:?}")))?;
        let parse = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Data(format!("bad checkpoint config value {v:?}")))
        };
        match key {
            "model.d_audio" => cfg.d_audio = parse(value)?,
            "model.d_video" => cfg.d_video = parse(value)?,
            "model.d_model" => cfg.d_model = parse(value)?,
            "model.vocab_size" => cfg.vocab_size = parse(value)?,
            "model.max_len" => cfg.max_len = parse(value)?,
            "model.seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| Error::Data(format!("bad checkpoint seed {value:?}")))?
            }
            other => return Err(Error::Data(format!("unknown checkpoint config key {other:?}"))),
        }
    }
    Ok(cfg)
}

/// Serializes the parameters; the returned bytes end with the digest.
pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let echo = config_echo(params.config());
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(ALL_BLOCKS.len() as u32).to_le_bytes());
    for block in ALL_BLOCKS {
        let t = params.block(block);
        let name = block.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        out.push(u8::from(params.is_trainable(block)));
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex digest of a serialized checkpoint (the trailing 32 bytes).
pub fn digest_hex(params: &ModelParams) -> String {
    let bytes = to_bytes(params);
    bytes[bytes.len() - 32..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&to_bytes(params))?;
    file.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Data("checkpoint too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::Data(
            "checkpoint digest mismatch; refusing to load".into(),
        ));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let echo_len = cur.u32()? as usize;
    let echo = std::str::from_utf8(cur.take(echo_len)?)
        .map_err(|_| Error::Data("checkpoint config echo is not utf-8".into()))?;
    let config = parse_config_echo(echo)?;
    config.validate().map_err(|e| Error::Data(e.to_string()))?;

    let mut params = ModelParams::init(config)?;
    let n_blocks = cur.u32()? as usize;
    if n_blocks != ALL_BLOCKS.len() {
        return Err(Error::Data(format!(
            "checkpoint has {n_blocks} blocks, expected {}",
            ALL_BLOCKS.len()
        )));
    }
    let mut trainable: Vec<Block> = Vec::new();
    for _ in 0..n_blocks {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Data("checkpoint block name is not utf-8".into()))?
            .to_string();
        let block = Block::from_name(&name)
            .ok_or_else(|| Error::Data(format!("unknown checkpoint block {name:?}")))?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let flag = cur.take(1)?[0];
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        params
            .set_block(block, Tensor::new(rows, cols, data)?)
            .map_err(|e| Error::Data(e.to_string()))?;
        if flag != 0 {
            trainable.push(block);
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Data("trailing bytes after checkpoint blocks".into()));
    }
    params
        .set_trainable(&trainable)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(params)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let mut p = ModelParams::init(ModelConfig {
            seed: 33,
            ..ModelConfig::default()
        })
        .unwrap();
        p.set_trainable(&[Block::WAudio, Block::BAudio]).unwrap();
        p
    }

    #[test]
    fn save_load_is_bitwise_identity() {
        let p = params();
        let bytes = to_bytes(&p);
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&q), bytes);
        for b in ALL_BLOCKS {
            assert_eq!(p.block(b).data(), q.block(b).data());
            assert_eq!(p.is_trainable(b), q.is_trainable(b));
        }
        assert_eq!(p.config(), q.config());
    }

    #[test]
    fn digest_is_stable_and_tamper_evident() {
        let p = params();
        assert_eq!(digest_hex(&p), digest_hex(&p));

        let mut bytes = to_bytes(&p);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let p = params();
        let mut bytes = to_bytes(&p);
        bytes[0] = b'X';
        // Digest now mismatches first; rebuild it to reach the magic check.
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = params();
        save(&p, &path).unwrap();
        let q = load(&path).unwrap();
        assert_eq!(to_bytes(&p), to_bytes(&q));
    }
}
