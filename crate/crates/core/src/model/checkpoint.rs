//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"LUDCKPT1"
//! u32 config_len, config as JSON
//! u32 n_tensors
//! repeated: u16 name_len, name, u32 rows, u32 cols, rows*cols f64
//! ```

use std::fs;
use std::path::Path;

use super::{CausalLM, ModelConfig, Params};
use crate::error::{LudError, Result};
use crate::jsonl::create_parent;

const MAGIC: &[u8; 8] = b"LUDCKPT1";

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad(self.path, "unexpected end of file"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn bad(path: &Path, message: impl Into<String>) -> LudError {
    LudError::BadCheckpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl CausalLM {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + self.params.num_parameters() * 8);
        out.extend_from_slice(MAGIC);
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(tensors) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        fs::write(path, self.to_bytes()?).map_err(|e| LudError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CausalLM> {
        let bytes = fs::read(path).map_err(|e| LudError::io(path, e))?;
        let mut r = Reader { buf: &bytes, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic)"));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| bad(path, format!("config: {e}")))?;
        config.validate()?;
        let mut params = Params::init(&ModelConfig {
            seed: 0,
            ..config.clone()
        });
        let names = params.names();
        let n = r.u32()? as usize;
        if n != names.len() {
            return Err(bad(path, format!("expected {} tensors, found {n}", names.len())));
        }
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let len = r.u16()? as usize;
            let got = std::str::from_utf8(r.take(len)?).map_err(|_| bad(path, "tensor name is not UTF-8"))?;
            if got != name {
                return Err(bad(path, format!("expected tensor {name}, found {got}")));
            }
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != t.dim() {
                return Err(bad(path, format!("{name}: shape ({rows}, {cols}) != {:?}", t.dim())));
            }
            let data = r.take(rows * cols * 8)?;
            for (v, chunk) in t.iter_mut().zip(data.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if !r.buf.is_empty() {
            return Err(bad(path, "trailing bytes"));
        }
        Ok(CausalLM { config, params })
    }

    /// Loads a checkpoint and checks it was trained for a vocabulary of `vocab_size`.
    pub fn load_expecting(path: &Path, vocab_size: usize) -> Result<CausalLM> {
        let m = CausalLM::load(path)?;
        if m.config.vocab_size != vocab_size {
            return Err(LudError::ConfigMismatch(format!(
                "{} has vocab_size {} but the pipeline vocabulary has {vocab_size}",
                path.display(),
                m.config.vocab_size
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CausalLM {
        CausalLM::new(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            max_seq_len: 16,
            vocab_size: 10,
            seed: 77,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        m.save(&path).unwrap();
        let back = CausalLM::load(&path).unwrap();
        assert_eq!(back, m);
        let probe = [1, 3, 4, 0, 9];
        assert_eq!(back.forward(&probe).unwrap(), m.forward(&probe).unwrap());
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn wrong_vocab_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model().save(&path).unwrap();
        assert!(matches!(
            CausalLM::load_expecting(&path, 11),
            Err(LudError::ConfigMismatch(_))
        ));
        assert!(CausalLM::load_expecting(&path, 10).is_ok());
        assert!(matches!(
            CausalLM::load(&dir.path().join("nope")),
            Err(LudError::Io { .. })
        ));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bytes = model().to_bytes().unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(CausalLM::load(&path), Err(LudError::BadCheckpoint { .. })));
        std::fs::write(&path, b"garbage!garbage!").unwrap();
        assert!(matches!(CausalLM::load(&path), Err(LudError::BadCheckpoint { .. })));
    }
}
