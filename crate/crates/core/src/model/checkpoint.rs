//! Single-file checkpoints: one line of compact JSON holding the
//! [`ModelConfig`], a `\n`, then every parameter as little-endian `f64` in
//! build order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};

impl TransformerModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(self.config()).expect("config serializes");
        let mut out = Vec::with_capacity(header.len() + 1 + 8 * self.param_count());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for (_, p) in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let config: ModelConfig = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = TransformerModel::build(&config)?;
        let blob = &bytes[split + 1..];
        if blob.len() != 8 * model.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter blob has {} bytes, expected {}",
                blob.len(),
                8 * model.param_count()
            )));
        }
        let mut chunks = blob.chunks_exact(8);
        for (_, p) in model.params_mut() {
            for (v, c) in p.data_mut().iter_mut().zip(&mut chunks) {
                *v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
            }
        }
        Ok(model)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_checkpoint_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}
