//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CV2C"            magic
//! u16               version (1)
//! u64               training step
//! u64               seed
//! u32 + bytes       model config as key = value text (UTF-8)
//! u32               number of weight arrays
//! per array:
//!   u16 + bytes     name (UTF-8)
//!   u8              ndim
//!   ndim x u32      shape
//!   numel x f32     values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CV2C";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub weights: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64, seed: u64) -> Self {
        Self {
            config: model.config().clone(),
            step,
            seed,
            weights: model.params().clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        Model::from_store(self.config.clone(), self.weights.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (name, t) in self.weights.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, what };
        if r.take(4).map_err(|_| Error::BadMagic(what.into()))? != MAGIC {
            return Err(Error::BadMagic(what.into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let step = u64::from_le_bytes(r.array()?);
        let seed = u64::from_le_bytes(r.array()?);
        let len = u32::from_le_bytes(r.array()?) as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Malformed(format!("{what}: config is not UTF-8")))?;
        let config = ModelConfig::from_text(text)?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut weights = ParamStore::new();
        for _ in 0..count {
            let n = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Malformed(format!("{what}: weight name is not UTF-8")))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if weights.id(&name).is_some() {
                return Err(Error::Malformed(format!("{what}: duplicate weight {name}")));
            }
            weights.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{what}: trailing bytes")));
        }
        Ok(Self {
            config,
            step,
            seed,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{} at offset {}", self.what, self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let model: Model<f32> = Model::new(ModelConfig::micro(3), 5).unwrap();
        let ck = Checkpoint::from_model(&model, 12, 5);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes, "mem").unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.config, *model.config());
        assert_eq!(back.encode(), bytes);
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(Checkpoint::decode(&bad, "m"), Err(Error::BadMagic(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 2], "m"), Err(Error::Truncated(_))));
    }
}
