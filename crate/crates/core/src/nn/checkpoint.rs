//! Binary checkpoint container. All integers and floats are little-endian:
//!
//! ```text
//! magic          8 bytes  "CTSCKPT\0"
//! version        u32      1
//! arch id        u32 length + UTF-8 bytes
//! input rank     u32, then that many u64 extents
//! num classes    u64
//! seed           u64
//! step           u64
//! param count    u64, then that many f64 (all parameters, model order)
//! buffer count   u64, then that many f64 (momentum, same order; 0 if none)
//! ```

use std::path::Path;

use super::{Arch, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTSCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelState, step: u64, momentum: Option<&[Tensor]>) -> Self {
        Checkpoint {
            arch: model.arch,
            input_shape: model.input_shape.clone(),
            num_classes: model.num_classes,
            seed: model.seed,
            step,
            params: model.flat_params(),
            buffers: momentum
                .map(|m| m.iter().flat_map(|t| t.data().to_vec()).collect())
                .unwrap_or_default(),
        }
    }

    /// Rebuilds the model skeleton and loads the stored parameters.
    pub fn to_model(&self) -> Result<ModelState> {
        let mut model = ModelState::build(self.arch, &self.input_shape, self.num_classes, self.seed)?;
        model.set_flat_params(&self.params)?;
        Ok(model)
    }

    /// Momentum buffers shaped like `model`'s parameters, if stored.
    pub fn momentum_for(&self, model: &ModelState) -> Result<Option<Vec<Tensor>>> {
        if self.buffers.is_empty() {
            return Ok(None);
        }
        if self.buffers.len() != model.num_params() {
            return Err(Error::Format("optimizer buffer length mismatch".into()));
        }
        let mut offset = 0;
        let mut out = Vec::new();
        for p in &model.params {
            let n = p.numel();
            out.push(Tensor::new(p.shape().to_vec(), self.buffers[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Some(out))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.params.len() + self.buffers.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let id = self.arch.id().as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &e in &self.input_shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in [self.num_classes as u64, self.seed, self.step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for block in [&self.params, &self.buffers] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let id_len = r.u32()? as usize;
        let at = r.pos;
        let id = std::str::from_utf8(r.take(id_len)?).map_err(|_| Error::Parse {
            offset: at,
            msg: "arch id is not UTF-8".into(),
        })?;
        let arch: Arch = id.parse()?;
        let rank = r.u32()? as usize;
        let input_shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let num_classes = r.u64()? as usize;
        let seed = r.u64()?;
        let step = r.u64()?;
        let params = r.f64_block()?;
        let buffers = r.f64_block()?;
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(Checkpoint {
            arch,
            input_shape,
            num_classes,
            seed,
            step,
            params,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated: wanted {n} more bytes"),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_block(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.saturating_mul(8))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = ModelState::build(Arch::LenetConv4, &[1, 8, 8], 4, 21).unwrap();
        let momentum: Vec<Tensor> = m.params.iter().map(|p| p.map(|v| v * 0.5)).collect();
        let ck = Checkpoint::from_model(&m, 17, Some(&momentum));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.momentum_for(&m).unwrap().unwrap(), momentum);
    }

    #[test]
    fn corrupt_input_reports_offset() {
        let m = ModelState::build(Arch::TinyMlp, &[2], 2, 0).unwrap();
        let bytes = Checkpoint::from_model(&m, 0, None).to_bytes();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
