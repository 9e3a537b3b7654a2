//! Named-tensor checkpoint container.
//!
//! Layout (all little-endian):
//!   magic  "NTC1"  (4 bytes)
//!   count  u32
//!   per entry:
//!     name_len u32, name bytes (utf-8)
//!     dtype    u8   (0 = f32)
//!     ndim     u8
//!     dims     u32 x ndim
//!     data     f32 x prod(dims)
//!
//! Values are stored as 32-bit floats. Files are written to a temp path and
//! renamed into place so a crash never leaves a partial checkpoint.

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            entries: Vec::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.entries.push((name.to_string(), t.cast::<f32>()));
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.entries.push((name.to_string(), Tensor::scalar(v as f32)));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.cast::<T>())
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} not found")))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let t = self.get::<f32>(name)?;
        Ok(t.as_slice()[0] as f64)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(0u8); // dtype f32
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)
            .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?
            .read_to_end(&mut data)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(Error::CorruptStream("checkpoint truncated".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| Error::Format("checkpoint name not utf-8".into()))?;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(Error::Format(format!("unsupported dtype {dtype}")));
            }
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, 4 * n)?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::from_vec(&shape, vals)?));
        }
        if pos != data.len() {
            return Err(Error::CorruptStream("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { entries })
    }
}

/// Save every parameter of a model (values, moments, grads excluded) under
/// `prefix`, plus the optimizer moments under `opt.` names.
pub fn pack_params<T: Scalar>(
    ck: &mut Checkpoint,
    model: &mut dyn crate::nn::param::Parameterized<T>,
    prefix: &str,
) {
    model.visit_params(&mut |name, _, p| {
        ck.insert(&format!("{prefix}.{name}"), &p.value);
        ck.insert(&format!("{prefix}.opt.m.{name}"), &p.m);
        ck.insert(&format!("{prefix}.opt.v.{name}"), &p.v);
    });
}

/// Restore parameters saved by `pack_params`. Missing optimizer moments are
/// tolerated (inference-only checkpoints).
pub fn unpack_params<T: Scalar>(
    ck: &Checkpoint,
    model: &mut dyn crate::nn::param::Parameterized<T>,
    prefix: &str,
) -> Result<()> {
    let mut err = None;
    model.visit_params(&mut |name, _, p| {
        if err.is_some() {
            return;
        }
        match ck.get::<T>(&format!("{prefix}.{name}")) {
            Ok(t) if t.shape() == p.value.shape() => p.value = t,
            Ok(t) => {
                err = Some(Error::Format(format!(
                    "checkpoint tensor {prefix}.{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            Err(e) => err = Some(e),
        }
        if let Ok(m) = ck.get::<T>(&format!("{prefix}.opt.m.{name}")) {
            p.m = m;
        }
        if let Ok(v) = ck.get::<T>(&format!("{prefix}.opt.v.{name}")) {
            p.v = v;
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut ck = Checkpoint::new();
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 2.5, -3.0, 0.0, 1e-7, 9.0]).unwrap();
        ck.insert("x", &t);
        ck.insert_scalar("step", 42.0);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.get::<f32>("x").unwrap().as_slice(), t.as_slice());
        assert_eq!(back.get_scalar("step").unwrap(), 42.0);
    }

    #[test]
    fn missing_file_reports_missing_checkpoint() {
        let res = Checkpoint::load(Path::new("/nonexistent/x.ckpt"));
        assert!(matches!(res, Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut ck = Checkpoint::new();
        ck.insert("x", &Tensor::<f32>::filled(&[16], 1.0));
        ck.save(&path).unwrap();
        let data = fs::read(&path).unwrap();
        fs::write(&path, &data[..data.len() - 5]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
