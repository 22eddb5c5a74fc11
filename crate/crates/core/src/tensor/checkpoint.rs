//! Parameter checkpoint files.
//!
//! Self-describing binary container: a magic string, a format version, and
//! one record per tensor (name, trainable flag, shape, raw little-endian
//! f64 payload). Entries are written in name order, so identical parameter
//! sets serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SGANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, entry) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[entry.trainable as u8])?;
        let shape = entry.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in entry.tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::FileFormat(format!(
            "{}: not a parameter checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FileFormat(format!(
            "{}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let count = read_u64(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::FileFormat("parameter name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::FileFormat("parameter name is not UTF-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let trainable = flag[0] != 0;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::FileFormat("tensor rank too large".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = if trainable {
            Tensor::param(&shape, data)?
        } else {
            Tensor::from_data(&shape, data)?
        };
        params.insert(&name, tensor, trainable);
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut params = ParamSet::new();
        params.insert(
            "conv.kernel",
            Tensor::param(&[2, 3, 1, 1], vec![0.5, -1.25, 3.0, 0.0, 9.5, -0.125]).unwrap(),
            true,
        );
        params.insert(
            "bn.running_mean",
            Tensor::from_data(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
            false,
        );
        save_params(&path, &params).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(
            loaded.get("conv.kernel").unwrap().to_vec(),
            params.get("conv.kernel").unwrap().to_vec()
        );
        assert_eq!(loaded.get("conv.kernel").unwrap().shape(), &[2, 3, 1, 1]);
        assert!(loaded.get("conv.kernel").unwrap().requires_grad());
        assert!(!loaded.get("bn.running_mean").unwrap().requires_grad());
        assert_eq!(params.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load_params(&path), Err(Error::FileFormat(_))));

        let path2 = dir.path().join("badver.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path2, bytes).unwrap();
        let err = load_params(&path2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn identical_sets_serialize_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.insert("w", Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_params(&a, &params).unwrap();
        save_params(&b, &params.deep_clone()).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
