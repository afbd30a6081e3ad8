//! Flat little-endian parameter checkpoints.
//!
//! Layout: `"MSLW"`, version `u16`, tensor count `u32`, then per tensor:
//! name length `u32`, name bytes (UTF-8), ndim `u16`, dims `u32` each,
//! payload length in bytes `u64`, raw values. The element width is implied by
//! payload length over element count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Parameters, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSLW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn write_checkpoint<W: Write, T: Real>(mut w: W, tensors: &[NamedTensor<T>]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for nt in tensors {
        let name = nt.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(nt.tensor.shape().len() as u16).to_le_bytes())?;
        for &d in nt.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        buf.clear();
        for &v in nt.tensor.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&(buf.len() as u64).to_le_bytes())?;
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads a checkpoint whose values are stored with `T`'s width.
pub fn read_checkpoint<R: Read, T: Real>(mut r: R) -> Result<Vec<NamedTensor<T>>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::input(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::input(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::input("checkpoint tensor name is not UTF-8"))?;
        let ndim = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let payload_len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let n: usize = shape.iter().product();
        let width = T::DTYPE.size();
        if payload_len != n * width {
            return Err(Error::input(format!(
                "tensor {name}: payload of {payload_len} bytes for {n} values of width {width}"
            )));
        }
        let mut payload = vec![0u8; payload_len];
        r.read_exact(&mut payload)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}

pub fn save_params<T: Real>(path: &Path, cfg: &ModelConfig, params: &Parameters<T>) -> Result<()> {
    let named: Vec<NamedTensor<T>> = params
        .names(cfg)
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedTensor { name, tensor: t.clone() })
        .collect();
    write_checkpoint(BufWriter::new(File::create(path)?), &named)
}

/// Loads parameters for `cfg`, checking every name and shape.
pub fn load_params<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<Parameters<T>> {
    let stored: Vec<NamedTensor<T>> = read_checkpoint(BufReader::new(File::open(path)?))?;
    let mut params = Parameters::<T>::zeros(cfg)?;
    let names = params.names(cfg);
    if stored.len() != names.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, model expects {}",
            stored.len(),
            names.len()
        )));
    }
    for ((slot, name), nt) in params.tensors_mut().zip(&names).zip(stored) {
        if &nt.name != name || nt.tensor.shape() != slot.shape() {
            return Err(Error::config(format!(
                "checkpoint tensor {} {:?} does not match {name} {:?}",
                nt.name,
                nt.tensor.shape(),
                slot.shape()
            )));
        }
        *slot = nt.tensor;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = NamedTensor {
            name: "w".to_string(),
            tensor: Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[t]).unwrap();
        let mut expected = b"MSLW".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&8u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn params_roundtrip_through_file() {
        let cfg = ModelConfig::default_cnn(5);
        let params = Parameters::<f32>::init(&cfg, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.mslw");
        save_params(&path, &cfg, &params).unwrap();
        let back: Parameters<f32> = load_params(&path, &cfg).unwrap();
        assert_eq!(back, params);
        // width mismatch is caught
        assert!(load_params::<f64>(&path, &cfg).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let r = read_checkpoint::<_, f32>(&b"NOPE\x01\x00\x00\x00\x00\x00"[..]);
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
