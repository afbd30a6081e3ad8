//! Wire frame: `"MSL1"`, msg_type u8, dtype u8, ndim u16, dims u32 × ndim,
//! payload_len u64, little-endian payload, CRC32 u32 over everything before
//! it.

use std::io::Read;

use crate::error::{Error, Result};
use crate::nn::{DType, Real, Tensor};

pub const FRAME_MAGIC: &[u8; 4] = b"MSL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Smashed = 1,
    SmashedGrad = 2,
    Labels = 3,
    LossReport = 4,
    ParamSync = 5,
    Bye = 6,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        use MsgType::*;
        [Hello, Smashed, SmashedGrad, Labels, LossReport, ParamSync, Bye]
            .into_iter()
            .find(|m| *m as u8 == code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn dtype(&self) -> DType {
        match self {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub shape: Vec<usize>,
    pub values: Values,
}

fn to_values<T: Real>(data: &[T]) -> Values {
    match T::DTYPE {
        DType::F32 => Values::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
        DType::F64 => Values::F64(data.iter().map(|v| v.as_f64()).collect()),
    }
}

impl Frame {
    /// Frame with no dims and no payload (HELLO, BYE).
    pub fn empty(msg_type: MsgType) -> Self {
        Self {
            msg_type,
            shape: Vec::new(),
            values: Values::F32(Vec::new()),
        }
    }

    pub fn from_tensor<T: Real>(msg_type: MsgType, t: &Tensor<T>) -> Self {
        Self {
            msg_type,
            shape: t.shape().to_vec(),
            values: to_values(t.data()),
        }
    }

    /// One-dimensional frame of `data`.
    pub fn vector<T: Real>(msg_type: MsgType, data: &[T]) -> Self {
        Self {
            msg_type,
            shape: vec![data.len()],
            values: to_values(data),
        }
    }

    /// Payload as a tensor of `T`; the wire dtype must match.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.values, T::DTYPE) {
            (Values::F32(v), DType::F32) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            (Values::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64(x)).collect(),
            (v, want) => {
                return Err(Error::protocol(
                    5,
                    format!("{:?} frame carries {:?}, expected {want:?}", self.msg_type, v.dtype()),
                ))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    /// Payload widened to f64 regardless of wire dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.values {
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F64(v) => v.clone(),
        }
    }

    pub fn header_len(&self) -> usize {
        4 + 1 + 1 + 2 + 4 * self.shape.len() + 8
    }

    pub fn payload_len(&self) -> usize {
        self.values.len() * self.values.dtype().size()
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.payload_len() + 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(FRAME_MAGIC);
        buf.push(self.msg_type as u8);
        buf.push(self.values.dtype().code());
        buf.extend_from_slice(&(self.shape.len() as u16).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.payload_len() as u64).to_le_bytes());
        match &self.values {
            Values::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            Values::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// Decodes exactly one frame occupying all of `buf`.
    pub fn decode(buf: &[u8]) -> Result<Frame> {
        let mut cursor = buf;
        let (frame, used) = read_frame(&mut cursor)?;
        if used != buf.len() {
            return Err(Error::protocol(used, format!("{} trailing bytes after frame", buf.len() - used)));
        }
        Ok(frame)
    }
}

/// Reader that tracks the offset for error reporting and keeps the bytes
/// read so far for the CRC.
struct Tracked<'a, R> {
    inner: &'a mut R,
    seen: Vec<u8>,
}

impl<R: Read> Tracked<'_, R> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let start = self.seen.len();
        self.seen.resize(start + n, 0);
        let mut filled = 0;
        while filled < n {
            match self.inner.read(&mut self.seen[start + filled..]) {
                Ok(0) => {
                    return Err(Error::protocol(
                        start + filled,
                        format!("truncated frame: needed {n} bytes, got {filled}"),
                    ))
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                    return Err(Error::Timeout(format!("no data after {} bytes of frame", start + filled)))
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(&self.seen[start..])
    }

    fn offset(&self) -> usize {
        self.seen.len()
    }
}

/// Reads one frame from a stream. Returns the frame and its encoded length.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Frame, usize)> {
    let mut t = Tracked { inner: r, seen: Vec::new() };
    let magic = t.take(4)?;
    if magic != FRAME_MAGIC {
        return Err(Error::protocol(0, format!("bad magic {magic:?}")));
    }
    let code = t.take(1)?[0];
    let msg_type = MsgType::from_code(code).ok_or_else(|| Error::protocol(4, format!("unknown msg_type {code}")))?;
    let dcode = t.take(1)?[0];
    let dtype = DType::from_code(dcode).ok_or_else(|| Error::protocol(5, format!("unknown dtype {dcode}")))?;
    let ndim = u16::from_le_bytes(t.take(2)?.try_into().expect("2 bytes")) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(t.take(4)?.try_into().expect("4 bytes")) as usize);
    }
    let len_offset = t.offset();
    let payload_len = u64::from_le_bytes(t.take(8)?.try_into().expect("8 bytes")) as usize;
    let count: usize = if ndim == 0 { 0 } else { shape.iter().product() };
    if payload_len != count * dtype.size() {
        return Err(Error::protocol(
            len_offset,
            format!("payload_len {payload_len} does not match dims {shape:?} at {dtype:?}"),
        ));
    }
    let payload_offset = t.offset();
    t.take(payload_len)?;
    let crc_offset = t.offset();
    let expected = crc32fast::hash(&t.seen);
    let got = u32::from_le_bytes(t.take(4)?.try_into().expect("4 bytes"));
    if got != expected {
        return Err(Error::protocol(crc_offset, format!("CRC mismatch: frame says {got:#010x}, computed {expected:#010x}")));
    }
    let payload = &t.seen[payload_offset..payload_offset + payload_len];
    let values = match dtype {
        DType::F32 => Values::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
        DType::F64 => Values::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
    };
    let used = t.seen.len();
    Ok((Frame { msg_type, shape, values }, used))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smashed_frame_size_arithmetic() {
        let t = Tensor::<f32>::from_fn(&[1, 64, 2, 2], |i| i as f32);
        let f = Frame::from_tensor(MsgType::Smashed, &t);
        assert_eq!(f.payload_len(), 1024);
        assert_eq!(f.header_len(), 4 + 1 + 1 + 2 + 16 + 8);
        let bytes = f.encode();
        assert_eq!(bytes.len(), 1024 + 32 + 4);
        assert_eq!(&bytes[..4], b"MSL1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 4);
    }

    #[test]
    fn roundtrip_every_type() {
        use MsgType::*;
        for m in [Hello, Smashed, SmashedGrad, Labels, LossReport, ParamSync, Bye] {
            let f = Frame::from_tensor(m, &Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * -0.5));
            assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        }
        let e = Frame::empty(Bye);
        assert_eq!(e.encoded_len(), 4 + 1 + 1 + 2 + 8 + 4);
        assert_eq!(Frame::decode(&e.encode()).unwrap(), e);
    }

    #[test]
    fn corruption_detected_with_offsets() {
        let f = Frame::from_tensor(MsgType::Smashed, &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32));
        let good = f.encode();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Frame::decode(&bad), Err(Error::Protocol { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Frame::decode(&bad), Err(Error::Protocol { offset: 4, .. })));

        let mut bad = good.clone();
        let last_payload = good.len() - 5;
        bad[last_payload] ^= 0x40;
        let crc_at = good.len() - 4;
        assert!(matches!(Frame::decode(&bad), Err(Error::Protocol { offset, .. }) if offset == crc_at));

        assert!(matches!(Frame::decode(&good[..good.len() - 1]), Err(Error::Protocol { .. })));
    }

    #[test]
    fn dtype_mismatch_on_extract() {
        let f = Frame::vector(MsgType::Labels, &[1.0f32, 2.0]);
        assert!(f.to_tensor::<f64>().is_err());
        assert_eq!(f.to_tensor::<f32>().unwrap().data(), &[1.0, 2.0]);
    }
}
