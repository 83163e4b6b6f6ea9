//! "PSTN v1" binary tensor files.
//!
//! Layout: magic `PSTN`, version byte (1), dtype code (0 = f32, 1 = f64,
//! 2 = u8), rank byte, one zero pad byte, `rank` little-endian u64 dimension
//! sizes, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{PsgrError, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"PSTN";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

/// A decoded PSTN payload of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum PstnData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl PstnData {
    pub fn dtype(&self) -> DType {
        match self {
            PstnData::F32(_) => DType::F32,
            PstnData::F64(_) => DType::F64,
            PstnData::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            PstnData::F32(t) => t.shape(),
            PstnData::F64(t) => t.shape(),
            PstnData::U8 { shape, .. } => shape,
        }
    }

    /// Converts any float payload (or u8 labels) to the requested float type.
    pub fn into_float<T: Scalar>(self) -> Result<Tensor<T>> {
        match self {
            PstnData::F32(t) => t.cast(),
            PstnData::F64(t) => t.cast(),
            PstnData::U8 { shape, data } => {
                Tensor::new(&shape, data.into_iter().map(|v| T::from_f64(v as f64)).collect())
            }
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            PstnData::U8 { shape, data } => Ok((shape, data)),
            other => Err(PsgrError::Format(format!(
                "expected u8 payload, found {}",
                other.dtype().name()
            ))),
        }
    }
}

fn header(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    out.push(0);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = header(T::DTYPE, t.shape());
    out.reserve(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(PsgrError::shape("encode_u8", "element count mismatch"));
    }
    let mut out = header(DType::U8, shape);
    out.extend_from_slice(data);
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(PstnData, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(PsgrError::Format("truncated header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(PsgrError::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(PsgrError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| PsgrError::Format(format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(PsgrError::Format("truncated dimensions".into()));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b.copy_from_slice(c);
            u64::from_le_bytes(b) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    let end = dims_end + count * dtype.size_of();
    if bytes.len() < end {
        return Err(PsgrError::Format(format!(
            "payload truncated: need {} bytes, have {}",
            end,
            bytes.len()
        )));
    }
    let payload = &bytes[dims_end..end];
    let data = match dtype {
        DType::F32 => PstnData::F32(Tensor::new(
            &shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => PstnData::F64(Tensor::new(
            &shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
        DType::U8 => PstnData::U8 {
            shape,
            data: payload.to_vec(),
        },
    };
    Ok((data, end))
}

pub fn decode(bytes: &[u8]) -> Result<PstnData> {
    let (data, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(PsgrError::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(data)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn write_u8(path: impl AsRef<Path>, shape: &[usize], data: &[u8]) -> Result<()> {
    fs::write(path, encode_u8(shape, data)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<PstnData> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::new(&[2, 3], vec![1.0f32; 6]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], &[0x50, 0x53, 0x54, 0x4E, 1, 0, 2, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &3u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24 + 6 * 4);
    }

    #[test]
    fn rejects_unknown_header_fields() {
        let t = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let good = encode(&t);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 7;
        assert!(decode(&bad).is_err());
        assert!(decode(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn u8_payload() {
        let b = encode_u8(&[2, 2], &[0, 1, 2, 1]).unwrap();
        assert_eq!(b[5], 2);
        let (shape, data) = decode(&b).unwrap().into_u8().unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(data, vec![0, 1, 2, 1]);
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 0..=4), seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let t = rng.normal_tensor::<f64>(&dims);
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, PstnData::F64(t.clone()));
            let t32: Tensor<f32> = t.cast().unwrap();
            prop_assert_eq!(decode(&encode(&t32)).unwrap(), PstnData::F32(t32));
        }
    }
}
