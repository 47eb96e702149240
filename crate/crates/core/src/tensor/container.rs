//! `HTK1` tensor container: magic, dtype code, rank, little-endian u32
//! extents, then raw little-endian values in row-major order.

use std::fs;
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HTK1";

/// A tensor read without knowing its element type in advance.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`, casting if the stored dtype differs.
    pub fn into_tensor<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode<T: Real>(shape: Vec<usize>, body: &[u8]) -> Option<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if body.len() != numel * T::BYTES {
        return None;
    }
    let data = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data).ok()
}

pub fn read_tensor_bytes(bytes: &[u8], origin: &Path) -> Result<AnyTensor> {
    let bad = |detail: &str| Error::Format { path: origin.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing HTK1 magic"));
    }
    let (dtype, rank) = (bytes[4], bytes[5] as usize);
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> =
        bytes[6..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
    let body = &bytes[header..];
    match dtype {
        0 => decode::<f32>(shape, body).map(AnyTensor::F32),
        1 => decode::<f64>(shape, body).map(AnyTensor::F64),
        _ => return Err(bad(&format!("unknown dtype code {dtype}"))),
    }
    .ok_or_else(|| bad("payload length does not match shape"))
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, write_tensor_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = write_tensor_bytes(&t);
        assert_eq!(&b[..4], b"HTK1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = write_tensor_bytes(&t);
        b.pop();
        assert!(read_tensor_bytes(&b, Path::new("x")).is_err());
        let mut b = write_tensor_bytes(&t);
        b[0] = b'X';
        assert!(read_tensor_bytes(&b, Path::new("x")).is_err());
        let mut b = write_tensor_bytes(&t);
        b[4] = 9;
        assert!(read_tensor_bytes(&b, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) ^ (i as u64)) ).map(|v| if v.is_nan() { 0.5 } else { v }).collect();
            let t = Tensor::new(shape.clone(), data).unwrap();
            let bytes = write_tensor_bytes(&t);
            let back = read_tensor_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(write_tensor_bytes(&back.clone().into_tensor::<f64>()), bytes);
            prop_assert_eq!(back, AnyTensor::F64(t.clone()));
            let t32: Tensor<f32> = t.cast();
            let b32 = write_tensor_bytes(&t32);
            prop_assert_eq!(read_tensor_bytes(&b32, Path::new("mem")).unwrap(), AnyTensor::F32(t32));
        }
    }
}
