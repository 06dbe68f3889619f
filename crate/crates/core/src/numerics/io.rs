//! Raw tensor file format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"FGT1" | rank: u32 | extents: rank x u64 | values: row-major f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{FgstError, Result};

pub const MAGIC: &[u8; 4] = b"FGT1";

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FgstError::Format(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 16 {
        return Err(FgstError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() != n * 8 {
        return Err(FgstError::Format(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            n * 8,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| FgstError::Format(e.to_string()))
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 8 * tensor.rank() + 8 * tensor.len());
    write_tensor(&mut out, tensor).expect("writing to a Vec cannot fail");
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(bytes)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"FGT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"FGT2\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407))))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
            prop_assert_eq!(encode(&back), encode(&t));
        }
    }
}
