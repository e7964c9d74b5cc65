//! Portable tensor files: magic "BDTF", a format version byte, a dtype
//! byte (0 = f32), a rank byte, little-endian u32 extents, then the
//! row-major little-endian f32 payload. Used for model checkpoints and
//! trigger patterns.

use std::fs;
use std::path::Path;

use poisonlab_core::trigger::TriggerPattern;
use poisonlab_core::Tensor;

use crate::error::{LabError, LabResult};

pub const MAGIC: &[u8; 4] = b"BDTF";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + tensor.shape().len() * 4 + tensor.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(tensor.shape().len() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> LabResult<Tensor> {
    let fail = |msg: String| LabError::format(path, msg);
    if bytes.len() < 7 {
        return Err(fail(format!("{} bytes is too short for a BDTF header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, expected BDTF".into()));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported format version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(fail(format!("unsupported dtype {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + rank * 4;
    if bytes.len() < header {
        return Err(fail(format!("truncated extents: rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + i * 4;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let expect = header + numel * 4;
    if bytes.len() != expect {
        return Err(fail(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            numel * 4
        )));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(e.to_string()))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> LabResult<()> {
    fs::write(path, encode(tensor)).map_err(|e| LabError::io(path, e))
}

pub fn read_tensor(path: &Path) -> LabResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes, path)
}

/// Trigger patterns persist as a (values, mask) pair of tensor files for
/// audit and reuse.
pub fn write_pattern(dir: &Path, pattern: &TriggerPattern) -> LabResult<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    write_tensor(&dir.join("values.bdtf"), &pattern.values)?;
    write_tensor(&dir.join("mask.bdtf"), &pattern.mask)
}

pub fn read_pattern(dir: &Path) -> LabResult<TriggerPattern> {
    let values = read_tensor(&dir.join("values.bdtf"))?;
    let mask = read_tensor(&dir.join("mask.bdtf"))?;
    if values.shape() != mask.shape() {
        return Err(LabError::format(
            dir,
            format!("values shape {:?} != mask shape {:?}", values.shape(), mask.shape()),
        ));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(LabError::format(dir, "mask entries must be 0 or 1"));
    }
    Ok(TriggerPattern { values, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use poisonlab_core::rng::SplitMix64;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = SplitMix64::new(1);
        let mut t = Tensor::zeros(&[3, 4, 2]);
        for v in t.data_mut() {
            *v = rng.normal();
        }
        let dir = std::env::temp_dir().join("bdtf_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bdtf");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let back_bits: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, back_bits);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = Tensor::scalar(2.5);
        let bytes = encode(&t);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes.len(), 7 + 4);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn pattern_pair_roundtrip() {
        use poisonlab_core::trigger::{make_square, SQUARE_FRAC};
        let pattern = make_square(16, 16, SQUARE_FRAC, SQUARE_FRAC, [0.0; 3]).unwrap();
        let dir = std::env::temp_dir().join(format!("bdtf_pattern_{}", std::process::id()));
        write_pattern(&dir, &pattern).unwrap();
        let back = read_pattern(&dir).unwrap();
        assert_eq!(back.values.data(), pattern.values.data());
        assert_eq!(back.mask.data(), pattern.mask.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let t = Tensor::filled(&[2, 2], 1.0);
        let good = encode(&t);
        let p = Path::new("mem");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic, p).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version, p).is_err());

        let mut bad_dtype = good.clone();
        bad_dtype[5] = 7;
        assert!(decode(&bad_dtype, p).is_err());

        let truncated = &good[..good.len() - 3];
        assert!(decode(truncated, p).is_err());
    }
}
