//! Versioned binary checkpoints of named parameter arrays.
//!
//! Layout (little endian): magic `SPFGCKPT`, `u32` version, `u32` array count,
//! then per array a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! the `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::NetsError;

pub const MAGIC: &[u8; 8] = b"SPFGCKPT";
pub const VERSION: u32 = 1;
const MAX_NAME: u32 = 1 << 16;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NetsError> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(NetsError::Checkpoint(format!(
                "array '{name}' has {} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(NamedArray { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn corrupt(e: std::io::Error) -> NetsError {
    NetsError::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
}

impl Checkpoint {
    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, NetsError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| NetsError::Checkpoint(format!("missing array '{name}'")))
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for a in &self.arrays {
            out.write_u32::<LittleEndian>(a.name.len() as u32)?;
            out.write_all(a.name.as_bytes())?;
            out.write_u32::<LittleEndian>(a.shape.len() as u32)?;
            for d in &a.shape {
                out.write_u64::<LittleEndian>(*d as u64)?;
            }
            for v in &a.data {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        out.flush()
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, NetsError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != MAGIC {
            return Err(NetsError::Checkpoint("not a splatforge checkpoint".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != VERSION {
            return Err(NetsError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let count = input.read_u32::<LittleEndian>().map_err(corrupt)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = input.read_u32::<LittleEndian>().map_err(corrupt)?;
            if len > MAX_NAME {
                return Err(NetsError::Checkpoint(format!("array name length {len} too large")));
            }
            let mut name = vec![0u8; len as usize];
            input.read_exact(&mut name).map_err(corrupt)?;
            let name = String::from_utf8(name).map_err(|_| NetsError::Checkpoint("array name is not UTF-8".into()))?;
            let rank = input.read_u32::<LittleEndian>().map_err(corrupt)?;
            if rank > MAX_RANK {
                return Err(NetsError::Checkpoint(format!("array '{name}' has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(input.read_u64::<LittleEndian>().map_err(corrupt)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NetsError::Checkpoint(format!("array '{name}' shape overflows")))?;
            let mut data = Vec::new();
            for _ in 0..n {
                data.push(input.read_f64::<LittleEndian>().map_err(corrupt)?);
            }
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetsError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| NetsError::Io(format!("{}: {e}", path.display()));
        self.write_to(BufWriter::new(File::create(path).map_err(io)?))
            .map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetsError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| NetsError::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push(NamedArray::new("layer0.w", vec![2, 3], vec![1.0, -2.0, 0.5, 1e-300, f64::MAX, 0.0]).unwrap());
        c.push(NamedArray::new("scalar", vec![], vec![7.0]).unwrap());
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("scalar").unwrap().data, vec![7.0]);
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NamedArray::new("x", vec![2], vec![1.0]).is_err());
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        let err = Checkpoint::read_from(wrong.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 99"));
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
    }
}
