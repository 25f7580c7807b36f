//! Named tensor store and its `WTS1` on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "VOXMTWT1"            8 bytes
//! count   u32
//! entry*  u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, f32 payload (row-major)
//! ```
//!
//! Entries are written in lexicographic name order so that a store always
//! serializes to the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"VOXMTWT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "tensor dims {dims:?} hold {n} values but payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Named tensors, e.g. `enc.s2.conv0.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing weight tensor `{name}`")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn get_shaped(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.dims != dims {
            return Err(Error::config(format!(
                "weight `{name}` has shape {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::config(format!("weight name too long: {name}")));
            }
            if t.rank() > u8::MAX as usize {
                return Err(Error::config(format!("weight `{name}` has rank {}", t.rank())));
            }
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            w.write_u8(t.rank() as u8)?;
            for &d in &t.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::input("not a weight store (bad magic)"));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::input("weight name is not valid UTF-8"))?;
            let rank = r.read_u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            store.insert(name, Tensor { dims, data });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_fixed() {
        let mut ws = WeightStore::new();
        ws.insert("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut buf = Vec::new();
        ws.write_to(&mut buf).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"VOXMTWT1");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'a');
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip() {
        let mut ws = WeightStore::new();
        ws.insert("enc.s1.conv0.weight", Tensor::new(vec![27, 2, 3], (0..162).map(|i| i as f32 * 0.5).collect()).unwrap());
        ws.insert("enc.s1.conv0.bias", Tensor::zeros(vec![3]));
        ws.insert("scalar", Tensor::new(vec![], vec![7.0]).unwrap());
        let mut buf = Vec::new();
        ws.write_to(&mut buf).unwrap();
        let back = WeightStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ws);
    }

    #[test]
    fn bad_magic_and_shape_errors() {
        assert!(matches!(WeightStore::read_from(&b"NOTMAGIC\0\0\0\0"[..]), Err(Error::Input(_))));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let ws = WeightStore::new();
        let err = ws.get("dec.s1.lateral.weight").unwrap_err();
        assert!(err.to_string().contains("dec.s1.lateral.weight"));
    }
}
