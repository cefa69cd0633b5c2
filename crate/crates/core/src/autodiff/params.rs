//! Named parameter tensors and their on-disk container.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"LIESAPS1"
//! u64 header_len, header_len bytes of JSON {"seed", "config_hash", "count"}
//! count records of:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank x u64 extents
//!   product(extents) x f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Precision, Tensor};
use crate::error::{Error, Result};
use crate::rng::seeded;

const MAGIC: &[u8; 8] = b"LIESAPS1";

/// Named learnable tensors. Names are unique; iteration order is sorted by name.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    seed: u64,
    config_hash: String,
    count: usize,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Inserts a new parameter; the tensor is turned into a gradient-tracking leaf.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value.requires_grad());
        Ok(())
    }

    /// Replaces the value of an existing parameter.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParameterStore::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value.with_precision(slot.precision()).requires_grad();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Re-stores every parameter at `precision`.
    pub fn set_precision(&mut self, precision: Precision) {
        for t in self.params.values_mut() {
            *t = t.with_precision(precision).requires_grad();
        }
    }

    /// Adds a `fan_in x fan_out` weight and `1 x fan_out` bias, both drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. Draws come from a stream derived
    /// from the store seed and the parameter name, so insertion order does not
    /// matter.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.init_uniform(&format!("{prefix}.weight"), fan_in, fan_out, bound)?;
        if bias {
            self.init_uniform(&format!("{prefix}.bias"), 1, fan_out, bound)?;
        }
        Ok(())
    }

    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<()> {
        let mut rng = seeded(crate::rng::derive_seed(self.seed, name_hash(name)));
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<()> {
        self.insert(name, Tensor::full(rows, cols, v))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let header = serde_json::to_vec(&Header {
            seed: self.seed,
            config_hash: config_hash.to_string(),
            count: self.params.len(),
        })?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for (name, t) in &self.params {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&2u32.to_le_bytes())?;
            for e in t.shape() {
                f.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Loads a container, returning the store and the recorded config hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header_len = read_u64(&mut f)? as usize;
        let mut header = vec![0u8; header_len];
        f.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut store = ParameterStore::new(header.seed);
        for _ in 0..header.count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(&mut f)? as usize;
            let dims = (0..rank).map(|_| read_u64(&mut f).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::Format(format!("rank {rank} tensor `{name}` not supported"))),
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                f.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::from_vec(rows, cols, data)?)?;
        }
        Ok((store, header.config_hash))
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// FNV-1a, used to derive per-parameter init streams.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
