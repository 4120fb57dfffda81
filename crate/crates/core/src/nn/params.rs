//! Named parameter storage, initialization, and the on-disk checkpoint
//! format: a text manifest of names and shapes followed by the raw tensor
//! data as little-endian 64-bit floats, flat and in manifest order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &str = "PEDCAST-CKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic line {0:?}")]
    BadMagic(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("bad manifest line {0:?}")]
    BadManifest(String),
    #[error("tensor data truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after tensor data")]
    TrailingData(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Ordered, named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a tensor under a unique whitespace-free name.
    pub fn add(&mut self, name: &str, t: Tensor) -> Result<usize, NnError> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(NnError::BadParamName(name.to_string()));
        }
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.entries.push((name.to_string(), t));
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn slot(&self, name: &str) -> Result<usize, NnError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.entries[self.slot(name)?].1)
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn name_of(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC} v{VERSION}")?;
        for (name, t) in &self.entries {
            write!(out, "tensor {name}")?;
            for d in t.shape() {
                write!(out, " {d}")?;
            }
            writeln!(out)?;
        }
        writeln!(out, "DATA")?;
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header = line.trim_end_matches('\n');
        if header != format!("{MAGIC} v{VERSION}") {
            return match header.strip_prefix(&format!("{MAGIC} v")) {
                Some(v) => match v.parse::<u32>() {
                    Ok(n) => Err(CheckpointError::UnsupportedVersion(n)),
                    Err(_) => Err(CheckpointError::BadMagic(header.to_string())),
                },
                None => Err(CheckpointError::BadMagic(header.to_string())),
            };
        }

        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let mut l = String::new();
            if reader.read_line(&mut l)? == 0 {
                return Err(CheckpointError::BadManifest("missing DATA marker".into()));
            }
            let l = l.trim_end_matches('\n');
            if l == "DATA" {
                break;
            }
            let mut parts = l.split(' ');
            if parts.next() != Some("tensor") {
                return Err(CheckpointError::BadManifest(l.to_string()));
            }
            let name = parts
                .next()
                .ok_or_else(|| CheckpointError::BadManifest(l.to_string()))?
                .to_string();
            let dims = parts
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CheckpointError::BadManifest(l.to_string()))?;
            manifest.push((name, dims));
        }

        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        let expected: usize = manifest
            .iter()
            .map(|(_, d)| d.iter().product::<usize>() * 8)
            .sum();
        if blob.len() < expected {
            return Err(CheckpointError::Truncated { expected, got: blob.len() });
        }
        if blob.len() > expected {
            return Err(CheckpointError::TrailingData(blob.len() - expected));
        }

        let mut store = ParamStore::new();
        let mut off = 0;
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = blob[off..off + n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            off += n * 8;
            store.add(&name, Tensor::from_vec(&dims, data)?)?;
        }
        Ok(store)
    }
}

/// Caches one graph node per parameter so every use site of a shared weight
/// gets the same `Var` (and gradients accumulate in one buffer).
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, bound: vec![None; store.len()] }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var, NnError> {
        let slot = self.store.slot(name)?;
        if let Some(v) = self.bound[slot] {
            return Ok(v);
        }
        let v = g.param_leaf(slot, self.store.by_slot(slot).clone());
        self.bound[slot] = Some(v);
        Ok(v)
    }
}

/// Zero-mean normal with He scaling: std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller keeps the dependency surface small and the stream
        // reproducible across rand versions.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        data.push(r * c * std);
        if data.len() < n {
            data.push(r * s * std);
        }
    }
    Tensor::from_vec(shape, data).expect("shape/product match")
}

/// Adds `<name>.w` (kh, kw, ic, oc) and `<name>.b` (oc) for a conv layer.
pub fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    kh: usize,
    kw: usize,
    ic: usize,
    oc: usize,
) -> Result<(), NnError> {
    store.add(&format!("{name}.w"), he_normal(rng, &[kh, kw, ic, oc], kh * kw * ic))?;
    store.add(&format!("{name}.b"), Tensor::zeros(&[oc]))?;
    Ok(())
}

/// Adds `<name>.w` (i, o) and `<name>.b` (o) for a fully connected layer.
pub fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    i: usize,
    o: usize,
) -> Result<(), NnError> {
    store.add(&format!("{name}.w"), he_normal(rng, &[i, o], i))?;
    store.add(&format!("{name}.b"), Tensor::zeros(&[o]))?;
    Ok(())
}
