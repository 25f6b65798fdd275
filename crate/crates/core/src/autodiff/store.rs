use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors. Iteration is lexicographic by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

// FNV-1a, so per-parameter streams do not depend on std's hasher.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds a parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    /// The draw depends only on the store seed and the name.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, values)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Contract("parameter names must be non-empty".into()));
        }
        if self.tensors.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Binds a parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph, name: &str) -> Result<Var> {
        Ok(graph.param(name, self.get(name)?))
    }

    /// Adds the gradients of every leaf in `graph` that was bound from a
    /// parameter of this store.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (name, var) in graph.param_bindings() {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), graph.grad(*var)) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(|t| t.grad())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f32).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut blob = Vec::with_capacity(self.num_values() * 4);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for &v in t.values() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            seed: self.seed,
            blob: format!("{stem}.bin"),
            tensors: entries,
        };
        let mpath = dir.join(format!("{stem}.json"));
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::file(&mpath, e))?;
        let bpath = dir.join(&manifest.blob);
        fs::write(&bpath, blob).map_err(|e| Error::file(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let mpath = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&mpath).map_err(|e| Error::file(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bpath = dir.join(&manifest.blob);
        let blob = fs::read(&bpath).map_err(|e| Error::file(&bpath, e))?;
        let mut store = ParameterStore::new(manifest.seed);
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + n * 4;
            if end > blob.len() || entry.offset % 4 != 0 {
                return Err(Error::Checkpoint(format!(
                    "tensor {} points outside {}",
                    entry.name,
                    bpath.display()
                )));
            }
            let values = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(&entry.name, Tensor::new(&entry.shape, values)?)?;
        }
        Ok(store)
    }

    /// Rounds every value to f32 precision, matching what a save/load
    /// round trip produces.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    blob: String,
    tensors: Vec<ManifestEntry>,
}
