//! Named parameter storage shared by modules, optimizers and checkpoints.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Whether a stored tensor is optimized or only carried along (running
/// statistics, power-iteration vectors).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

/// Ordered map of named variables. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct ParamStore {
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            entries: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&self, name: String, var: Var, kind: ParamKind) -> Result<()> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        entries.insert(name, Entry { var, kind });
        Ok(())
    }

    fn of_kind(&self, kind: ParamKind) -> Vec<(String, Var)> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.of_kind(ParamKind::Trainable)
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.of_kind(ParamKind::Buffer)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.lock().unwrap().get(name).map(|e| e.var.clone())
    }

    /// Total scalar count of trainable parameters whose name passes `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.trainable()
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Snapshot of every tensor (trainable and buffers), detached.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_detached_tensor()))
            .collect()
    }

    /// Overwrites every stored tensor from `tensors`; names and shapes must match exactly.
    pub fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let entries = self.entries.lock().unwrap();
        for (name, entry) in entries.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if t.dims() != entry.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.dims(),
                    entry.var.dims()
                )));
            }
            entry.var.set(&t.to_dtype(self.dtype)?)?;
        }
        let extra: Vec<&String> = tensors.keys().filter(|k| !entries.contains_key(*k)).collect();
        if !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensors in checkpoint: {extra:?}"
            )));
        }
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix, drawing initial values from
/// a seeded generator so construction is reproducible.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    rng: Arc<Mutex<ChaCha8Rng>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        ParamBuilder {
            store: store.clone(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store.clone(),
            rng: self.rng.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&self, name: &str, t: Tensor, kind: ParamKind) -> Result<Var> {
        let var = Var::from_tensor(&t.to_dtype(self.store.dtype)?)?;
        self.store.insert(self.full_name(name), var.clone(), kind)?;
        Ok(var)
    }

    fn normal_values(&self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).unwrap();
        let mut rng = self.rng.lock().unwrap();
        (0..n).map(|_| dist.sample(&mut *rng)).collect()
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let t = Tensor::from_vec(self.normal_values(n, std), shape, &Device::Cpu)?;
        self.register(name, t, ParamKind::Trainable)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &Device::Cpu)? * value)?;
        self.register(name, t, ParamKind::Trainable)
    }

    pub fn buffer_constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &Device::Cpu)? * value)?;
        self.register(name, t, ParamKind::Buffer)
    }

    /// A random unit-norm vector buffer.
    pub fn buffer_unit(&self, name: &str, len: usize) -> Result<Var> {
        let mut v = self.normal_values(len, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        let t = Tensor::from_vec(v, len, &Device::Cpu)?;
        self.register(name, t, ParamKind::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_seed_reproducible_and_prefixes_names() {
        let a = ParamStore::new(DType::F32);
        let b = ParamStore::new(DType::F32);
        for store in [&a, &b] {
            let pb = ParamBuilder::new(store, 9).pp("enc").pp("conv0");
            pb.normal("weight", &[4, 3], 0.02).unwrap();
            pb.buffer_unit("sn_u", 4).unwrap();
        }
        let (sa, sb) = (a.snapshot(), b.snapshot());
        assert_eq!(
            sa.keys().collect::<Vec<_>>(),
            vec!["enc.conv0.sn_u", "enc.conv0.weight"]
        );
        for (k, t) in &sa {
            let u = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let v = sb[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(u, v);
        }
        assert_eq!(a.trainable().len(), 1);
        assert_eq!(a.buffers().len(), 1);
    }

    #[test]
    fn restore_rejects_shape_mismatch_and_duplicates() {
        let store = ParamStore::new(DType::F32);
        let pb = ParamBuilder::new(&store, 0);
        pb.constant("w", &[2], 1.0).unwrap();
        assert!(pb.constant("w", &[2], 1.0).is_err());
        let mut bad = BTreeMap::new();
        bad.insert("w".to_string(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(store.restore(&bad).is_err());
    }
}
