//! Named, grouped parameter storage.
//!
//! Every tensor has a dotted name whose first component is its group
//! (`S3.block.dw.weight` belongs to `S3`). Groups are the unit of freezing.
//! Initial values are drawn from a generator seeded by `(seed, name)`, so a
//! tensor's initial value does not depend on which other tensors exist.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Whether the optimizer may update a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Running statistics and fixed constants: saved, never optimized.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He initialization, `std = sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub var: Var,
    pub group: String,
    pub kind: ParamKind,
}

#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, ParamEntry>,
    frozen: BTreeSet<String>,
}

fn tensor_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// The group a dotted tensor name belongs to.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            seed,
            dtype,
            device,
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new tensor and returns a handle sharing its storage.
    pub fn add(&mut self, name: &str, kind: ParamKind, shape: &[usize], init: Init) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let std = match init {
            Init::Zeros => return self.insert(name, kind, vec![0.0; n], shape),
            Init::Ones => return self.insert(name, kind, vec![1.0; n], shape),
            Init::Constant(v) => return self.insert(name, kind, vec![v; n], shape),
            Init::Normal(s) => s,
            Init::Kaiming { fan_in } => (2.0 / fan_in.max(1) as f64).sqrt(),
        };
        let normal =
            Normal::new(0.0, std).map_err(|e| Error::Parameter(format!("{name}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(self.seed, name));
        let values = (0..n).map(|_| normal.sample(&mut rng)).collect();
        self.insert(name, kind, values, shape)
    }

    fn insert(&mut self, name: &str, kind: ParamKind, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                var: var.clone(),
                group: group_of(name).to_string(),
                kind,
            },
        );
        Ok(var)
    }

    pub fn entries(&self) -> &BTreeMap<String, ParamEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Group names in sorted order.
    pub fn groups(&self) -> Vec<String> {
        self.entries
            .values()
            .map(|e| e.group.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn set_frozen(&mut self, groups: BTreeSet<String>) -> Result<()> {
        let known: BTreeSet<String> = self.groups().into_iter().collect();
        if let Some(bad) = groups.iter().find(|g| !known.contains(*g)) {
            return Err(Error::Config(format!(
                "unknown parameter group {bad}; valid groups: {}",
                known.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        self.frozen = groups;
        Ok(())
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    /// Trainable tensors outside frozen groups, in name order.
    pub fn optimizable(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable && !self.frozen.contains(&e.group))
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Current values of every tensor, flattened, as `f32`.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let v = e.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), v))
            })
            .collect()
    }

    /// Overwrites one tensor; the shape must match exactly.
    pub fn assign(&self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if entry.var.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, checkpoint has {shape:?}",
                entry.var.dims()
            )));
        }
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        entry.var.set(&t)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(7, DType::F32, Device::Cpu);
        let mut b = ParamStore::new(7, DType::F32, Device::Cpu);
        let wa = a.add("S1.w", ParamKind::Trainable, &[4, 3], Init::Kaiming { fan_in: 3 }).unwrap();
        b.add("S0.other", ParamKind::Trainable, &[5], Init::Normal(1.0)).unwrap();
        let wb = b.add("S1.w", ParamKind::Trainable, &[4, 3], Init::Kaiming { fan_in: 3 }).unwrap();
        let va = wa.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = wb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);

        let mut c = ParamStore::new(8, DType::F32, Device::Cpu);
        let wc = c.add("S1.w", ParamKind::Trainable, &[4, 3], Init::Kaiming { fan_in: 3 }).unwrap();
        assert_ne!(va, wc.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn groups_and_freezing() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.add("S1.a", ParamKind::Trainable, &[2], Init::Zeros).unwrap();
        s.add("S1.bn.mean", ParamKind::Buffer, &[2], Init::Zeros).unwrap();
        s.add("FC.w", ParamKind::Trainable, &[2], Init::Ones).unwrap();
        assert_eq!(s.groups(), vec!["FC".to_string(), "S1".to_string()]);
        assert!(s.add("S1.a", ParamKind::Trainable, &[1], Init::Zeros).is_err());
        assert_eq!(s.optimizable().len(), 2);
        s.set_frozen(["S1".to_string()].into()).unwrap();
        assert_eq!(s.optimizable().len(), 1);
        let err = s.set_frozen(["S99".to_string()].into()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("S99") && m.contains("FC, S1")));
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.add("C1.w", ParamKind::Trainable, &[2, 2], Init::Zeros).unwrap();
        s.assign("C1.w", &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.snapshot().unwrap()["C1.w"], vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(s.assign("C1.w", &[4], &[0.0; 4]), Err(Error::Checkpoint(_))));
        assert!(s.assign("C9.w", &[1], &[0.0]).is_err());
    }
}
