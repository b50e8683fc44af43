use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(1 / fan_in) * gain`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
    Values(Vec<f64>),
}

/// Named trainable tensors of one network, kept in a stable (sorted) order.
///
/// Initialization draws from a caller-owned seeded stream so two stores built
/// from the same seed are bit-identical.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn create(&mut self, name: String, shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::config(&name, "parameter registered twice"));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn { fan_in, gain } => {
                let bound = gain / (*fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Shape(format!(
                        "initial values for {name}: {} elements for shape {shape:?}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Flat copies of every parameter, for bit-exact comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Ok((k.clone(), data))
            })
            .collect()
    }

    /// Exports tensors (detached) keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Scoped view used while constructing a network.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape, &init, self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(seed: u64) -> ParamStore {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        b.pp("enc")
            .get("w", &[4, 3], Init::FanIn { fan_in: 3, gain: 1.0 })
            .unwrap();
        b.pp("enc").get("b", &[4], Init::Zeros).unwrap();
        store
    }

    #[test]
    fn same_seed_same_values() {
        assert_eq!(build(7).snapshot().unwrap(), build(7).snapshot().unwrap());
        assert_ne!(build(7).snapshot().unwrap(), build(8).snapshot().unwrap());
    }

    #[test]
    fn names_are_scoped_and_unique() {
        let store = build(1);
        let names: Vec<_> = store.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(names, vec!["enc.b", "enc.w"]);
        let mut store = store;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(b.pp("enc").get("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn assign_rejects_shape_mismatch() {
        let store = build(1);
        let mut t = store.tensors();
        t.insert("enc.b".into(), Tensor::zeros(5, DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(store.assign(&t), Err(Error::Incompatible(_))));
    }
}
