//! Named parameter storage with seeded initialization.
//!
//! Modules ask the store for a parameter by name. A fresh store initializes it
//! from its own seeded generator; a store loaded from a checkpoint or copied
//! from another model hands back the existing values. Detached stores (the EMA
//! teacher) give out views that share storage with their variables but are
//! never tracked by autograd.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TeaError};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal(0, std) truncated to ±2·std.
    TruncNormal(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    used: RefCell<BTreeSet<String>>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    detached: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .field("detached", &self.detached)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            used: RefCell::new(BTreeSet::new()),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            detached: false,
        }
    }

    /// Builds a store around existing tensors, e.g. from a checkpoint.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype, 0);
        for (name, t) in tensors {
            store.vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    /// Deep copy of every value. The copy is detached when `detached` is set.
    pub fn duplicate(&self, detached: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(ParamStore {
            vars,
            used: RefCell::new(BTreeSet::new()),
            dtype: self.dtype,
            device: self.device.clone(),
            rng: self.rng.clone(),
            detached,
        })
    }

    /// Existing parameter `name`, which must have `shape`.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| TeaError::Checkpoint(format!("missing parameter `{name}`")))?;
        if var.dims() != shape {
            return Err(TeaError::Shape(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                var.dims()
            )));
        }
        self.used.borrow_mut().insert(name.to_string());
        Ok(self.view(var))
    }

    fn view(&self, var: &Var) -> Tensor {
        if self.detached {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }

    /// Returns the named parameter, creating it with `init` if absent.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if !self.vars.contains_key(name) {
            let tensor = self.initial_value(shape, init)?;
            self.vars.insert(name.to_string(), Var::from_tensor(&tensor)?);
        }
        self.get(name, shape)
    }

    fn initial_value(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(v) => vec![v; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std)
                    .map_err(|e| TeaError::Config(format!("bad init std {std}: {e}")))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Names never requested by a module since the store was built.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.vars.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites the value of `name` in place; views handed out earlier see
    /// the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| TeaError::Checkpoint(format!("unknown parameter `{name}`")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Sum of squared differences against another store with the same schema.
    pub fn sq_distance(&self, other: &ParamStore) -> Result<f64> {
        ensure_same_schema(self, other)?;
        let mut total = 0f64;
        for (name, var) in &self.vars {
            let o = other.vars[name].as_tensor();
            total += (var.as_tensor() - o)?
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
        }
        Ok(total)
    }
}

pub fn ensure_same_schema(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if a.vars.len() != b.vars.len() {
        return Err(TeaError::Shape(format!(
            "parameter schemas differ: {} vs {} entries",
            a.vars.len(),
            b.vars.len()
        )));
    }
    for ((na, va), (nb, vb)) in a.vars.iter().zip(&b.vars) {
        if na != nb || va.dims() != vb.dims() {
            return Err(TeaError::Shape(format!(
                "parameter schemas differ at `{na}` {:?} / `{nb}` {:?}",
                va.dims(),
                vb.dims()
            )));
        }
    }
    Ok(())
}
