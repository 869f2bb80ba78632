//! Named parameter storage shared by all network stages.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FseError, Result};

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Const(f64),
}

impl Init {
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, scaled by `gain`.
    pub fn fan_in(fan_in: usize, gain: f64) -> Self {
        Init::Uniform {
            bound: gain * (6.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Declared parameter: stable name, shape and initializer.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Declares a conv layer `[co, ci, k, k]` plus zero bias under `prefix`.
pub fn conv_specs(prefix: &str, ci: usize, co: usize, k: usize, gain: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[co, ci, k, k],
            Init::fan_in(ci * k * k, gain),
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[co], Init::Const(0.0)),
    ]
}

/// Map from parameter name to a trainable tensor. Iteration order is the
/// lexicographic order of names, which fixes every downstream reduction order.
#[derive(Debug, Clone, Default)]
pub struct NamedTensorMap {
    entries: BTreeMap<String, Var>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every declared parameter. Each tensor draws from its own
    /// stream keyed by `(seed, name)`, so values do not depend on declaration order.
    pub fn init(specs: &[ParamSpec], seed: u64, dtype: DType) -> Result<Self> {
        let mut map = Self::new();
        for spec in specs {
            let values: Vec<f64> = match spec.init {
                Init::Const(v) => vec![v; spec.numel()],
                Init::Uniform { bound } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                    (0..spec.numel())
                        .map(|_| rng.gen_range(-bound..=bound))
                        .collect()
                }
            };
            let t = Tensor::from_vec(values, spec.shape.as_slice(), &Device::Cpu)?
                .to_dtype(dtype)?;
            map.insert(&spec.name, t)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(FseError::State(format!("duplicate parameter `{name}`")));
        }
        self.entries
            .insert(name.to_string(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| FseError::State(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.entries
            .get(name)
            .ok_or_else(|| FseError::State(format!("missing parameter `{name}`")))
    }

    /// Replaces the value of an existing parameter (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(FseError::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy converted to `dtype`; the copy shares no storage with `self`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (name, var) in &self.entries {
            out.insert(name, var.as_tensor().to_dtype(dtype)?.copy()?)?;
        }
        Ok(out)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (name, var) in &self.entries {
            out.insert(name, var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: NamedTensorMap) -> Result<()> {
        for (name, var) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(FseError::State(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(name, var);
        }
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut count = 0;
        for (name, var) in &self.entries {
            if name.starts_with(prefix) {
                var.set(&var.as_tensor().zeros_like()?)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Checks that every declared parameter is present with the declared shape.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.dims() != spec.shape.as_slice() {
                return Err(FseError::Shape(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.entries
            .values()
            .next()
            .map(|v| v.dtype())
            .unwrap_or(DType::F32)
    }
}
