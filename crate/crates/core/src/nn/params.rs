use candle_core::{DType, Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Named trainable tensors with deterministic, seed-driven initialization.
///
/// Parameters are created in program order from a single ChaCha stream, so a
/// model built twice from the same seed and config is bit-identical.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    order: Vec<String>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: BTreeMap::new(), order: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            candle_core::bail!("duplicate parameter name {name}");
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        self.vars.insert(name.to_string(), var.clone());
        self.order.push(name.to_string());
        Ok(var)
    }

    /// Uniform in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f32) -> Result<Var> {
        let bound = gain / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    /// Normal entries with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0f32, std).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let data = (0..n).map(|_| self.rng.sample(dist)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        self.insert(name, data, shape)
    }

    /// Draws a seed for a sub-generator from the store's stream.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.order.iter().map(|n| (n.as_str(), &self.vars[n]))
    }

    /// Parameters sorted by name.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter's value; the shape must match.
    pub fn assign(&self, name: &str, values: &[f32]) -> Result<()> {
        let Some(var) = self.vars.get(name) else { candle_core::bail!("unknown parameter {name}") };
        if var.elem_count() != values.len() {
            candle_core::bail!("parameter {name}: expected {} values, got {}", var.elem_count(), values.len());
        }
        var.set(&Tensor::from_slice(values, var.shape(), &self.device)?)
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        let Some(var) = self.vars.get(name) else { candle_core::bail!("unknown parameter {name}") };
        var.flatten_all()?.to_dtype(DType::F32)?.to_vec1()
    }
}
