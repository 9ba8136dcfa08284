//! Shared neural-network plumbing: a named parameter store with
//! deterministic per-name initialization, an Adam optimizer whose state can
//! be checkpointed bit-for-bit, and a few tensor helpers candle does not
//! ship.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-bound, bound).
    Uniform(f64),
    /// N(0, std).
    Normal(f64),
    Zeros,
    Const(f64),
}

/// Ordered name -> Var map. Every parameter is seeded from
/// `hash(store_seed, name)`, so values do not depend on creation order and
/// two models that share a name share its initial value.
pub struct ParamStore {
    vars: IndexMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: IndexMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create (or re-fetch) a named parameter. The returned tensor shares
    /// storage with the stored `Var`, so it participates in backprop.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.shape().dims() != shape {
                return Err(Error::ParamMismatch(format!(
                    "{name}: requested shape {shape:?} but stored {:?}",
                    var.shape().dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let values: Vec<f64> = match init {
            Init::Uniform(b) => (0..numel).map(|_| rng.random_range(-b..b)).collect(),
            Init::Normal(std) => (0..numel).map(|_| normal_sample(&mut rng) * std).collect(),
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Vars whose name passes the filter, in creation order.
    pub fn trainable(&self, filter: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Snapshot every parameter as a plain tensor (detached copy).
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite an existing parameter in place (shape-checked).
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::ParamMismatch(format!(
                "{name}: shape {:?} incompatible with stored {:?}",
                value.shape().dims(),
                var.shape().dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Prefix-scoped view into a [`ParamStore`], mirroring the VarBuilder idiom.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore) -> Self {
        Self {
            store,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, seg: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            seg.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, seg.as_ref())
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Marsaglia polar method.
    loop {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Standard-normal vector from a seeded RNG (all sampling in this crate goes
/// through explicit RNGs; candle's own RNG is never used).
pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal_sample(rng)).collect()
}

pub fn randn_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let t = Tensor::from_vec(randn_vec(rng, numel), shape, device)?;
    Ok(t.to_dtype(dtype)?)
}

// ---------------------------------------------------------------------------
// Layer constructors with deterministic fan-in uniform init.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1dLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv1d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        match &self.bias {
            Some(b) => {
                let b = b.reshape((1, b.dim(0)?, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

pub fn conv1d(
    pb: &mut ParamBuilder<'_>,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Conv1dLayer> {
    let bound = (1.0 / (in_c * kernel) as f64).sqrt();
    let mut scope = pb.pp(name);
    let weight = scope.get("weight", &[out_c, in_c, kernel], Init::Uniform(bound))?;
    let bias = scope.get("bias", &[out_c], Init::Uniform(bound))?;
    Ok(Conv1dLayer {
        weight,
        bias: Some(bias),
        stride,
        padding,
        dilation,
    })
}

/// Zero-initialized conv used where identity behavior at init is wanted.
pub fn conv1d_zeros(
    pb: &mut ParamBuilder<'_>,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    padding: usize,
) -> Result<Conv1dLayer> {
    let mut scope = pb.pp(name);
    let weight = scope.get("weight", &[out_c, in_c, kernel], Init::Zeros)?;
    let bias = scope.get("bias", &[out_c], Init::Zeros)?;
    Ok(Conv1dLayer {
        weight,
        bias: Some(bias),
        stride: 1,
        padding,
        dilation: 1,
    })
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // out x in
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

pub fn linear(
    pb: &mut ParamBuilder<'_>,
    name: &str,
    in_d: usize,
    out_d: usize,
    bias: bool,
) -> Result<LinearLayer> {
    let bound = (1.0 / in_d as f64).sqrt();
    let mut scope = pb.pp(name);
    let weight = scope.get("weight", &[out_d, in_d], Init::Uniform(bound))?;
    let bias = if bias {
        Some(scope.get("bias", &[out_d], Init::Uniform(bound))?)
    } else {
        None
    };
    Ok(LinearLayer { weight, bias })
}

#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub weight: Tensor, // n x d
}

impl EmbeddingLayer {
    /// ids: u32 tensor of any shape -> appends a trailing dim of size d.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let shape = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let picked = self.weight.index_select(&flat, 0)?;
        let mut out_shape = shape;
        out_shape.push(self.weight.dim(1)?);
        Ok(picked.reshape(out_shape)?)
    }
}

pub fn embedding(
    pb: &mut ParamBuilder<'_>,
    name: &str,
    n: usize,
    d: usize,
    std: f64,
) -> Result<EmbeddingLayer> {
    let weight = pb.pp(name).get("weight", &[n, d], Init::Normal(std))?;
    Ok(EmbeddingLayer { weight })
}

// ---------------------------------------------------------------------------
// Tensor helpers.
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `dim`; the subtracted max is detached,
/// which leaves gradients exact (softmax is shift-invariant).
pub fn softmax_stable(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_stable(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Repeat every time step `factor` times: (B, C, T) -> (B, C, T*factor).
pub fn nearest_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let up = x
        .unsqueeze(3)?
        .broadcast_as((b, c, t, factor))?
        .contiguous()?
        .reshape((b, c, t * factor))?;
    Ok(up)
}

/// L2-normalize along `dim` with an epsilon floor on the norm.
pub fn l2_normalize(x: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(dim)?.sqrt()?;
    let floor = Tensor::full(eps, norm.shape(), norm.device())?.to_dtype(norm.dtype())?;
    Ok(x.broadcast_div(&norm.maximum(&floor)?)?)
}

/// Clamp built from differentiable min/max against constant tensors.
pub fn clamp_t(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    let lo_t = Tensor::full(lo, x.shape(), x.device())?.to_dtype(x.dtype())?;
    let hi_t = Tensor::full(hi, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.maximum(&lo_t)?.minimum(&hi_t)?)
}

/// Build a (B, C, T) tensor from row-major f32 data in the store's dtype.
pub fn tensor_f32(data: &[f32], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let t = Tensor::from_vec(data.to_vec(), shape, device)?;
    Ok(t.to_dtype(dtype)?)
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

/// Optimizer hyperparameters. Defaults match the training recipe:
/// lr 2e-4, betas (0.8, 0.99), epsilon 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction over a fixed list of named vars. First/second
/// moments are ordinary tensors, so the whole state round-trips through
/// checkpoints bit-for-bit.
pub struct Adam {
    pub params: AdamParams,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step_t: usize,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, params: AdamParams) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| Ok(Tensor::zeros(v.shape(), v.dtype(), v.device())?))
            .collect::<Result<Vec<_>>>()?;
        let v = m.iter().map(|t| Ok(t.copy()?)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            vars,
            m,
            v,
            step_t: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.params.lr
    }

    pub fn step_count(&self) -> usize {
        self.step_t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step_t += 1;
        let t = self.step_t as f64;
        let bc1 = 1.0 - self.params.beta1.powf(t);
        let bc2 = 1.0 - self.params.beta2.powf(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let m = ((&self.m[i] * self.params.beta1)? + (grad * (1.0 - self.params.beta1))?)?;
            let v = ((&self.v[i] * self.params.beta2)?
                + (grad.sqr()? * (1.0 - self.params.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let denom = (v_hat.sqrt()? + self.params.eps)?;
            let update = ((m_hat / denom)? * self.params.lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed for checkpointing: `<name>.adam_m` / `.adam_v`.
    pub fn state_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("{name}.adam_m"), self.m[i].copy()?));
            out.push((format!("{name}.adam_v"), self.v[i].copy()?));
        }
        Ok(out)
    }

    pub fn load_state(
        &mut self,
        tensors: &std::collections::HashMap<String, Tensor>,
        step_t: usize,
    ) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let m_key = format!("{name}.adam_m");
            let v_key = format!("{name}.adam_v");
            if let (Some(m), Some(v)) = (tensors.get(&m_key), tensors.get(&v_key)) {
                if m.shape() != var.shape() || v.shape() != var.shape() {
                    return Err(Error::ParamMismatch(format!(
                        "optimizer state shape mismatch for {name}"
                    )));
                }
                self.m[i] = m.to_dtype(var.dtype())?;
                self.v[i] = v.to_dtype(var.dtype())?;
            }
        }
        self.step_t = step_t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_init_is_order_independent() {
        let mut a = ParamStore::new(DType::F32, 7);
        let first = a.get_or_init("x.weight", &[4, 3], Init::Uniform(0.5)).unwrap();
        let _ = a.get_or_init("y.weight", &[2], Init::Uniform(0.5)).unwrap();

        let mut b = ParamStore::new(DType::F32, 7);
        let _ = b.get_or_init("y.weight", &[2], Init::Uniform(0.5)).unwrap();
        let second = b.get_or_init("x.weight", &[4, 3], Init::Uniform(0.5)).unwrap();

        let fa = first.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let fb = second.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn param_refetch_shares_storage() {
        let mut store = ParamStore::new(DType::F32, 1);
        let t1 = store.get_or_init("w", &[3], Init::Const(1.0)).unwrap();
        let t2 = store.get_or_init("w", &[3], Init::Const(9.0)).unwrap();
        assert_eq!(
            t1.to_vec1::<f32>().unwrap(),
            t2.to_vec1::<f32>().unwrap()
        );
        assert!(store
            .get_or_init("w", &[4], Init::Zeros)
            .is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() -> Result<()> {
        // Minimize (x - 3)^2 elementwise.
        let mut store = ParamStore::new(DType::F32, 2);
        let x = store.get_or_init("x", &[4], Init::Const(0.0))?;
        let mut opt = Adam::new(
            store.trainable(|_| true),
            AdamParams {
                lr: 0.1,
                ..Default::default()
            },
        )?;
        for _ in 0..300 {
            let loss = (x.affine(1.0, -3.0)?).sqr()?.sum_all()?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
        }
        for v in x.to_vec1::<f32>()? {
            assert!((v - 3.0).abs() < 0.05, "x = {v}");
        }
        Ok(())
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(
            vec![0.1f32, 2.0, -1.0, 0.5, 0.5, 0.5],
            (2, 3),
            &Device::Cpu,
        )
        .unwrap();
        let p = softmax_stable(&x, 1).unwrap();
        let sums = p.sum(1).unwrap().to_vec1::<f32>().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = Tensor::from_vec(vec![1.0f32, 2.0, 3.0], (1, 1, 3), &Device::Cpu).unwrap();
        let up = nearest_upsample(&x, 2).unwrap();
        assert_eq!(
            up.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
        );
    }

    #[test]
    fn adam_state_round_trip_is_exact() -> Result<()> {
        let mut store = ParamStore::new(DType::F32, 5);
        let x = store.get_or_init("x", &[3], Init::Uniform(1.0))?;
        let mut opt = Adam::new(store.trainable(|_| true), AdamParams::default())?;
        for _ in 0..5 {
            let loss = x.sqr()?.sum_all()?;
            opt.step(&loss.backward()?)?;
        }
        let state: std::collections::HashMap<String, Tensor> =
            opt.state_tensors()?.into_iter().collect();
        let mut opt2 = Adam::new(store.trainable(|_| true), AdamParams::default())?;
        opt2.load_state(&state, opt.step_count())?;
        let after: std::collections::HashMap<String, Tensor> =
            opt2.state_tensors()?.into_iter().collect();
        for (k, v) in state {
            let a = v.to_vec1::<f32>()?;
            let b = after[&k].to_vec1::<f32>()?;
            assert_eq!(a, b, "state {k} changed");
        }
        Ok(())
    }
}
