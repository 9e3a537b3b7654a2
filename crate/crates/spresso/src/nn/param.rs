//! Parameters, parameter groups and the AdamW optimizer.

use crate::error::{Error, Result};
use crate::nn::tensor::{sc, Scalar, Tensor};

/// Which stage of the pipeline may update a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Pretrained denoiser weights, frozen after the base pretraining phase.
    Base,
    /// Low-rank adapters on base matrices.
    Lora,
    /// Dedicated K/V projections for the downsampled-audio modality.
    CtxAttn,
    /// Conditioning projection f_phi.
    Proj,
    /// Latent encoder g_psi.
    Encoder,
    Other,
}

/// A named tensor with gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Visitor over every named parameter of a model.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, p| n += p.value.len());
        n
    }
}

/// Flat parameter container; used where the optimizer contract is exercised
/// directly rather than through a model.
#[derive(Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, ParamGroup, Param<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<()> {
        if self.entries.iter().any(|(n, _, _)| n == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries
            .push((name.to_string(), group, Param::new(value)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, p)| p)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, p)| p)
    }
}

impl<T: Scalar> Parameterized<T> for ParamStore<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        for (name, group, p) in &mut self.entries {
            f(name, *group, p);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW step over the selected parameter groups. `step` is 1-based.
/// Decoupled weight decay; bias-corrected moments; deterministic.
pub fn adamw_step<T: Scalar>(
    model: &mut dyn Parameterized<T>,
    select: &dyn Fn(ParamGroup) -> bool,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    let mut bad: Option<String> = None;
    let b1 = sc::<T>(cfg.beta1);
    let b2 = sc::<T>(cfg.beta2);
    let one = T::one();
    let bc1 = sc::<T>(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = sc::<T>(1.0 - cfg.beta2.powi(step as i32));
    let lr = sc::<T>(cfg.lr);
    let eps = sc::<T>(cfg.eps);
    let wd = sc::<T>(cfg.weight_decay);
    model.visit_params(&mut |name, group, p| {
        if bad.is_some() || !select(group) {
            return;
        }
        if !p.grad.all_finite() {
            bad = Some(name.to_string());
            return;
        }
        let n = p.value.len();
        let g = p.grad.as_slice().to_vec();
        let mv = p.m.as_mut_slice();
        let vv = p.v.as_mut_slice();
        for i in 0..n {
            mv[i] = b1 * mv[i] + (one - b1) * g[i];
            vv[i] = b2 * vv[i] + (one - b2) * g[i] * g[i];
        }
        let w = p.value.as_mut_slice();
        for i in 0..n {
            let mh = p.m.as_slice()[i] / bc1;
            let vh = p.v.as_slice()[i] / bc2;
            w[i] = w[i] - lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
        }
    });
    match bad {
        Some(name) => Err(Error::Numeric(format!(
            "non-finite gradient in parameter {name}"
        ))),
        None => Ok(()),
    }
}
