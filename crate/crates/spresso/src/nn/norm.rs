//! RMS normalization and the GELU activation, with analytic backward passes.

use crate::error::Result;
use crate::nn::param::{Param, ParamGroup};
use crate::nn::tensor::{sc, Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct RmsNorm<T> {
    pub g: Param<T>,
    pub group: ParamGroup,
}

pub struct RmsNormCache<T> {
    x: Tensor<T>,
    /// inverse rms per row
    inv: Vec<T>,
}

impl<T: Scalar> RmsNorm<T> {
    pub fn new(dim: usize, group: ParamGroup) -> Self {
        RmsNorm {
            g: Param::new(Tensor::filled(&[dim], T::one())),
            group,
        }
    }

    /// y = g ⊙ x / sqrt(mean(x²) + eps), per row of [n, dim].
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, RmsNormCache<T>)> {
        let d = self.g.value.len();
        let n = x.len() / d;
        let x2 = x.clone().reshape(&[n, d])?;
        let mut y = Tensor::zeros(&[n, d]);
        let mut inv = Vec::with_capacity(n);
        let g = self.g.value.as_slice();
        let eps = sc::<T>(RMS_EPS);
        let dd = sc::<T>(d as f64);
        for i in 0..n {
            let xi = x2.row(i);
            let mut ms = T::zero();
            for &v in xi {
                ms += v * v;
            }
            let r = T::one() / (ms / dd + eps).sqrt();
            inv.push(r);
            let yi = y.row_mut(i);
            for j in 0..d {
                yi[j] = g[j] * xi[j] * r;
            }
        }
        let y = y.reshape(x.shape())?;
        Ok((y, RmsNormCache { x: x2, inv }))
    }

    pub fn backward(&mut self, cache: &RmsNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.g.value.len();
        let n = cache.x.rows();
        let dy2 = dy.clone().reshape(&[n, d])?;
        let mut dx = Tensor::zeros(&[n, d]);
        let g = self.g.value.as_slice();
        let dg = self.g.grad.as_mut_slice();
        let dd = sc::<T>(d as f64);
        for i in 0..n {
            let xi = cache.x.row(i);
            let dyi = dy2.row(i);
            let r = cache.inv[i];
            // s = Σ_j g_j dy_j x_j
            let mut s = T::zero();
            for j in 0..d {
                s += g[j] * dyi[j] * xi[j];
                dg[j] += dyi[j] * xi[j] * r;
            }
            let r3 = r * r * r;
            let dxi = dx.row_mut(i);
            for j in 0..d {
                dxi[j] = g[j] * dyi[j] * r - xi[j] * r3 * s / dd;
            }
        }
        dx.reshape(dy.shape())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        f(&format!("{prefix}.g"), self.group, &mut self.g);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = sc::<T>(GELU_C);
    let a = sc::<T>(GELU_A);
    let u = c * (x + a * x * x * x);
    sc::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = sc::<T>(GELU_C);
    let a = sc::<T>(GELU_A);
    let half = sc::<T>(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + sc::<T>(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (x.map(gelu), x.clone())
}

pub fn gelu_backward<T: Scalar>(cache: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = cache.map(gelu_grad);
    for (d, g) in dx.as_mut_slice().iter_mut().zip(dy.as_slice()) {
        *d *= *g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn rmsnorm_of_constant_vector_is_near_sign() {
        for c in [1.0f64, -2.0, 5.0] {
            let norm = RmsNorm::new(8, ParamGroup::Other);
            let x = Tensor::filled(&[1, 8], c);
            let (y, _) = norm.forward(&x).unwrap();
            for &v in y.as_slice() {
                assert!((v.abs() - 1.0).abs() <= 1e-5, "c={c} v={v}");
                assert_eq!(v.signum(), c.signum());
            }
        }
    }
}
