//! Dense (linear) layers with optional low-rank adapters.

use crate::error::{Error, Result};
use crate::nn::param::{Param, ParamGroup, Parameterized};
use crate::nn::tensor::{matmul_nn, matmul_nt, matmul_tn, sc, Scalar, Tensor};
use rand::Rng;

/// Low-rank adapter: effective weight = W + (alpha / r) * B * A.
/// B is zero-initialized so a fresh adapter leaves the base function intact.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    /// [r, in]
    pub a: Param<T>,
    /// [out, r]
    pub b: Param<T>,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(out: usize, inp: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let a = Tensor::randn(&[rank, inp], 1.0 / (rank as f64).sqrt(), rng);
        let b = Tensor::zeros(&[out, rank]);
        LoraAdapter {
            a: Param::new(a),
            b: Param::new(b),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.rows()
    }

    fn scale(&self) -> T {
        sc::<T>(self.alpha / self.rank() as f64)
    }

    /// (alpha / r) * B * A, shape [out, in]
    pub fn delta(&self) -> Tensor<T> {
        let mut d = matmul_nn(&self.b.value, &self.a.value);
        d.scale(self.scale());
        d
    }
}

/// Standalone form of the adapter merge, W + (alpha/r) B A.
pub fn lora_apply<T: Scalar>(
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let (out, inp) = (w.rows(), w.cols());
    let r = a.rows();
    if r > out.min(inp) {
        return Err(Error::invalid(format!(
            "lora rank {r} exceeds min(out, in) = {}",
            out.min(inp)
        )));
    }
    if a.cols() != inp || b.rows() != out || b.cols() != r {
        return Err(Error::invalid(format!(
            "lora shapes A {:?} / B {:?} incompatible with W {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let mut d = matmul_nn(b, a);
    d.scale(sc::<T>(alpha / r as f64));
    let mut eff = w.clone();
    eff.add_assign(&d);
    Ok(eff)
}

/// Linear layer y = x Wᵀ + b over the last axis, with exact analytic
/// gradients. The optional adapter's own group is always `Lora`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    /// [out, in]
    pub w: Param<T>,
    pub b: Option<Param<T>>,
    pub lora: Option<LoraAdapter<T>>,
    pub group: ParamGroup,
}

pub struct DenseCache<T> {
    /// Input flattened to [n, in].
    x: Tensor<T>,
    w_eff: Tensor<T>,
    out_shape: Vec<usize>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(out: usize, inp: usize, bias: bool, group: ParamGroup, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        Dense {
            w: Param::new(Tensor::randn(&[out, inp], std, rng)),
            b: bias.then(|| Param::new(Tensor::zeros(&[out]))),
            lora: None,
            group,
        }
    }

    pub fn zeros(out: usize, inp: usize, bias: bool, group: ParamGroup) -> Self {
        Dense {
            w: Param::new(Tensor::zeros(&[out, inp])),
            b: bias.then(|| Param::new(Tensor::zeros(&[out]))),
            lora: None,
            group,
        }
    }

    pub fn identity(n: usize, group: ParamGroup) -> Self {
        Dense {
            w: Param::new(Tensor::eye(n)),
            b: Some(Param::new(Tensor::zeros(&[n]))),
            lora: None,
            group,
        }
    }

    pub fn with_lora(mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let (out, inp) = (self.w.value.rows(), self.w.value.cols());
        self.lora = Some(LoraAdapter::new(out, inp, rank, alpha, rng));
        self
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn eff_weight(&self) -> Tensor<T> {
        match &self.lora {
            Some(l) => {
                let mut w = self.w.value.clone();
                w.add_assign(&l.delta());
                w
            }
            None => self.w.value.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let inp = self.in_dim();
        let last = *x.shape().last().ok_or_else(|| Error::invalid("empty shape"))?;
        if last != inp {
            return Err(Error::invalid(format!(
                "dense input dim {last} != expected {inp}"
            )));
        }
        let n = x.len() / inp;
        let x2 = x.clone().reshape(&[n, inp])?;
        let w_eff = self.eff_weight();
        let mut y = matmul_nt(&x2, &w_eff);
        if let Some(b) = &self.b {
            let bv = b.value.as_slice();
            for i in 0..n {
                let yi = y.row_mut(i);
                for (j, bj) in bv.iter().enumerate() {
                    yi[j] += *bj;
                }
            }
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim();
        let cache = DenseCache {
            x: x2,
            w_eff,
            out_shape: out_shape.clone(),
        };
        Ok((y.reshape(&out_shape)?, cache))
    }

    /// Accumulates parameter gradients (base, bias, adapter) and returns dx.
    pub fn backward(&mut self, cache: &DenseCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.out_dim();
        let n = dy.len() / out;
        let dy2 = dy.clone().reshape(&[n, out])?;
        // dW_eff = dyᵀ x
        let dw_eff = matmul_tn(&dy2, &cache.x);
        self.w.grad.add_assign(&dw_eff);
        if let Some(l) = &mut self.lora {
            let s = l.scale();
            // dB = s * dW_eff Aᵀ ; dA = s * Bᵀ dW_eff
            let mut db = matmul_nt(&dw_eff, &l.a.value);
            db.scale(s);
            l.b.grad.add_assign(&db);
            let mut da = matmul_tn(&l.b.value, &dw_eff);
            da.scale(s);
            l.a.grad.add_assign(&da);
        }
        if let Some(b) = &mut self.b {
            let g = b.grad.as_mut_slice();
            for i in 0..n {
                let r = dy2.row(i);
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj += r[j];
                }
            }
        }
        let dx = matmul_nn(&dy2, &cache.w_eff);
        let mut in_shape = cache.out_shape.clone();
        *in_shape.last_mut().unwrap() = self.in_dim();
        dx.reshape(&in_shape)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        f(&format!("{prefix}.w"), self.group, &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), self.group, b);
        }
        if let Some(l) = &mut self.lora {
            f(&format!("{prefix}.lora.a"), ParamGroup::Lora, &mut l.a);
            f(&format!("{prefix}.lora.b"), ParamGroup::Lora, &mut l.b);
        }
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        self.visit("dense", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn identity_weight_is_identity_map() {
        let d = Dense::<f64>::identity(3, ParamGroup::Other);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let (y, _) = d.forward(&x).unwrap();
        assert_eq!(y.as_slice(), x.as_slice());
    }

    #[test]
    fn hand_arithmetic_case() {
        // x = [1, 2], W = [[1, 1], [0, 1]], b = [0, 1] -> y = [3, 3]
        let mut d = Dense::<f64>::zeros(2, 2, true, ParamGroup::Other);
        d.w.value = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        d.b.as_mut().unwrap().value = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let (y, _) = d.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut rng = substream(0, "init", &[0]);
        let d = Dense::<f64>::new(2, 3, true, ParamGroup::Other, &mut rng);
        let x = Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(d.forward(&x).is_err());
    }

    #[test]
    fn lora_zero_b_is_identity_on_base() {
        let mut rng = substream(1, "init", &[0]);
        let base = Dense::<f64>::new(4, 4, false, ParamGroup::Base, &mut rng);
        let w0 = base.w.value.clone();
        let with = base.clone().with_lora(2, 4.0, &mut rng);
        assert_eq!(with.eff_weight().as_slice(), w0.as_slice());
    }

    #[test]
    fn lora_apply_zero_alpha_is_base() {
        let mut rng = substream(2, "init", &[0]);
        let w = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let eff = lora_apply(&w, &a, &b, 0.0).unwrap();
        assert_eq!(eff.as_slice(), w.as_slice());
    }

    #[test]
    fn full_rank_lora_reconstructs_arbitrary_delta() {
        // With r = min(out, in) and alpha = r, set A = I and B = dW: the
        // adapter represents the perturbation exactly.
        let mut rng = substream(3, "init", &[0]);
        let w = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let dw = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let a = Tensor::<f64>::eye(3);
        let eff = lora_apply(&w, &a, &dw, 3.0).unwrap();
        let mut expect = w.clone();
        expect.add_assign(&dw);
        for (x, y) in eff.as_slice().iter().zip(expect.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_rank_too_large_rejected() {
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let a = Tensor::<f64>::zeros(&[3, 2]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(lora_apply(&w, &a, &b, 1.0).is_err());
    }
}
