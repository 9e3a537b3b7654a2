//! Multi-head attention with rotary positions and an optional conditioning
//! modality. Conditioning tokens contribute dedicated keys and values that
//! are concatenated with the self keys/values; only the main sequence
//! produces outputs.

use crate::error::{Error, Result};
use crate::nn::dense::{Dense, DenseCache};
use crate::nn::param::{Param, ParamGroup};
use crate::nn::rope::{rope_apply, RopeTable};
use crate::nn::tensor::{sc, Scalar, Tensor};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Mha<T> {
    pub wq: Dense<T>,
    pub wk: Dense<T>,
    pub wv: Dense<T>,
    pub wo: Dense<T>,
    /// Dedicated key projection for conditioning tokens.
    pub ctx_k: Option<Dense<T>>,
    pub ctx_v: Option<Dense<T>>,
    pub heads: usize,
}

pub struct MhaCache<T> {
    q_cache: DenseCache<T>,
    k_cache: DenseCache<T>,
    v_cache: DenseCache<T>,
    o_cache: DenseCache<T>,
    ck_cache: Option<DenseCache<T>>,
    cv_cache: Option<DenseCache<T>>,
    q_rot: Tensor<T>,
    k_all: Tensor<T>,
    v_all: Tensor<T>,
    /// [heads, T, T + S] flattened
    attn: Vec<T>,
    t_len: usize,
    s_len: usize,
}

impl<T: Scalar> Mha<T> {
    pub fn new(
        model_dim: usize,
        heads: usize,
        with_ctx: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if model_dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {model_dim} not divisible by heads {heads}"
            )));
        }
        if (model_dim / heads) % 2 != 0 {
            return Err(Error::invalid("head dim must be even for rotary positions"));
        }
        let d = model_dim;
        Ok(Mha {
            wq: Dense::new(d, d, true, group, rng),
            wk: Dense::new(d, d, true, group, rng),
            wv: Dense::new(d, d, true, group, rng),
            wo: Dense::new(d, d, true, group, rng),
            ctx_k: with_ctx.then(|| Dense::new(d, d, true, ParamGroup::CtxAttn, rng)),
            ctx_v: with_ctx.then(|| Dense::new(d, d, true, ParamGroup::CtxAttn, rng)),
            heads,
        })
    }

    pub fn with_lora(mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        self.wq = self.wq.with_lora(rank, alpha, rng);
        self.wk = self.wk.with_lora(rank, alpha, rng);
        self.wv = self.wv.with_lora(rank, alpha, rng);
        self.wo = self.wo.with_lora(rank, alpha, rng);
        self
    }

    pub fn model_dim(&self) -> usize {
        self.wq.out_dim()
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        rope_x: &RopeTable<T>,
        ctx: Option<(&Tensor<T>, &RopeTable<T>)>,
    ) -> Result<(Tensor<T>, MhaCache<T>)> {
        let dm = self.model_dim();
        let heads = self.heads;
        let hd = dm / heads;
        let t_len = x.rows();
        if x.cols() != dm {
            return Err(Error::invalid("mha input dim mismatch"));
        }
        if rope_x.len() != t_len || rope_x.head_dim != hd {
            return Err(Error::invalid("mha rope table mismatch"));
        }

        let (mut q, q_cache) = self.wq.forward(x)?;
        let (mut k, k_cache) = self.wk.forward(x)?;
        let (v, v_cache) = self.wv.forward(x)?;
        rope_apply(&mut q, rope_x, heads, false);
        rope_apply(&mut k, rope_x, heads, false);

        let (s_len, ck_cache, cv_cache, k_all, v_all) = match ctx {
            Some((c, rope_c)) => {
                let (ck, cv) = match (&self.ctx_k, &self.ctx_v) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::invalid("mha has no context projections")),
                };
                if rope_c.len() != c.rows() || rope_c.head_dim != hd {
                    return Err(Error::invalid("mha context rope table mismatch"));
                }
                let (mut kc, ckc) = ck.forward(c)?;
                let (vc, cvc) = cv.forward(c)?;
                rope_apply(&mut kc, rope_c, heads, false);
                (c.rows(), Some(ckc), Some(cvc), vcat(&k, &kc), vcat(&v, &vc))
            }
            None => (0, None, None, k, v),
        };

        let all = t_len + s_len;
        let scale = sc::<T>(1.0 / (hd as f64).sqrt());
        let mut attn = vec![T::zero(); heads * t_len * all];
        let mut att_out = Tensor::zeros(&[t_len, dm]);
        for h in 0..heads {
            let off = h * hd;
            for i in 0..t_len {
                let qi = &q.row(i)[off..off + hd];
                let row = &mut attn[(h * t_len + i) * all..(h * t_len + i + 1) * all];
                let mut max = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k_all.row(j)[off..off + hd];
                    let mut s = T::zero();
                    for p in 0..hd {
                        s += qi[p] * kj[p];
                    }
                    *r = s * scale;
                    if *r > max {
                        max = *r;
                    }
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r = *r / z;
                }
                let out = att_out.row_mut(i);
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v_all.row(j)[off..off + hd];
                    for p in 0..hd {
                        out[off + p] += a * vj[p];
                    }
                }
            }
        }
        let (y, o_cache) = self.wo.forward(&att_out)?;
        Ok((
            y,
            MhaCache {
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                ck_cache,
                cv_cache,
                q_rot: q,
                k_all,
                v_all,
                attn,
                t_len,
                s_len,
            },
        ))
    }

    /// Returns (dx, dctx). Parameter gradients accumulate on the layer.
    pub fn backward(
        &mut self,
        cache: &MhaCache<T>,
        dy: &Tensor<T>,
        rope_x: &RopeTable<T>,
        rope_ctx: Option<&RopeTable<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let dm = self.model_dim();
        let heads = self.heads;
        let hd = dm / heads;
        let (t_len, s_len) = (cache.t_len, cache.s_len);
        let all = t_len + s_len;
        let scale = sc::<T>(1.0 / (hd as f64).sqrt());

        let datt_out = self.wo.backward(&cache.o_cache, dy)?;
        let mut dq = Tensor::zeros(&[t_len, dm]);
        let mut dk_all = Tensor::zeros(&[all, dm]);
        let mut dv_all = Tensor::zeros(&[all, dm]);

        let mut drow = vec![T::zero(); all];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..t_len {
                let arow = &cache.attn[(h * t_len + i) * all..(h * t_len + i + 1) * all];
                let do_i = &datt_out.row(i)[off..off + hd];
                // dattn and dv
                for (j, dr) in drow.iter_mut().enumerate() {
                    let vj = &cache.v_all.row(j)[off..off + hd];
                    let mut s = T::zero();
                    for p in 0..hd {
                        s += do_i[p] * vj[p];
                    }
                    *dr = s;
                }
                for (j, &a) in arow.iter().enumerate() {
                    let dvj = &mut dv_all.row_mut(j)[off..off + hd];
                    for p in 0..hd {
                        dvj[p] += a * do_i[p];
                    }
                }
                // softmax backward
                let mut dot = T::zero();
                for j in 0..all {
                    dot += arow[j] * drow[j];
                }
                for j in 0..all {
                    drow[j] = arow[j] * (drow[j] - dot);
                }
                // dscores -> dq, dk
                let qi = &cache.q_rot.row(i)[off..off + hd];
                for (j, &ds) in drow.iter().enumerate() {
                    let kj = &cache.k_all.row(j)[off..off + hd];
                    let s = ds * scale;
                    let dqi = &mut dq.row_mut(i)[off..off + hd];
                    for p in 0..hd {
                        dqi[p] += s * kj[p];
                    }
                    let dkj = &mut dk_all.row_mut(j)[off..off + hd];
                    for p in 0..hd {
                        dkj[p] += s * qi[p];
                    }
                }
            }
        }

        rope_apply(&mut dq, rope_x, heads, true);
        let (mut dk_self, dk_ctx) = vsplit(&dk_all, t_len);
        let (dv_self, dv_ctx) = vsplit(&dv_all, t_len);
        rope_apply(&mut dk_self, rope_x, heads, true);

        let mut dx = self.wq.backward(&cache.q_cache, &dq)?;
        dx.add_assign(&self.wk.backward(&cache.k_cache, &dk_self)?);
        dx.add_assign(&self.wv.backward(&cache.v_cache, &dv_self)?);

        let dctx = if s_len > 0 {
            let rope_c = rope_ctx.ok_or_else(|| Error::invalid("missing ctx rope table"))?;
            let mut dk_ctx = dk_ctx;
            rope_apply(&mut dk_ctx, rope_c, heads, true);
            let ck = self.ctx_k.as_mut().unwrap();
            let cv = self.ctx_v.as_mut().unwrap();
            let mut dc = ck.backward(cache.ck_cache.as_ref().unwrap(), &dk_ctx)?;
            dc.add_assign(&cv.backward(cache.cv_cache.as_ref().unwrap(), &dv_ctx)?);
            Some(dc)
        } else {
            None
        };
        Ok((dx, dctx))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        if let Some(ck) = &mut self.ctx_k {
            ck.visit(&format!("{prefix}.ctx_k"), f);
        }
        if let Some(cv) = &mut self.ctx_v {
            cv.visit(&format!("{prefix}.ctx_v"), f);
        }
    }
}

fn vcat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Tensor::from_vec(&[a.rows() + b.rows(), a.cols()], data).unwrap()
}

fn vsplit<T: Scalar>(x: &Tensor<T>, at: usize) -> (Tensor<T>, Tensor<T>) {
    let c = x.cols();
    let top = Tensor::from_vec(&[at, c], x.as_slice()[..at * c].to_vec()).unwrap();
    let bot = Tensor::from_vec(&[x.rows() - at, c], x.as_slice()[at * c..].to_vec()).unwrap();
    (top, bot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn single_position_outputs_value_projection() {
        // softmax over one key is 1, so y = wo(wv(x))
        let mut rng = substream(0, "init", &[20]);
        let mha = Mha::<f64>::new(8, 2, false, ParamGroup::Other, &mut rng).unwrap();
        let rope = RopeTable::for_range(1, 10000.0, 4).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let (y, _) = mha.forward(&x, &rope, None).unwrap();
        let (v, _) = mha.wv.forward(&x).unwrap();
        let (expect, _) = mha.wo.forward(&v).unwrap();
        for (a, b) in y.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_at_identical_positions_give_identical_outputs() {
        let mut rng = substream(0, "init", &[21]);
        let mha = Mha::<f64>::new(8, 2, false, ParamGroup::Other, &mut rng).unwrap();
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = Tensor::from_vec(&[2, 8], data).unwrap();
        let rope = RopeTable::new_unchecked(vec![3, 3], 10000.0, 4);
        let (y, _) = mha.forward(&x, &rope, None).unwrap();
        for j in 0..8 {
            assert!((y.at2(0, j) - y.at2(1, j)).abs() < 1e-12);
        }
    }
}
