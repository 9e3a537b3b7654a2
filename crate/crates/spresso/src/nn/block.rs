//! Pre-norm transformer block: RMS norm, attention (optionally joint with a
//! conditioning modality), RMS norm, GELU MLP with expansion 4.

use crate::error::Result;
use crate::nn::attention::{Mha, MhaCache};
use crate::nn::dense::{Dense, DenseCache};
use crate::nn::norm::{gelu_backward, gelu_forward, RmsNorm, RmsNormCache};
use crate::nn::param::{Param, ParamGroup};
use crate::nn::rope::RopeTable;
use crate::nn::tensor::{Scalar, Tensor};
use rand::Rng;

pub const MLP_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub norm1: RmsNorm<T>,
    pub attn: Mha<T>,
    pub norm2: RmsNorm<T>,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

pub struct BlockCache<T> {
    n1: RmsNormCache<T>,
    attn: MhaCache<T>,
    n2: RmsNormCache<T>,
    c1: DenseCache<T>,
    gelu_in: Tensor<T>,
    c2: DenseCache<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(
        model_dim: usize,
        heads: usize,
        with_ctx: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: RmsNorm::new(model_dim, group),
            attn: Mha::new(model_dim, heads, with_ctx, group, rng)?,
            norm2: RmsNorm::new(model_dim, group),
            fc1: Dense::new(MLP_EXPANSION * model_dim, model_dim, true, group, rng),
            fc2: Dense::new(model_dim, MLP_EXPANSION * model_dim, true, group, rng),
        })
    }

    pub fn with_lora(mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        self.attn = self.attn.with_lora(rank, alpha, rng);
        self.fc1 = self.fc1.with_lora(rank, alpha, rng);
        self.fc2 = self.fc2.with_lora(rank, alpha, rng);
        self
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        rope_x: &RopeTable<T>,
        ctx: Option<(&Tensor<T>, &RopeTable<T>)>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (h, n1) = self.norm1.forward(x)?;
        let (a, attn) = self.attn.forward(&h, rope_x, ctx)?;
        let mut x1 = x.clone();
        x1.add_assign(&a);
        let (h2, n2) = self.norm2.forward(&x1)?;
        let (u, c1) = self.fc1.forward(&h2)?;
        let (g, gelu_in) = gelu_forward(&u);
        let (m, c2) = self.fc2.forward(&g)?;
        let mut y = x1;
        y.add_assign(&m);
        Ok((
            y,
            BlockCache {
                n1,
                attn,
                n2,
                c1,
                gelu_in,
                c2,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        rope_x: &RopeTable<T>,
        rope_ctx: Option<&RopeTable<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        // y = x1 + fc2(gelu(fc1(norm2(x1))))
        let dg = self.fc2.backward(&cache.c2, dy)?;
        let du = gelu_backward(&cache.gelu_in, &dg);
        let dh2 = self.fc1.backward(&cache.c1, &du)?;
        let mut dx1 = self.norm2.backward(&cache.n2, &dh2)?;
        dx1.add_assign(dy);
        // x1 = x + attn(norm1(x))
        let (dh, dctx) = self.attn.backward(&cache.attn, &dx1, rope_x, rope_ctx)?;
        let mut dx = self.norm1.backward(&cache.n1, &dh)?;
        dx.add_assign(&dx1);
        Ok((dx, dctx))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}
