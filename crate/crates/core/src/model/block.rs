use crate::error::Result;
use crate::nn::layers::{attention, attention_backward, AttentionCache, NormCache};
use crate::nn::{Activation, LayerNorm, Linear, Param, Parameters, Prng, Real, Tensor};

use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MhaCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    ctx: Tensor<T>,
    attn: AttentionCache<T>,
    seq: usize,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(name: &str, d: usize, heads: usize, prng: &mut Prng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&format!("{name}.q"), d, d, prng)?,
            k: Linear::new(&format!("{name}.k"), d, d, prng)?,
            v: Linear::new(&format!("{name}.v"), d, d, prng)?,
            out: Linear::new(&format!("{name}.out"), d, d, prng)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, seq: usize) -> Result<(Tensor<T>, MhaCache<T>)> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let (ctx, attn) = attention(&q, &k, &v, seq, self.heads)?;
        let y = self.out.forward(&ctx)?;
        Ok((y, MhaCache { x: x.clone(), q, k, v, ctx, attn, seq }))
    }

    pub fn backward(&mut self, c: &MhaCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dctx = self.out.backward(&c.ctx, dy);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.attn, &dctx, c.seq, self.heads);
        let mut dx = self.q.backward(&c.x, &dq);
        dx.add_assign(&self.k.backward(&c.x, &dk));
        dx.add_assign(&self.v.backward(&c.x, &dv));
        dx
    }
}

impl<T: Real> Parameters<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Pre-norm encoder block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    n1: NormCache<T>,
    attn: MhaCache<T>,
    n2: NormCache<T>,
    h2: Tensor<T>,
    pre_act: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Real> EncoderBlock<T> {
    pub fn new(name: &str, cfg: &ModelConfig, prng: &mut Prng) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), d)?,
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, cfg.heads, prng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), d)?,
            fc1: Linear::new(&format!("{name}.mlp.fc1"), d, cfg.hidden(), prng)?,
            fc2: Linear::new(&format!("{name}.mlp.fc2"), cfg.hidden(), d, prng)?,
            activation: cfg.activation,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, seq: usize) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (h1, n1) = self.norm1.forward(x)?;
        let (a, attn) = self.attn.forward(&h1, seq)?;
        let mut x2 = x.clone();
        x2.add_assign(&a);
        let (h2, n2) = self.norm2.forward(&x2)?;
        let pre_act = self.fc1.forward(&h2)?;
        let act = self.activation.forward(&pre_act);
        let m = self.fc2.forward(&act)?;
        x2.add_assign(&m);
        Ok((x2, BlockCache { n1, attn, n2, h2, pre_act, act }))
    }

    pub fn backward(&mut self, c: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dact = self.fc2.backward(&c.act, dy);
        let dpre = self.activation.backward(&c.pre_act, &dact);
        let dh2 = self.fc1.backward(&c.h2, &dpre);
        let mut dx2 = dy.clone();
        dx2.add_assign(&self.norm2.backward(&c.n2, &dh2));
        let dh1 = self.attn.backward(&c.attn, &dx2);
        let mut dx = dx2;
        dx.add_assign(&self.norm1.backward(&c.n1, &dh1));
        dx
    }
}

impl<T: Real> Parameters<T> for EncoderBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
