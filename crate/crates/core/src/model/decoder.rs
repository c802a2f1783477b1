use crate::error::{bail, Result};
use crate::nn::conv::ConvCache;
use crate::nn::{Conv2d, Param, Parameters, Prng, Real, Tensor};

use super::backbone::Backbone;
use super::config::{GRID, INPUT_SIZE, NUM_PATCHES, PATCH, PATCH_PIXELS};

/// Maps an 8×8 token grid back to a 128×128 spectrogram-shaped map.
#[derive(Clone, Debug)]
pub struct CnnDecoder<T> {
    /// 3×3, `d → d`, padding 1, followed by ReLU.
    pub conv_a: Conv2d<T>,
    /// 1×1, `d → 256`; channel `c` of patch `p` lands on pixel `c` of that patch.
    pub conv_b: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    visible: Vec<usize>,
    cache_a: ConvCache<T>,
    pre_a: Tensor<T>,
    cache_b: ConvCache<T>,
}

impl<T: Real> CnnDecoder<T> {
    pub fn new(embed_dim: usize, seed: u64) -> Result<Self> {
        let mut prng = Prng::new(seed);
        Ok(Self {
            conv_a: Conv2d::new("decoder.conv_a", embed_dim, embed_dim, 3, 1, 1, &mut prng)?,
            conv_b: Conv2d::new("decoder.conv_b", embed_dim, PATCH_PIXELS, 1, 1, 0, &mut prng)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.conv_a.c_in()
    }

    /// Decodes one sample's tokens (`[(1+V) × d]`, CLS first, then the
    /// patches listed in `visible`). Masked patches are filled with the
    /// backbone's mask token plus their positional encoding.
    pub fn decode_map(
        &self,
        backbone: &Backbone<T>,
        tokens: &[T],
        visible: &[usize],
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let d = self.embed_dim();
        if backbone.embed_dim() != d {
            bail!(Shape, "decoder width {d} does not match backbone width {}", backbone.embed_dim());
        }
        if tokens.len() != (1 + visible.len()) * d {
            bail!(Shape, "expected {} token rows of width {d}", 1 + visible.len());
        }
        let mut filled = [false; NUM_PATCHES];
        let mut grid = vec![T::zero(); d * NUM_PATCHES];
        for (j, &p) in visible.iter().enumerate() {
            if p >= NUM_PATCHES || filled[p] {
                bail!(Internal, "visible patch {p} out of range or repeated");
            }
            filled[p] = true;
            let row = &tokens[(1 + j) * d..(2 + j) * d];
            for (c, &v) in row.iter().enumerate() {
                grid[c * NUM_PATCHES + p] = v;
            }
        }
        let mask = backbone.mask_token.value.data();
        let pos = backbone.positional();
        for p in 0..NUM_PATCHES {
            if filled[p] {
                continue;
            }
            filled[p] = true;
            for (c, (&m, &e)) in mask.iter().zip(pos.row(1 + p)).enumerate() {
                grid[c * NUM_PATCHES + p] = m + e;
            }
        }
        if !filled.iter().all(|&f| f) {
            bail!(Internal, "decoder grid incomplete");
        }
        let grid = Tensor::from_vec(&[d, GRID, GRID], grid)?;
        let (pre_a, cache_a) = self.conv_a.forward(&grid)?;
        let act = pre_a.map(|v| v.max(T::zero()));
        let (out, cache_b) = self.conv_b.forward(&act)?;
        let mut map = Tensor::zeros(&[INPUT_SIZE, INPUT_SIZE]);
        scatter(out.data(), map.data_mut());
        Ok((map, DecoderCache { visible: visible.to_vec(), cache_a, pre_a, cache_b }))
    }

    /// Accumulates decoder gradients. Returns `∂L/∂tokens` (CLS row zero)
    /// and the gradient for the mask token.
    pub fn backward(&mut self, c: &DecoderCache<T>, d_map: &Tensor<T>) -> (Vec<T>, Vec<T>) {
        let d = self.embed_dim();
        let mut d_out = vec![T::zero(); PATCH_PIXELS * NUM_PATCHES];
        gather(d_map.data(), &mut d_out);
        let d_out = Tensor::from_vec(&[PATCH_PIXELS, GRID, GRID], d_out).expect("decoder dims");
        let mut d_act = self.conv_b.backward(&c.cache_b, &d_out);
        for (g, &p) in d_act.data_mut().iter_mut().zip(c.pre_a.data()) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
        let d_grid = self.conv_a.backward(&c.cache_a, &d_act);
        let g = d_grid.data();
        let mut d_tokens = vec![T::zero(); (1 + c.visible.len()) * d];
        let mut is_visible = [false; NUM_PATCHES];
        for (j, &p) in c.visible.iter().enumerate() {
            is_visible[p] = true;
            for ch in 0..d {
                d_tokens[(1 + j) * d + ch] = g[ch * NUM_PATCHES + p];
            }
        }
        let mut d_mask = vec![T::zero(); d];
        for p in (0..NUM_PATCHES).filter(|&p| !is_visible[p]) {
            for (ch, m) in d_mask.iter_mut().enumerate() {
                *m += g[ch * NUM_PATCHES + p];
            }
        }
        (d_tokens, d_mask)
    }
}

/// `[256 × 64]` channel-major patches → row-major 128×128 map.
fn scatter<T: Copy>(channels: &[T], map: &mut [T]) {
    for p in 0..NUM_PATCHES {
        let (pr, pc) = (p / GRID, p % GRID);
        for c in 0..PATCH_PIXELS {
            let (i, j) = (c / PATCH, c % PATCH);
            map[(pr * PATCH + i) * INPUT_SIZE + pc * PATCH + j] = channels[c * NUM_PATCHES + p];
        }
    }
}

fn gather<T: Copy>(map: &[T], channels: &mut [T]) {
    for p in 0..NUM_PATCHES {
        let (pr, pc) = (p / GRID, p % GRID);
        for c in 0..PATCH_PIXELS {
            let (i, j) = (c / PATCH, c % PATCH);
            channels[c * NUM_PATCHES + p] = map[(pr * PATCH + i) * INPUT_SIZE + pc * PATCH + j];
        }
    }
}

impl<T: Real> Parameters<T> for CnnDecoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv_a.visit(f);
        self.conv_b.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv_a.visit_mut(f);
        self.conv_b.visit_mut(f);
    }
}
