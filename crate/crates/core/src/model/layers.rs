//! Building blocks: linear layers, layer norm, feed-forward, multi-head
//! attention and multi-scale deformable attention.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{DeformGeom, LevelShape, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(ps, &format!("{name}.l1"), d, hidden, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.l1.forward(t, x);
        let h = t.relu(h);
        self.l2.forward(t, h)
    }
}

/// Standard scaled dot-product attention with `heads` heads.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            out: Linear::new(ps, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }
}

/// Multi-head attention of `queries` over `keys`/`values`.
///
/// `mask` is added to the raw scores (`[Q, K]`); use a large negative value to
/// hide a key. Returns the merged output and the per-head attention weights.
pub fn multi_head_attention(
    t: &mut Tape,
    p: &MultiHeadAttention,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<&Tensor>,
) -> (Var, Vec<Var>) {
    let q = p.q.forward(t, queries);
    let k = p.k.forward(t, keys);
    let v = p.v.forward(t, values);
    let d = t.value(q).cols();
    let nk = t.value(k).rows();
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for m in 0..p.heads {
        let qh = t.slice_cols(q, m * dh, (m + 1) * dh);
        let kh = t.slice_cols(k, m * dh, (m + 1) * dh);
        let vh = t.slice_cols(v, m * dh, (m + 1) * dh);
        let s = t.matmul_t(qh, false, kh, true);
        let mut s = t.scale(s, scale);
        if let Some(mask) = mask {
            s = t.add_const(s, mask);
        }
        let a = t.softmax(s, nk);
        weights.push(a);
        outs.push(t.matmul(a, vh));
    }
    let merged = t.concat_cols(&outs);
    (p.out.forward(t, merged), weights)
}

/// Multi-scale deformable attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub attn: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub dim: usize,
}

impl DeformableAttention {
    /// Offsets start at zero weight with a bias fanning each head out in its
    /// own direction (`k + 1` cells for point `k`); attention starts uniform.
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        d_emb: usize,
        heads: usize,
        levels: usize,
        points: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let slots = heads * levels * points;
        let offsets = Linear::zeros(ps, &format!("{name}.offsets"), d_emb, slots * dim);
        let bias = &mut ps.get_mut(offsets.b).data;
        for m in 0..heads {
            let theta = 2.0 * PI * m as f64 / heads as f64;
            let mut dir = vec![0.0; dim];
            dir[0] = theta.cos();
            if dim > 1 {
                dir[1] = theta.sin();
            }
            if dim > 2 {
                // alternate heads tilt up and down the third axis
                dir[2] = if m % 2 == 0 { 0.5 } else { -0.5 };
            }
            let mx = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for l in 0..levels {
                for k in 0..points {
                    let slot = (m * levels + l) * points + k;
                    for a in 0..dim {
                        bias[slot * dim + a] = dir[a] / mx * (k + 1) as f64;
                    }
                }
            }
        }
        Self {
            offsets,
            attn: Linear::zeros(ps, &format!("{name}.attn"), d_emb, slots),
            value: Linear::new(ps, &format!("{name}.value"), d_emb, d_emb, rng),
            out: Linear::new(ps, &format!("{name}.out"), d_emb, d_emb, rng),
            heads,
            levels,
            points,
            dim,
        }
    }

    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Deformable attention of `query` (`[Q, d_emb]`) into the flattened feature
/// pyramid `features` (`[T, d_emb]`) around reference points `refs`
/// (`[Q, dim]`, normalized).
///
/// Offsets are predicted in cells of each level and the attention weights are
/// normalized jointly over all levels and points of a head.
pub fn deformable_attention(
    t: &mut Tape,
    p: &DeformableAttention,
    query: Var,
    refs: Var,
    features: Var,
    levels: &[LevelShape],
) -> Var {
    assert_eq!(levels.len(), p.levels, "level count");
    let d = p.dim;
    let slots = p.slots();
    let off = p.offsets.forward(t, query);
    let mut scale = vec![0.0; slots * d];
    for m in 0..p.heads {
        for (l, lvl) in levels.iter().enumerate() {
            for k in 0..p.points {
                let slot = (m * p.levels + l) * p.points + k;
                for a in 0..d {
                    scale[slot * d + a] = 1.0 / lvl.dims[a] as f64;
                }
            }
        }
    }
    let off = t.mul_const_row(off, Rc::new(scale));
    let spread: Vec<usize> = (0..slots * d).map(|i| i % d).collect();
    let refs_wide = t.gather_cols(refs, Rc::new(spread));
    let locs = t.add(refs_wide, off);
    let logits = p.attn.forward(t, query);
    let attn = t.softmax(logits, p.levels * p.points);
    let value = p.value.forward(t, features);
    let width = t.value(value).cols();
    let geom = Rc::new(DeformGeom {
        levels: levels.to_vec(),
        heads: p.heads,
        points: p.points,
        head_dim: width / p.heads,
        dim: d,
    });
    let sampled = t.deform_sample(value, locs, attn, geom);
    p.out.forward(t, sampled)
}

/// Sinusoidal encoding of normalized coordinates, `width` values per point.
///
/// The width is split evenly across axes; each axis gets sine/cosine pairs at
/// geometrically spaced frequencies.
pub fn sine_position_encoding(coords: &[f64], dim: usize, width: usize) -> Tensor {
    let n = coords.len() / dim;
    let per_axis = (width / dim) & !1;
    let pairs = per_axis / 2;
    let mut out = vec![0.0; n * width];
    for i in 0..n {
        for a in 0..dim {
            let x = coords[i * dim + a] * 2.0 * PI;
            for j in 0..pairs {
                let freq = 10000f64.powf(2.0 * j as f64 / per_axis as f64);
                out[i * width + a * per_axis + 2 * j] = (x / freq).sin();
                out[i * width + a * per_axis + 2 * j + 1] = (x / freq).cos();
            }
        }
    }
    Tensor::matrix(n, width, out)
}

/// Normalized cell-center coordinates of every cell of a grid, x fastest.
pub fn grid_centers(dims: &[usize]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let d = dims.len();
    let mut out = Vec::with_capacity(n * d);
    let mut idx = vec![0usize; d];
    for i in 0..n {
        crate::autograd::decode(i, dims, &mut idx);
        for a in 0..d {
            out.push((idx[a] as f64 + 0.5) / dims[a] as f64);
        }
    }
    out
}
