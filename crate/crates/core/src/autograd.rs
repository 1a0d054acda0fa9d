//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. Parameters are read straight out of a
//! [`ParamStore`] without copying.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of an N-d convolution over inputs laid out `[channels, spatial]`
/// with the first spatial coordinate varying fastest.
#[derive(Debug, Clone)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    /// `map[ko * out_len + o]` = input spatial index, or `usize::MAX` for padding.
    map: Vec<usize>,
}

impl ConvGeom {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_dims: &[usize],
    ) -> Self {
        let out_dims: Vec<usize> = in_dims
            .iter()
            .map(|&n| (n + 2 * pad).saturating_sub(kernel) / stride + 1)
            .collect();
        let d = in_dims.len();
        let out_len: usize = out_dims.iter().product();
        let k_len = kernel.pow(d as u32);
        let mut map = vec![usize::MAX; k_len * out_len];
        let mut ko_idx = vec![0usize; d];
        let mut o_idx = vec![0usize; d];
        for ko in 0..k_len {
            decode(ko, &vec![kernel; d], &mut ko_idx);
            for o in 0..out_len {
                decode(o, &out_dims, &mut o_idx);
                let mut lin = 0usize;
                let mut stride_acc = 1usize;
                let mut inside = true;
                for a in 0..d {
                    let pos = (o_idx[a] * stride + ko_idx[a]) as isize - pad as isize;
                    if pos < 0 || pos >= in_dims[a] as isize {
                        inside = false;
                        break;
                    }
                    lin += pos as usize * stride_acc;
                    stride_acc *= in_dims[a];
                }
                if inside {
                    map[ko * out_len + o] = lin;
                }
            }
        }
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_dims: in_dims.to_vec(),
            out_dims,
            map,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.pow(self.in_dims.len() as u32)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (kl, ol, il) = (self.kernel_len(), self.out_len(), self.in_len());
        let mut cols = vec![0.0; self.in_ch * kl * ol];
        for c in 0..self.in_ch {
            let xc = &x[c * il..(c + 1) * il];
            for ko in 0..kl {
                let row = &mut cols[(c * kl + ko) * ol..(c * kl + ko + 1) * ol];
                let m = &self.map[ko * ol..(ko + 1) * ol];
                for (dst, &src) in row.iter_mut().zip(m) {
                    if src != usize::MAX {
                        *dst = xc[src];
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (kl, ol, il) = (self.kernel_len(), self.out_len(), self.in_len());
        for c in 0..self.in_ch {
            let dxc = &mut dx[c * il..(c + 1) * il];
            for ko in 0..kl {
                let row = &cols[(c * kl + ko) * ol..(c * kl + ko + 1) * ol];
                let m = &self.map[ko * ol..(ko + 1) * ol];
                for (&g, &dst) in row.iter().zip(m) {
                    if dst != usize::MAX {
                        dxc[dst] += g;
                    }
                }
            }
        }
    }
}

/// Mixed-radix decode of `i` into per-axis indices, first axis fastest.
pub(crate) fn decode(mut i: usize, dims: &[usize], out: &mut [usize]) {
    for (o, &n) in out.iter_mut().zip(dims) {
        *o = i % n;
        i /= n;
    }
}

/// One feature level inside a flattened multi-level value tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelShape {
    /// Spatial sizes in coordinate order (x, y, z), x fastest in memory.
    pub dims: Vec<usize>,
    /// First row of this level in the flattened value tensor.
    pub start: usize,
}

impl LevelShape {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layout of the multi-scale deformable sampling kernel.
#[derive(Debug, Clone)]
pub struct DeformGeom {
    pub levels: Vec<LevelShape>,
    pub heads: usize,
    pub points: usize,
    pub head_dim: usize,
    pub dim: usize,
}

impl DeformGeom {
    pub fn slots(&self) -> usize {
        self.heads * self.levels.len() * self.points
    }
}

/// Multilinear interpolation corners of a normalized point on a grid:
/// `(linear index, weight, per-axis d weight / d coordinate)`.
///
/// Corners outside the grid are dropped, so sampling outside is zero padded.
/// Pixel centers sit at `(i + 0.5) / n`.
pub fn interp_corners(loc: &[f64], dims: &[usize], out: &mut Vec<(usize, f64, [f64; 3])>) {
    out.clear();
    let d = dims.len();
    let mut base = [0isize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..d {
        let u = loc[a] * dims[a] as f64 - 0.5;
        let f = u.floor();
        base[a] = f as isize;
        frac[a] = u - f;
    }
    'corner: for mask in 0..(1usize << d) {
        let mut lin = 0usize;
        let mut stride = 1usize;
        let mut w = 1.0;
        let mut factors = [0.0f64; 3];
        for a in 0..d {
            let bit = (mask >> a) & 1;
            let idx = base[a] + bit as isize;
            if idx < 0 || idx >= dims[a] as isize {
                continue 'corner;
            }
            lin += idx as usize * stride;
            stride *= dims[a];
            factors[a] = if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            w *= factors[a];
        }
        let mut dw = [0.0f64; 3];
        for a in 0..d {
            let sign = if (mask >> a) & 1 == 1 { 1.0 } else { -1.0 };
            let mut p = sign * dims[a] as f64;
            for b in 0..d {
                if b != a {
                    p *= factors[b];
                }
            }
            dw[a] = p;
        }
        out.push((lin, w, dw));
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    MulConstRow(Var, Rc<Vec<f64>>),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        group: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    GatherCols {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: Rc<ConvGeom>,
        cols: Vec<f64>,
    },
    Deform {
        value: Var,
        locs: Var,
        attn: Var,
        geom: Rc<DeformGeom>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        coef: Vec<f64>,
        probs: Vec<f64>,
    },
    L1 {
        x: Var,
        target: Vec<f64>,
        scale: f64,
    },
    Giou {
        pred: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
        scale: f64,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    grad: bool,
}

/// A computation tape bound to one parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter touched by the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `op(a) · op(b)` on matrices.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = if ta {
            (av.cols(), av.rows())
        } else {
            (av.rows(), av.cols())
        };
        let (k2, n) = if tb {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape, bv.shape);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, ta, &bv.data, tb, 0.0, &mut out);
        let grad = self.g(a) || self.g(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, ta, b, tb }, grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(av.shape.clone(), data);
        let grad = self.g(a) || self.g(b);
        self.push(t, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| v * c).collect());
        let grad = self.g(x);
        self.push(t, Op::Scale(x, c), grad)
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data.len(), c.data.len());
        let data = xv.data.iter().zip(&c.data).map(|(a, b)| a + b).collect();
        let t = Tensor::new(xv.shape.clone(), data);
        let grad = self.g(x);
        self.push(t, Op::AddConst(x), grad)
    }

    /// Adds a row vector `b` (`[cols]` or `[1, cols]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape.last().unwrap();
        assert_eq!(bv.numel(), c, "bias width");
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&bv.data) {
                *v += bb;
            }
        }
        let t = Tensor::new(xv.shape.clone(), data);
        let grad = self.g(x) || self.g(b);
        self.push(t, Op::AddBias(x, b), grad)
    }

    /// Multiplies every row of `x` elementwise by the row vector `g`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        let c = *xv.shape.last().unwrap();
        assert_eq!(gv.numel(), c);
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(&gv.data) {
                *v *= s;
            }
        }
        let t = Tensor::new(xv.shape.clone(), data);
        let grad = self.g(x) || self.g(g);
        self.push(t, Op::MulRow(x, g), grad)
    }

    pub fn mul_const_row(&mut self, x: Var, row: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        let c = *xv.shape.last().unwrap();
        assert_eq!(row.len(), c);
        let mut data = xv.data.clone();
        for r in data.chunks_mut(c) {
            for (v, s) in r.iter_mut().zip(row.iter()) {
                *v *= s;
            }
        }
        let t = Tensor::new(xv.shape.clone(), data);
        let grad = self.g(x);
        self.push(t, Op::MulConstRow(x, row), grad)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape.clone(),
            xv.data.iter().map(|v| v.max(0.0)).collect(),
        );
        let grad = self.g(x);
        self.push(t, Op::Relu(x), grad)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape.clone(),
            xv.data.iter().map(|v| sigmoid(*v)).collect(),
        );
        let grad = self.g(x);
        self.push(t, Op::Sigmoid(x), grad)
    }

    /// Softmax over consecutive groups of `group` elements.
    pub fn softmax(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel() % group, 0);
        let mut data = xv.data.clone();
        for row in data.chunks_mut(group) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape.clone(), data);
        let grad = self.g(x);
        self.push(t, Op::Softmax { x, group }, grad)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *xv.shape.last().unwrap();
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let t = Tensor::new(xv.shape.clone(), out);
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            grad,
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|v| self.value(*v).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (v, w) in xs.iter().zip(&widths) {
            let t = self.value(*v);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let grad = xs.iter().any(|v| self.g(*v));
        self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(xs.to_vec()),
            grad,
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).cols();
        let mut out = Vec::new();
        for v in xs {
            let t = self.value(*v);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            out.extend_from_slice(&t.data);
        }
        let rows = out.len() / cols.max(1);
        let grad = xs.iter().any(|v| self.g(*v));
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(xs.to_vec()),
            grad,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        assert!(start <= end && end <= c);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.data[r * c + start..r * c + end]);
        }
        let grad = self.g(x);
        self.push(
            Tensor::matrix(rows, w, out),
            Op::SliceCols { x, start },
            grad,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out = xv.data[start * c..end * c].to_vec();
        let grad = self.g(x);
        self.push(
            Tensor::matrix(end - start, c, out),
            Op::SliceRows { x, start },
            grad,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(xv.row(i));
        }
        let grad = self.g(x);
        let n = idx.len();
        self.push(Tensor::matrix(n, c, out), Op::GatherRows { x, idx }, grad)
    }

    pub fn gather_cols(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let n = idx.len();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for (j, &i) in idx.iter().enumerate() {
                out[r * n + j] = xv.data[r * c + i];
            }
        }
        let grad = self.g(x);
        self.push(
            Tensor::matrix(rows, n, out),
            Op::GatherCols { x, idx },
            grad,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let grad = self.g(x);
        self.push(t, Op::Transpose(x), grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(shape.to_vec(), xv.data.clone());
        let grad = self.g(x);
        self.push(t, Op::Reshape(x), grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    /// Convolution of `x: [in_ch, in_len]` with `w: [out_ch, in_ch * k^d]`
    /// and bias `b: [out_ch]`; output `[out_ch, out_len]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: Rc<ConvGeom>) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.numel(),
            geom.in_ch * geom.in_len(),
            "conv input {:?} vs geometry {}x{:?}",
            xv.shape,
            geom.in_ch,
            geom.in_dims
        );
        let cols = geom.im2col(&xv.data);
        let wv = self.value(w);
        let krows = geom.in_ch * geom.kernel_len();
        assert_eq!(wv.shape, vec![geom.out_ch, krows], "conv weight shape");
        let ol = geom.out_len();
        let mut out = vec![0.0; geom.out_ch * ol];
        let bv = self.value(b);
        for (o, row) in out.chunks_mut(ol).enumerate() {
            row.fill(bv.data[o]);
        }
        gemm(
            geom.out_ch,
            krows,
            ol,
            &wv.data,
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        let grad = self.g(x) || self.g(w) || self.g(b);
        let t = Tensor::matrix(geom.out_ch, ol, out);
        self.push(
            t,
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            },
            grad,
        )
    }

    /// Multi-scale deformable sampling.
    ///
    /// `value: [sum of level sizes, heads * head_dim]`,
    /// `locs: [queries, heads * levels * points * dim]` (normalized),
    /// `attn: [queries, heads * levels * points]`.
    /// Output `[queries, heads * head_dim]`.
    pub fn deform_sample(&mut self, value: Var, locs: Var, attn: Var, geom: Rc<DeformGeom>) -> Var {
        let (vv, lv, av) = (self.value(value), self.value(locs), self.value(attn));
        let q = lv.rows();
        let (m_heads, dh, d) = (geom.heads, geom.head_dim, geom.dim);
        let nl = geom.levels.len();
        let np = geom.points;
        let width = m_heads * dh;
        assert_eq!(vv.cols(), width, "value width");
        assert_eq!(lv.cols(), geom.slots() * d, "locs width");
        assert_eq!(av.cols(), geom.slots(), "attn width");
        assert_eq!(av.rows(), q);
        let mut out = vec![0.0; q * width];
        let mut corners = Vec::with_capacity(8);
        for qi in 0..q {
            for m in 0..m_heads {
                let orow = &mut out[qi * width + m * dh..qi * width + (m + 1) * dh];
                for (l, lvl) in geom.levels.iter().enumerate() {
                    for k in 0..np {
                        let slot = (m * nl + l) * np + k;
                        let a = av.data[qi * geom.slots() + slot];
                        let loc =
                            &lv.data[qi * lv.cols() + slot * d..qi * lv.cols() + (slot + 1) * d];
                        interp_corners(loc, &lvl.dims, &mut corners);
                        for &(idx, w, _) in &corners {
                            let src = &vv.data[(lvl.start + idx) * width + m * dh..][..dh];
                            let s = a * w;
                            for (o, v) in orow.iter_mut().zip(src) {
                                *o += s * v;
                            }
                        }
                    }
                }
            }
        }
        let grad = self.g(value) || self.g(locs) || self.g(attn);
        self.push(
            Tensor::matrix(q, width, out),
            Op::Deform {
                value,
                locs,
                attn,
                geom,
            },
            grad,
        )
    }

    /// `Σ_i coef_i · CE(logits_i, target_i)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], coef: &[f64]) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        assert_eq!(lv.rows(), targets.len());
        assert_eq!(coef.len(), targets.len());
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += coef[i] * (lse - row[targets[i]]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let grad = self.g(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                coef: coef.to_vec(),
                probs,
            },
            grad,
        )
    }

    /// `scale · Σ |x - target|`.
    pub fn l1(&mut self, x: Var, target: &[f64], scale: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), target.len());
        let s: f64 = xv.data.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        let grad = self.g(x);
        self.push(
            Tensor::scalar(scale * s),
            Op::L1 {
                x,
                target: target.to_vec(),
                scale,
            },
            grad,
        )
    }

    /// `scale · Σ_i (1 - GIoU(pred_i, target_i))` where `pred: [n, 2d]` holds
    /// center-size boxes and the targets are `(lo, hi)` corners, `n * d` each.
    pub fn giou_loss(&mut self, pred: Var, lo: &[f64], hi: &[f64], scale: f64) -> Var {
        let pv = self.value(pred);
        let d = pv.cols() / 2;
        let mut total = 0.0;
        for i in 0..pv.rows() {
            let row = pv.row(i);
            let g = giou_terms(
                &row[..d],
                &row[d..],
                &lo[i * d..(i + 1) * d],
                &hi[i * d..(i + 1) * d],
            );
            total += 1.0 - g.giou;
        }
        let grad = self.g(pred);
        self.push(
            Tensor::scalar(scale * total),
            Op::Giou {
                pred,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
                scale,
            },
            grad,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let lv = self.value(loss);
        assert_eq!(lv.numel(), 1, "backward needs a scalar");
        grads[loss.0] = Some(Tensor::new(lv.shape.clone(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut params: Vec<(ParamId, Var)> =
            self.param_vars.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.g(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.value(v).shape));
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = &gout.data;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = if *ta {
                    (av.cols(), av.rows())
                } else {
                    (av.rows(), av.cols())
                };
                let n = gout.cols();
                self.acc(grads, *a, |ga| {
                    if *ta {
                        // A stored [k, m]: dA = op(B) · dC^T
                        gemm(k, n, m, &bv.data, *tb, g, true, 1.0, ga);
                    } else {
                        // dA = dC · op(B)^T
                        gemm(m, n, k, g, false, &bv.data, !*tb, 1.0, ga);
                    }
                });
                self.acc(grads, *b, |gb| {
                    if *tb {
                        // B stored [n, k]: dB = dC^T · op(A)
                        gemm(n, m, k, g, true, &av.data, *ta, 1.0, gb);
                    } else {
                        // dB = op(A)^T · dC
                        gemm(k, m, n, &av.data, !*ta, g, false, 1.0, gb);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((d, x), y) in ga.iter_mut().zip(g).zip(&bv.data) {
                        *d += x * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((d, x), y) in gb.iter_mut().zip(g).zip(&av.data) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| axpy(gx, g, *c)),
            Op::AddConst(x) => self.acc(grads, *x, |gx| axpy(gx, g, 1.0)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |gx| axpy(gx, g, 1.0));
                let c = self.value(*b).numel();
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(c) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = sv.numel();
                self.acc(grads, *x, |gx| {
                    for (grow, orow) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, o), sc) in grow.iter_mut().zip(orow).zip(&sv.data) {
                            *d += o * sc;
                        }
                    }
                });
                self.acc(grads, *s, |gs| {
                    for (orow, xrow) in g.chunks(c).zip(xv.data.chunks(c)) {
                        for ((d, o), xx) in gs.iter_mut().zip(orow).zip(xrow) {
                            *d += o * xx;
                        }
                    }
                });
            }
            Op::MulConstRow(x, row) => {
                let c = row.len();
                self.acc(grads, *x, |gx| {
                    for (grow, orow) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, o), sc) in grow.iter_mut().zip(orow).zip(row.iter()) {
                            *d += o * sc;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, o), v) in gx.iter_mut().zip(g).zip(&xv.data) {
                        if *v > 0.0 {
                            *d += o;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value.as_ref().unwrap().data;
                self.acc(grads, *x, |gx| {
                    for ((d, o), s) in gx.iter_mut().zip(g).zip(y) {
                        *d += o * s * (1.0 - s);
                    }
                });
            }
            Op::Softmax { x, group } => {
                let y = &self.nodes[i].value.as_ref().unwrap().data;
                self.acc(grads, *x, |gx| {
                    for ((grow, orow), yrow) in gx
                        .chunks_mut(*group)
                        .zip(g.chunks(*group))
                        .zip(y.chunks(*group))
                    {
                        let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, o), yy) in grow.iter_mut().zip(orow).zip(yrow) {
                            *d += yy * (o - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let c = gv.numel();
                self.acc(grads, *gamma, |gg| {
                    for (orow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, o), h) in gg.iter_mut().zip(orow).zip(hrow) {
                            *d += o * h;
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for orow in g.chunks(c) {
                        axpy(gb, orow, 1.0);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let n = c as f64;
                    let mut dh = vec![0.0; c];
                    for (r, (grow, orow)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = orow[j] * gv.data[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        for j in 0..c {
                            grow[j] += is / n * (n * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let rows = gout.rows();
                let total = gout.cols();
                let mut off = 0;
                for v in xs {
                    let w = self.value(*v).cols();
                    self.acc(grads, *v, |gv| {
                        for r in 0..rows {
                            axpy(
                                &mut gv[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                                1.0,
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for v in xs {
                    let n = self.value(*v).numel();
                    self.acc(grads, *v, |gv| axpy(gv, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = gout.cols();
                self.acc(grads, *x, |gx| {
                    for (r, orow) in g.chunks(w).enumerate() {
                        axpy(&mut gx[r * c + start..r * c + start + w], orow, 1.0);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (j, &r) in idx.iter().enumerate() {
                        axpy(&mut gx[r * c..(r + 1) * c], &g[j * c..(j + 1) * c], 1.0);
                    }
                });
            }
            Op::GatherCols { x, idx } => {
                let c = self.value(*x).cols();
                let n = idx.len();
                self.acc(grads, *x, |gx| {
                    for (r, orow) in g.chunks(n).enumerate() {
                        for (j, &col) in idx.iter().enumerate() {
                            gx[r * c + col] += orow[j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let gt = gout.transpose();
                self.acc(grads, *x, |gx| axpy(gx, &gt.data, 1.0));
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| axpy(gx, g, 1.0)),
            Op::Sum(x) => {
                let s = g[0];
                self.acc(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ol = geom.out_len();
                let krows = geom.in_ch * geom.kernel_len();
                self.acc(grads, *b, |gb| {
                    for (o, row) in g.chunks(ol).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                });
                self.acc(grads, *w, |gw| {
                    gemm(geom.out_ch, ol, krows, g, false, cols, true, 1.0, gw);
                });
                if self.g(*x) {
                    let wv = self.value(*w);
                    let mut dcols = vec![0.0; krows * ol];
                    gemm(
                        krows,
                        geom.out_ch,
                        ol,
                        &wv.data,
                        true,
                        g,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    self.acc(grads, *x, |gx| geom.col2im(&dcols, gx));
                }
            }
            Op::Deform {
                value,
                locs,
                attn,
                geom,
            } => self.backprop_deform(*value, *locs, *attn, geom, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                coef,
                probs,
            } => {
                let s = g[0];
                let c = self.value(*logits).cols();
                self.acc(grads, *logits, |gl| {
                    for (r, (grow, prow)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let w = s * coef[r];
                        for (j, (d, p)) in grow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *d += w * (p - onehot);
                        }
                    }
                });
            }
            Op::L1 { x, target, scale } => {
                let s = g[0] * scale;
                let xv = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, v), t) in gx.iter_mut().zip(&xv.data).zip(target) {
                        let diff = v - t;
                        if diff > 0.0 {
                            *d += s;
                        } else if diff < 0.0 {
                            *d -= s;
                        }
                    }
                });
            }
            Op::Giou {
                pred,
                lo,
                hi,
                scale,
            } => {
                let s = g[0] * scale;
                let pv = self.value(*pred);
                let d = pv.cols() / 2;
                self.acc(grads, *pred, |gp| {
                    for r in 0..pv.rows() {
                        let row = pv.row(r);
                        let t = giou_terms(
                            &row[..d],
                            &row[d..],
                            &lo[r * d..(r + 1) * d],
                            &hi[r * d..(r + 1) * d],
                        );
                        let grow = &mut gp[r * 2 * d..(r + 1) * 2 * d];
                        // loss = 1 - giou, so negate the giou gradient.
                        for a in 0..d {
                            grow[a] -= s * t.d_center[a];
                            grow[d + a] -= s * t.d_size[a];
                        }
                    }
                });
            }
        }
    }

    fn backprop_deform(
        &self,
        value: Var,
        locs: Var,
        attn: Var,
        geom: &DeformGeom,
        g: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (vv, lv, av) = (self.value(value), self.value(locs), self.value(attn));
        let q = lv.rows();
        let (m_heads, dh, d) = (geom.heads, geom.head_dim, geom.dim);
        let nl = geom.levels.len();
        let np = geom.points;
        let width = m_heads * dh;
        let slots = geom.slots();
        let need_v = self.g(value);
        let need_l = self.g(locs);
        let need_a = self.g(attn);
        let mut gval = if need_v {
            vec![0.0; vv.numel()]
        } else {
            Vec::new()
        };
        let mut gloc = if need_l {
            vec![0.0; lv.numel()]
        } else {
            Vec::new()
        };
        let mut gatt = if need_a {
            vec![0.0; av.numel()]
        } else {
            Vec::new()
        };
        let mut corners = Vec::with_capacity(8);
        for qi in 0..q {
            for m in 0..m_heads {
                let grow = &g[qi * width + m * dh..qi * width + (m + 1) * dh];
                for (l, lvl) in geom.levels.iter().enumerate() {
                    for k in 0..np {
                        let slot = (m * nl + l) * np + k;
                        let a = av.data[qi * slots + slot];
                        let loff = qi * lv.cols() + slot * d;
                        interp_corners(&lv.data[loff..loff + d], &lvl.dims, &mut corners);
                        let mut ga = 0.0;
                        for &(idx, w, dw) in &corners {
                            let row = (lvl.start + idx) * width + m * dh;
                            let src = &vv.data[row..row + dh];
                            let dot: f64 = src.iter().zip(grow).map(|(x, y)| x * y).sum();
                            ga += w * dot;
                            if need_v {
                                let s = a * w;
                                for (dv, go) in gval[row..row + dh].iter_mut().zip(grow) {
                                    *dv += s * go;
                                }
                            }
                            if need_l {
                                for ax in 0..d {
                                    gloc[loff + ax] += a * dot * dw[ax];
                                }
                            }
                        }
                        if need_a {
                            gatt[qi * slots + slot] += ga;
                        }
                    }
                }
            }
        }
        if need_v {
            self.acc(grads, value, |gv| axpy(gv, &gval, 1.0));
        }
        if need_l {
            self.acc(grads, locs, |gl| axpy(gl, &gloc, 1.0));
        }
        if need_a {
            self.acc(grads, attn, |ga| axpy(ga, &gatt, 1.0));
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) struct GiouTerms {
    pub giou: f64,
    pub d_center: [f64; 3],
    pub d_size: [f64; 3],
}

/// GIoU between a center-size box and a corner box, with its gradient
/// with respect to center and size.
pub(crate) fn giou_terms(c: &[f64], s: &[f64], tlo: &[f64], thi: &[f64]) -> GiouTerms {
    let d = c.len();
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    let mut w = [0.0; 3];
    let mut e = [0.0; 3];
    let mut sz = [0.0; 3];
    for a in 0..d {
        sz[a] = s[a].max(0.0);
        lo[a] = c[a] - 0.5 * sz[a];
        hi[a] = c[a] + 0.5 * sz[a];
        w[a] = (hi[a].min(thi[a]) - lo[a].max(tlo[a])).max(0.0);
        e[a] = hi[a].max(thi[a]) - lo[a].min(tlo[a]);
    }
    let prod_except = |v: &[f64; 3], skip: usize| -> f64 {
        (0..d).filter(|&b| b != skip).map(|b| v[b]).product()
    };
    let inter: f64 = w[..d].iter().product();
    let vp: f64 = sz[..d].iter().product();
    let vt: f64 = (0..d).map(|a| (thi[a] - tlo[a]).max(0.0)).product();
    let union = vp + vt - inter;
    let encl: f64 = e[..d].iter().product();
    let mut out = GiouTerms {
        giou: 0.0,
        d_center: [0.0; 3],
        d_size: [0.0; 3],
    };
    if union <= 0.0 || encl <= 0.0 {
        return out;
    }
    out.giou = inter / union - (encl - union) / encl;
    // giou = I/U - 1 + U/E with U = Vp + Vt - I
    let dg_di = (union + inter) / (union * union) - 1.0 / encl;
    let dg_dvp = -inter / (union * union) + 1.0 / encl;
    let dg_de = -union / (encl * encl);
    for a in 0..d {
        let mut dlo = 0.0;
        let mut dhi = 0.0;
        if w[a] > 0.0 {
            let di = dg_di * prod_except(&w, a);
            if hi[a] < thi[a] {
                dhi += di;
            }
            if lo[a] > tlo[a] {
                dlo -= di;
            }
        }
        let de = dg_de * prod_except(&e, a);
        if hi[a] >= thi[a] {
            dhi += de;
        }
        if lo[a] <= tlo[a] {
            dlo -= de;
        }
        out.d_center[a] = dlo + dhi;
        let mut ds = 0.5 * (dhi - dlo);
        if s[a] > 0.0 {
            ds += dg_dvp * prod_except(&sz, a);
        } else {
            ds = 0.0;
        }
        out.d_size[a] = ds;
    }
    out
}
