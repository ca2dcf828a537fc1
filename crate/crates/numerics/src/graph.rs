//! Recorded operation tape.
//!
//! Every op appends a node holding its output value; node order is therefore a
//! topological order and [`Graph::backward`] walks it once in reverse.
//! Spatial tensors are channels-last (`[H, W, C]`), token matrices are
//! `[tokens, channels]`.

use std::collections::HashMap;

use crate::error::{shape_err, NumericsError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::{Scalar, Tensor, IGNORE_LABEL};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Per-axis bilinear sampling table for 2x upsampling (align-corners false).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

enum Op<T> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Softmax {
        a: Var,
        axis: Axis,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reduce {
        a: Var,
        axis: Axis,
        scale: T,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        axis: Axis,
    },
    Upsample2x {
        a: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    AvgPool2x {
        a: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Reshape(Var),
    Transpose {
        a: Var,
        m: usize,
        n: usize,
    },
    SliceCols {
        a: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    NllClamped {
        p: Var,
        labels: Vec<u8>,
        classes: usize,
        valid: usize,
    },
    ClassMeans {
        f: Var,
        labels: Vec<u8>,
        counts: Vec<usize>,
        cols: usize,
    },
    Frobenius(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape with reverse-mode differentiation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph where nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Free leaf that receives a gradient (used by tests and checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param,
            requires_grad: self.grad_enabled && p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    // ---------------------------------------------------------------- linear

    /// `a [m,k] * b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] * b^T` with `b [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (b0, b1) = self.value(b).dims2("matmul")?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!(
                    "{:?} x {:?} (trans_b={trans_b})",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            trans_b,
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// `x [n, in] * w^T + bias` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a fixed or learned embedding table of identical shape.
    pub fn embedding_add(&mut self, x: Var, table: Var) -> Result<Var> {
        self.add(x, table)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcasts `row [n]` over the last axis of `a [.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [n] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        Ok(self.push(value, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_fwd);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        self.push(value, Op::Sqrt(a), &[a])
    }

    // ------------------------------------------------------------ reductions

    /// Softmax along `axis`, with denominators accumulated in `f64`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {shape:?}")));
        }
        let ax = Axis::of(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let base = o * ax.len * ax.inner + i;
                let idx = |j: usize| base + j * ax.inner;
                let mx = (0..ax.len)
                    .map(|j| x[idx(j)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..ax.len {
                    sum += (x[idx(j)].as_f64() - mx).exp();
                }
                for j in 0..ax.len {
                    out[idx(j)] = t(((x[idx(j)].as_f64() - mx).exp()) / sum);
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { a, axis: ax }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("{shape:?} with gamma {:?}", self.shape(gamma)),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / c.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = t(rs);
            for j in 0..c {
                let xh = (row[j].as_f64() - mean) * rs;
                xhat[r * c + j] = t(xh);
                out[r * c + j] = t(xh * g[j].as_f64() + b[j].as_f64());
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("reduce", format!("axis {axis} of {shape:?}")));
        }
        let ax = Axis::of(&shape, axis);
        let scale = if mean { 1.0 / ax.len as f64 } else { 1.0 };
        let x = self.value(a).data();
        let mut out = vec![T::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let mut s = 0.0;
                for j in 0..ax.len {
                    s += x[(o * ax.len + j) * ax.inner + i].as_f64();
                }
                out[o * ax.inner + i] = t(s * scale);
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                a,
                axis: ax,
                scale: t(scale),
            },
            &[a],
        ))
    }

    /// Sum along `axis` (the axis is removed).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.reshape(a, &[n]).expect("flatten")
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let f = self.flatten(a);
        self.reduce(f, 0, false).expect("rank 1")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let f = self.flatten(a);
        self.reduce(f, 0, true).expect("rank 1")
    }

    // ---------------------------------------------------------------- layout

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{base:?} vs {s:?}")));
            }
            dims.push((p, s[axis]));
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let ax = Axis::of(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..ax.outer {
            for &(p, d) in &dims {
                let chunk = d * ax.inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: dims,
                axis: ax,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let value = self.value(a).transpose2()?;
        Ok(self.push(value, Op::Transpose { a, m, n }, &[a]))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.push(
            value,
            Op::SliceCols {
                a,
                cols: n,
                start,
                len,
            },
            &[a],
        ))
    }

    /// Selects rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} of {m}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[idx.len(), n], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
                cols: n,
            },
            &[a],
        ))
    }

    // --------------------------------------------------------------- spatial

    fn hwc(&self, op: &'static str, a: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(a) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(shape_err(op, format!("expected [H,W,C], got {s:?}"))),
        }
    }

    /// Bilinear 2x upsampling of `[H,W,C]` (align-corners false).
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.hwc("upsample2x", a)?;
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); 4 * h * w * c];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let o = (oy * 2 * w + ox) * c;
                let taps = [
                    ((y0 * w + x0) * c, wy0 * wx0),
                    ((y0 * w + x1) * c, wy0 * wx1),
                    ((y1 * w + x0) * c, wy1 * wx0),
                    ((y1 * w + x1) * c, wy1 * wx1),
                ];
                for ch in 0..c {
                    let mut s = 0.0;
                    for &(base, wt) in &taps {
                        s += x[base + ch].as_f64() * wt;
                    }
                    out[o + ch] = t(s);
                }
            }
        }
        let value = Tensor::new(&[2 * h, 2 * w, c], out)?;
        Ok(self.push(value, Op::Upsample2x { a, h, w, c }, &[a]))
    }

    /// 2x2 average pooling of `[H,W,C]` with even `H`, `W`.
    pub fn avg_pool2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.hwc("avg_pool2x", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2x", format!("odd size {h}x{w}")));
        }
        let x = self.value(a).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); ho * wo * c];
        let q: T = t(0.25);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let at = |y: usize, xx: usize| x[(y * w + xx) * c + ch];
                    out[(oy * wo + ox) * c + ch] = (at(2 * oy, 2 * ox)
                        + at(2 * oy, 2 * ox + 1)
                        + at(2 * oy + 1, 2 * ox)
                        + at(2 * oy + 1, 2 * ox + 1))
                        * q;
                }
            }
        }
        let value = Tensor::new(&[ho, wo, c], out)?;
        Ok(self.push(value, Op::AvgPool2x { a, h, w, c }, &[a]))
    }

    /// 2-D convolution of `x [H,W,Cin]` with `w [Cout,kh,kw,Cin]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (h, wd, cin) = self.hwc("conv2d", x)?;
        let (cout, kh, kw) = match *self.shape(w) {
            [co, a, b, ci] if ci == cin => (co, a, b),
            ref s => {
                return Err(shape_err(
                    "conv2d",
                    format!("weight {s:?} for input channels {cin}"),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} on {h}x{wd}"),
            ));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let rows = geom.ho * geom.wo;
        let k = geom.patch_len();
        let mut out = vec![T::zero(); rows * cout];
        {
            let xs = self.value(x).data();
            let cols_owned;
            let cols: &[T] = if geom.is_pointwise() {
                xs
            } else {
                cols_owned = im2col(xs, &geom);
                &cols_owned
            };
            T::gemm(
                false,
                true,
                rows,
                k,
                cout,
                T::one(),
                cols,
                self.value(w).data(),
                T::zero(),
                &mut out,
            );
        }
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for chunk in out.chunks_mut(cout) {
                for (o, &bv) in chunk.iter_mut().zip(bs) {
                    *o = *o + bv;
                }
            }
        }
        let value = Tensor::new(&[geom.ho, geom.wo, cout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d { x, w, bias, geom }, &inputs))
    }

    // ---------------------------------------------------------------- losses

    /// Mean of `-ln(max(p[label], 1e-12))` over rows of `p [.., K]` whose
    /// label is not [`IGNORE_LABEL`]; zero when every row is ignored.
    pub fn nll_clamped(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        let k = *shape.last().unwrap_or(&0);
        let rows = self.value(p).numel() / k.max(1);
        if labels.len() != rows {
            return Err(shape_err(
                "nll_clamped",
                format!("{rows} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= k)
        {
            return Err(shape_err(
                "nll_clamped",
                format!("label {bad} with {k} classes"),
            ));
        }
        let ps = self.value(p).data();
        let mut sum = 0.0;
        let mut valid = 0;
        for (r, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            valid += 1;
            sum -= ps[r * k + l as usize].as_f64().max(LOG_CLAMP).ln();
        }
        let loss = if valid == 0 { 0.0 } else { sum / valid as f64 };
        let value = Tensor::scalar(t(loss));
        Ok(self.push(
            value,
            Op::NllClamped {
                p,
                labels: labels.to_vec(),
                classes: k,
                valid,
            },
            &[p],
        ))
    }

    /// Per-class means of the rows of `f [P, C]`; returns `[K, C]` and the
    /// per-class pixel counts. Ignored rows join no class; absent classes
    /// yield zero rows.
    pub fn class_means(
        &mut self,
        f: Var,
        labels: &[u8],
        classes: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let (rows, cols) = self.value(f).dims2("class_means")?;
        if labels.len() != rows {
            return Err(shape_err(
                "class_means",
                format!("{rows} rows vs {} labels", labels.len()),
            ));
        }
        let fs = self.value(f).data();
        let mut acc = vec![0.0f64; classes * cols];
        let mut counts = vec![0usize; classes];
        for (r, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let k = l as usize;
            if k >= classes {
                return Err(shape_err(
                    "class_means",
                    format!("label {l} with {classes} classes"),
                ));
            }
            counts[k] += 1;
            for c in 0..cols {
                acc[k * cols + c] += fs[r * cols + c].as_f64();
            }
        }
        let out = acc
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let n = counts[i / cols];
                if n == 0 {
                    T::zero()
                } else {
                    t(s / n as f64)
                }
            })
            .collect();
        let value = Tensor::new(&[classes, cols], out)?;
        let v = self.push(
            value,
            Op::ClassMeans {
                f,
                labels: labels.to_vec(),
                counts: counts.clone(),
                cols,
            },
            &[f],
        );
        Ok((v, counts))
    }

    /// Frobenius norm; the gradient at zero is taken as zero.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        let value = Tensor::scalar(t(s.sqrt()));
        self.push(value, Op::Frobenius(a), &[a])
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop_node(nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].requires_grad || self.grads.is_empty() {
            return None;
        }
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(self.shape(v), g.clone()).expect("grad shape"),
            // Reachable but unaffected by the loss.
            None => Tensor::zeros(self.shape(v)),
        })
    }

    /// Adds `scale * dL/dparam` for every trainable parameter used.
    pub fn accumulate_param_grads(&self, into: &mut Gradients<T>, scale: T) {
        let mut used: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        used.sort();
        for (&id, &v) in used {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            if let Some(Some(g)) = self.grads.get(v.0) {
                into.accumulate(id, g, self.shape(v), scale);
            }
        }
    }
}

fn gelu_consts() -> (f64, f64) {
    ((2.0 / std::f64::consts::PI).sqrt(), 0.044715)
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts();
    let xf = x.as_f64();
    t(0.5 * xf * (1.0 + (c * (xf + a * xf * xf * xf)).tanh()))
}

fn gelu_grad(x: f64) -> f64 {
    let (c, a) = gelu_consts();
    let th = (c * (x + a * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * a * x * x)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.ho * g.wo * k];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = (oy * g.wo + ox) * k;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = row + (ky * g.kw + kx) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = (oy * g.wo + ox) * k;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = row + (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] = dx[dst + c] + dcols[src + c];
                    }
                }
            }
        }
    }
}

/// Returns the (lazily zero-initialised) gradient buffer of `v`, or `None`
/// when `v` does not require a gradient.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul {
            a,
            b,
            trans_b,
            m,
            k,
            n,
        } => {
            // C = A * op(B)
            if let Some(da) = slot(nodes, grads, a) {
                // dA = dC * op(B)^T
                T::gemm(false, !trans_b, m, n, k, T::one(), g, val(b), T::one(), da);
            }
            if let Some(db) = slot(nodes, grads, b) {
                if trans_b {
                    // B is [n,k]: dB = dC^T * A
                    T::gemm(true, false, n, m, k, T::one(), g, val(a), T::one(), db);
                } else {
                    // B is [k,n]: dB = A^T * dC
                    T::gemm(true, false, k, m, n, T::one(), val(a), g, T::one(), db);
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().copied());
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g.iter().copied());
            }
        }
        &Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().copied());
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g.iter().map(|&x| -x));
            }
        }
        &Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().zip(val(b)).map(|(&x, &y)| x * y));
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g.iter().zip(val(a)).map(|(&x, &y)| x * y));
            }
        }
        &Op::AddRow { a, row } => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().copied());
            }
            let n = nodes[row.0].value.numel();
            if let Some(dr) = slot(nodes, grads, row) {
                let mut acc = vec![0.0f64; n];
                for chunk in g.chunks(n) {
                    for (s, &x) in acc.iter_mut().zip(chunk) {
                        *s += x.as_f64();
                    }
                }
                add_into(dr, acc.into_iter().map(t));
            }
        }
        &Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().map(|&x| x * s));
            }
        }
        &Op::Relu(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(
                    da,
                    g.iter()
                        .zip(val(a))
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }),
                );
            }
        }
        &Op::Gelu(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(
                    da,
                    g.iter()
                        .zip(val(a))
                        .map(|(&x, &y)| x * t(gelu_grad(y.as_f64()))),
                );
            }
        }
        &Op::Sqrt(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(
                    da,
                    g.iter().zip(out).map(|(&x, &y)| {
                        if y > T::zero() {
                            x / (y + y)
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
        }
        &Op::Softmax { a, axis } => {
            if let Some(da) = slot(nodes, grads, a) {
                for o in 0..axis.outer {
                    for ii in 0..axis.inner {
                        let base = o * axis.len * axis.inner + ii;
                        let idx = |j: usize| base + j * axis.inner;
                        let dot: f64 = (0..axis.len)
                            .map(|j| g[idx(j)].as_f64() * out[idx(j)].as_f64())
                            .sum();
                        for j in 0..axis.len {
                            let y = out[idx(j)].as_f64();
                            da[idx(j)] = da[idx(j)] + t(y * (g[idx(j)].as_f64() - dot));
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = nodes[gamma.0].value.numel();
            let rows = rstd.len();
            if let Some(dgam) = slot(nodes, grads, *gamma) {
                let mut acc = vec![0.0f64; c];
                for r in 0..rows {
                    for j in 0..c {
                        acc[j] += g[r * c + j].as_f64() * xhat[r * c + j].as_f64();
                    }
                }
                add_into(dgam, acc.into_iter().map(t));
            }
            if let Some(dbeta) = slot(nodes, grads, *beta) {
                let mut acc = vec![0.0f64; c];
                for chunk in g.chunks(c) {
                    for (s, &v) in acc.iter_mut().zip(chunk) {
                        *s += v.as_f64();
                    }
                }
                add_into(dbeta, acc.into_iter().map(t));
            }
            let gam: Vec<f64> = val(*gamma).iter().map(|v| v.as_f64()).collect();
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let dxh = g[r * c + j].as_f64() * gam[j];
                        m1 += dxh;
                        m2 += dxh * xhat[r * c + j].as_f64();
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let rs = rstd[r].as_f64();
                    for j in 0..c {
                        let dxh = g[r * c + j].as_f64() * gam[j];
                        let v = rs * (dxh - m1 - xhat[r * c + j].as_f64() * m2);
                        dx[r * c + j] = dx[r * c + j] + t(v);
                    }
                }
            }
        }
        &Op::Reduce { a, axis, scale } => {
            if let Some(da) = slot(nodes, grads, a) {
                for o in 0..axis.outer {
                    for ii in 0..axis.inner {
                        let gv = g[o * axis.inner + ii] * scale;
                        for j in 0..axis.len {
                            let p = (o * axis.len + j) * axis.inner + ii;
                            da[p] = da[p] + gv;
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let total = axis.len;
            let mut offset = 0;
            for &(p, d) in parts {
                if let Some(dp) = slot(nodes, grads, p) {
                    let chunk = d * axis.inner;
                    for o in 0..axis.outer {
                        let src = (o * total + offset) * axis.inner;
                        add_into(
                            &mut dp[o * chunk..(o + 1) * chunk],
                            g[src..src + chunk].iter().copied(),
                        );
                    }
                }
                offset += d;
            }
        }
        &Op::Upsample2x { a, h, w, c } => {
            if let Some(da) = slot(nodes, grads, a) {
                let ty = upsample_taps(h);
                let tx = upsample_taps(w);
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let o = (oy * 2 * w + ox) * c;
                        let taps = [
                            ((y0 * w + x0) * c, wy0 * wx0),
                            ((y0 * w + x1) * c, wy0 * wx1),
                            ((y1 * w + x0) * c, wy1 * wx0),
                            ((y1 * w + x1) * c, wy1 * wx1),
                        ];
                        for &(base, wt) in &taps {
                            let wt: T = t(wt);
                            for ch in 0..c {
                                da[base + ch] = da[base + ch] + g[o + ch] * wt;
                            }
                        }
                    }
                }
            }
        }
        &Op::AvgPool2x { a, h, w, c } => {
            if let Some(da) = slot(nodes, grads, a) {
                let (ho, wo) = (h / 2, w / 2);
                let q: T = t(0.25);
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ch in 0..c {
                            let gv = g[(oy * wo + ox) * c + ch] * q;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let p = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                da[p] = da[p] + gv;
                            }
                        }
                    }
                }
            }
        }
        &Op::Conv2d { x, w, bias, geom } => {
            let rows = geom.ho * geom.wo;
            let k = geom.patch_len();
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            if let Some(b) = bias {
                if let Some(db) = slot(nodes, grads, b) {
                    let mut acc = vec![0.0f64; geom.cout];
                    for chunk in g.chunks(geom.cout) {
                        for (s, &v) in acc.iter_mut().zip(chunk) {
                            *s += v.as_f64();
                        }
                    }
                    add_into(db, acc.into_iter().map(t));
                }
            }
            if need_w {
                let xs = val(x);
                let cols_owned;
                let cols: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    cols_owned = im2col(xs, &geom);
                    &cols_owned
                };
                let dw = slot(nodes, grads, w).expect("requires grad");
                // dW [Cout, K] = dY^T [Cout, rows] * cols [rows, K]
                T::gemm(
                    true,
                    false,
                    geom.cout,
                    rows,
                    k,
                    T::one(),
                    g,
                    cols,
                    T::one(),
                    dw,
                );
            }
            if need_x {
                let ws = val(w);
                if geom.is_pointwise() {
                    let dx = slot(nodes, grads, x).expect("requires grad");
                    T::gemm(
                        false,
                        false,
                        rows,
                        geom.cout,
                        k,
                        T::one(),
                        g,
                        ws,
                        T::one(),
                        dx,
                    );
                } else {
                    let mut dcols = vec![T::zero(); rows * k];
                    T::gemm(
                        false,
                        false,
                        rows,
                        geom.cout,
                        k,
                        T::one(),
                        g,
                        ws,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = slot(nodes, grads, x).expect("requires grad");
                    col2im_add(&dcols, &geom, dx);
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().copied());
            }
        }
        &Op::Transpose { a, m, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                // out is [n, m]
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = da[r * n + c] + g[c * m + r];
                    }
                }
            }
        }
        &Op::SliceCols {
            a,
            cols,
            start,
            len,
        } => {
            if let Some(da) = slot(nodes, grads, a) {
                for (r, chunk) in g.chunks(len).enumerate() {
                    add_into(
                        &mut da[r * cols + start..r * cols + start + len],
                        chunk.iter().copied(),
                    );
                }
            }
        }
        Op::GatherRows { a, idx, cols } => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut da[src * cols..(src + 1) * cols],
                        g[r * cols..(r + 1) * cols].iter().copied(),
                    );
                }
            }
        }
        Op::NllClamped {
            p,
            labels,
            classes,
            valid,
        } => {
            if *valid == 0 {
                return;
            }
            let ps = val(*p);
            let scale = g[0].as_f64() / *valid as f64;
            if let Some(dp) = slot(nodes, grads, *p) {
                for (r, &l) in labels.iter().enumerate() {
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    let at = r * classes + l as usize;
                    let pv = ps[at].as_f64();
                    if pv > LOG_CLAMP {
                        dp[at] = dp[at] - t(scale / pv);
                    }
                }
            }
        }
        Op::ClassMeans {
            f,
            labels,
            counts,
            cols,
        } => {
            if let Some(df) = slot(nodes, grads, *f) {
                for (r, &l) in labels.iter().enumerate() {
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    let k = l as usize;
                    let inv: T = t(1.0 / counts[k] as f64);
                    for c in 0..*cols {
                        df[r * cols + c] = df[r * cols + c] + g[k * cols + c] * inv;
                    }
                }
            }
        }
        &Op::Frobenius(a) => {
            let norm = out[0];
            if norm > T::zero() {
                if let Some(da) = slot(nodes, grads, a) {
                    let s = g[0] / norm;
                    add_into(da, val(a).iter().map(|&x| x * s));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_all_ones_3x3() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[3, 3, 1]));
        let w = g.constant(Tensor::ones(&[1, 3, 3, 1]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(tensor(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let data = [1.0, -2.0, 3.0, 0.5];
        let mut g = Graph::<f64>::new();
        let x = g.variable(tensor(&[4], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NotScalarLoss(_))
        ));
    }

    #[test]
    fn upsample_matches_hand_bilinear() {
        // [0, 1] along W -> [0, .25, .75, 1]
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[1, 2, 1], &[0.0, 1.0]));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 1]);
        assert_eq!(&g.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nll_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::full(&[3, 2], 0.5));
        let l = g.nll_clamped(p, &[IGNORE_LABEL; 3]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_means_hand_values() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(tensor(&[3, 1], &[1.0, 3.0, 10.0]));
        let (m, counts) = g.class_means(f, &[0, 0, IGNORE_LABEL], 2).unwrap();
        assert_eq!(counts, vec![2, 0]);
        assert_eq!(g.value(m).data(), &[2.0, 0.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[4, 8], |i| {
            (i as f32 * 1.7).sin() * 3.0 + 1.0
        }));
        let gam = g.constant(Tensor::ones(&[8]));
        let bet = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gam, bet).unwrap();
        for row in g.value(y).data().chunks(8) {
            let m: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let v: f64 = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 2.0));
        let b = store.add("b", Tensor::full(&[2], 3.0));
        store.get_mut(b).trainable = false;
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let p = g.mul(va, vb).unwrap();
        let l = g.sum_all(p);
        g.backward(l).unwrap();
        let mut grads = Gradients::for_store(&store);
        g.accumulate_param_grads(&mut grads, 1.0);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(b).is_none());
    }
}
