//! Reverse-mode tape. Each operation appends a node holding its output; the
//! backward pass walks the tape once in reverse and accumulates gradients
//! into every tracked node.
//!
//! Shapes are validated with asserts: a shape mismatch inside a network is a
//! programming error, not a recoverable condition. Public pipeline APIs
//! validate their own inputs before touching the graph.

use super::{Real, Tensor};

/// Guard inside `sqrt` for row normalization; keeps gradients finite without
/// visibly perturbing unit norms.
const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Clone)]
pub enum Op<F: Real> {
    Value,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, a: F, b: F },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    NarrowRows { x: usize, start: usize, cols: usize },
    ConcatRows { top: usize, bottom: usize, cols: usize },
    NarrowCols { x: usize, start: usize, in_cols: usize },
    ConcatCols { parts: Vec<usize> },
    AddBiasPerRow { x: usize, v: usize },
    AddBiasPerCol { x: usize, v: usize },
    ScalePerCol { x: usize, v: usize },
    Conv1d { x: usize, w: usize, stride: usize, pad: usize },
    Relu { x: usize },
    Gelu { x: usize },
    LayerNormRows { x: usize, eps: F },
    SoftmaxRows { x: usize, tau: F },
    L2NormalizeRows { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    MeanAxis0 { x: usize },
    SqrtElem { x: usize },
    AbsElem { x: usize },
    CrossEntropyRows { logits: usize, targets: Vec<usize>, tau: F },
    StraightThrough { x: usize },
    Upsample2 { x: usize },
    RecipElem { x: usize },
    ScaleByScalarNode { x: usize, s: usize },
}

struct Node<F: Real> {
    data: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Operation tape. Build a fresh graph per training step; node ids are plain
/// indices in creation (topological) order.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Patch matrix `[l_out, c_in*k]`: row `lo` holds the receptive field of
/// output position `lo`, zero-padded at the borders.
fn im2col<F: Real>(
    x: &[F],
    c_in: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    l_out: usize,
) -> Vec<F> {
    let width = c_in * k;
    let mut p = vec![F::ZERO; l_out * width];
    for lo in 0..l_out {
        let start = (lo * stride) as isize - pad as isize;
        let row = &mut p[lo * width..(lo + 1) * width];
        for ci in 0..c_in {
            for t in 0..k {
                let li = start + t as isize;
                if li >= 0 && (li as usize) < len {
                    row[ci * k + t] = x[ci * len + li as usize];
                }
            }
        }
    }
    p
}

/// Adjoint of `im2col`: scatter patch gradients back onto the input.
fn col2im<F: Real>(
    gp: &[F],
    c_in: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    l_out: usize,
) -> Vec<F> {
    let width = c_in * k;
    let mut gx = vec![F::ZERO; c_in * len];
    for lo in 0..l_out {
        let start = (lo * stride) as isize - pad as isize;
        let row = &gp[lo * width..(lo + 1) * width];
        for ci in 0..c_in {
            for t in 0..k {
                let li = start + t as isize;
                if li >= 0 && (li as usize) < len {
                    gx[ci * len + li as usize] += row[ci * k + t];
                }
            }
        }
    }
    gx
}

fn transpose_raw<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, op: Op<F>, needs_grad: bool) -> usize {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, op, needs_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: usize) -> &[F] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar_value(&self, id: usize) -> F {
        assert_eq!(self.nodes[id].data.len(), 1, "node {id} is not a scalar");
        self.nodes[id].data[0]
    }

    /// Gradient of the last `backward` call w.r.t. node `id`, if tracked.
    pub fn grad(&self, id: usize) -> Option<&[F]> {
        self.grads[id].as_deref()
    }

    pub fn to_tensor(&self, id: usize) -> Tensor<F> {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].data.clone()).expect("node shape")
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Untracked constant leaf.
    pub fn value(&mut self, t: &Tensor<F>) -> usize {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Value, false)
    }

    /// Tracked leaf; receives a gradient on `backward`.
    pub fn param(&mut self, t: &Tensor<F>) -> usize {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Param, true)
    }

    pub fn value_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> usize {
        self.push(data, shape, Op::Value, false)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "add: shape mismatch");
        let data: Vec<F> =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(&x, &y)| x + y).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: usize, b: usize) -> usize {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "sub: shape mismatch");
        let data: Vec<F> =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(&x, &y)| x - y).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "mul: shape mismatch");
        let data: Vec<F> =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(&x, &y)| x * y).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Mul(a, b), ng)
    }

    /// `a * x + b` with scalar coefficients.
    pub fn affine(&mut self, x: usize, a: F, b: F) -> usize {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| a * v + b).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Affine { x, a, b }, ng)
    }

    pub fn relu(&mut self, x: usize) -> usize {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v.maxv(F::ZERO)).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Relu { x }, ng)
    }

    pub fn gelu(&mut self, x: usize) -> usize {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Gelu { x }, ng)
    }

    pub fn sqrt_elem(&mut self, x: usize) -> usize {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v.sqrt()).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::SqrtElem { x }, ng)
    }

    pub fn abs_elem(&mut self, x: usize) -> usize {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v.abs()).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::AbsElem { x }, ng)
    }

    pub fn recip_elem(&mut self, x: usize) -> usize {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| F::ONE / v).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::RecipElem { x }, ng)
    }

    /// `y = x * s[0]` for a scalar node `s`; gradients flow to both.
    pub fn scale_by_scalar_node(&mut self, x: usize, s: usize) -> usize {
        assert_eq!(self.nodes[s].data.len(), 1, "scale factor must be a scalar node");
        let sv = self.nodes[s].data[0];
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x) || self.needs(s);
        self.push(data, shape, Op::ScaleByScalarNode { x, s }, ng)
    }

    // ── matrix ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: usize, b: usize) -> usize {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-D, got {sa:?} x {sb:?}");
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        assert_eq!(k, k2, "matmul: inner extents differ ({k} vs {k2})");
        let mut data = vec![F::ZERO; m * n];
        matmul_acc(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut data);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, vec![m, n], Op::MatMul { a, b, m, k, n }, ng)
    }

    pub fn transpose(&mut self, x: usize) -> usize {
        let s = &self.nodes[x].shape;
        assert!(s.len() == 2, "transpose expects 2-D, got {s:?}");
        let (rows, cols) = (s[0], s[1]);
        let data = transpose_raw(&self.nodes[x].data, rows, cols);
        let ng = self.needs(x);
        self.push(data, vec![cols, rows], Op::Transpose { x, rows, cols }, ng)
    }

    pub fn reshape(&mut self, x: usize, shape: Vec<usize>) -> usize {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.nodes[x].data.len(), "reshape: element count mismatch");
        let data = self.nodes[x].data.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Reshape { x }, ng)
    }

    pub fn narrow_rows(&mut self, x: usize, start: usize, len: usize) -> usize {
        let s = &self.nodes[x].shape;
        assert!(s.len() == 2 && start + len <= s[0], "narrow_rows out of range");
        let cols = s[1];
        let data = self.nodes[x].data[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(x);
        self.push(data, vec![len, cols], Op::NarrowRows { x, start, cols }, ng)
    }

    pub fn concat_rows(&mut self, top: usize, bottom: usize) -> usize {
        let (st, sb) = (&self.nodes[top].shape, &self.nodes[bottom].shape);
        assert!(st.len() == 2 && sb.len() == 2 && st[1] == sb[1], "concat_rows: col mismatch");
        let cols = st[1];
        let rows = st[0] + sb[0];
        let mut data = Vec::with_capacity(rows * cols);
        data.extend_from_slice(&self.nodes[top].data);
        data.extend_from_slice(&self.nodes[bottom].data);
        let ng = self.needs(top) || self.needs(bottom);
        self.push(data, vec![rows, cols], Op::ConcatRows { top, bottom, cols }, ng)
    }

    pub fn narrow_cols(&mut self, x: usize, start: usize, len: usize) -> usize {
        let s = &self.nodes[x].shape;
        assert!(s.len() == 2 && start + len <= s[1], "narrow_cols out of range");
        let (rows, in_cols) = (s[0], s[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x].data[r * in_cols + start..r * in_cols + start + len]);
        }
        let ng = self.needs(x);
        self.push(data, vec![rows, len], Op::NarrowCols { x, start, in_cols }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[usize]) -> usize {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.nodes[parts[0]].shape[0];
        let mut total_cols = 0;
        for &p in parts {
            let s = &self.nodes[p].shape;
            assert!(s.len() == 2 && s[0] == rows, "concat_cols: row mismatch");
            total_cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.nodes[p].shape[1];
                data.extend_from_slice(&self.nodes[p].data[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(data, vec![rows, total_cols], Op::ConcatCols { parts: parts.to_vec() }, ng)
    }

    // ── broadcasts over a 2-D node ──────────────────────────────────────

    /// `y[r, c] = x[r, c] + v[r]` — channel bias in `[channels, length]` layout.
    pub fn add_bias_per_row(&mut self, x: usize, v: usize) -> usize {
        let s = self.nodes[x].shape.clone();
        assert!(s.len() == 2 && self.nodes[v].data.len() == s[0], "bias length != rows");
        let (rows, cols) = (s[0], s[1]);
        let mut data = self.nodes[x].data.clone();
        for r in 0..rows {
            let b = self.nodes[v].data[r];
            for val in &mut data[r * cols..(r + 1) * cols] {
                *val = *val + b;
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(data, s, Op::AddBiasPerRow { x, v }, ng)
    }

    /// `y[r, c] = x[r, c] + v[c]` — feature bias in `[positions, features]` layout.
    pub fn add_bias_per_col(&mut self, x: usize, v: usize) -> usize {
        let s = self.nodes[x].shape.clone();
        assert!(s.len() == 2 && self.nodes[v].data.len() == s[1], "bias length != cols");
        let (rows, cols) = (s[0], s[1]);
        let mut data = self.nodes[x].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] + self.nodes[v].data[c];
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(data, s, Op::AddBiasPerCol { x, v }, ng)
    }

    /// `y[r, c] = x[r, c] * v[c]` — per-feature modulation.
    pub fn scale_per_col(&mut self, x: usize, v: usize) -> usize {
        let s = self.nodes[x].shape.clone();
        assert!(s.len() == 2 && self.nodes[v].data.len() == s[1], "scale length != cols");
        let (rows, cols) = (s[0], s[1]);
        let mut data = self.nodes[x].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] * self.nodes[v].data[c];
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(data, s, Op::ScalePerCol { x, v }, ng)
    }

    // ── neural-net primitives ───────────────────────────────────────────

    /// Cross-correlation over `x: [c_in, len]` with `w: [c_out, c_in, k]`.
    /// Output length is `(len + 2*pad - k) / stride + 1`.
    pub fn conv1d(&mut self, x: usize, w: usize, stride: usize, pad: usize) -> usize {
        let sx = self.nodes[x].shape.clone();
        let sw = self.nodes[w].shape.clone();
        assert!(sx.len() == 2, "conv1d input must be [c_in, len], got {sx:?}");
        assert!(sw.len() == 3, "conv1d weight must be [c_out, c_in, k], got {sw:?}");
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, w_cin, k) = (sw[0], sw[1], sw[2]);
        assert_eq!(c_in, w_cin, "conv1d: channel mismatch");
        assert!(stride >= 1, "conv1d: stride must be >= 1");
        assert!(len + 2 * pad >= k, "conv1d: kernel {k} larger than padded input {}", len + 2 * pad);
        let l_out = (len + 2 * pad - k) / stride + 1;
        // im2col + GEMM: patches [l_out, c_in*k] times weights-as-[c_in*k, c_out],
        // then transpose back to [c_out, l_out].
        let patches = im2col(&self.nodes[x].data, c_in, len, k, stride, pad, l_out);
        let wt = transpose_raw(&self.nodes[w].data, c_out, c_in * k);
        let mut yt = vec![F::ZERO; l_out * c_out];
        matmul_acc(&patches, &wt, l_out, c_in * k, c_out, &mut yt);
        let data = transpose_raw(&yt, l_out, c_out);
        let ng = self.needs(x) || self.needs(w);
        self.push(data, vec![c_out, l_out], Op::Conv1d { x, w, stride, pad }, ng)
    }

    /// Per-row layer normalization without learned affine.
    pub fn layer_norm_rows(&mut self, x: usize, eps: F) -> usize {
        let s = self.nodes[x].shape.clone();
        assert!(s.len() == 2, "layer_norm_rows expects 2-D");
        let (rows, cols) = (s[0], s[1]);
        let inv_n = F::ONE / F::from_f64(cols as f64);
        let mut data = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            let xrow = &self.nodes[x].data[r * cols..(r + 1) * cols];
            let mut mean = F::ZERO;
            for &v in xrow {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = F::ZERO;
            for &v in xrow {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let rstd = F::ONE / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (xrow[c] - mean) * rstd;
            }
        }
        let ng = self.needs(x);
        self.push(data, s, Op::LayerNormRows { x, eps }, ng)
    }

    /// Row softmax of `x / tau`, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: usize, tau: F) -> usize {
        assert!(tau > F::ZERO, "softmax temperature must be positive");
        let s = self.nodes[x].shape.clone();
        assert!(s.len() == 2, "softmax_rows expects 2-D");
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            let xrow = &self.nodes[x].data[r * cols..(r + 1) * cols];
            softmax_into(xrow, tau, &mut data[r * cols..(r + 1) * cols]);
        }
        let ng = self.needs(x);
        self.push(data, s, Op::SoftmaxRows { x, tau }, ng)
    }

    /// Rescale each row of a 2-D node to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: usize) -> usize {
        let s = self.nodes[x].shape.clone();
        assert!(s.len() == 2, "l2_normalize_rows expects 2-D");
        let (rows, cols) = (s[0], s[1]);
        let eps = F::from_f64(NORM_EPS);
        let mut data = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            let xrow = &self.nodes[x].data[r * cols..(r + 1) * cols];
            let mut ss = F::ZERO;
            for &v in xrow {
                ss += v * v;
            }
            let inv = F::ONE / (ss + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = xrow[c] * inv;
            }
        }
        let ng = self.needs(x);
        self.push(data, s, Op::L2NormalizeRows { x }, ng)
    }

    // ── reductions / losses ─────────────────────────────────────────────

    pub fn sum(&mut self, x: usize) -> usize {
        let mut acc = F::ZERO;
        for &v in &self.nodes[x].data {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(vec![acc], vec![1], Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: usize) -> usize {
        let n = self.nodes[x].data.len();
        let mut acc = F::ZERO;
        for &v in &self.nodes[x].data {
            acc += v;
        }
        let m = acc / F::from_f64(n as f64);
        let ng = self.needs(x);
        self.push(vec![m], vec![1], Op::Mean { x }, ng)
    }

    /// Column means of a 2-D node: `[rows, cols] -> [cols]`.
    pub fn mean_axis0(&mut self, x: usize) -> usize {
        let s = &self.nodes[x].shape;
        assert!(s.len() == 2, "mean_axis0 expects 2-D");
        let (rows, cols) = (s[0], s[1]);
        let inv = F::ONE / F::from_f64(rows as f64);
        let mut data = vec![F::ZERO; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += self.nodes[x].data[r * cols + c];
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        let ng = self.needs(x);
        self.push(data, vec![cols], Op::MeanAxis0 { x }, ng)
    }

    /// Mean over rows of `-log softmax(logits/tau)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: usize, targets: &[usize], tau: F) -> usize {
        assert!(tau > F::ZERO, "cross-entropy temperature must be positive");
        let s = &self.nodes[logits].shape;
        assert!(s.len() == 2, "cross_entropy_rows expects 2-D logits");
        let (rows, cols) = (s[0], s[1]);
        assert_eq!(targets.len(), rows, "one target per row required");
        for &t in targets {
            assert!(t < cols, "target index {t} out of range for {cols} classes");
        }
        let mut total = F::ZERO;
        for r in 0..rows {
            let xrow = &self.nodes[logits].data[r * cols..(r + 1) * cols];
            let mut mx = xrow[0];
            for &v in xrow {
                mx = mx.maxv(v);
            }
            let mut lse = F::ZERO;
            for &v in xrow {
                lse += ((v - mx) / tau).exp();
            }
            let lse = lse.ln() + mx / tau;
            total += lse - xrow[targets[r]] / tau;
        }
        let loss = total / F::from_f64(rows as f64);
        let ng = self.needs(logits);
        self.push(vec![loss], vec![1], Op::CrossEntropyRows { logits, targets: targets.to_vec(), tau }, ng)
    }

    /// Nearest-neighbor ×2 upsample along the length axis of `[channels, len]`.
    pub fn upsample2(&mut self, x: usize) -> usize {
        let s = &self.nodes[x].shape;
        assert!(s.len() == 2, "upsample2 expects 2-D [channels, len]");
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![F::ZERO; rows * cols * 2];
        for r in 0..rows {
            for c in 0..cols {
                let v = self.nodes[x].data[r * cols + c];
                data[r * cols * 2 + 2 * c] = v;
                data[r * cols * 2 + 2 * c + 1] = v;
            }
        }
        let ng = self.needs(x);
        self.push(data, vec![rows, cols * 2], Op::Upsample2 { x }, ng)
    }

    /// Forward emits `replacement`; backward passes the gradient to `x`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: usize, replacement: &Tensor<F>) -> usize {
        assert_eq!(self.nodes[x].shape, replacement.shape(), "straight_through: shape mismatch");
        let ng = self.needs(x);
        self.push(replacement.data().to_vec(), replacement.shape().to_vec(), Op::StraightThrough { x }, ng)
    }

    // ── backward ────────────────────────────────────────────────────────

    fn acc(&mut self, id: usize, contribution: &[F]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = self.grads[id].get_or_insert_with(|| vec![F::ZERO; self.nodes[id].data.len()]);
        for (g, &c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn acc_at(&mut self, id: usize, offset: usize, contribution: &[F]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = self.grads[id].get_or_insert_with(|| vec![F::ZERO; self.nodes[id].data.len()]);
        for (g, &c) in slot[offset..offset + contribution.len()].iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar loss node. Visits each node exactly once,
    /// in reverse topological (creation) order.
    pub fn backward(&mut self, loss: usize) {
        assert_eq!(self.nodes[loss].data.len(), 1, "backward requires a scalar loss node");
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss] = Some(vec![F::ONE]);
        for i in (0..=loss).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.step_back(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn step_back(&mut self, i: usize, g: &[F]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Value | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.acc(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<F> = g.iter().zip(&self.nodes[b].data).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<F> = g.iter().zip(&self.nodes[a].data).map(|(&gv, &av)| gv * av).collect();
                self.acc(a, &ga);
                self.acc(b, &gb);
            }
            Op::Affine { x, a, .. } => {
                let gx: Vec<F> = g.iter().map(|&gv| gv * a).collect();
                self.acc(x, &gx);
            }
            Op::MatMul { a, b, m, k, n } => {
                // dA = g @ B^T ; dB = A^T @ g
                let bt = transpose_raw(&self.nodes[b].data, k, n);
                let mut ga = vec![F::ZERO; m * k];
                matmul_acc(g, &bt, m, n, k, &mut ga);
                self.acc(a, &ga);
                let at = transpose_raw(&self.nodes[a].data, m, k);
                let mut gb = vec![F::ZERO; k * n];
                matmul_acc(&at, g, k, m, n, &mut gb);
                self.acc(b, &gb);
            }
            Op::Transpose { x, rows, cols } => {
                // output was [cols, rows]
                let gx = transpose_raw(g, cols, rows);
                self.acc(x, &gx);
            }
            Op::Reshape { x } => {
                self.acc(x, g);
            }
            Op::NarrowRows { x, start, cols } => {
                self.acc_at(x, start * cols, g);
            }
            Op::ConcatRows { top, bottom, cols } => {
                let top_len = self.nodes[top].shape[0] * cols;
                self.acc(top, &g[..top_len]);
                self.acc(bottom, &g[top_len..]);
            }
            Op::NarrowCols { x, start, in_cols } => {
                if self.nodes[x].needs_grad {
                    let (rows, len) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut gx = vec![F::ZERO; self.nodes[x].data.len()];
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * in_cols + start + c] = g[r * len + c];
                        }
                    }
                    self.acc(x, &gx);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in &parts {
                    let c = self.nodes[p].shape[1];
                    if self.nodes[p].needs_grad {
                        let mut gp = vec![F::ZERO; rows * c];
                        for r in 0..rows {
                            gp[r * c..(r + 1) * c].copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(p, &gp);
                    }
                    offset += c;
                }
            }
            Op::AddBiasPerRow { x, v } => {
                self.acc(x, g);
                if self.nodes[v].needs_grad {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut gv = vec![F::ZERO; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[r] += g[r * cols + c];
                        }
                    }
                    self.acc(v, &gv);
                }
            }
            Op::AddBiasPerCol { x, v } => {
                self.acc(x, g);
                if self.nodes[v].needs_grad {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut gv = vec![F::ZERO; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += g[r * cols + c];
                        }
                    }
                    self.acc(v, &gv);
                }
            }
            Op::ScalePerCol { x, v } => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if self.nodes[x].needs_grad {
                    let mut gx = vec![F::ZERO; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = g[r * cols + c] * self.nodes[v].data[c];
                        }
                    }
                    self.acc(x, &gx);
                }
                if self.nodes[v].needs_grad {
                    let mut gv = vec![F::ZERO; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += g[r * cols + c] * self.nodes[x].data[r * cols + c];
                        }
                    }
                    self.acc(v, &gv);
                }
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (c_in, len) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let (c_out, k) = (self.nodes[w].shape[0], self.nodes[w].shape[2]);
                let l_out = self.nodes[i].shape[1];
                let gt = transpose_raw(g, c_out, l_out); // [l_out, c_out]
                if self.nodes[w].needs_grad {
                    // gw as [c_in*k, c_out] = patches^T @ g^T, repacked to [c_out, c_in*k]
                    let patches = im2col(&self.nodes[x].data, c_in, len, k, stride, pad, l_out);
                    let pt = transpose_raw(&patches, l_out, c_in * k);
                    let mut gwt = vec![F::ZERO; c_in * k * c_out];
                    matmul_acc(&pt, &gt, c_in * k, l_out, c_out, &mut gwt);
                    let gw = transpose_raw(&gwt, c_in * k, c_out);
                    self.acc(w, &gw);
                }
                if self.nodes[x].needs_grad {
                    // gradient w.r.t. patches: g^T @ w-as-[c_out, c_in*k], scattered back
                    let mut gp = vec![F::ZERO; l_out * c_in * k];
                    matmul_acc(&gt, &self.nodes[w].data, l_out, c_out, c_in * k, &mut gp);
                    let gx = col2im(&gp, c_in, len, k, stride, pad, l_out);
                    self.acc(x, &gx);
                }
            }
            Op::Relu { x } => {
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                    .collect();
                self.acc(x, &gx);
            }
            Op::Gelu { x } => {
                let gx: Vec<F> =
                    g.iter().zip(&self.nodes[x].data).map(|(&gv, &xv)| gv * gelu_bwd(xv)).collect();
                self.acc(x, &gx);
            }
            Op::LayerNormRows { x, eps } => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let inv_n = F::ONE / F::from_f64(cols as f64);
                let mut gx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    let xrow = &self.nodes[x].data[r * cols..(r + 1) * cols];
                    let yrow = &self.nodes[i].data[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut mean = F::ZERO;
                    for &v in xrow {
                        mean += v;
                    }
                    mean = mean * inv_n;
                    let mut var = F::ZERO;
                    for &v in xrow {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let rstd = F::ONE / (var + eps).sqrt();
                    let mut gmean = F::ZERO;
                    let mut gy = F::ZERO;
                    for c in 0..cols {
                        gmean += grow[c];
                        gy += grow[c] * yrow[c];
                    }
                    gmean = gmean * inv_n;
                    gy = gy * inv_n;
                    for c in 0..cols {
                        gx[r * cols + c] = rstd * (grow[c] - gmean - yrow[c] * gy);
                    }
                }
                self.acc(x, &gx);
            }
            Op::SoftmaxRows { x, tau } => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut gx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    let yrow = &self.nodes[i].data[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut dot = F::ZERO;
                    for c in 0..cols {
                        dot += grow[c] * yrow[c];
                    }
                    for c in 0..cols {
                        gx[r * cols + c] = yrow[c] * (grow[c] - dot) / tau;
                    }
                }
                self.acc(x, &gx);
            }
            Op::L2NormalizeRows { x } => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let eps = F::from_f64(NORM_EPS);
                let mut gx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    let xrow = &self.nodes[x].data[r * cols..(r + 1) * cols];
                    let yrow = &self.nodes[i].data[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut ss = F::ZERO;
                    for &v in xrow {
                        ss += v * v;
                    }
                    let inv = F::ONE / (ss + eps).sqrt();
                    let mut dot = F::ZERO;
                    for c in 0..cols {
                        dot += grow[c] * yrow[c];
                    }
                    for c in 0..cols {
                        gx[r * cols + c] = (grow[c] - yrow[c] * dot) * inv;
                    }
                }
                self.acc(x, &gx);
            }
            Op::Sum { x } => {
                let gx = vec![g[0]; self.nodes[x].data.len()];
                self.acc(x, &gx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x].data.len();
                let gv = g[0] / F::from_f64(n as f64);
                let gx = vec![gv; n];
                self.acc(x, &gx);
            }
            Op::MeanAxis0 { x } => {
                let (rows, cols) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let inv = F::ONE / F::from_f64(rows as f64);
                let mut gx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = g[c] * inv;
                    }
                }
                self.acc(x, &gx);
            }
            Op::SqrtElem { x } => {
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&gv, &yv)| gv / ((F::ONE + F::ONE) * yv))
                    .collect();
                self.acc(x, &gx);
            }
            Op::AbsElem { x } => {
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(&gv, &xv)| {
                        if xv > F::ZERO {
                            gv
                        } else if xv < F::ZERO {
                            -gv
                        } else {
                            F::ZERO
                        }
                    })
                    .collect();
                self.acc(x, &gx);
            }
            Op::CrossEntropyRows { logits, targets, tau } => {
                let (rows, cols) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                let scale = g[0] / (tau * F::from_f64(rows as f64));
                let mut gx = vec![F::ZERO; rows * cols];
                let mut probs = vec![F::ZERO; cols];
                for r in 0..rows {
                    let xrow = &self.nodes[logits].data[r * cols..(r + 1) * cols];
                    softmax_into(xrow, tau, &mut probs);
                    for c in 0..cols {
                        let indicator = if c == targets[r] { F::ONE } else { F::ZERO };
                        gx[r * cols + c] = (probs[c] - indicator) * scale;
                    }
                }
                self.acc(logits, &gx);
            }
            Op::StraightThrough { x } => {
                self.acc(x, g);
            }
            Op::Upsample2 { x } => {
                let (rows, cols) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let mut gx = vec![F::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = g[r * cols * 2 + 2 * c] + g[r * cols * 2 + 2 * c + 1];
                    }
                }
                self.acc(x, &gx);
            }
            Op::RecipElem { x } => {
                // y = 1/x => dy/dx = -1/x^2 = -y^2
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&gv, &yv)| -gv * yv * yv)
                    .collect();
                self.acc(x, &gx);
            }
            Op::ScaleByScalarNode { x, s } => {
                let sv = self.nodes[s].data[0];
                if self.nodes[x].needs_grad {
                    let gx: Vec<F> = g.iter().map(|&gv| gv * sv).collect();
                    self.acc(x, &gx);
                }
                if self.nodes[s].needs_grad {
                    let mut acc = F::ZERO;
                    for (&gv, &xv) in g.iter().zip(&self.nodes[x].data) {
                        acc += gv * xv;
                    }
                    self.acc(s, &[acc]);
                }
            }
        }
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_into<F: Real>(row: &[F], tau: F, out: &mut [F]) {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maxv(v);
    }
    let mut total = F::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - mx) / tau).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn gelu_fwd<F: Real>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_bwd<F: Real>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::ONE - t * t;
    half * (F::ONE + t) + half * x * sech2 * c * (F::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.value(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.value(&t2(2, 1, &[3.0, -2.0]));
        let y = g.matmul(eye, b);
        assert_eq!(g.data(y), &[3.0, -2.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.value(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.value(&t2(2, 1, &[0.0, 1.0]));
        let y = g.matmul(a, b);
        assert_eq!(g.data(y), &[2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_panics() {
        let mut g = Graph::<f64>::new();
        let a = g.value(&t2(2, 3, &[0.0; 6]));
        let b = g.value(&t2(2, 2, &[0.0; 4]));
        g.matmul(a, b);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let w = g.value(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv1d(x, w, 1, 0);
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_strided_hand_example() {
        // x=[1,2,3,4], w=[1,1], stride 2, no padding -> [1+2, 3+4]
        let mut g = Graph::new();
        let x = g.value(&t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let w = g.value(&Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = g.conv1d(x, w, 2, 0);
        assert_eq!(g.shape(y), &[1, 2]);
        assert_eq!(g.data(y), &[3.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "kernel 5 larger than padded input 4")]
    fn conv1d_oversized_kernel_panics() {
        let mut g = Graph::<f64>::new();
        let x = g.value(&t2(1, 4, &[0.0; 4]));
        let w = g.value(&Tensor::new(vec![1, 1, 5], vec![0.0; 5]).unwrap());
        g.conv1d(x, w, 1, 0);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 4, &[2.0, 2.0, 2.0, 2.0]));
        let y = g.softmax_rows(x, 1.0);
        for &v in g.data(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_hand_example_ln3() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 2, &[0.0, 3.0f64.ln()]));
        let y = g.softmax_rows(x, 1.0);
        assert!((g.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((g.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_low_temperature_saturates() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 3, &[5.0, 0.0, 0.0]));
        let y = g.softmax_rows(x, 0.01);
        assert!(g.data(y)[0] > 0.999);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 3, &[1e4, -1e4, 5e3]));
        let y = g.softmax_rows(x, 1.0);
        let s: f64 = g.data(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(g.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    #[should_panic(expected = "temperature must be positive")]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::<f64>::new();
        let x = g.value(&t2(1, 2, &[0.0, 0.0]));
        g.softmax_rows(x, 0.0);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_squared_norm_gives_2x() {
        let mut g = Graph::new();
        let x = g.param(&t2(1, 3, &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_nonscalar_loss() {
        let mut g = Graph::new();
        let x = g.param(&t2(1, 3, &[1.0, 2.0, 3.0]));
        g.backward(x);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let x = g.value(&t2(2, 8, &[0.3; 16]));
        let l = g.cross_entropy_rows(x, &[1, 5], 1.0);
        assert!((g.scalar_value(l) - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_is_tiny() {
        let mut data = vec![0.0; 4];
        data[2] = 20.0;
        let mut g = Graph::new();
        let x = g.value(&t2(1, 4, &data));
        let l = g.cross_entropy_rows(x, &[2], 1.0);
        assert!(g.scalar_value(l) < 1e-8);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 5, &[3.0; 5]));
        let y = g.layer_norm_rows(x, 1e-5);
        for &v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut g = Graph::new();
        let x = g.value(&t2(1, 6, &[0.3, -1.2, 4.0, 2.2, -0.7, 1.0]));
        let y = g.layer_norm_rows(x, 1e-5);
        let d = g.data(y);
        let mean: f64 = d.iter().sum::<f64>() / 6.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut g = Graph::new();
        let x = g.value(&t2(2, 3, &[3.0, 4.0, 0.0, 1.0, 1.0, 1.0]));
        let y = g.l2_normalize_rows(x);
        for r in 0..2 {
            let row = &g.data(y)[r * 3..(r + 1) * 3];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t2(1, 2, &[0.5, 0.5]));
        let replacement = t2(1, 2, &[1.0, -1.0]);
        let y = g.straight_through(x, &replacement);
        assert_eq!(g.data(y), &[1.0, -1.0]);
        let sq = g.mul(y, y);
        let s = g.sum(sq);
        g.backward(s);
        // d/dy (y^2) = 2y evaluated at the replacement, routed straight to x.
        assert_eq!(g.grad(x).unwrap(), &[2.0, -2.0]);
    }

    #[test]
    fn stability_ops_stay_finite_at_large_magnitudes() {
        // softmax, cross-entropy, layer norm, and row normalization on inputs
        // up to 1e4 must never emit NaN/Inf
        let mut vals = Vec::new();
        for i in 0..24 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            vals.push(sign * 10f64.powf((i % 5) as f64) * (1.0 + i as f64 * 0.37));
        }
        let mut g = Graph::new();
        let x = g.value(&t2(4, 6, &vals));
        let sm = g.softmax_rows(x, 1.0);
        let ce = g.cross_entropy_rows(x, &[0, 5, 2, 3], 1.0);
        let ln = g.layer_norm_rows(x, 1e-5);
        let nm = g.l2_normalize_rows(x);
        for node in [sm, ce, ln, nm] {
            assert!(g.data(node).iter().all(|v| v.is_finite()), "non-finite output");
        }
        for r in 0..4 {
            let s: f64 = g.data(sm)[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.param(&t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = g.narrow_rows(x, 0, 1);
        let rest = g.narrow_rows(x, 1, 2);
        let back = g.concat_rows(top, rest);
        assert_eq!(g.data(back), g.data(x));
        let s = g.sum(back);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }
}
