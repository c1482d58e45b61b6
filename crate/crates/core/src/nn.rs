//! Network building blocks on top of the tape: parameter binding, linear and
//! conv layers, adaptive layer norm, and multi-head attention.

use crate::error::{Result, SdError};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor};
use rand::Rng;

/// Layer-norm variance epsilon (inside the square root).
pub const LN_EPS: f64 = 1e-5;

/// Owns a per-step graph and lazily binds `ParamStore` entries into it, so a
/// parameter referenced from several places becomes a single node.
pub struct Binder<'p, F: Real> {
    pub g: Graph<F>,
    store: &'p ParamStore<F>,
    nodes: Vec<Option<usize>>,
    track: bool,
}

impl<'p, F: Real> Binder<'p, F> {
    /// Tracked mode: parameters receive gradients.
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Binder { g: Graph::new(), store, nodes: vec![None; store.len()], track: true }
    }

    /// Frozen mode for inference: parameters enter as constants.
    pub fn inference(store: &'p ParamStore<F>) -> Self {
        Binder { g: Graph::new(), store, nodes: vec![None; store.len()], track: false }
    }

    /// Node id for a parameter, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> usize {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let t = self.store.get(id);
        let n = if self.track { self.g.param(t) } else { self.g.value(t) };
        self.nodes[id.0] = Some(n);
        n
    }

    /// Backward pass followed by gradient collection, indexed by `ParamId`.
    pub fn backward_collect(&mut self, loss: usize) -> Vec<Option<Vec<F>>> {
        assert!(self.track, "backward_collect on an inference binder");
        self.g.backward(loss);
        let mut grads = vec![None; self.store.len()];
        for (pid, node) in self.nodes.iter().enumerate() {
            if let Some(n) = *node {
                grads[pid] = self.g.grad(n).map(|s| s.to_vec());
            }
        }
        grads
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), Tensor::kaiming_uniform(vec![d_in, d_out], d_in, rng));
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Linear { w, b }
    }

    /// All-zero init; used for modulation projections so they start neutral.
    pub fn init_zero<F: Real>(ps: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), Tensor::zeros(vec![d_in, d_out]));
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Linear { w, b }
    }

    pub fn forward<F: Real>(&self, b: &mut Binder<F>, x: usize) -> usize {
        let w = b.p(self.w);
        let bias = b.p(self.b);
        let y = b.g.matmul(x, w);
        b.g.add_bias_per_col(y, bias)
    }
}

/// 1-D convolution layer in `[channels, length]` layout.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            Tensor::kaiming_uniform(vec![c_out, c_in, kernel], c_in * kernel, rng),
        );
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Conv1d { w, b, stride, pad }
    }

    pub fn forward<F: Real>(&self, b: &mut Binder<F>, x: usize) -> usize {
        let w = b.p(self.w);
        let bias = b.p(self.b);
        let y = b.g.conv1d(x, w, self.stride, self.pad);
        b.g.add_bias_per_row(y, bias)
    }
}

/// Sinusoidal features of a scalar time value, `[1, dim]`, half sine / half
/// cosine with log-spaced frequencies.
pub fn sinusoidal_embedding<F: Real>(t: f64, dim: usize) -> Tensor<F> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        data.push(F::from_f64((t * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        data.push(F::from_f64((t * freq).cos()));
    }
    Tensor::new(vec![1, dim], data).expect("embedding shape")
}

/// Adaptive layer norm: plain per-position layer norm modulated by
/// `(1 + scale)` and `shift` projected from a conditioning vector.
#[derive(Debug, Clone)]
pub struct AdaLayerNorm {
    pub proj: Linear,
    pub d_model: usize,
}

impl AdaLayerNorm {
    pub fn init<F: Real>(ps: &mut ParamStore<F>, name: &str, d_cond: usize, d_model: usize) -> Self {
        AdaLayerNorm { proj: Linear::init_zero(ps, name, d_cond, 2 * d_model), d_model }
    }

    /// `x: [L, d_model]`, `cond: [1, d_cond]` -> `[L, d_model]`.
    pub fn forward<F: Real>(&self, b: &mut Binder<F>, x: usize, cond: usize) -> usize {
        let both = self.proj.forward(b, cond);
        let scale = b.g.narrow_cols(both, 0, self.d_model);
        let shift = b.g.narrow_cols(both, self.d_model, self.d_model);
        let scale = b.g.reshape(scale, vec![self.d_model]);
        let shift = b.g.reshape(shift, vec![self.d_model]);
        let one_plus = b.g.affine(scale, F::ONE, F::ONE);
        let normed = b.g.layer_norm_rows(x, F::from_f64(LN_EPS));
        let scaled = b.g.scale_per_col(normed, one_plus);
        b.g.add_bias_per_col(scaled, shift)
    }
}

/// Multi-head self-attention core (projections + scaled dot-product +
/// output projection; no residual or normalization).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(SdError::Config(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::init(ps, &format!("{name}.q"), d_model, d_model, rng),
            wk: Linear::init(ps, &format!("{name}.k"), d_model, d_model, rng),
            wv: Linear::init(ps, &format!("{name}.v"), d_model, d_model, rng),
            wo: Linear::init(ps, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    pub fn forward<F: Real>(&self, b: &mut Binder<F>, x: usize) -> usize {
        let d_head = self.d_model / self.heads;
        let q = self.wq.forward(b, x);
        let k = self.wk.forward(b, x);
        let v = self.wv.forward(b, x);
        let inv_sqrt = F::from_f64(1.0 / (d_head as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = b.g.narrow_cols(q, h * d_head, d_head);
            let kh = b.g.narrow_cols(k, h * d_head, d_head);
            let vh = b.g.narrow_cols(v, h * d_head, d_head);
            let kt = b.g.transpose(kh);
            let scores = b.g.matmul(qh, kt);
            let scores = b.g.affine(scores, inv_sqrt, F::ZERO);
            let attn = b.g.softmax_rows(scores, F::ONE);
            outs.push(b.g.matmul(attn, vh));
        }
        let merged = b.g.concat_cols(&outs);
        self.wo.forward(b, merged)
    }
}

/// Transformer block with AdaLN conditioning: pre-norm attention and MLP,
/// each behind a residual connection.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub norm_attn: AdaLayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: AdaLayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl DitBlock {
    pub fn init<F: Real>(
        ps: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        d_cond: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp_hidden = 4 * d_model;
        Ok(DitBlock {
            norm_attn: AdaLayerNorm::init(ps, &format!("{name}.adaln_attn"), d_cond, d_model),
            attn: MultiHeadAttention::init(ps, &format!("{name}.attn"), d_model, heads, rng)?,
            norm_mlp: AdaLayerNorm::init(ps, &format!("{name}.adaln_mlp"), d_cond, d_model),
            mlp_in: Linear::init(ps, &format!("{name}.mlp_in"), d_model, mlp_hidden, rng),
            mlp_out: Linear::init(ps, &format!("{name}.mlp_out"), mlp_hidden, d_model, rng),
        })
    }

    pub fn forward<F: Real>(&self, b: &mut Binder<F>, x: usize, cond: usize) -> usize {
        let normed = self.norm_attn.forward(b, x, cond);
        let attn_out = self.attn.forward(b, normed);
        let x = b.g.add(x, attn_out);
        let normed = self.norm_mlp.forward(b, x, cond);
        let hidden = self.mlp_in.forward(b, normed);
        let hidden = b.g.gelu(hidden);
        let mlp_out = self.mlp_out.forward(b, hidden);
        b.g.add(x, mlp_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = stream(0, 0);
        let err = MultiHeadAttention::init(&mut ps, "a", 10, 3, &mut rng).unwrap_err();
        assert!(matches!(err, SdError::Config(_)));
    }

    #[test]
    fn single_position_attention_with_identity_values_is_identity() {
        // softmax over one position is 1, so with V and O as identity maps the
        // attention core returns its input.
        let d = 4;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(1, 0);
        let attn = MultiHeadAttention::init(&mut ps, "a", d, 2, &mut rng).unwrap();
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        *ps.get_mut(attn.wv.w) = eye.clone();
        *ps.get_mut(attn.wo.w) = eye; // biases stay zero from init
        let mut b = Binder::inference(&ps);
        let x = b.g.value(&Tensor::new(vec![1, d], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let y = attn.forward(&mut b, x);
        for (a, e) in b.g.data(y).iter().zip([0.3, -1.0, 2.0, 0.7]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let d = 8;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = stream(2, 0);
        let attn = MultiHeadAttention::init(&mut ps, "a", d, 2, &mut rng).unwrap();
        let rows = 3;
        let x = Tensor::<f64>::randn(vec![rows, d], 1.0, &mut rng);
        let run = |input: &Tensor<f64>| -> Vec<f64> {
            let mut b = Binder::inference(&ps);
            let n = b.g.value(input);
            let y = attn.forward(&mut b, n);
            b.g.data(y).to_vec()
        };
        let base = run(&x);
        // swap rows 0 and 2
        let mut permuted = x.clone();
        for c in 0..d {
            permuted.data_mut().swap(c, 2 * d + c);
        }
        let swapped = run(&permuted);
        for c in 0..d {
            assert!((base[c] - swapped[2 * d + c]).abs() < 1e-10);
            assert!((base[2 * d + c] - swapped[c]).abs() < 1e-10);
            assert!((base[d + c] - swapped[d + c]).abs() < 1e-10);
        }
    }

    #[test]
    fn ada_ln_neutral_modulation_is_plain_layer_norm() {
        // zero-init projection => scale = shift = 0 => output is layer norm.
        let mut ps = ParamStore::<f64>::new();
        let ada = AdaLayerNorm::init(&mut ps, "m", 4, 6);
        let mut rng = stream(3, 0);
        let x = Tensor::<f64>::randn(vec![2, 6], 1.0, &mut rng);
        let cond = Tensor::<f64>::randn(vec![1, 4], 1.0, &mut rng);
        let mut b = Binder::inference(&ps);
        let xn = b.g.value(&x);
        let cn = b.g.value(&cond);
        let y = ada.forward(&mut b, xn, cn);
        for r in 0..2 {
            let row = &b.g.data(y)[r * 6..(r + 1) * 6];
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn ada_ln_constant_row_emits_shift() {
        let mut ps = ParamStore::<f64>::new();
        let ada = AdaLayerNorm::init(&mut ps, "m", 2, 3);
        // force shift = (1, 2, 3) through the projection bias
        let bias = ps.get_mut(ada.proj.b);
        bias.data_mut()[3] = 1.0;
        bias.data_mut()[4] = 2.0;
        bias.data_mut()[5] = 3.0;
        let mut b = Binder::inference(&ps);
        let x = b.g.value(&Tensor::new(vec![1, 3], vec![7.0, 7.0, 7.0]).unwrap());
        let cond = b.g.value(&Tensor::new(vec![1, 2], vec![0.4, -0.4]).unwrap());
        let y = ada.forward(&mut b, x, cond);
        // constant row normalizes to ~0, so output is the shift vector
        for (v, e) in b.g.data(y).iter().zip([1.0, 2.0, 3.0]) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_deterministic() {
        let a = sinusoidal_embedding::<f64>(0.37, 16);
        let b = sinusoidal_embedding::<f64>(0.37, 16);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
