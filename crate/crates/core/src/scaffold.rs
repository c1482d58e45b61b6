//! Low-rank anchor scaffold over the flattened VQ latent space: learned
//! per-sample coordinates `U` (M × r) and global basis `V` (D × r),
//! coordinate regularization toward zero mean / unit variance, and the
//! kernel-smoothed anchor prior used to initialize the flow.

use crate::error::{Result, SdError};
use crate::nn::Binder;
use crate::tensor::{ParamId, ParamStore, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

/// Learned low-rank factors living in a Stage-2 parameter store.
#[derive(Debug, Clone)]
pub struct AnchorScaffold {
    pub u: ParamId,
    pub v: ParamId,
    pub anchors: usize, // M
    pub rank: usize,    // r
    pub dim: usize,     // D = L * d_c
    pub lambda_mu: f32,
    pub lambda_sigma: f32,
}

impl AnchorScaffold {
    /// U, V filled with N(0, 0.01²) entries. Requires `r <= min(M, D)`.
    pub fn init(
        ps: &mut ParamStore<f32>,
        anchors: usize,
        rank: usize,
        dim: usize,
        lambda_mu: f32,
        lambda_sigma: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > anchors.min(dim) {
            return Err(SdError::Config(format!(
                "rank {rank} out of range for M={anchors}, D={dim}"
            )));
        }
        let u = ps.add("scaffold.u", Tensor::randn(vec![anchors, rank], 0.01, rng));
        let v = ps.add("scaffold.v", Tensor::randn(vec![dim, rank], 0.01, rng));
        Ok(AnchorScaffold { u, v, anchors, rank, dim, lambda_mu, lambda_sigma })
    }

    /// Rebuild from checkpointed factors.
    pub fn from_tensors(
        ps: &mut ParamStore<f32>,
        u: Tensor<f32>,
        v: Tensor<f32>,
        lambda_mu: f32,
        lambda_sigma: f32,
    ) -> Self {
        let (anchors, rank) = (u.rows(), u.cols());
        let dim = v.rows();
        let u = ps.add("scaffold.u", u);
        let v = ps.add("scaffold.v", v);
        AnchorScaffold { u, v, anchors, rank, dim, lambda_mu, lambda_sigma }
    }

    /// Graph-side anchored initialization for one coordinate row of U:
    /// `z0 = normalize(reshape(u V^T, [L, d_c]))`, differentiable in both
    /// factors. Per-row normalization puts every position at the data scale
    /// (Frobenius norm sqrt(L)); the global variant rescales the whole
    /// matrix to the same Frobenius norm instead, which keeps z0 exactly
    /// inside the span of the basis.
    pub fn anchor_init_graph(
        &self,
        b: &mut Binder<f32>,
        anchor_index: usize,
        latent_rows: usize,
        global_norm: bool,
    ) -> usize {
        let u = b.p(self.u);
        let v = b.p(self.v);
        let u_row = b.g.narrow_rows(u, anchor_index, 1); // [1, r]
        let vt = b.g.transpose(v); // [r, D]
        let flat = b.g.matmul(u_row, vt); // [1, D]
        let z = b.g.reshape(flat, vec![latent_rows, self.dim / latent_rows]);
        if global_norm {
            let sq = b.g.mul(z, z);
            let ss = b.g.sum(sq);
            let ss = b.g.affine(ss, 1.0, 1e-24);
            let norm = b.g.sqrt_elem(ss);
            let inv = b.g.recip_elem(norm);
            let unit = b.g.scale_by_scalar_node(z, inv);
            b.g.affine(unit, (latent_rows as f32).sqrt(), 0.0)
        } else {
            b.g.l2_normalize_rows(z)
        }
    }

    /// Coordinate-regularization terms on the graph:
    /// `lambda_mu * ||mean coordinate||^2` and `lambda_sigma * |std(U) - 1|`,
    /// with std taken as one global scalar over all M*r entries.
    pub fn coord_reg_terms_graph(&self, b: &mut Binder<f32>) -> (usize, usize) {
        let u = b.p(self.u);
        let ubar = b.g.mean_axis0(u);
        let ubar_sq = b.g.mul(ubar, ubar);
        let mean_norm_sq = b.g.sum(ubar_sq);
        let mean_term = b.g.affine(mean_norm_sq, self.lambda_mu, 0.0);

        let mean_all = b.g.mean(u);
        let sq = b.g.mul(u, u);
        let mean_sq = b.g.mean(sq);
        let mean_all_sq = b.g.mul(mean_all, mean_all);
        let var = b.g.sub(mean_sq, mean_all_sq);
        let var = b.g.affine(var, 1.0, 1e-12);
        let std = b.g.sqrt_elem(var);
        let dev = b.g.affine(std, 1.0, -1.0);
        let dev = b.g.abs_elem(dev);
        let sigma_term = b.g.affine(dev, self.lambda_sigma, 0.0);
        (mean_term, sigma_term)
    }

    /// Combined regularization loss node.
    pub fn coord_reg_graph(&self, b: &mut Binder<f32>) -> usize {
        let (mu_term, sigma_term) = self.coord_reg_terms_graph(b);
        b.g.add(mu_term, sigma_term)
    }
}

/// Scalar reference implementation of the coordinate regularizer (f64).
pub fn coord_reg_value(u: &Tensor<f32>, lambda_mu: f64, lambda_sigma: f64) -> f64 {
    let (m, r) = (u.rows(), u.cols());
    let n = (m * r) as f64;
    let mut col_means = vec![0.0f64; r];
    let mut mean_all = 0.0f64;
    let mut sq_all = 0.0f64;
    for row in 0..m {
        for c in 0..r {
            let v = u.row(row)[c] as f64;
            col_means[c] += v;
            mean_all += v;
            sq_all += v * v;
        }
    }
    for cm in &mut col_means {
        *cm /= m as f64;
    }
    mean_all /= n;
    let var = (sq_all / n - mean_all * mean_all).max(0.0);
    let std = var.sqrt();
    let mean_norm_sq: f64 = col_means.iter().map(|v| v * v).sum();
    lambda_mu * mean_norm_sq + lambda_sigma * (std - 1.0).abs()
}

/// Data-side anchored initialization: `normalize_rows(reshape(u V^T))`.
/// A zero-norm row falls back to adding 1e-8 isotropic noise and
/// renormalizing.
pub fn anchor_init(
    u: &[f64],
    v: &Tensor<f32>,
    latent_rows: usize,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let dim = v.rows();
    let rank = v.cols();
    assert_eq!(u.len(), rank, "coordinate length != rank");
    assert_eq!(dim % latent_rows, 0, "D must split into latent rows");
    let d_c = dim / latent_rows;
    let mut flat = project(u, v);
    let mut out = vec![0.0f32; dim];
    for i in 0..latent_rows {
        let row = &mut flat[i * d_c..(i + 1) * d_c];
        let mut norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            let noise = Normal::new(0.0, 1e-8).unwrap();
            for x in row.iter_mut() {
                *x += noise.sample(rng);
            }
            norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        }
        for (o, &x) in out[i * d_c..(i + 1) * d_c].iter_mut().zip(row.iter()) {
            *o = (x / norm) as f32;
        }
    }
    Tensor::new(vec![latent_rows, d_c], out).expect("anchor shape")
}

/// Global-normalization variant (the comparison flag): the whole matrix is
/// rescaled to Frobenius norm sqrt(L), so the result stays exactly in the
/// span of the basis columns.
pub fn anchor_init_global(
    u: &[f64],
    v: &Tensor<f32>,
    latent_rows: usize,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let dim = v.rows();
    assert_eq!(u.len(), v.cols(), "coordinate length != rank");
    assert_eq!(dim % latent_rows, 0, "D must split into latent rows");
    let d_c = dim / latent_rows;
    let mut flat = project(u, v);
    let mut norm = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let noise = Normal::new(0.0, 1e-8).unwrap();
        for x in flat.iter_mut() {
            *x += noise.sample(rng);
        }
        norm = flat.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    }
    let scale = (latent_rows as f64).sqrt() / norm;
    let out: Vec<f32> = flat.iter().map(|&x| (x * scale) as f32).collect();
    Tensor::new(vec![latent_rows, d_c], out).expect("anchor shape")
}

fn project(u: &[f64], v: &Tensor<f32>) -> Vec<f64> {
    let dim = v.rows();
    let mut flat = vec![0.0f64; dim];
    for (j, f) in flat.iter_mut().enumerate() {
        let vrow = v.row(j);
        let mut acc = 0.0f64;
        for (t, &uv) in u.iter().enumerate() {
            acc += uv * vrow[t] as f64;
        }
        *f = acc;
    }
    flat
}

/// Mean over rows of the distance to the nearest *other* row (O(M²) scan).
pub fn mean_nn_distance(points: &[Vec<f64>]) -> Result<f64> {
    let m = points.len();
    if m < 2 {
        return Err(SdError::Config(format!("mean nearest-neighbor distance needs M >= 2, got {m}")));
    }
    let mut total = 0.0f64;
    for i in 0..m {
        let mut best = f64::INFINITY;
        for j in 0..m {
            if i == j {
                continue;
            }
            let d2: f64 =
                points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2);
        }
        total += best.sqrt();
    }
    Ok(total / m as f64)
}

/// Kernel-smoothed anchor prior: an equally weighted Gaussian mixture over
/// the coordinate rows with bandwidth `h = alpha * mean_nn_distance`.
#[derive(Debug, Clone)]
pub struct AnchorPrior {
    pub centers: Vec<Vec<f64>>,
    pub rank: usize,
    pub alpha: f64,
    pub mean_nn: f64,
    pub bandwidth: f64,
}

impl AnchorPrior {
    /// Build from the learned coordinates; recomputes `h` from the current U.
    pub fn build(u: &Tensor<f32>, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(SdError::Config(format!("bandwidth factor must be positive, got {alpha}")));
        }
        let centers: Vec<Vec<f64>> =
            (0..u.rows()).map(|r| u.row(r).iter().map(|&v| v as f64).collect()).collect();
        let mean_nn = mean_nn_distance(&centers)?;
        let bandwidth = alpha * mean_nn;
        Ok(AnchorPrior { rank: u.cols(), centers, alpha, mean_nn, bandwidth })
    }

    /// Build from explicit centers and bandwidth (M >= 1).
    pub fn from_points(centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        let first = centers.first().ok_or_else(|| SdError::Config("prior needs M >= 1".into()))?;
        let rank = first.len();
        if centers.iter().any(|c| c.len() != rank) {
            return Err(SdError::Dim("inconsistent center dimensions".into()));
        }
        Ok(AnchorPrior { centers, rank, alpha: f64::NAN, mean_nn: f64::NAN, bandwidth })
    }

    /// Uniformly random center plus isotropic Gaussian noise of std `h`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let j = rng.gen_range(0..self.centers.len());
        if self.bandwidth == 0.0 {
            return self.centers[j].clone();
        }
        let noise = Normal::new(0.0, self.bandwidth).unwrap();
        self.centers[j].iter().map(|&c| c + noise.sample(rng)).collect()
    }

    /// Mixture density `(1/M) * sum_i (2*pi*h^2)^(-r/2) exp(-||q-u_i||^2 / (2h^2))`.
    pub fn density(&self, q: &[f64]) -> f64 {
        assert_eq!(q.len(), self.rank);
        let h2 = self.bandwidth * self.bandwidth;
        let norm = (2.0 * PI * h2).powf(-(self.rank as f64) / 2.0);
        let mut acc = 0.0f64;
        for c in &self.centers {
            let d2: f64 = c.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += (-d2 / (2.0 * h2)).exp();
        }
        norm * acc / self.centers.len() as f64
    }
}
