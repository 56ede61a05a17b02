//! The disentangling recommender network.
//!
//! Six affine+ReLU heads split the pretrained user/item vectors into
//! exposure (alpha), confounder (gamma), and rating (delta) factors. User
//! and item factors merge by Hadamard product; exposure is predicted from
//! alpha.gamma through a sigmoid, ratings from gamma.delta through a ReLU
//! scaled by a context-aware importance weight. Factor independence is
//! pushed by subtracting a kernel-MMD discrepancy term from the objective
//! (the discrepancy itself is maximized).
//!
//! Everything here is hand-differentiated; `full_gradient_check` verifies
//! the complete objective against central finite differences.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ExposureRow;
use crate::derive_seed;
use crate::graph_embed::EmbeddingTable;
use crate::nncore::{
    affine_backward, affine_forward, grad_check, hadamard, relu, relu_backward, rowdot,
    rowdot_backward, sigmoid, AffineLayer, DenseMatrix, GradCheckError, GradCheckReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("positive rate {0} outside the open interval (0, 1)")]
    BadPositiveRate(f64),
    #[error("mmd requires nonempty inputs")]
    EmptyMmdInput,
    #[error("mmd inputs have {x} vs {y} columns")]
    MmdColumnMismatch { x: usize, y: usize },
    #[error("discrepancy loss needs a batch of at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("embedding dim {emb} does not match head input dim {head}")]
    DimMismatch { emb: usize, head: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: checkpoint is missing section `{name}`")]
    MissingSection { path: String, name: String },
    #[error("gradient check failed: {0}")]
    GradCheck(#[from] GradCheckError),
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io { path: path.display().to_string(), source }
}

/// Model ablations. `NoNetworkEmbeddings` swaps the pretrained vectors for
/// freely trained tables; `NoDisentanglement` ties the three user heads (and
/// the three item heads) into one, so no factor split happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoNetworkEmbeddings,
    NoDisentanglement,
}

/// Whether the importance weight scales the prediction itself (the default,
/// literal reading) or weights the squared-error loss instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReweightMode {
    ScalePrediction,
    WeightLoss,
}

/// RBF kernel bandwidth: `Fixed(v)` sets sigma^2 = v directly; `Auto` uses
/// the median pairwise distance over the stacked inputs as sigma (falling
/// back to 1.0 when the median is zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_factor: usize,
    pub variant: Variant,
    pub kappa: f64,
    pub omega_max: f64,
    pub reweight_mode: ReweightMode,
    /// Optional constant added inside the exposure sigmoid. Zero keeps the
    /// literal formulation (which forces predicted exposure >= 0.5, since
    /// the factor dot product is nonnegative).
    pub exposure_logit_bias: f64,
    pub bandwidth: Bandwidth,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            d_factor: 64,
            variant: Variant::Full,
            kappa: 0.5,
            omega_max: 100.0,
            reweight_mode: ReweightMode::ScalePrediction,
            exposure_logit_bias: 0.0,
            bandwidth: Bandwidth::Auto,
        }
    }
}

/// Freely trained embedding table (used by the no-network-embeddings
/// variant, and for fine-tuning pretrained vectors).
#[derive(Debug, Clone)]
pub struct FreeTable {
    pub values: DenseMatrix,
    pub grad: DenseMatrix,
}

impl FreeTable {
    pub fn seeded_uniform(rows: usize, cols: usize, bound: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> =
            (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            values: DenseMatrix::from_vec(rows, cols, values),
            grad: DenseMatrix::zeros(rows, cols),
        }
    }

    pub fn from_matrix(values: DenseMatrix) -> Self {
        let grad = DenseMatrix::zeros(values.rows, values.cols);
        Self { values, grad }
    }
}

/// All trainable state. Tied variants store one head per side; accessors
/// hide the difference.
#[derive(Debug, Clone)]
pub struct D2RecParams {
    pub variant: Variant,
    user_heads: Vec<AffineLayer>,
    item_heads: Vec<AffineLayer>,
    pub free_user: Option<FreeTable>,
    pub free_item: Option<FreeTable>,
}

impl D2RecParams {
    pub fn new(cfg: &ModelConfig, n_users: usize, n_items: usize, seed: u64) -> Self {
        let heads_per_side = match cfg.variant {
            Variant::NoDisentanglement => 1,
            _ => 3,
        };
        let mk = |offset: u64, count: usize| -> Vec<AffineLayer> {
            (0..count)
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, offset + k as u64));
                    AffineLayer::new(cfg.d_emb, cfg.d_factor, &mut rng)
                })
                .collect()
        };
        let user_heads = mk(10, heads_per_side);
        let item_heads = mk(20, heads_per_side);
        let (free_user, free_item) = if cfg.variant == Variant::NoNetworkEmbeddings {
            (
                Some(FreeTable::seeded_uniform(n_users, cfg.d_emb, 0.01, derive_seed(seed, 30))),
                Some(FreeTable::seeded_uniform(n_items, cfg.d_emb, 0.01, derive_seed(seed, 31))),
            )
        } else {
            (None, None)
        };
        Self { variant: cfg.variant, user_heads, item_heads, free_user, free_item }
    }

    /// Head for user factor k (0 = alpha, 1 = gamma, 2 = delta).
    pub fn user_head(&self, k: usize) -> &AffineLayer {
        match self.variant {
            Variant::NoDisentanglement => &self.user_heads[0],
            _ => &self.user_heads[k],
        }
    }

    pub fn item_head(&self, k: usize) -> &AffineLayer {
        match self.variant {
            Variant::NoDisentanglement => &self.item_heads[0],
            _ => &self.item_heads[k],
        }
    }

    fn user_head_mut(&mut self, k: usize) -> &mut AffineLayer {
        match self.variant {
            Variant::NoDisentanglement => &mut self.user_heads[0],
            _ => &mut self.user_heads[k],
        }
    }

    fn item_head_mut(&mut self, k: usize) -> &mut AffineLayer {
        match self.variant {
            Variant::NoDisentanglement => &mut self.item_heads[0],
            _ => &mut self.item_heads[k],
        }
    }

    pub fn d_emb(&self) -> usize {
        self.user_heads[0].in_dim()
    }

    pub fn d_factor(&self) -> usize {
        self.user_heads[0].out_dim()
    }

    pub fn zero_grads(&mut self) {
        for h in self.user_heads.iter_mut().chain(self.item_heads.iter_mut()) {
            h.zero_grads();
        }
        if let Some(t) = self.free_user.as_mut() {
            t.grad.fill(0.0);
        }
        if let Some(t) = self.free_item.as_mut() {
            t.grad.fill(0.0);
        }
    }

    /// Stored heads (1 or 3 per side depending on variant), for optimizers.
    pub fn stored_heads_mut(&mut self) -> Vec<&mut AffineLayer> {
        self.user_heads.iter_mut().chain(self.item_heads.iter_mut()).collect()
    }

    pub fn n_stored_heads(&self) -> usize {
        self.user_heads.len() + self.item_heads.len()
    }

    /// Flatten head parameters (weights then bias, h1..h6 order with tied
    /// heads repeated once only).
    pub fn flat_head_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in self.user_heads.iter().chain(self.item_heads.iter()) {
            out.extend_from_slice(&h.weight.values);
            out.extend_from_slice(&h.bias);
        }
        out
    }

    pub fn set_flat_head_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for h in self.user_heads.iter_mut().chain(self.item_heads.iter_mut()) {
            let nw = h.weight.values.len();
            h.weight.values.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = h.bias.len();
            h.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        assert_eq!(at, flat.len(), "flat parameter vector length mismatch");
    }

    pub fn flat_head_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in self.user_heads.iter().chain(self.item_heads.iter()) {
            out.extend_from_slice(&h.grad_weight.values);
            out.extend_from_slice(&h.grad_bias);
        }
        out
    }
}

/// The six disentangled factor matrices for one batch.
#[derive(Debug, Clone)]
pub struct FactorBundle {
    pub alpha_u: DenseMatrix,
    pub gamma_u: DenseMatrix,
    pub delta_u: DenseMatrix,
    pub alpha_i: DenseMatrix,
    pub gamma_i: DenseMatrix,
    pub delta_i: DenseMatrix,
}

/// Hadamard-merged user-item factors.
#[derive(Debug, Clone)]
pub struct CombinedFactors {
    pub alpha_ui: DenseMatrix,
    pub gamma_ui: DenseMatrix,
    pub delta_ui: DenseMatrix,
}

/// Per-batch loss decomposition. The invariant
/// `total = rating + exposure - kappa * discrepancy` always holds: the
/// discrepancy is maximized while the other terms are minimized.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub rating_loss: f64,
    pub exposure_loss: f64,
    pub discrepancy_loss: f64,
    pub total: f64,
    pub kappa: f64,
    pub n_positive: usize,
}

/// One training batch in parallel-array form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    pub exposed: Vec<f64>,
    pub ratings: Vec<f64>,
}

impl Batch {
    pub fn from_rows(rows: &[ExposureRow]) -> Self {
        let mut users = Vec::with_capacity(rows.len());
        let mut items = Vec::with_capacity(rows.len());
        let mut exposed = Vec::with_capacity(rows.len());
        let mut ratings = Vec::with_capacity(rows.len());
        for r in rows {
            users.push(r.user);
            items.push(r.item);
            exposed.push(if r.exposed { 1.0 } else { 0.0 });
            ratings.push(r.rating.unwrap_or(0.0));
        }
        Self { users, items, exposed, ratings }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Copy the given rows of a table into a batch matrix.
pub fn gather_rows(table: &DenseMatrix, indices: &[u32]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(indices.len(), table.cols);
    for (r, &idx) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(table.row(idx as usize));
    }
    out
}

/// Apply the six heads: `factor = ReLU(h_k(input))`. Under the tied variant
/// the three factors per side are identical by construction.
pub fn disentangle(
    theta_batch: &DenseMatrix,
    beta_batch: &DenseMatrix,
    params: &D2RecParams,
) -> Result<FactorBundle, ModelError> {
    if theta_batch.cols != params.d_emb() {
        return Err(ModelError::DimMismatch { emb: theta_batch.cols, head: params.d_emb() });
    }
    if beta_batch.cols != params.d_emb() {
        return Err(ModelError::DimMismatch { emb: beta_batch.cols, head: params.d_emb() });
    }
    let f = |layer: &AffineLayer, x: &DenseMatrix| relu(&affine_forward(layer, x));
    Ok(FactorBundle {
        alpha_u: f(params.user_head(0), theta_batch),
        gamma_u: f(params.user_head(1), theta_batch),
        delta_u: f(params.user_head(2), theta_batch),
        alpha_i: f(params.item_head(0), beta_batch),
        gamma_i: f(params.item_head(1), beta_batch),
        delta_i: f(params.item_head(2), beta_batch),
    })
}

/// Hadamard-merge user and item factors.
pub fn combine(bundle: &FactorBundle) -> CombinedFactors {
    CombinedFactors {
        alpha_ui: hadamard(&bundle.alpha_u, &bundle.alpha_i),
        gamma_ui: hadamard(&bundle.gamma_u, &bundle.gamma_i),
        delta_ui: hadamard(&bundle.delta_u, &bundle.delta_i),
    }
}

/// Predicted exposure probability per row: sigmoid of alpha.gamma (plus the
/// optional logit bias).
pub fn predict_exposure(cf: &CombinedFactors, logit_bias: f64) -> Vec<f64> {
    rowdot(&cf.alpha_ui, &cf.gamma_ui).iter().map(|&d| sigmoid(d + logit_bias)).collect()
}

/// Context-aware importance weights
/// `w = 1 + [p/(1-p)] * [(1-q)/q]`, clamped to [1, omega_max]. Treated as a
/// constant in differentiation: no gradient flows through it.
pub fn reweight(
    positive_rate: f64,
    exposure_prob: &[f64],
    omega_max: f64,
) -> Result<Vec<f64>, ModelError> {
    if !(positive_rate > 0.0 && positive_rate < 1.0) {
        return Err(ModelError::BadPositiveRate(positive_rate));
    }
    let marginal_ratio = positive_rate / (1.0 - positive_rate);
    Ok(exposure_prob
        .iter()
        .map(|&q| (1.0 + marginal_ratio * (1.0 - q) / q).clamp(1.0, omega_max))
        .collect())
}

/// Predicted ratings: `omega * ReLU(gamma.delta)` per row, always >= 0.
pub fn predict_rating(cf: &CombinedFactors, omega: &[f64]) -> Vec<f64> {
    rowdot(&cf.gamma_ui, &cf.delta_ui)
        .iter()
        .zip(omega)
        .map(|(&d, &w)| w * d.max(0.0))
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// The three RBF kernel matrices of one (X, Y) pair, shared between the
/// forward value and the backward pass so distances and exponentials are
/// computed once.
#[derive(Debug, Clone)]
pub struct PairKernels {
    k_xx: Vec<f64>,
    k_yy: Vec<f64>,
    k_xy: Vec<f64>,
    n: usize,
    m: usize,
    sigma_sq: f64,
}

fn symmetric_sq_dists(x: &DenseMatrix) -> Vec<f64> {
    let n = x.rows;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let xi = x.row(i);
        for j in (i + 1)..n {
            let v = squared_distance(xi, x.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn cross_sq_dists(x: &DenseMatrix, y: &DenseMatrix) -> Vec<f64> {
    let (n, m) = (x.rows, y.rows);
    let mut d = vec![0.0; n * m];
    for i in 0..n {
        let xi = x.row(i);
        let row = &mut d[i * m..(i + 1) * m];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = squared_distance(xi, y.row(j));
        }
    }
    d
}

/// Median over the pairwise distances of the stacked rows: the strict upper
/// triangles of the two within-sample distance matrices plus every cross
/// distance - exactly the i < j pairs of X concatenated with Y.
fn median_from_sq_dists(d_xx: &[f64], d_yy: &[f64], d_xy: &[f64], n: usize, m: usize) -> f64 {
    let mut dists = Vec::with_capacity(n * (n - 1) / 2 + m * (m - 1) / 2 + n * m);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(d_xx[i * n + j].sqrt());
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push(d_yy[i * m + j].sqrt());
        }
    }
    dists.extend(d_xy.iter().map(|v| v.sqrt()));
    if dists.is_empty() {
        return 0.0;
    }
    let mid = dists.len() / 2;
    let (_, med, _) = dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let upper = *med;
    if dists.len() % 2 == 1 {
        upper
    } else {
        let (_, lo, _) = dists.select_nth_unstable_by(mid - 1, |a, b| a.partial_cmp(b).unwrap());
        0.5 * (*lo + upper)
    }
}

fn pair_kernels(
    x: &DenseMatrix,
    y: &DenseMatrix,
    bandwidth: Bandwidth,
    frozen_sigma: Option<f64>,
) -> PairKernels {
    let (n, m) = (x.rows, y.rows);
    let mut d_xx = symmetric_sq_dists(x);
    let mut d_yy = symmetric_sq_dists(y);
    let mut d_xy = cross_sq_dists(x, y);
    let sigma_sq = match frozen_sigma {
        Some(s) => s,
        None => match bandwidth {
            Bandwidth::Fixed(v) => v,
            Bandwidth::Auto => {
                let median = median_from_sq_dists(&d_xx, &d_yy, &d_xy, n, m);
                if median > 0.0 {
                    median * median
                } else {
                    1.0
                }
            }
        },
    };
    let inv = -1.0 / (2.0 * sigma_sq);
    // Within-sample matrices are symmetric with a unit diagonal: one exp per
    // upper-triangle entry, mirrored.
    let exp_symmetric = |d: &mut [f64], n: usize| {
        for i in 0..n {
            d[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let k = (d[i * n + j] * inv).exp();
                d[i * n + j] = k;
                d[j * n + i] = k;
            }
        }
    };
    exp_symmetric(&mut d_xx, n);
    exp_symmetric(&mut d_yy, m);
    for v in d_xy.iter_mut() {
        *v = (*v * inv).exp();
    }
    PairKernels { k_xx: d_xx, k_yy: d_yy, k_xy: d_xy, n, m, sigma_sq }
}

impl PairKernels {
    fn value(&self) -> f64 {
        let mean = |k: &[f64]| k.iter().sum::<f64>() / k.len() as f64;
        mean(&self.k_xx) + mean(&self.k_yy) - 2.0 * mean(&self.k_xy)
    }
}

#[cfg(test)]
fn mmd2_with_sigma(x: &DenseMatrix, y: &DenseMatrix, sigma_sq: f64) -> f64 {
    pair_kernels(x, y, Bandwidth::Fixed(sigma_sq), Some(sigma_sq)).value()
}

/// Squared maximum mean discrepancy between the row samples of `x` and `y`:
/// the biased V-statistic with a Gaussian RBF kernel
/// `k(a,b) = exp(-||a-b||^2 / (2 sigma^2))`.
pub fn mmd2(x: &DenseMatrix, y: &DenseMatrix, bandwidth: Bandwidth) -> Result<f64, ModelError> {
    if x.rows == 0 || y.rows == 0 {
        return Err(ModelError::EmptyMmdInput);
    }
    if x.cols != y.cols {
        return Err(ModelError::MmdColumnMismatch { x: x.cols, y: y.cols });
    }
    Ok(pair_kernels(x, y, bandwidth, None).value())
}

/// Gradient of `upstream * MMD^2(x, y)` with respect to the rows of x and
/// y, with the kernel matrices already computed and sigma treated as a
/// constant.
fn mmd2_grad_cached(
    x: &DenseMatrix,
    y: &DenseMatrix,
    kernels: &PairKernels,
    upstream: f64,
) -> (DenseMatrix, DenseMatrix) {
    let (n, m) = (kernels.n, kernels.m);
    let (nf, mf) = (n as f64, m as f64);
    let d = x.cols;
    let mut dx = DenseMatrix::zeros(x.rows, x.cols);
    let mut dy = DenseMatrix::zeros(y.rows, y.cols);
    let scale = 2.0 * upstream / kernels.sigma_sq;

    // d/dx_r of (1/n^2) sum k(x_i, x_j): -(2/n^2) sum_j k(x_r,x_j)(x_r-x_j).
    let within = |mat: &DenseMatrix, grad: &mut DenseMatrix, k: &[f64], count: f64| {
        for r in 0..mat.rows {
            let grad_row = grad.row_mut(r);
            for j in 0..mat.rows {
                if j == r {
                    continue;
                }
                let c = -scale * k[r * mat.rows + j] / (count * count);
                let (ar, aj) = (mat.row(r), mat.row(j));
                for t in 0..d {
                    grad_row[t] += c * (ar[t] - aj[t]);
                }
            }
        }
    };
    within(x, &mut dx, &kernels.k_xx, nf);
    within(y, &mut dy, &kernels.k_yy, mf);

    // Cross term -2 (1/nm) sum k(x_i, y_j).
    for i in 0..n {
        let xi = x.row(i);
        let dxi = dx.row_mut(i);
        for j in 0..m {
            let c = scale * kernels.k_xy[i * m + j] / (nf * mf);
            let yj = y.row(j);
            for t in 0..d {
                dxi[t] += c * (xi[t] - yj[t]);
            }
        }
    }
    for j in 0..m {
        let yj = y.row(j);
        let dyj = dy.row_mut(j);
        for i in 0..n {
            let c = scale * kernels.k_xy[i * m + j] / (nf * mf);
            let xi = x.row(i);
            for t in 0..d {
                dyj[t] += c * (yj[t] - xi[t]);
            }
        }
    }
    (dx, dy)
}

#[cfg(test)]
fn mmd2_grad(
    x: &DenseMatrix,
    y: &DenseMatrix,
    sigma_sq: f64,
    upstream: f64,
) -> (DenseMatrix, DenseMatrix) {
    let kernels = pair_kernels(x, y, Bandwidth::Fixed(sigma_sq), Some(sigma_sq));
    mmd2_grad_cached(x, y, &kernels, upstream)
}

/// The six (X, Y) factor pairs entering the discrepancy loss, in order.
const DISC_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (3, 4), (4, 5), (3, 5)];

fn bundle_factors(bundle: &FactorBundle) -> [&DenseMatrix; 6] {
    [
        &bundle.alpha_u,
        &bundle.gamma_u,
        &bundle.delta_u,
        &bundle.alpha_i,
        &bundle.gamma_i,
        &bundle.delta_i,
    ]
}

fn discrepancy_forward(
    bundle: &FactorBundle,
    bandwidth: Bandwidth,
    frozen_sigmas: Option<&[f64; 6]>,
) -> Result<(f64, [f64; 6], Vec<PairKernels>), ModelError> {
    if bundle.alpha_u.rows < 2 {
        return Err(ModelError::DegenerateBatch(bundle.alpha_u.rows));
    }
    let factors = bundle_factors(bundle);
    let mut sigmas = [0.0; 6];
    let mut kernels = Vec::with_capacity(6);
    let mut total = 0.0;
    for (k, &(a, b)) in DISC_PAIRS.iter().enumerate() {
        let pk = pair_kernels(factors[a], factors[b], bandwidth, frozen_sigmas.map(|s| s[k]));
        sigmas[k] = pk.sigma_sq;
        total += pk.value();
        kernels.push(pk);
    }
    Ok((total, sigmas, kernels))
}

/// Sum of the six pairwise MMD^2 terms, with the per-pair sigma^2 values
/// used (needed to replay the same function under a frozen bandwidth).
pub fn discrepancy_loss_detailed(
    bundle: &FactorBundle,
    bandwidth: Bandwidth,
    frozen_sigmas: Option<&[f64; 6]>,
) -> Result<(f64, [f64; 6]), ModelError> {
    discrepancy_forward(bundle, bandwidth, frozen_sigmas).map(|(v, s, _)| (v, s))
}

/// Sum of the six pairwise MMD^2 terms over the factor bundle.
pub fn discrepancy_loss(bundle: &FactorBundle, bandwidth: Bandwidth) -> Result<f64, ModelError> {
    discrepancy_loss_detailed(bundle, bandwidth, None).map(|(v, _)| v)
}

fn discrepancy_grads(
    bundle: &FactorBundle,
    kernels: &[PairKernels],
    upstream: f64,
) -> [DenseMatrix; 6] {
    let factors = bundle_factors(bundle);
    let mut grads: [DenseMatrix; 6] = std::array::from_fn(|k| {
        DenseMatrix::zeros(factors[k].rows, factors[k].cols)
    });
    for (k, &(a, b)) in DISC_PAIRS.iter().enumerate() {
        let (da, db) = mmd2_grad_cached(factors[a], factors[b], &kernels[k], upstream);
        for (g, v) in grads[a].values.iter_mut().zip(&da.values) {
            *g += v;
        }
        for (g, v) in grads[b].values.iter_mut().zip(&db.values) {
            *g += v;
        }
    }
    grads
}

const PROB_CLAMP: f64 = 1e-7;

/// Rating loss (sum of squared errors over exposed rows), exposure BCE over
/// all rows with probabilities clamped to [1e-7, 1-1e-7], and the combined
/// objective `rating + exposure - kappa * discrepancy`.
pub fn losses(
    batch: &Batch,
    yhat: &[f64],
    exposure_prob: &[f64],
    omega: &[f64],
    mode: ReweightMode,
    discrepancy: f64,
    kappa: f64,
) -> LossReport {
    let mut rating_loss = 0.0;
    let mut n_positive = 0;
    for r in 0..batch.len() {
        if batch.exposed[r] > 0.5 {
            n_positive += 1;
            let err = batch.ratings[r] - yhat[r];
            let sq = err * err;
            rating_loss += match mode {
                ReweightMode::ScalePrediction => sq,
                ReweightMode::WeightLoss => omega[r] * sq,
            };
        }
    }
    let mut exposure_loss = 0.0;
    for r in 0..batch.len() {
        let p = exposure_prob[r].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        exposure_loss -= batch.exposed[r] * p.ln() + (1.0 - batch.exposed[r]) * (1.0 - p).ln();
    }
    let total = rating_loss + exposure_loss - kappa * discrepancy;
    LossReport {
        rating_loss,
        exposure_loss,
        discrepancy_loss: discrepancy,
        total,
        kappa,
        n_positive,
    }
}

/// Quantities frozen across a finite-difference sweep. The implemented
/// objective treats the MMD bandwidths and the importance weights as
/// constants of the current batch (no gradient flows through them), so a
/// gradient check must evaluate the loss with both pinned.
#[derive(Debug, Clone, Default)]
pub struct ForwardOverrides {
    pub bandwidths: Option<[f64; 6]>,
    pub omegas: Option<Vec<f64>>,
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub z: [DenseMatrix; 6],
    pub bundle: FactorBundle,
    pub combined: CombinedFactors,
    pub exposure_dot: Vec<f64>,
    pub exposure_prob: Vec<f64>,
    pub omega: Vec<f64>,
    pub rating_dot: Vec<f64>,
    pub yhat: Vec<f64>,
    pub sigmas: [f64; 6],
    pair_kernels: Vec<PairKernels>,
}

/// Full training forward pass over gathered embedding rows.
pub fn forward(
    params: &D2RecParams,
    cfg: &ModelConfig,
    theta_batch: &DenseMatrix,
    beta_batch: &DenseMatrix,
    batch: &Batch,
    positive_rate: f64,
    overrides: &ForwardOverrides,
) -> Result<(ForwardCache, LossReport), ModelError> {
    if theta_batch.cols != params.d_emb() {
        return Err(ModelError::DimMismatch { emb: theta_batch.cols, head: params.d_emb() });
    }
    let z1 = affine_forward(params.user_head(0), theta_batch);
    let z2 = affine_forward(params.user_head(1), theta_batch);
    let z3 = affine_forward(params.user_head(2), theta_batch);
    let z4 = affine_forward(params.item_head(0), beta_batch);
    let z5 = affine_forward(params.item_head(1), beta_batch);
    let z6 = affine_forward(params.item_head(2), beta_batch);
    let bundle = FactorBundle {
        alpha_u: relu(&z1),
        gamma_u: relu(&z2),
        delta_u: relu(&z3),
        alpha_i: relu(&z4),
        gamma_i: relu(&z5),
        delta_i: relu(&z6),
    };
    let combined = combine(&bundle);

    let exposure_dot: Vec<f64> = rowdot(&combined.alpha_ui, &combined.gamma_ui)
        .iter()
        .map(|&d| d + cfg.exposure_logit_bias)
        .collect();
    let exposure_prob: Vec<f64> = exposure_dot.iter().map(|&d| sigmoid(d)).collect();

    let omega = match &overrides.omegas {
        Some(w) => w.clone(),
        None => reweight(positive_rate, &exposure_prob, cfg.omega_max)?,
    };

    let rating_dot = rowdot(&combined.gamma_ui, &combined.delta_ui);
    let yhat: Vec<f64> = match cfg.reweight_mode {
        ReweightMode::ScalePrediction => {
            rating_dot.iter().zip(&omega).map(|(&d, &w)| w * d.max(0.0)).collect()
        }
        ReweightMode::WeightLoss => rating_dot.iter().map(|&d| d.max(0.0)).collect(),
    };

    let (discrepancy, sigmas, pair_kernels) =
        discrepancy_forward(&bundle, cfg.bandwidth, overrides.bandwidths.as_ref())?;

    let report = losses(
        batch,
        &yhat,
        &exposure_prob,
        &omega,
        cfg.reweight_mode,
        discrepancy,
        cfg.kappa,
    );
    let cache = ForwardCache {
        z: [z1, z2, z3, z4, z5, z6],
        bundle,
        combined,
        exposure_dot,
        exposure_prob,
        omega,
        rating_dot,
        yhat,
        sigmas,
        pair_kernels,
    };
    Ok((cache, report))
}

/// Backward pass for the combined objective. Accumulates head gradients in
/// `params` and returns the gradients with respect to the gathered theta and
/// beta rows (used when embedding tables are trainable).
pub fn backward(
    params: &mut D2RecParams,
    cfg: &ModelConfig,
    theta_batch: &DenseMatrix,
    beta_batch: &DenseMatrix,
    batch: &Batch,
    cache: &ForwardCache,
) -> (DenseMatrix, DenseMatrix) {
    let b = batch.len();

    // Rating path.
    let mut d_rating_dot = vec![0.0; b];
    for r in 0..b {
        if batch.exposed[r] < 0.5 {
            continue;
        }
        let relu_active = cache.rating_dot[r] > 0.0;
        if !relu_active {
            continue;
        }
        d_rating_dot[r] = match cfg.reweight_mode {
            ReweightMode::ScalePrediction => {
                2.0 * (cache.yhat[r] - batch.ratings[r]) * cache.omega[r]
            }
            ReweightMode::WeightLoss => {
                2.0 * cache.omega[r] * (cache.yhat[r] - batch.ratings[r])
            }
        };
    }

    // Exposure path: d BCE / d logit = (clamped? 0 : prob - label).
    let mut d_exposure_dot = vec![0.0; b];
    for r in 0..b {
        let p = cache.exposure_prob[r];
        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
            d_exposure_dot[r] = p - batch.exposed[r];
        }
    }

    let (d_gamma_ui_rating, d_delta_ui) =
        rowdot_backward(&cache.combined.gamma_ui, &cache.combined.delta_ui, &d_rating_dot);
    let (d_alpha_ui, d_gamma_ui_exposure) =
        rowdot_backward(&cache.combined.alpha_ui, &cache.combined.gamma_ui, &d_exposure_dot);
    let mut d_gamma_ui = d_gamma_ui_rating;
    for (g, v) in d_gamma_ui.values.iter_mut().zip(&d_gamma_ui_exposure.values) {
        *g += v;
    }

    // Discrepancy path enters the objective as -kappa * L_disc.
    let disc = discrepancy_grads(&cache.bundle, &cache.pair_kernels, -cfg.kappa);
    let [d_alpha_u_disc, d_gamma_u_disc, d_delta_u_disc, d_alpha_i_disc, d_gamma_i_disc, d_delta_i_disc] =
        disc;

    // Hadamard backward plus the discrepancy contributions.
    let add = |mut base: DenseMatrix, extra: &DenseMatrix| {
        for (g, v) in base.values.iter_mut().zip(&extra.values) {
            *g += v;
        }
        base
    };
    let (mut d_alpha_u, d_alpha_i) =
        hadamard_backward_pair(&cache.bundle.alpha_u, &cache.bundle.alpha_i, &d_alpha_ui);
    let (mut d_gamma_u, d_gamma_i) =
        hadamard_backward_pair(&cache.bundle.gamma_u, &cache.bundle.gamma_i, &d_gamma_ui);
    let (mut d_delta_u, d_delta_i) =
        hadamard_backward_pair(&cache.bundle.delta_u, &cache.bundle.delta_i, &d_delta_ui);
    d_alpha_u = add(d_alpha_u, &d_alpha_u_disc);
    d_gamma_u = add(d_gamma_u, &d_gamma_u_disc);
    d_delta_u = add(d_delta_u, &d_delta_u_disc);
    let d_alpha_i = add(d_alpha_i, &d_alpha_i_disc);
    let d_gamma_i = add(d_gamma_i, &d_gamma_i_disc);
    let d_delta_i = add(d_delta_i, &d_delta_i_disc);

    // Through the ReLUs and heads.
    let dz = [
        relu_backward(&cache.z[0], &d_alpha_u),
        relu_backward(&cache.z[1], &d_gamma_u),
        relu_backward(&cache.z[2], &d_delta_u),
        relu_backward(&cache.z[3], &d_alpha_i),
        relu_backward(&cache.z[4], &d_gamma_i),
        relu_backward(&cache.z[5], &d_delta_i),
    ];
    let mut d_theta = DenseMatrix::zeros(theta_batch.rows, theta_batch.cols);
    let mut d_beta = DenseMatrix::zeros(beta_batch.rows, beta_batch.cols);
    for k in 0..3 {
        let dx = affine_backward(params.user_head_mut(k), theta_batch, &dz[k]);
        for (g, v) in d_theta.values.iter_mut().zip(&dx.values) {
            *g += v;
        }
    }
    for k in 0..3 {
        let dx = affine_backward(params.item_head_mut(k), beta_batch, &dz[3 + k]);
        for (g, v) in d_beta.values.iter_mut().zip(&dx.values) {
            *g += v;
        }
    }
    (d_theta, d_beta)
}

fn hadamard_backward_pair(
    a: &DenseMatrix,
    b: &DenseMatrix,
    upstream: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    crate::nncore::hadamard_backward(a, b, upstream)
}

/// Scatter batch-row gradients into a free table's gradient buffer.
pub fn scatter_rows(grad: &mut DenseMatrix, indices: &[u32], row_grads: &DenseMatrix) {
    for (r, &idx) in indices.iter().enumerate() {
        let dst = grad.row_mut(idx as usize);
        for (g, v) in dst.iter_mut().zip(row_grads.row(r)) {
            *g += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKP_MAGIC: &[u8; 5] = b"D2CKP";

struct Section {
    name: String,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

fn layer_section(name: &str, layer: &AffineLayer) -> Section {
    Section {
        name: name.to_string(),
        rows: layer.weight.rows,
        cols: layer.weight.cols,
        weights: layer.weight.values.clone(),
        bias: layer.bias.clone(),
    }
}

impl D2RecParams {
    /// Binary checkpoint: magic `D2CKP`, u32 section count, then per section
    /// a name, the weight shape, weights, and bias as little-endian f32.
    /// Sections h1..h6 are always present (tied variants repeat the shared
    /// layer); free tables add `free_user` / `free_item`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let mut sections = Vec::new();
        for k in 0..3 {
            sections.push(layer_section(&format!("h{}", k + 1), self.user_head(k)));
        }
        for k in 0..3 {
            sections.push(layer_section(&format!("h{}", k + 4), self.item_head(k)));
        }
        if let Some(t) = &self.free_user {
            sections.push(Section {
                name: "free_user".to_string(),
                rows: t.values.rows,
                cols: t.values.cols,
                weights: t.values.values.clone(),
                bias: Vec::new(),
            });
        }
        if let Some(t) = &self.free_item {
            sections.push(Section {
                name: "free_item".to_string(),
                rows: t.values.rows,
                cols: t.values.cols,
                weights: t.values.values.clone(),
                bias: Vec::new(),
            });
        }

        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
        emit(CKP_MAGIC)?;
        emit(&(sections.len() as u32).to_le_bytes())?;
        for s in &sections {
            emit(&(s.name.len() as u16).to_le_bytes())?;
            emit(s.name.as_bytes())?;
            emit(&(s.rows as u32).to_le_bytes())?;
            emit(&(s.cols as u32).to_le_bytes())?;
            emit(&(s.bias.len() as u32).to_le_bytes())?;
            for &v in &s.weights {
                emit(&(v as f32).to_le_bytes())?;
            }
            for &v in &s.bias {
                emit(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load_checkpoint(path: &Path, variant: Variant) -> Result<Self, ModelError> {
        Self::load_checkpoint_with(path, variant, variant == Variant::NoNetworkEmbeddings)
    }

    /// `load_free_tables` additionally restores the `free_user` /
    /// `free_item` sections, which fine-tuned runs write even for the
    /// full variant.
    pub fn load_checkpoint_with(
        path: &Path,
        variant: Variant,
        load_free_tables: bool,
    ) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
        if &magic != CKP_MAGIC {
            return Err(ModelError::BadMagic { path: path.display().to_string() });
        }
        let read_u32 = |r: &mut BufReader<File>| -> Result<u32, ModelError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
            Ok(u32::from_le_bytes(b))
        };
        let n_sections = read_u32(&mut r)? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let mut lb = [0u8; 2];
            r.read_exact(&mut lb).map_err(|e| io_err(path, e))?;
            let name_len = u16::from_le_bytes(lb) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| io_err(path, e))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let bias_len = read_u32(&mut r)? as usize;
            let mut read_f32s = |count: usize| -> Result<Vec<f64>, ModelError> {
                let mut out = Vec::with_capacity(count);
                let mut b = [0u8; 4];
                for _ in 0..count {
                    r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
                    out.push(f32::from_le_bytes(b) as f64);
                }
                Ok(out)
            };
            let weights = read_f32s(rows * cols)?;
            let bias = read_f32s(bias_len)?;
            sections.push(Section {
                name: String::from_utf8_lossy(&name).to_string(),
                rows,
                cols,
                weights,
                bias,
            });
        }

        let find = |name: &str| -> Result<&Section, ModelError> {
            sections.iter().find(|s| s.name == name).ok_or_else(|| ModelError::MissingSection {
                path: path.display().to_string(),
                name: name.to_string(),
            })
        };
        let to_layer = |s: &Section| -> AffineLayer {
            AffineLayer {
                weight: DenseMatrix::from_vec(s.rows, s.cols, s.weights.clone()),
                bias: s.bias.clone(),
                grad_weight: DenseMatrix::zeros(s.rows, s.cols),
                grad_bias: vec![0.0; s.bias.len()],
            }
        };

        let (user_heads, item_heads) = match variant {
            Variant::NoDisentanglement => {
                (vec![to_layer(find("h1")?)], vec![to_layer(find("h4")?)])
            }
            _ => (
                vec![to_layer(find("h1")?), to_layer(find("h2")?), to_layer(find("h3")?)],
                vec![to_layer(find("h4")?), to_layer(find("h5")?), to_layer(find("h6")?)],
            ),
        };
        let free = |name: &str| -> Result<Option<FreeTable>, ModelError> {
            if !load_free_tables {
                return Ok(None);
            }
            let s = find(name)?;
            Ok(Some(FreeTable::from_matrix(DenseMatrix::from_vec(
                s.rows,
                s.cols,
                s.weights.clone(),
            ))))
        };
        Ok(Self {
            variant,
            user_heads,
            item_heads,
            free_user: free("free_user")?,
            free_item: free("free_item")?,
        })
    }
}

/// JSON sidecar stored next to a checkpoint: everything needed to reproduce
/// predictions, including the training positive rate that parameterizes the
/// importance weights at inference time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub variant: Variant,
    pub d_emb: usize,
    pub d_factor: usize,
    pub kappa: f64,
    pub omega_max: f64,
    pub reweight_mode: ReweightMode,
    pub exposure_logit_bias: f64,
    pub positive_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub fine_tuned: bool,
}

impl ModelSidecar {
    pub fn write_json(&self, path: &Path) -> Result<(), ModelError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| io_err(path, std::io::Error::other(e)))
    }

    pub fn read_json(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| io_err(path, std::io::Error::other(e)))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_emb: self.d_emb,
            d_factor: self.d_factor,
            variant: self.variant,
            kappa: self.kappa,
            omega_max: self.omega_max,
            reweight_mode: self.reweight_mode,
            exposure_logit_bias: self.exposure_logit_bias,
            bandwidth: Bandwidth::Auto,
        }
    }
}

/// Frozen model plus everything needed to score arbitrary (user, item)
/// pairs. The importance weight is applied at prediction time in the
/// default mode, using the training positive rate.
pub struct RatingPredictor<'a> {
    pub params: &'a D2RecParams,
    pub cfg: &'a ModelConfig,
    pub theta: &'a DenseMatrix,
    pub beta: &'a DenseMatrix,
    pub positive_rate: f64,
    pub clamp_predictions: bool,
}

impl<'a> RatingPredictor<'a> {
    /// Resolve the embedding sources for a parameter set: free tables when
    /// the variant trains its own, otherwise the pretrained tables.
    pub fn resolve_tables(
        params: &'a D2RecParams,
        theta: &'a EmbeddingTable,
        beta: &'a EmbeddingTable,
    ) -> (&'a DenseMatrix, &'a DenseMatrix) {
        match (&params.free_user, &params.free_item) {
            (Some(u), Some(i)) => (&u.values, &i.values),
            _ => (&theta.vectors, &beta.vectors),
        }
    }

    pub fn predict_many(&self, pairs: &[(u32, u32)]) -> Vec<f64> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let users: Vec<u32> = pairs.iter().map(|&(u, _)| u).collect();
        let items: Vec<u32> = pairs.iter().map(|&(_, i)| i).collect();
        let theta_batch = gather_rows(self.theta, &users);
        let beta_batch = gather_rows(self.beta, &items);
        let bundle = disentangle(&theta_batch, &beta_batch, self.params)
            .expect("predictor dims checked at construction");
        let cf = combine(&bundle);
        let exposure = predict_exposure(&cf, self.cfg.exposure_logit_bias);
        let omega = match self.cfg.reweight_mode {
            ReweightMode::ScalePrediction => {
                reweight(self.positive_rate, &exposure, self.cfg.omega_max)
                    .expect("positive rate validated at training time")
            }
            ReweightMode::WeightLoss => vec![1.0; pairs.len()],
        };
        let mut yhat = predict_rating(&cf, &omega);
        if self.clamp_predictions {
            for y in &mut yhat {
                *y = y.clamp(1.0, 5.0);
            }
        }
        yhat
    }

    pub fn predict(&self, user: u32, item: u32) -> f64 {
        self.predict_many(&[(user, item)])[0]
    }
}

// ---------------------------------------------------------------------------
// Full-objective gradient check
// ---------------------------------------------------------------------------

/// Toy-instance dimensions for the end-to-end gradient check.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub n_users: usize,
    pub n_items: usize,
    pub d_emb: usize,
    pub d_factor: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { n_users: 6, n_items: 6, d_emb: 8, d_factor: 4, batch_size: 6, seed: 42 }
    }
}

struct ToyInstance {
    cfg: ModelConfig,
    params: D2RecParams,
    theta: DenseMatrix,
    beta: DenseMatrix,
    batch: Batch,
    positive_rate: f64,
}

fn build_toy(spec: &ToySpec, seed: u64) -> ToyInstance {
    let cfg = ModelConfig {
        d_emb: spec.d_emb,
        d_factor: spec.d_factor,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let rand_mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        DenseMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-0.8..0.8)).collect(),
        )
    };
    let theta = rand_mat(&mut rng, spec.n_users, spec.d_emb);
    let beta = rand_mat(&mut rng, spec.n_items, spec.d_emb);
    let params = D2RecParams::new(&cfg, spec.n_users, spec.n_items, derive_seed(seed, 8));

    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut exposed = Vec::new();
    let mut ratings = Vec::new();
    for r in 0..spec.batch_size {
        users.push(rng.random_range(0..spec.n_users as u32));
        items.push(rng.random_range(0..spec.n_items as u32));
        // Keep at least one positive so the rating term is live.
        let e = r == 0 || rng.random_range(0.0..1.0) < 0.5;
        exposed.push(if e { 1.0 } else { 0.0 });
        ratings.push(if e { rng.random_range(1..=5) as f64 } else { 0.0 });
    }
    let batch = Batch { users, items, exposed, ratings };
    ToyInstance { cfg, params, theta, beta, batch, positive_rate: 0.5 }
}

/// Margins away from the ReLU kinks and the BCE clamp, so that central
/// differences measure the same one-sided derivative the backward pass
/// computes.
fn toy_has_margins(toy: &ToyInstance, cache: &ForwardCache) -> bool {
    let margin = 1e-3;
    let zs_ok = cache.z.iter().all(|z| z.values.iter().all(|v| v.abs() > margin));
    let dots_ok = cache.rating_dot.iter().all(|v| v.abs() > margin)
        && cache.exposure_dot.iter().all(|v| v.abs() > margin);
    let probs_ok = cache
        .exposure_prob
        .iter()
        .all(|&p| p > 10.0 * PROB_CLAMP && p < 1.0 - 10.0 * PROB_CLAMP);
    let _ = toy;
    zs_ok && dots_ok && probs_ok
}

/// Check analytic gradients of the complete objective (rating + exposure -
/// kappa * discrepancy) against central finite differences for every head
/// parameter, on a seeded toy instance.
pub fn full_gradient_check(spec: &ToySpec, h: f64) -> Result<GradCheckReport, ModelError> {
    // Degenerate seeds (a pre-activation parked on a ReLU kink) make finite
    // differences meaningless; walk to the first seed with clean margins.
    let mut toy = build_toy(spec, spec.seed);
    for bump in 0..32u64 {
        let gathered_theta = gather_rows(&toy.theta, &toy.batch.users);
        let gathered_beta = gather_rows(&toy.beta, &toy.batch.items);
        let (cache, _) = forward(
            &toy.params,
            &toy.cfg,
            &gathered_theta,
            &gathered_beta,
            &toy.batch,
            toy.positive_rate,
            &ForwardOverrides::default(),
        )?;
        if toy_has_margins(&toy, &cache) {
            break;
        }
        toy = build_toy(spec, spec.seed + bump + 1);
    }

    let gathered_theta = gather_rows(&toy.theta, &toy.batch.users);
    let gathered_beta = gather_rows(&toy.beta, &toy.batch.items);
    let (cache, _) = forward(
        &toy.params,
        &toy.cfg,
        &gathered_theta,
        &gathered_beta,
        &toy.batch,
        toy.positive_rate,
        &ForwardOverrides::default(),
    )?;
    let frozen = ForwardOverrides {
        bandwidths: Some(cache.sigmas),
        omegas: Some(cache.omega.clone()),
    };

    let mut work = toy.params.clone();
    work.zero_grads();
    let (cache_live, _) = forward(
        &work,
        &toy.cfg,
        &gathered_theta,
        &gathered_beta,
        &toy.batch,
        toy.positive_rate,
        &frozen,
    )?;
    backward(&mut work, &toy.cfg, &gathered_theta, &gathered_beta, &toy.batch, &cache_live);
    let analytic = work.flat_head_grads();

    let base_params = toy.params.flat_head_params();
    let template = toy.params.clone();
    let cfg = toy.cfg.clone();
    let batch = toy.batch.clone();
    let positive_rate = toy.positive_rate;
    let loss = move |flat: &[f64]| -> f64 {
        let mut p = template.clone();
        p.set_flat_head_params(flat);
        match forward(&p, &cfg, &gathered_theta, &gathered_beta, &batch, positive_rate, &frozen) {
            Ok((_, report)) => report.total,
            Err(_) => f64::NAN,
        }
    };
    Ok(grad_check(loss, &analytic, &base_params, h)?)
}
