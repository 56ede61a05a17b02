//! Minimal dense-tensor kernel: the exact operator set the disentangling
//! network needs (affine map, ReLU, sigmoid, Hadamard product, row-wise dot),
//! each with a hand-derived backward pass, plus Adam and a finite-difference
//! gradient checker.
//!
//! There is no autodiff graph. The model's dataflow is fixed, so every
//! backward function is written out explicitly and verified against central
//! finite differences in double precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            rows * cols,
            "dense matrix: {} values do not fill {}x{}",
            values.len(),
            rows,
            cols
        );
        Self { rows, cols, values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "dense matrix: ragged row ({} vs {})", row.len(), c);
            values.extend_from_slice(row);
        }
        Self { rows: r, cols: c, values }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

/// Affine layer `y = x W + b` with gradient accumulators.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub grad_weight: DenseMatrix,
    pub grad_bias: Vec<f64>,
}

impl AffineLayer {
    /// Glorot-uniform initialization from the given RNG.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let values: Vec<f64> =
            (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: DenseMatrix::from_vec(in_dim, out_dim, values),
            bias: vec![0.0; out_dim],
            grad_weight: DenseMatrix::zeros(in_dim, out_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `x W + b`. Panics on dimension mismatch, naming both shapes.
pub fn affine_forward(layer: &AffineLayer, x: &DenseMatrix) -> DenseMatrix {
    assert_eq!(
        x.cols,
        layer.weight.rows,
        "affine forward: input {}x{} incompatible with weight {}x{}",
        x.rows,
        x.cols,
        layer.weight.rows,
        layer.weight.cols
    );
    let (n, k, m) = (x.rows, x.cols, layer.weight.cols);
    let mut out = DenseMatrix::zeros(n, m);
    for r in 0..n {
        let xr = x.row(r);
        let or = out.row_mut(r);
        or.copy_from_slice(&layer.bias);
        for (i, &xv) in xr.iter().enumerate().take(k) {
            let wrow = layer.weight.row(i);
            for j in 0..m {
                or[j] += xv * wrow[j];
            }
        }
    }
    out
}

/// Chain rule for the affine map: accumulates `dW = xᵀ g` and `db = Σ g`
/// into the layer, returns `dx = g Wᵀ`.
pub fn affine_backward(
    layer: &mut AffineLayer,
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> DenseMatrix {
    assert_eq!(
        (upstream.rows, upstream.cols),
        (x.rows, layer.weight.cols),
        "affine backward: upstream {}x{} incompatible with input {}x{} and weight {}x{}",
        upstream.rows,
        upstream.cols,
        x.rows,
        x.cols,
        layer.weight.rows,
        layer.weight.cols
    );
    let (n, k, m) = (x.rows, x.cols, layer.weight.cols);
    let mut dx = DenseMatrix::zeros(n, k);
    for r in 0..n {
        let xr = x.row(r);
        let gr = upstream.row(r);
        for j in 0..m {
            layer.grad_bias[j] += gr[j];
        }
        for i in 0..k {
            let wrow = layer.weight.row(i);
            let gwrow = layer.grad_weight.row_mut(i);
            let mut acc = 0.0;
            for j in 0..m {
                gwrow[j] += xr[i] * gr[j];
                acc += gr[j] * wrow[j];
            }
            dx.row_mut(r)[i] = acc;
        }
    }
    dx
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    let values = x.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    DenseMatrix::from_vec(x.rows, x.cols, values)
}

/// ReLU derivative; defined as 0 at exactly 0.
pub fn relu_backward(pre_activation: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    assert_eq!(
        (pre_activation.rows, pre_activation.cols),
        (upstream.rows, upstream.cols),
        "relu backward: pre-activation {}x{} vs upstream {}x{}",
        pre_activation.rows,
        pre_activation.cols,
        upstream.rows,
        upstream.cols
    );
    let values = pre_activation
        .values
        .iter()
        .zip(&upstream.values)
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(upstream.rows, upstream.cols, values)
}

/// Numerically stable sigmoid; saturates cleanly at |x| beyond ~700.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// d/dx of sigmoid given the already-computed output `s = σ(x)`.
pub fn sigmoid_backward(sig: &[f64], upstream: &[f64]) -> Vec<f64> {
    assert_eq!(
        sig.len(),
        upstream.len(),
        "sigmoid backward: {} outputs vs {} upstream",
        sig.len(),
        upstream.len()
    );
    sig.iter().zip(upstream).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(
        (a.rows, a.cols),
        (b.rows, b.cols),
        "hadamard: {}x{} vs {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let values = a.values.iter().zip(&b.values).map(|(&x, &y)| x * y).collect();
    DenseMatrix::from_vec(a.rows, a.cols, values)
}

/// Gradients of the Hadamard product: `da = g ⊙ b`, `db = g ⊙ a`.
pub fn hadamard_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    upstream: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    (hadamard(upstream, b), hadamard(upstream, a))
}

/// Per-row dot product of two equal-shape matrices, one scalar per row.
pub fn rowdot(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    assert_eq!(
        (a.rows, a.cols),
        (b.rows, b.cols),
        "rowdot: {}x{} vs {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    (0..a.rows).map(|r| a.row(r).iter().zip(b.row(r)).map(|(&x, &y)| x * y).sum()).collect()
}

/// Gradients of the row-wise dot: `da[r] = g[r]·b[r]`, `db[r] = g[r]·a[r]`.
pub fn rowdot_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    upstream: &[f64],
) -> (DenseMatrix, DenseMatrix) {
    assert_eq!(
        upstream.len(),
        a.rows,
        "rowdot backward: {} upstream scalars vs {} rows",
        upstream.len(),
        a.rows
    );
    let mut da = DenseMatrix::zeros(a.rows, a.cols);
    let mut db = DenseMatrix::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let g = upstream[r];
        for c in 0..a.cols {
            da.set(r, c, g * b.get(r, c));
            db.set(r, c, g * a.get(r, c));
        }
    }
    (da, db)
}

/// Adam state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One Adam update with bias correction. A zero gradient from a fresh
    /// state leaves the parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "adam: {} params vs state of {}",
            params.len(),
            self.m.len()
        );
        assert_eq!(
            params.len(),
            grads.len(),
            "adam: {} params vs {} grads",
            params.len(),
            grads.len()
        );
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite loss while perturbing coordinate {index}")]
    NonFiniteLoss { index: usize },
    #[error("non-finite loss at the unperturbed point")]
    NonFiniteBase,
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub n_params: usize,
}

/// Central-difference check of `analytic` against the scalar loss closure.
///
/// Relative error per coordinate is |analytic − numeric| divided by
/// max(|analytic|, |numeric|, 1e-12); the report carries the worst one.
pub fn grad_check<F: Fn(&[f64]) -> f64>(
    loss: F,
    analytic: &[f64],
    params: &[f64],
    h: f64,
) -> Result<GradCheckReport, GradCheckError> {
    assert_eq!(
        analytic.len(),
        params.len(),
        "grad check: {} analytic grads vs {} params",
        analytic.len(),
        params.len()
    );
    if !loss(params).is_finite() {
        return Err(GradCheckError::NonFiniteBase);
    }
    let mut work = params.to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = loss(&work);
        work[i] = orig - h;
        let down = loss(&work);
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFiniteLoss { index: i });
        }
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, worst_index: worst, n_params: params.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut layer = AffineLayer::new(2, 2, &mut rng(0));
        layer.weight = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        layer.bias = vec![0.0, 0.0];
        let x = DenseMatrix::from_vec(2, 2, vec![3.0, -1.0, 0.5, 2.0]);
        assert_eq!(affine_forward(&layer, &x).values, x.values);
    }

    #[test]
    fn affine_known_values() {
        let mut layer = AffineLayer::new(2, 2, &mut rng(0));
        layer.weight = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        layer.bias = vec![1.0, 1.0];
        let x = DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]);
        assert_eq!(affine_forward(&layer, &x).values, vec![2.0, 3.0]);
    }

    #[test]
    #[should_panic(expected = "affine forward: input 1x3 incompatible with weight 2x4")]
    fn affine_shape_mismatch_names_shapes() {
        let layer = AffineLayer::new(2, 4, &mut rng(0));
        let x = DenseMatrix::zeros(1, 3);
        affine_forward(&layer, &x);
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        // Loss = sum of squares of the affine output on a random 3x4 layer.
        let mut r = rng(7);
        let layer = AffineLayer::new(3, 4, &mut r);
        let x = DenseMatrix::from_vec(2, 3, (0..6).map(|_| r.random_range(-1.0..1.0)).collect());

        let flat = |l: &AffineLayer| {
            let mut p = l.weight.values.clone();
            p.extend_from_slice(&l.bias);
            p
        };
        let unflat = |p: &[f64]| {
            let mut l = layer.clone();
            l.weight.values.copy_from_slice(&p[..12]);
            l.bias.copy_from_slice(&p[12..]);
            l
        };
        let loss = |p: &[f64]| {
            let l = unflat(p);
            affine_forward(&l, &x).values.iter().map(|v| v * v).sum::<f64>()
        };

        let mut work = layer.clone();
        work.zero_grads();
        let out = affine_forward(&work, &x);
        let upstream =
            DenseMatrix::from_vec(out.rows, out.cols, out.values.iter().map(|v| 2.0 * v).collect());
        affine_backward(&mut work, &x, &upstream);
        let mut analytic = work.grad_weight.values.clone();
        analytic.extend_from_slice(&work.grad_bias);

        let report = grad_check(loss, &analytic, &flat(&layer), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn elementwise_op_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(500.0).is_finite());
        assert!(sigmoid(-500.0).is_finite());
        let x = DenseMatrix::from_vec(1, 2, vec![-3.0, 2.0]);
        assert_eq!(relu(&x).values, vec![0.0, 2.0]);
        let a = DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let b = DenseMatrix::from_vec(1, 3, vec![4.0, 5.0, 6.0]);
        assert_eq!(rowdot(&a, &b), vec![32.0]);
    }

    #[test]
    fn relu_derivative_zero_at_origin() {
        let pre = DenseMatrix::from_vec(1, 3, vec![-1.0, 0.0, 1.0]);
        let up = DenseMatrix::from_vec(1, 3, vec![5.0, 5.0, 5.0]);
        assert_eq!(relu_backward(&pre, &up).values, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn hadamard_and_rowdot_backward_match_finite_differences() {
        let mut r = rng(11);
        let a = DenseMatrix::from_vec(4, 3, (0..12).map(|_| r.random_range(-2.0..2.0)).collect());
        let b = DenseMatrix::from_vec(4, 3, (0..12).map(|_| r.random_range(-2.0..2.0)).collect());

        // Loss = Σ_r (a_r · b_r)² through hadamard+sum to exercise both paths.
        let loss = |av: &[f64]| {
            let am = DenseMatrix::from_vec(4, 3, av.to_vec());
            rowdot(&am, &b).iter().map(|d| d * d).sum::<f64>()
        };
        let dots = rowdot(&a, &b);
        let upstream: Vec<f64> = dots.iter().map(|d| 2.0 * d).collect();
        let (da, _db) = rowdot_backward(&a, &b, &upstream);
        let report = grad_check(loss, &da.values, &a.values, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-7, "max rel err {}", report.max_rel_error);

        let (ha, hb) = hadamard_backward(&a, &b, &DenseMatrix::from_vec(4, 3, vec![1.0; 12]));
        assert_eq!(ha.values, b.values);
        assert_eq!(hb.values, a.values);
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3, 0.1);
        state.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // Bias-corrected first step: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, 0.1);
        state.step(&mut params, &[1.0]);
        assert!((params[0] + 0.1).abs() < 1e-8, "got {}", params[0]);
    }

    #[test]
    fn adam_trajectories_deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.7];
            let mut s = AdamState::new(2, 0.01);
            for i in 0..50 {
                let g = [p[0] - 1.0 + (i as f64 * 0.01), p[1] * 2.0];
                s.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_exact_quadratic() {
        let params = vec![0.7, -1.3, 2.1];
        let loss = |p: &[f64]| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let report = grad_check(loss, &params.clone(), &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn grad_check_catches_planted_fault() {
        let params = vec![0.7, -1.3, 2.1];
        let corrupted: Vec<f64> = params.iter().map(|v| 2.0 * v).collect();
        let loss = |p: &[f64]| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let report = grad_check(loss, &corrupted, &params, 1e-5).unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-6, "got {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let loss = |p: &[f64]| if p[0] > 1.0 { f64::NAN } else { p[0] };
        let err = grad_check(loss, &[1.0], &[1.0], 1e-1).unwrap_err();
        assert!(matches!(err, GradCheckError::NonFiniteLoss { index: 0 }));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        // Backward of every operator stays within 1e-4 of central differences
        // on randomized shapes up to 8x8.
        #[test]
        fn backward_ops_pass_fd_on_random_shapes(
            rows in 1usize..=8,
            in_dim in 1usize..=8,
            out_dim in 1usize..=8,
            seed in 0u64..1000,
        ) {
            let mut r = rng(seed);
            let layer = AffineLayer::new(in_dim, out_dim, &mut r);
            let x = DenseMatrix::from_vec(
                rows,
                in_dim,
                (0..rows * in_dim).map(|_| r.random_range(-1.5..1.5)).collect(),
            );

            // Scalar loss: sum of sigmoid of relu of the affine output.
            let eval = |l: &AffineLayer| {
                let z = affine_forward(l, &x);
                relu(&z).values.iter().map(|&v| sigmoid(v)).sum::<f64>()
            };
            let loss = |p: &[f64]| {
                let mut l = layer.clone();
                let nw = l.weight.values.len();
                l.weight.values.copy_from_slice(&p[..nw]);
                l.bias.copy_from_slice(&p[nw..]);
                eval(&l)
            };

            let mut work = layer.clone();
            work.zero_grads();
            let z = affine_forward(&work, &x);
            // Central differences are meaningless at the ReLU kink itself;
            // skip samples that land a pre-activation on it.
            proptest::prop_assume!(z.values.iter().all(|v| v.abs() > 1e-3));
            let a = relu(&z);
            let sig: Vec<f64> = a.values.iter().map(|&v| sigmoid(v)).collect();
            let d_sig: Vec<f64> = sig.iter().map(|&s| s * (1.0 - s)).collect();
            let d_a = DenseMatrix::from_vec(a.rows, a.cols, d_sig);
            let d_z = relu_backward(&z, &d_a);
            affine_backward(&mut work, &x, &d_z);

            let mut analytic = work.grad_weight.values.clone();
            analytic.extend_from_slice(&work.grad_bias);
            let mut params = layer.weight.values.clone();
            params.extend_from_slice(&layer.bias);

            let report = grad_check(loss, &analytic, &params, 1e-5).unwrap();
            proptest::prop_assert!(
                report.max_rel_error < 1e-4,
                "rel err {} at {}",
                report.max_rel_error,
                report.worst_index
            );
        }
    }
}
