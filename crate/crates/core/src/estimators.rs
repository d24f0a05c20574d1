//! Reweighted empirical estimators over a minibatch: means, variances,
//! covariances, Dirichlet energies, Rayleigh quotients and the Gram matrix of
//! Dirichlet forms.
//!
//! All estimators are self-normalizing in the weights, so any global positive
//! rescaling of the weight vector leaves them unchanged. Reductions are
//! sequential left-to-right sums; for fixed inputs the results are
//! deterministic.

use thiserror::Error;

/// Variance floor below which a Rayleigh quotient is refused rather than
/// regularized: a near-constant candidate eigenfunction is a training
/// pathology the caller must see.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("batch of size {got} is too small (need at least {need})")]
    BatchTooSmall { need: usize, got: usize },
    #[error("mismatched lengths: {0}")]
    LengthMismatch(String),
    #[error("degenerate variance {variance} (floor {floor}): candidate function is near-constant")]
    DegenerateVariance { variance: f64, floor: f64 },
}

/// Diffusion field evaluated at the batch states.
///
/// `Dense` stores one row-major `dim x dim` matrix per state.
#[derive(Debug, Clone, Copy)]
pub enum DiffusionAtStates<'a> {
    Identity,
    Dense { dim: usize, mats: &'a [f64] },
}

/// Owned variant of [`DiffusionAtStates`], carried inside a [`BatchEval`].
#[derive(Debug, Clone, Default)]
pub enum DiffusionData {
    #[default]
    Identity,
    Dense {
        dim: usize,
        mats: Vec<f64>,
    },
}

impl DiffusionData {
    pub fn at_states(&self) -> DiffusionAtStates<'_> {
        match self {
            DiffusionData::Identity => DiffusionAtStates::Identity,
            DiffusionData::Dense { dim, mats } => DiffusionAtStates::Dense { dim: *dim, mats },
        }
    }
}

impl DiffusionAtStates<'_> {
    /// Quadratic form `(a(x_b) g) . h` for the gradients of two functions at
    /// batch point `b`.
    fn quadratic_form(&self, b: usize, g: &[f64], h: &[f64]) -> f64 {
        match self {
            DiffusionAtStates::Identity => dot(g, h),
            DiffusionAtStates::Dense { dim, mats } => {
                let d = *dim;
                let a = &mats[b * d * d..(b + 1) * d * d];
                let mut acc = 0.0;
                for i in 0..d {
                    let mut row = 0.0;
                    for j in 0..d {
                        row += a[i * d + j] * g[j];
                    }
                    acc += row * h[i];
                }
                acc
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_same_len(a: usize, b: usize, what: &str) -> Result<(), EstimatorError> {
    if a != b {
        return Err(EstimatorError::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Self-normalized weighted mean `sum f_b w_b / sum w_b`.
pub fn emean(values: &[f64], weights: &[f64]) -> Result<f64, EstimatorError> {
    check_same_len(values.len(), weights.len(), "values/weights")?;
    if values.is_empty() {
        return Err(EstimatorError::BatchTooSmall { need: 1, got: 0 });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&f, &w) in values.iter().zip(weights) {
        num += f * w;
        den += w;
    }
    Ok(num / den)
}

/// Weighted covariance `E(fg) - E(f) E(g)`.
pub fn ecov(values_f: &[f64], values_g: &[f64], weights: &[f64]) -> Result<f64, EstimatorError> {
    check_same_len(values_f.len(), values_g.len(), "f/g")?;
    check_same_len(values_f.len(), weights.len(), "values/weights")?;
    if values_f.len() < 2 {
        return Err(EstimatorError::BatchTooSmall { need: 2, got: values_f.len() });
    }
    let mut sum_fg = 0.0;
    let mut sum_f = 0.0;
    let mut sum_g = 0.0;
    let mut sum_w = 0.0;
    for i in 0..values_f.len() {
        let w = weights[i];
        sum_fg += values_f[i] * values_g[i] * w;
        sum_f += values_f[i] * w;
        sum_g += values_g[i] * w;
        sum_w += w;
    }
    Ok(sum_fg / sum_w - (sum_f / sum_w) * (sum_g / sum_w))
}

/// Weighted population variance `E(f^2) - E(f)^2`.
pub fn evar(values_f: &[f64], weights: &[f64]) -> Result<f64, EstimatorError> {
    ecov(values_f, values_f, weights)
}

/// Weighted Dirichlet-form mean `(1/beta) E((a grad f) . grad g)`.
///
/// `grads_*` are row-major `B x dim`. This is the shared kernel behind both
/// [`erq`] numerators and [`f_matrix`] entries.
pub fn dirichlet_mean(
    grads_f: &[f64],
    grads_g: &[f64],
    dim: usize,
    diffusion: DiffusionAtStates,
    beta: f64,
    weights: &[f64],
) -> Result<f64, EstimatorError> {
    let b = weights.len();
    check_same_len(grads_f.len(), b * dim, "grads_f")?;
    check_same_len(grads_g.len(), b * dim, "grads_g")?;
    if b == 0 {
        return Err(EstimatorError::BatchTooSmall { need: 1, got: 0 });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..b {
        let gf = &grads_f[i * dim..(i + 1) * dim];
        let gg = &grads_g[i * dim..(i + 1) * dim];
        num += diffusion.quadratic_form(i, gf, gg) * weights[i];
        den += weights[i];
    }
    Ok(num / (beta * den))
}

/// Empirical Rayleigh quotient `(1/beta) E((a grad f) . grad f) / Var(f)`.
pub fn erq(
    values_f: &[f64],
    grads_f: &[f64],
    dim: usize,
    diffusion: DiffusionAtStates,
    beta: f64,
    weights: &[f64],
) -> Result<f64, EstimatorError> {
    let var = evar(values_f, weights)?;
    if var <= VARIANCE_FLOOR {
        return Err(EstimatorError::DegenerateVariance { variance: var, floor: VARIANCE_FLOOR });
    }
    let energy = dirichlet_mean(grads_f, grads_f, dim, diffusion, beta, weights)?;
    Ok(energy / var)
}

/// Gram matrix of Dirichlet forms among `K` functions, returned row-major
/// `K x K` and symmetrized as `(F + F^T) / 2` after assembly.
pub fn f_matrix(
    grads: &[&[f64]],
    dim: usize,
    diffusion: DiffusionAtStates,
    beta: f64,
    weights: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    let k = grads.len();
    if k == 0 {
        return Err(EstimatorError::BatchTooSmall { need: 1, got: 0 });
    }
    let mut f = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            f[i * k + j] = dirichlet_mean(grads[i], grads[j], dim, diffusion, beta, weights)?;
        }
    }
    // Floating-point summation order breaks exact symmetry; downstream logic
    // assumes symmetric input.
    for i in 0..k {
        for j in (i + 1)..k {
            let s = 0.5 * (f[i * k + j] + f[j * k + i]);
            f[i * k + j] = s;
            f[j * k + i] = s;
        }
    }
    Ok(f)
}

/// Values, spatial gradients and weights of `K` functions over one minibatch,
/// together with the diffusion field at the batch states.
///
/// Layout: `values[k * b + i]`, `grads[(k * b + i) * dim + c]`.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub k: usize,
    pub batch: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub weights: Vec<f64>,
    pub diffusion: DiffusionData,
}

impl BatchEval {
    pub fn zeros(k: usize, batch: usize, dim: usize) -> Self {
        Self {
            k,
            batch,
            dim,
            values: vec![0.0; k * batch],
            grads: vec![0.0; k * batch * dim],
            weights: vec![1.0; batch],
            diffusion: DiffusionData::Identity,
        }
    }

    pub fn values_of(&self, func: usize) -> &[f64] {
        &self.values[func * self.batch..(func + 1) * self.batch]
    }

    pub fn grads_of(&self, func: usize) -> &[f64] {
        &self.grads[func * self.batch * self.dim..(func + 1) * self.batch * self.dim]
    }

    pub fn values_of_mut(&mut self, func: usize) -> &mut [f64] {
        &mut self.values[func * self.batch..(func + 1) * self.batch]
    }

    pub fn grads_of_mut(&mut self, func: usize) -> &mut [f64] {
        &mut self.grads[func * self.batch * self.dim..(func + 1) * self.batch * self.dim]
    }

    /// Simultaneous mutable access to one function's value and gradient
    /// blocks (distinct fields, so the borrows are disjoint).
    pub fn values_and_grads_of_mut(&mut self, func: usize) -> (&mut [f64], &mut [f64]) {
        let b = self.batch;
        let d = self.dim;
        (
            &mut self.values[func * b..(func + 1) * b],
            &mut self.grads[func * b * d..(func + 1) * b * d],
        )
    }
}

/// Partial derivatives of a batch scalar with respect to every per-point
/// value and spatial-gradient entry, in the layout of [`BatchEval`].
#[derive(Debug, Clone)]
pub struct BatchCotangents {
    pub d_values: Vec<f64>,
    pub d_grads: Vec<f64>,
}

impl BatchCotangents {
    pub fn zeros(eval: &BatchEval) -> Self {
        Self { d_values: vec![0.0; eval.values.len()], d_grads: vec![0.0; eval.grads.len()] }
    }

    pub fn d_values_of(&self, func: usize, batch: usize) -> &[f64] {
        &self.d_values[func * batch..(func + 1) * batch]
    }

    pub fn d_grads_of(&self, func: usize, batch: usize, dim: usize) -> &[f64] {
        &self.d_grads[func * batch * dim..(func + 1) * batch * dim]
    }
}

/// A scalar composed of the batch estimators, with enough structure to drive
/// reverse-mode differentiation through the per-point values and gradients.
///
/// The weights are data, not parameters: cotangents are taken at fixed
/// weights.
pub trait BatchFunctional {
    fn eval(&self, eval: &BatchEval) -> Result<f64, EstimatorError>;

    /// Value together with `d(loss)/d(values)` and `d(loss)/d(grads)`.
    fn eval_with_cotangents(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, BatchCotangents), EstimatorError>;
}

/// `emean` of one function's values.
#[derive(Debug, Clone, Copy)]
pub struct MeanFunctional {
    pub func: usize,
}

impl BatchFunctional for MeanFunctional {
    fn eval(&self, eval: &BatchEval) -> Result<f64, EstimatorError> {
        emean(eval.values_of(self.func), &eval.weights)
    }

    fn eval_with_cotangents(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, BatchCotangents), EstimatorError> {
        let value = self.eval(eval)?;
        let mut cot = BatchCotangents::zeros(eval);
        let wsum: f64 = eval.weights.iter().sum();
        let dv = &mut cot.d_values[self.func * eval.batch..(self.func + 1) * eval.batch];
        for (d, &w) in dv.iter_mut().zip(&eval.weights) {
            *d = w / wsum;
        }
        Ok((value, cot))
    }
}

/// `evar` of one function's values.
#[derive(Debug, Clone, Copy)]
pub struct VarianceFunctional {
    pub func: usize,
}

impl BatchFunctional for VarianceFunctional {
    fn eval(&self, eval: &BatchEval) -> Result<f64, EstimatorError> {
        evar(eval.values_of(self.func), &eval.weights)
    }

    fn eval_with_cotangents(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, BatchCotangents), EstimatorError> {
        let values = eval.values_of(self.func);
        let var = evar(values, &eval.weights)?;
        let mean = emean(values, &eval.weights)?;
        let mut cot = BatchCotangents::zeros(eval);
        let wsum: f64 = eval.weights.iter().sum();
        let dv = &mut cot.d_values[self.func * eval.batch..(self.func + 1) * eval.batch];
        for i in 0..eval.batch {
            dv[i] = 2.0 * (eval.weights[i] / wsum) * (values[i] - mean);
        }
        Ok((var, cot))
    }
}

/// `erq` of one function: `(1/beta) E((a grad f) . grad f) / Var(f)`.
#[derive(Debug, Clone, Copy)]
pub struct RayleighFunctional {
    pub func: usize,
    pub beta: f64,
}

impl BatchFunctional for RayleighFunctional {
    fn eval(&self, eval: &BatchEval) -> Result<f64, EstimatorError> {
        erq(
            eval.values_of(self.func),
            eval.grads_of(self.func),
            eval.dim,
            eval.diffusion.at_states(),
            self.beta,
            &eval.weights,
        )
    }

    fn eval_with_cotangents(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, BatchCotangents), EstimatorError> {
        let values = eval.values_of(self.func);
        let grads = eval.grads_of(self.func);
        let var = evar(values, &eval.weights)?;
        if var <= VARIANCE_FLOOR {
            return Err(EstimatorError::DegenerateVariance { variance: var, floor: VARIANCE_FLOOR });
        }
        let energy = dirichlet_mean(
            grads,
            grads,
            eval.dim,
            eval.diffusion.at_states(),
            self.beta,
            &eval.weights,
        )?;
        let mean = emean(values, &eval.weights)?;
        let wsum: f64 = eval.weights.iter().sum();
        let mut cot = BatchCotangents::zeros(eval);
        let b = eval.batch;
        let d = eval.dim;
        let dvar = -energy / (var * var);
        for i in 0..b {
            let wn = eval.weights[i] / wsum;
            cot.d_values[self.func * b + i] = dvar * 2.0 * wn * (values[i] - mean);
            let g = &grads[i * d..(i + 1) * d];
            let dg = &mut cot.d_grads[(self.func * b + i) * d..(self.func * b + i + 1) * d];
            match eval.diffusion.at_states() {
                DiffusionAtStates::Identity => {
                    for c in 0..d {
                        dg[c] = (2.0 / (self.beta * var)) * wn * g[c];
                    }
                }
                DiffusionAtStates::Dense { dim, mats } => {
                    let a = &mats[i * dim * dim..(i + 1) * dim * dim];
                    // a is symmetric: d(g^T a g)/dg = 2 a g.
                    for r in 0..d {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += a[r * d + c] * g[c];
                        }
                        dg[r] = (2.0 / (self.beta * var)) * wn * acc;
                    }
                }
            }
        }
        Ok((energy / var, cot))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn emean_weighted_example() {
        assert_eq!(emean(&[1.0, 2.0], &[1.0, 3.0]).unwrap(), 1.75);
    }

    #[test]
    fn emean_uniform_weights_is_arithmetic_mean() {
        let v = [3.0, 5.0, 7.0];
        assert!((emean(&v, &[2.0; 3]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn emean_of_constant_is_constant() {
        let c = 4.25;
        assert_eq!(emean(&[c; 5], &[0.1, 2.0, 30.0, 0.4, 5.0]).unwrap(), c);
    }

    #[test]
    fn evar_of_constant_is_zero() {
        assert_eq!(evar(&[2.0; 4], &[1.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn evar_two_point_example() {
        // mean 1, E f^2 = 2 -> var 1.
        assert_eq!(evar(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn evar_rejects_single_point() {
        assert!(matches!(
            evar(&[1.0], &[1.0]),
            Err(EstimatorError::BatchTooSmall { need: 2, got: 1 })
        ));
    }

    #[test]
    fn independent_signs_have_small_covariance() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let g: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let c = ecov(&f, &g, &vec![1.0; n]).unwrap();
        assert!(c.abs() <= 3.0 / (n as f64).sqrt(), "cov {c}");
    }

    #[test]
    fn erq_linear_function_on_gaussian_samples() {
        // f(x) = x on standard normal samples: energy 1, variance 1.
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let grads = vec![1.0; n];
        let w = vec![1.0; n];
        let r = erq(&values, &grads, 1, DiffusionAtStates::Identity, 1.0, &w).unwrap();
        // Var of the sample variance is 2/n for Gaussians.
        assert!((r - 1.0).abs() <= 3.0 * (2.0 / n as f64).sqrt(), "erq {r}");
    }

    #[test]
    fn erq_rejects_constant_function() {
        let values = [1.0; 10];
        let grads = [0.0; 10];
        let err =
            erq(&values, &grads, 1, DiffusionAtStates::Identity, 1.0, &[1.0; 10]).unwrap_err();
        assert!(matches!(err, EstimatorError::DegenerateVariance { .. }));
    }

    #[test]
    fn f_matrix_single_function_is_energy() {
        let grads = [1.0, 0.5, -0.5, 1.0, 0.0, 2.0];
        let w = [1.0, 2.0, 0.5];
        let f = f_matrix(&[&grads], 2, DiffusionAtStates::Identity, 2.0, &w).unwrap();
        let e = dirichlet_mean(&grads, &grads, 2, DiffusionAtStates::Identity, 2.0, &w).unwrap();
        assert_eq!(f[0], e);
    }

    #[test]
    fn f_matrix_disjoint_coordinates_has_zero_off_diagonal() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut g1 = vec![0.0; n * 2];
        let mut g2 = vec![0.0; n * 2];
        for i in 0..n {
            g1[i * 2] = 1.0; // f1 = x1
            g2[i * 2 + 1] = 1.0; // f2 = x2
        }
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let f = f_matrix(&[&g1, &g2], 2, DiffusionAtStates::Identity, 1.0, &w).unwrap();
        // grad f1 . grad f2 = 0 pointwise, so exactly zero.
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 0.0);
    }

    #[test]
    fn f_matrix_diagonal_matches_energy_bitwise() {
        let n = 37;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = 3;
        let dim = 4;
        let grads: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let f = f_matrix(&grad_refs, dim, DiffusionAtStates::Identity, 1.7, &w).unwrap();
        for i in 0..k {
            let e =
                dirichlet_mean(&grads[i], &grads[i], dim, DiffusionAtStates::Identity, 1.7, &w)
                    .unwrap();
            assert_eq!(f[i * k + i].to_bits(), e.to_bits(), "diag {i}");
        }
    }

    #[test]
    fn dense_diffusion_scales_the_dirichlet_form() {
        // a = 2 I doubles (a grad f) . grad g pointwise.
        let n = 12;
        let dim = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let grads: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut mats = vec![0.0; n * dim * dim];
        for b in 0..n {
            for i in 0..dim {
                mats[b * dim * dim + i * dim + i] = 2.0;
            }
        }
        let plain =
            dirichlet_mean(&grads, &grads, dim, DiffusionAtStates::Identity, 1.0, &w).unwrap();
        let scaled = dirichlet_mean(
            &grads,
            &grads,
            dim,
            DiffusionAtStates::Dense { dim, mats: &mats },
            1.0,
            &w,
        )
        .unwrap();
        assert!((scaled - 2.0 * plain).abs() <= 1e-14 * plain.abs());
    }

    #[test]
    fn dense_diffusion_matches_identity_when_identity() {
        let n = 10;
        let dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grads: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = vec![1.0; n];
        let mut mats = vec![0.0; n * dim * dim];
        for b in 0..n {
            for i in 0..dim {
                mats[b * dim * dim + i * dim + i] = 1.0;
            }
        }
        let a = dirichlet_mean(&grads, &grads, dim, DiffusionAtStates::Identity, 1.0, &w).unwrap();
        let b = dirichlet_mean(
            &grads,
            &grads,
            dim,
            DiffusionAtStates::Dense { dim, mats: &mats },
            1.0,
            &w,
        )
        .unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs());
    }

    proptest! {
        #[test]
        fn erq_is_scale_and_shift_invariant(
            seed in 0u64..1000,
            scale in prop_oneof![Just(-3.0f64), Just(0.5), Just(7.0)],
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 64;
            let dim = 2;
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let base = erq(&values, &grads, dim, DiffusionAtStates::Identity, 1.0, &w).unwrap();

            let scaled_v: Vec<f64> = values.iter().map(|v| scale * v).collect();
            let scaled_g: Vec<f64> = grads.iter().map(|g| scale * g).collect();
            let scaled = erq(&scaled_v, &scaled_g, dim, DiffusionAtStates::Identity, 1.0, &w).unwrap();
            prop_assert!((scaled - base).abs() <= 1e-12 * base.abs().max(1.0));

            let shifted_v: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let shifted = erq(&shifted_v, &grads, dim, DiffusionAtStates::Identity, 1.0, &w).unwrap();
            prop_assert!((shifted - base).abs() <= 1e-12 * base.abs().max(1.0));
        }

        #[test]
        fn estimators_ignore_global_weight_rescaling(
            seed in 0u64..1000,
            factor in prop_oneof![Just(1e-3f64), Just(2.0), Just(1e4)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 32;
            let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let ws: Vec<f64> = w.iter().map(|x| factor * x).collect();

            let rel = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
            prop_assert!(rel(emean(&f, &w).unwrap(), emean(&f, &ws).unwrap()));
            prop_assert!(rel(ecov(&f, &g, &w).unwrap(), ecov(&f, &g, &ws).unwrap()));
            prop_assert!(rel(evar(&f, &w).unwrap(), evar(&f, &ws).unwrap()));
        }

        #[test]
        fn ecov_is_symmetric_bitwise(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 48;
            let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let fg = ecov(&f, &g, &w).unwrap();
            let gf = ecov(&g, &f, &w).unwrap();
            prop_assert_eq!(fg.to_bits(), gf.to_bits());
        }
    }
}
