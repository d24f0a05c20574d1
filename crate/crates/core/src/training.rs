//! The penalized variational loss and the minibatch training loop: `K`
//! networks trained jointly with Adam, per-step eigenpair estimates, optional
//! sorting by current eigenvalue, and final-phase aggregation.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimators::{
    dirichlet_mean, ecov, emean, erq, BatchCotangents, BatchEval, BatchFunctional, DiffusionData,
    EstimatorError, VARIANCE_FLOOR,
};
use crate::network::{
    accumulate_functional_gradient, forward_batch, init_params, ForwardTrace, InitScheme,
    NetworkArchitecture, NetworkError, NetworkParams, Tanh,
};
use crate::potentials::{PotentialError, PotentialSpec};
use crate::sampling::{draw_minibatch, SamplingError, WeightedDataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    ConfigInvalid(String),
    #[error("loss became non-finite at step {step} (loss {loss}, penalty {penalty})")]
    NonFiniteLoss { step: usize, loss: f64, penalty: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
}

/// Adam moment parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Hyperparameters of the training loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Number of eigenpairs.
    pub k: usize,
    /// Strictly decreasing positive weights, one per eigenpair.
    pub omega: Vec<f64>,
    /// Penalty constant on the orthonormality residuals.
    pub alpha: f64,
    /// Total number of training steps `J`.
    pub steps: usize,
    /// Minibatch size for the main phase.
    pub batch_size: usize,
    /// Minibatch size for the final phase.
    pub eval_batch_size: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    pub seed: u64,
    /// Keep networks ordered by their current eigenvalue estimates.
    pub sort_networks: bool,
    pub adam: AdamParams,
    /// Number of trailing steps run at `eval_batch_size` and averaged into
    /// the final estimates.
    pub final_phase_steps: usize,
}

impl TrainConfig {
    pub fn new(k: usize, omega: Vec<f64>, alpha: f64) -> Self {
        Self {
            k,
            omega,
            alpha,
            steps: 1000,
            batch_size: 1000,
            eval_batch_size: 2000,
            learning_rate: 5e-3,
            seed: 0,
            sort_networks: true,
            adam: AdamParams::default(),
            final_phase_steps: 100,
        }
    }

    fn validate(&self, n: usize) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::ConfigInvalid(msg));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.omega.len() != self.k {
            return fail(format!("{} omega weights for k = {}", self.omega.len(), self.k));
        }
        for w in self.omega.windows(2) {
            if !(w[0] > w[1]) {
                return fail(format!("omega must be strictly decreasing, got {:?}", self.omega));
            }
        }
        if !(self.omega[self.k - 1] > 0.0) {
            return fail(format!("omega must be positive, got {:?}", self.omega));
        }
        if !(self.alpha > 0.0) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        for (name, b) in [("batch_size", self.batch_size), ("eval_batch_size", self.eval_batch_size)]
        {
            if b < 2 || b > n {
                return fail(format!("{name} = {b} outside [2, {n}]"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// The training loss: `sum_i omega_i ERQ(f_i) + alpha sum_{i<=j}
/// (ECov(f_i, f_j) - delta_ij)^2`.
///
/// For `K = 1` this is the single-pair loss with the variance penalty
/// `(EVar(f) - 1)^2`.
#[derive(Debug, Clone)]
pub struct VariationalLoss {
    pub omega: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-step scalars reported alongside the loss.
#[derive(Debug, Clone)]
pub struct LossDiagnostics {
    /// Rayleigh quotients of the `K` networks on the batch.
    pub erq: Vec<f64>,
    /// Unscaled orthonormality residual `sum (ECov - delta)^2`.
    pub penalty: f64,
}

/// Covariance matrix `ECov(f_i, f_j)` of the batch values, row-major `K x K`.
fn covariance_matrix(eval: &BatchEval) -> Result<Vec<f64>, EstimatorError> {
    let k = eval.k;
    let mut cov = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let c = ecov(eval.values_of(i), eval.values_of(j), &eval.weights)?;
            cov[i * k + j] = c;
            cov[j * k + i] = c;
        }
    }
    Ok(cov)
}

/// Unscaled constraint residual `sum_{i<=j} (ECov(f_i, f_j) - delta_ij)^2`.
pub fn penalty_from_eval(eval: &BatchEval) -> Result<f64, EstimatorError> {
    let cov = covariance_matrix(eval)?;
    let k = eval.k;
    let mut c = 0.0;
    for i in 0..k {
        for j in i..k {
            let target = if i == j { 1.0 } else { 0.0 };
            let r = cov[i * k + j] - target;
            c += r * r;
        }
    }
    Ok(c)
}

impl VariationalLoss {
    fn eval_parts(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), EstimatorError> {
        let k = eval.k;
        let cov = covariance_matrix(eval)?;
        let mut means = vec![0.0; k];
        let mut energies = vec![0.0; k];
        for i in 0..k {
            means[i] = emean(eval.values_of(i), &eval.weights)?;
            let g = eval.grads_of(i);
            energies[i] =
                dirichlet_mean(g, g, eval.dim, eval.diffusion.at_states(), self.beta, &eval.weights)?;
        }
        let mut loss = 0.0;
        for i in 0..k {
            let var = cov[i * k + i];
            if var <= VARIANCE_FLOOR {
                return Err(EstimatorError::DegenerateVariance {
                    variance: var,
                    floor: VARIANCE_FLOOR,
                });
            }
            loss += self.omega[i] * energies[i] / var;
        }
        let mut penalty = 0.0;
        for i in 0..k {
            for j in i..k {
                let target = if i == j { 1.0 } else { 0.0 };
                let r = cov[i * k + j] - target;
                penalty += r * r;
            }
        }
        loss += self.alpha * penalty;
        Ok((loss, cov, means, energies, vec![penalty]))
    }

    /// Loss value with the per-network Rayleigh quotients and the penalty.
    pub fn eval_diagnostics(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, LossDiagnostics), EstimatorError> {
        let (loss, cov, _means, energies, penalty) = self.eval_parts(eval)?;
        let k = eval.k;
        let erqs = (0..k).map(|i| energies[i] / cov[i * k + i]).collect();
        Ok((loss, LossDiagnostics { erq: erqs, penalty: penalty[0] }))
    }
}

impl BatchFunctional for VariationalLoss {
    fn eval(&self, eval: &BatchEval) -> Result<f64, EstimatorError> {
        Ok(self.eval_parts(eval)?.0)
    }

    fn eval_with_cotangents(
        &self,
        eval: &BatchEval,
    ) -> Result<(f64, BatchCotangents), EstimatorError> {
        let (loss, cov, means, energies, _) = self.eval_parts(eval)?;
        let k = eval.k;
        let b = eval.batch;
        let d = eval.dim;
        let wsum: f64 = eval.weights.iter().sum();
        let mut cot = BatchCotangents::zeros(eval);

        for i in 0..k {
            let var = cov[i * k + i];
            // d(loss)/d(var_i): quotient rule on omega_i E_i / var_i plus the
            // diagonal penalty term 2 alpha (var_i - 1).
            let dvar = -self.omega[i] * energies[i] / (var * var)
                + 2.0 * self.alpha * (var - 1.0);
            let values_i = eval.values_of(i);
            for p in 0..b {
                let wn = eval.weights[p] / wsum;
                let mut dv = dvar * 2.0 * wn * (values_i[p] - means[i]);
                // Off-diagonal penalty terms reach f_i through every ECov(f_i, f_j).
                for j in 0..k {
                    if j == i {
                        continue;
                    }
                    let values_j = eval.values_of(j);
                    dv += 2.0 * self.alpha * cov[i * k + j] * wn * (values_j[p] - means[j]);
                }
                cot.d_values[i * b + p] = dv;
            }

            let grads_i = eval.grads_of(i);
            let denergy = self.omega[i] / var;
            for p in 0..b {
                let wn = eval.weights[p] / wsum;
                let g = &grads_i[p * d..(p + 1) * d];
                let dg = &mut cot.d_grads[(i * b + p) * d..(i * b + p + 1) * d];
                match &eval.diffusion {
                    DiffusionData::Identity => {
                        for c in 0..d {
                            dg[c] = denergy * (2.0 / self.beta) * wn * g[c];
                        }
                    }
                    DiffusionData::Dense { dim, mats } => {
                        let a = &mats[p * dim * dim..(p + 1) * dim * dim];
                        for r in 0..d {
                            let mut acc = 0.0;
                            for c in 0..d {
                                acc += a[r * d + c] * g[c];
                            }
                            dg[r] = denergy * (2.0 / self.beta) * wn * acc;
                        }
                    }
                }
            }
        }
        Ok((loss, cot))
    }
}

/// Evaluate the networks over a batch and collect the diffusion field needed
/// by the loss.
fn build_eval(
    networks: &[NetworkParams],
    states: &[f64],
    weights: &[f64],
    potential: &PotentialSpec,
) -> Result<BatchEval, TrainError> {
    let dim = potential.dim();
    let batch = weights.len();
    let mut eval = BatchEval::zeros(networks.len(), batch, dim);
    eval.weights.copy_from_slice(weights);
    eval.diffusion = diffusion_data(states, batch, potential)?;
    for (i, net) in networks.iter().enumerate() {
        let (values, grads) = eval.values_and_grads_of_mut(i);
        forward_batch(net, &Tanh, states, dim, values, grads, None)?;
    }
    Ok(eval)
}

fn diffusion_data(
    states: &[f64],
    batch: usize,
    potential: &PotentialSpec,
) -> Result<DiffusionData, TrainError> {
    if potential.has_identity_diffusion() {
        return Ok(DiffusionData::Identity);
    }
    let d = potential.dim();
    let mut mats = vec![0.0; batch * d * d];
    for p in 0..batch {
        potential.diffusion(&states[p * d..(p + 1) * d], &mut mats[p * d * d..(p + 1) * d * d])?;
    }
    Ok(DiffusionData::Dense { dim: d, mats })
}

/// Loss and diagnostics of `K` networks on one batch.
pub fn loss(
    networks: &[NetworkParams],
    states: &[f64],
    weights: &[f64],
    potential: &PotentialSpec,
    omega: &[f64],
    alpha: f64,
) -> Result<(f64, LossDiagnostics), TrainError> {
    let eval = build_eval(networks, states, weights, potential)?;
    let functional =
        VariationalLoss { omega: omega.to_vec(), alpha, beta: potential.beta() };
    Ok(functional.eval_diagnostics(&eval)?)
}

/// Unscaled orthonormality residual of `K` networks on one batch.
pub fn penalty_c(
    networks: &[NetworkParams],
    states: &[f64],
    weights: &[f64],
    potential: &PotentialSpec,
) -> Result<f64, TrainError> {
    let eval = build_eval(networks, states, weights, potential)?;
    Ok(penalty_from_eval(&eval)?)
}

/// One bias-corrected Adam update; moments move alongside their parameters.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    learning_rate: f64,
    t: usize,
    cfg: &AdamParams,
) {
    debug_assert!(t >= 1);
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Eigenvalue and mean shift of one network on an evaluation batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenPairEstimate {
    pub lambda: f64,
    pub mean_shift: f64,
}

/// Estimate `(lambda_i, m_i)` for every network: `lambda_i` is the Rayleigh
/// quotient on the batch, `m_i` the weighted mean. The centered eigenfunction
/// is `x -> f_i(x) - m_i`.
pub fn estimate_eigenpairs(
    networks: &[NetworkParams],
    states: &[f64],
    weights: &[f64],
    potential: &PotentialSpec,
) -> Result<Vec<EigenPairEstimate>, TrainError> {
    let eval = build_eval(networks, states, weights, potential)?;
    estimate_from_eval(&eval, potential.beta())
}

fn estimate_from_eval(eval: &BatchEval, beta: f64) -> Result<Vec<EigenPairEstimate>, TrainError> {
    let mut out = Vec::with_capacity(eval.k);
    for i in 0..eval.k {
        let lambda = erq(
            eval.values_of(i),
            eval.grads_of(i),
            eval.dim,
            eval.diffusion.at_states(),
            beta,
            &eval.weights,
        )?;
        let mean_shift = emean(eval.values_of(i), &eval.weights)?;
        out.push(EigenPairEstimate { lambda, mean_shift });
    }
    Ok(out)
}

/// Per-step quantities handed to observers.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<'a> {
    pub loss: f64,
    pub penalty: f64,
    pub lambdas: &'a [f64],
}

/// Callback invoked after every completed training step.
pub trait TrainObserver {
    fn on_step(&mut self, step: usize, record: &StepRecord<'_>, networks: &[NetworkParams]);
}

struct NullObserver;

impl TrainObserver for NullObserver {
    fn on_step(&mut self, _: usize, _: &StepRecord<'_>, _: &[NetworkParams]) {}
}

/// CSV training log `step,loss,penalty_C,lambda_1..lambda_K`, flushed every
/// 10 steps.
pub struct TrainLogWriter<W: Write> {
    out: W,
    wrote_header: bool,
    since_flush: usize,
}

impl<W: Write> TrainLogWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, wrote_header: false, since_flush: 0 }
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

impl<W: Write> TrainObserver for TrainLogWriter<W> {
    fn on_step(&mut self, step: usize, record: &StepRecord<'_>, _networks: &[NetworkParams]) {
        if !self.wrote_header {
            let mut header = String::from("step,loss,penalty_C");
            for i in 1..=record.lambdas.len() {
                header.push_str(&format!(",lambda_{i}"));
            }
            let _ = writeln!(self.out, "{header}");
            self.wrote_header = true;
        }
        let mut row = format!("{step},{},{}", record.loss, record.penalty);
        for l in record.lambdas {
            row.push_str(&format!(",{l}"));
        }
        let _ = writeln!(self.out, "{row}");
        self.since_flush += 1;
        if self.since_flush >= 10 {
            let _ = self.out.flush();
            self.since_flush = 0;
        }
    }
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct EigenEstimate {
    /// `lambda_traces[i][j]` is the estimate of eigenvalue `i` at step `j`
    /// (after sorting when enabled).
    pub lambda_traces: Vec<Vec<f64>>,
    pub loss_trace: Vec<f64>,
    pub penalty_trace: Vec<f64>,
    /// Mean of each eigenvalue over the final phase.
    pub lambda_mean: Vec<f64>,
    /// Sample standard deviation of each eigenvalue over the final phase.
    pub lambda_std: Vec<f64>,
    /// Weighted mean of each network on the final evaluation batch; the
    /// centered eigenfunction is the realization minus this shift.
    pub mean_shifts: Vec<f64>,
    pub networks: Vec<NetworkParams>,
}

impl EigenEstimate {
    /// Centered eigenfunction `i` evaluated at `x`.
    pub fn eigenfunction_value(&self, i: usize, x: &[f64]) -> Result<f64, NetworkError> {
        Ok(self.networks[i].realize(x)? - self.mean_shifts[i])
    }
}

/// Run the training loop and return traces and final statistics.
pub fn train(
    config: &TrainConfig,
    arch: &NetworkArchitecture,
    dataset: &WeightedDataset,
    potential: &PotentialSpec,
) -> Result<EigenEstimate, TrainError> {
    train_observed(config, arch, dataset, potential, &mut NullObserver)
}

/// [`train`] with a per-step observer for logging and checkpointing.
///
/// Each step draws a minibatch, records the eigenpair estimates, optionally
/// sorts the networks so the estimates are non-decreasing (Adam moments move
/// with their parameters), evaluates the loss, back-propagates, and applies
/// one Adam update. The last `final_phase_steps` steps run at
/// `eval_batch_size`; their estimates form the reported means and sample
/// standard deviations.
pub fn train_observed(
    config: &TrainConfig,
    arch: &NetworkArchitecture,
    dataset: &WeightedDataset,
    potential: &PotentialSpec,
    observer: &mut dyn TrainObserver,
) -> Result<EigenEstimate, TrainError> {
    config.validate(dataset.len())?;
    let dim = potential.dim();
    if arch.input_dim() != dim {
        return Err(TrainError::ConfigInvalid(format!(
            "architecture input {} != potential dimension {dim}",
            arch.input_dim()
        )));
    }
    if dataset.dim() != dim {
        return Err(TrainError::ConfigInvalid(format!(
            "dataset dimension {} != potential dimension {dim}",
            dataset.dim()
        )));
    }

    let mut seeder = ChaCha8Rng::seed_from_u64(config.seed);
    let mut networks: Vec<NetworkParams> = (0..config.k)
        .map(|_| init_params(arch, seeder.random(), InitScheme::UniformFanIn))
        .collect();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seeder.random());

    let pcount = arch.param_count();
    let mut adam_m: Vec<Vec<f64>> = vec![vec![0.0; pcount]; config.k];
    let mut adam_v: Vec<Vec<f64>> = vec![vec![0.0; pcount]; config.k];

    let functional = VariationalLoss {
        omega: config.omega.clone(),
        alpha: config.alpha,
        beta: potential.beta(),
    };

    let mut lambda_traces: Vec<Vec<f64>> = vec![Vec::with_capacity(config.steps); config.k];
    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut penalty_trace = Vec::with_capacity(config.steps);

    let mut bstates: Vec<f64> = Vec::new();
    let mut bweights: Vec<f64> = Vec::new();
    let mut traces: Vec<ForwardTrace> = Vec::new();
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; pcount]; config.k];

    for step in 0..config.steps {
        let bsize = if config.steps - step <= config.final_phase_steps {
            config.eval_batch_size
        } else {
            config.batch_size
        };
        let mb = draw_minibatch(dataset.len(), bsize, &mut batch_rng)?;
        dataset.gather(&mb, &mut bstates, &mut bweights);

        // Forward pass with traces kept for the gradient replay.
        let mut eval = BatchEval::zeros(config.k, bsize, dim);
        eval.weights.copy_from_slice(&bweights);
        eval.diffusion = diffusion_data(&bstates, bsize, potential)?;
        traces.clear();
        for i in 0..config.k {
            let mut trace = ForwardTrace::new(arch, bsize);
            let (values, grid) = eval.values_and_grads_of_mut(i);
            forward_batch(&networks[i], &Tanh, &bstates, dim, values, grid, Some(&mut trace))?;
            traces.push(trace);
        }

        let mut estimates = estimate_from_eval(&eval, potential.beta())?;

        if config.sort_networks {
            let mut order: Vec<usize> = (0..config.k).collect();
            order.sort_by(|&a, &b| estimates[a].lambda.total_cmp(&estimates[b].lambda));
            if order.iter().enumerate().any(|(pos, &src)| pos != src) {
                apply_permutation(&order, &mut networks);
                apply_permutation(&order, &mut adam_m);
                apply_permutation(&order, &mut adam_v);
                apply_permutation(&order, &mut traces);
                apply_permutation(&order, &mut estimates);
                permute_eval(&order, &mut eval);
            }
        }

        let (loss_val, cot) = functional.eval_with_cotangents(&eval)?;
        let penalty = penalty_from_eval(&eval)?;
        if !loss_val.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss: loss_val, penalty });
        }

        for i in 0..config.k {
            grads[i].fill(0.0);
            accumulate_functional_gradient(
                &networks[i],
                &Tanh,
                &bstates,
                dim,
                &traces[i],
                cot.d_values_of(i, bsize),
                cot.d_grads_of(i, bsize, dim),
                &mut grads[i],
            );
        }
        for i in 0..config.k {
            adam_step(
                networks[i].data_mut(),
                &grads[i],
                &mut adam_m[i],
                &mut adam_v[i],
                config.learning_rate,
                step + 1,
                &config.adam,
            );
        }

        let lambdas: Vec<f64> = estimates.iter().map(|e| e.lambda).collect();
        for i in 0..config.k {
            lambda_traces[i].push(lambdas[i]);
        }
        loss_trace.push(loss_val);
        penalty_trace.push(penalty);
        observer.on_step(step, &StepRecord { loss: loss_val, penalty, lambdas: &lambdas }, &networks);
    }

    // Final statistics: means over the trailing phase, mean shifts on a fresh
    // evaluation batch.
    let tail = config.final_phase_steps.min(config.steps).max(1);
    let (lambda_mean, lambda_std) = if config.steps == 0 {
        let mb = draw_minibatch(dataset.len(), config.eval_batch_size, &mut batch_rng)?;
        dataset.gather(&mb, &mut bstates, &mut bweights);
        let est = estimate_eigenpairs(&networks, &bstates, &bweights, potential)?;
        (est.iter().map(|e| e.lambda).collect::<Vec<_>>(), vec![0.0; config.k])
    } else {
        let mut means = Vec::with_capacity(config.k);
        let mut stds = Vec::with_capacity(config.k);
        for trace in &lambda_traces {
            let window = &trace[trace.len() - tail.min(trace.len())..];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let std = if window.len() > 1 {
                (window.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
                    / (window.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            means.push(mean);
            stds.push(std);
        }
        (means, stds)
    };

    let mb = draw_minibatch(dataset.len(), config.eval_batch_size, &mut batch_rng)?;
    dataset.gather(&mb, &mut bstates, &mut bweights);
    let final_est = estimate_eigenpairs(&networks, &bstates, &bweights, potential)?;
    let mean_shifts = final_est.iter().map(|e| e.mean_shift).collect();

    Ok(EigenEstimate {
        lambda_traces,
        loss_trace,
        penalty_trace,
        lambda_mean,
        lambda_std,
        mean_shifts,
        networks,
    })
}

fn apply_permutation<T>(order: &[usize], items: &mut Vec<T>) {
    let mut taken: Vec<Option<T>> = items.drain(..).map(Some).collect();
    for &src in order {
        items.push(taken[src].take().expect("permutation indices must be unique"));
    }
}

fn permute_eval(order: &[usize], eval: &mut BatchEval) {
    let b = eval.batch;
    let d = eval.dim;
    let mut values = vec![0.0; eval.values.len()];
    let mut grads = vec![0.0; eval.grads.len()];
    for (dst, &src) in order.iter().enumerate() {
        values[dst * b..(dst + 1) * b].copy_from_slice(&eval.values[src * b..(src + 1) * b]);
        grads[dst * b * d..(dst + 1) * b * d]
            .copy_from_slice(&eval.grads[src * b * d..(src + 1) * b * d]);
    }
    eval.values = values;
    eval.grads = grads;
}
