//! Trajectory data: Euler–Maruyama sampling, importance-weight attachment,
//! minibatch draws, and the on-disk dataset format.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::potentials::{PotentialError, PotentialSpec};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("trajectory diverged (non-finite state) at step {step}")]
    Diverged { step: usize },
    #[error("invalid minibatch size {batch} for dataset of {n} states")]
    InvalidBatchSize { batch: usize, n: usize },
    #[error("dataset must contain at least one state")]
    EmptyDataset,
    #[error("state {index} has a non-positive or non-finite weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("states length {len} is not a multiple of dimension {dim}")]
    RaggedStates { len: usize, dim: usize },
    #[error("sampler requires identity diffusion")]
    NonIdentityDiffusion,
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

/// Provenance of a dataset, carried alongside the raw arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub potential_id: String,
    pub beta: f64,
    pub dt: f64,
    pub seed: Option<u64>,
    pub bias: Option<String>,
}

/// Sampled states with strictly positive importance weights.
///
/// States are stored row-major (`n x dim`); the dataset is immutable after
/// construction and safe to share across readers.
#[derive(Debug, Clone)]
pub struct WeightedDataset {
    dim: usize,
    states: Vec<f64>,
    weights: Vec<f64>,
    pub meta: DatasetMeta,
}

impl WeightedDataset {
    pub fn new(
        dim: usize,
        states: Vec<f64>,
        weights: Vec<f64>,
        meta: DatasetMeta,
    ) -> Result<Self, SamplingError> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(SamplingError::RaggedStates { len: states.len(), dim });
        }
        let n = states.len() / dim;
        if n == 0 {
            return Err(SamplingError::EmptyDataset);
        }
        if weights.len() != n {
            return Err(SamplingError::Format(format!(
                "{} weights for {} states",
                weights.len(),
                n
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(SamplingError::InvalidWeight { index: i, weight: w });
            }
        }
        Ok(Self { dim, states, weights, meta })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Copy the states and weights addressed by a minibatch into contiguous
    /// buffers.
    pub fn gather(&self, batch: &Minibatch, states: &mut Vec<f64>, weights: &mut Vec<f64>) {
        states.clear();
        weights.clear();
        for &ix in batch.indices() {
            states.extend_from_slice(self.state(ix));
            weights.push(self.weights[ix]);
        }
    }
}

/// Indices into a dataset; repetitions are allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    indices: Vec<usize>,
}

impl Minibatch {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Discretize the identity-diffusion overdamped dynamics and record `n`
/// states after discarding `burn_in` steps. All weights are set to one.
///
/// The update is `x <- x - grad V(x) dt + sqrt(2 dt / beta) eta` with
/// standard Gaussian `eta`; a fixed seed reproduces the dataset bit for bit.
pub fn euler_maruyama(
    potential: &PotentialSpec,
    x0: &[f64],
    dt: f64,
    n: usize,
    seed: u64,
    burn_in: usize,
) -> Result<WeightedDataset, SamplingError> {
    euler_maruyama_thinned(potential, x0, dt, n, seed, burn_in, 1)
}

/// As [`euler_maruyama`], keeping every `thin`-th step after burn-in so a
/// fixed number of recorded states can span a longer trajectory.
pub fn euler_maruyama_thinned(
    potential: &PotentialSpec,
    x0: &[f64],
    dt: f64,
    n: usize,
    seed: u64,
    burn_in: usize,
    thin: usize,
) -> Result<WeightedDataset, SamplingError> {
    if !(dt > 0.0) {
        return Err(SamplingError::Format(format!("dt must be positive, got {dt}")));
    }
    if n == 0 {
        return Err(SamplingError::EmptyDataset);
    }
    if thin == 0 {
        return Err(SamplingError::Format("thin must be >= 1".into()));
    }
    if !potential.has_identity_diffusion() {
        return Err(SamplingError::NonIdentityDiffusion);
    }
    let d = potential.dim();
    if x0.len() != d {
        return Err(PotentialError::DimensionMismatch { expected: d, got: x0.len() }.into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_scale = (2.0 * dt / potential.beta()).sqrt();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; d];
    let mut states = Vec::with_capacity(n * d);

    let total = burn_in + n * thin;
    for step in 1..=total {
        potential.gradient(&x, &mut grad)?;
        for i in 0..d {
            let eta: f64 = rng.sample(StandardNormal);
            x[i] += -grad[i] * dt + noise_scale * eta;
            if !x[i].is_finite() {
                return Err(SamplingError::Diverged { step });
            }
        }
        if step > burn_in && (step - burn_in) % thin == 0 {
            states.extend_from_slice(&x);
        }
    }

    WeightedDataset::new(
        d,
        states,
        vec![1.0; n],
        DatasetMeta {
            potential_id: String::new(),
            beta: potential.beta(),
            dt,
            seed: Some(seed),
            bias: None,
        },
    )
}

/// Outcome counters of a reweighting pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReweightReport {
    /// Weights that underflowed to zero and were clamped to the smallest
    /// positive normal.
    pub clamped: usize,
}

/// Replace the dataset weights by `exp(log_ratio(x))`, normalized to mean
/// one. `log_ratio` is the log density ratio of the target over the sampling
/// measure, up to an additive constant.
///
/// Log-ratios are shifted by their maximum before exponentiation; any weight
/// that still underflows to zero is clamped to the smallest positive normal
/// and counted in the report.
pub fn reweight(
    dataset: &WeightedDataset,
    log_ratio: impl Fn(&[f64]) -> f64,
) -> Result<(WeightedDataset, ReweightReport), SamplingError> {
    let n = dataset.len();
    let log_ratios: Vec<f64> = (0..n).map(|i| log_ratio(dataset.state(i))).collect();
    for (i, &lr) in log_ratios.iter().enumerate() {
        if !lr.is_finite() {
            return Err(SamplingError::InvalidWeight { index: i, weight: lr });
        }
    }
    let max = log_ratios.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));

    let mut report = ReweightReport::default();
    let mut weights: Vec<f64> = log_ratios
        .iter()
        .map(|&lr| {
            let w = (lr - max).exp();
            if w == 0.0 {
                report.clamped += 1;
                f64::MIN_POSITIVE
            } else {
                w
            }
        })
        .collect();

    let mean = weights.iter().sum::<f64>() / n as f64;
    for w in &mut weights {
        *w /= mean;
    }

    let mut meta = dataset.meta.clone();
    meta.bias = Some(match &dataset.meta.bias {
        Some(prev) => format!("{prev}; reweighted"),
        None => "reweighted".to_string(),
    });
    let out = WeightedDataset::new(dataset.dim, dataset.states.clone(), weights, meta)?;
    Ok((out, report))
}

/// Draw `batch` indices uniformly with replacement from `0..n`.
pub fn draw_minibatch<R: Rng + ?Sized>(
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Minibatch, SamplingError> {
    if batch == 0 || batch > n {
        return Err(SamplingError::InvalidBatchSize { batch, n });
    }
    let indices = (0..batch).map(|_| rng.random_range(0..n)).collect();
    Ok(Minibatch { indices })
}

const DATASET_MAGIC: &str = "EIGDATA v1";

/// Write the binary dataset format: a text header
/// `EIGDATA v1; d=<d>; n=<n>; beta=<beta>; dt=<dt>` followed by raw
/// little-endian f64s, states row-major then weights.
pub fn write_dataset(w: impl Write, dataset: &WeightedDataset) -> Result<(), SamplingError> {
    let mut w = BufWriter::new(w);
    writeln!(
        w,
        "{DATASET_MAGIC}; d={}; n={}; beta={}; dt={}",
        dataset.dim,
        dataset.len(),
        dataset.meta.beta,
        dataset.meta.dt
    )?;
    for &v in &dataset.states {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in &dataset.weights {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read the binary dataset format written by [`write_dataset`].
pub fn read_dataset(r: impl Read) -> Result<WeightedDataset, SamplingError> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end();

    let mut parts = header.split("; ");
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(SamplingError::Format(format!("bad magic in header '{header}'")));
    }
    let mut dim = None;
    let mut n = None;
    let mut beta = None;
    let mut dt = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| SamplingError::Format(format!("bad header field '{part}'")))?;
        match key {
            "d" => dim = Some(value.parse::<usize>().map_err(fmt_err)?),
            "n" => n = Some(value.parse::<usize>().map_err(fmt_err)?),
            "beta" => beta = Some(value.parse::<f64>().map_err(fmt_err)?),
            "dt" => dt = Some(value.parse::<f64>().map_err(fmt_err)?),
            other => return Err(SamplingError::Format(format!("unknown header key '{other}'"))),
        }
    }
    let (dim, n, beta, dt) = match (dim, n, beta, dt) {
        (Some(d), Some(n), Some(b), Some(t)) => (d, n, b, t),
        _ => return Err(SamplingError::Format("missing header field".into())),
    };

    let mut states = vec![0.0; n * dim];
    read_f64s(&mut r, &mut states)?;
    let mut weights = vec![0.0; n];
    read_f64s(&mut r, &mut weights)?;

    WeightedDataset::new(
        dim,
        states,
        weights,
        DatasetMeta { potential_id: String::new(), beta, dt, seed: None, bias: None },
    )
}

fn fmt_err(e: impl std::fmt::Display) -> SamplingError {
    SamplingError::Format(e.to_string())
}

fn read_f64s(r: &mut impl Read, out: &mut [f64]) -> Result<(), SamplingError> {
    let mut buf = [0u8; 8];
    for v in out {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

/// Plain-text export for inspection: one state per row, weight last.
pub fn write_dataset_csv(w: impl Write, dataset: &WeightedDataset) -> Result<(), SamplingError> {
    let mut w = BufWriter::new(w);
    for i in 0..dataset.len() {
        for x in dataset.state(i) {
            write!(w, "{x},")?;
        }
        writeln!(w, "{}", dataset.weight(i))?;
    }
    w.flush()?;
    Ok(())
}
