//! Experiment configuration: a TOML document with one section per pipeline
//! stage. Unknown keys are rejected, and every run writes a fully resolved
//! copy (defaults expanded) next to its outputs so it can be replayed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use eigenpde::network::NetworkArchitecture;
use eigenpde::potentials::PotentialSpec;
use eigenpde::training::{AdamParams, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reweighting: Option<ReweightingSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fvm: Option<FvmSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec> {
        Ok(PotentialSpec::builtin(
            &self.potential.id,
            self.potential.dim,
            self.potential.beta,
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    /// Built-in potential id: `v2`, `vd`, `quadratic2d`, `zero2d`.
    pub id: String,
    /// Required for `vd`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "one")]
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub dt: f64,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub burn_in: usize,
    /// Keep every `thin`-th state after burn-in.
    #[serde(default = "one_usize")]
    pub thin: usize,
    pub x0: Vec<f64>,
    /// Also write the plain-text CSV export of the dataset.
    #[serde(default)]
    pub csv_export: bool,
    #[serde(default = "default_histogram")]
    pub histogram: HistogramSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Histogram window `[[x_lo, x_hi], [y_lo, y_hi]]` for the planar
    /// marginal; the data range is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<[[f64; 2]; 2]>,
}

fn default_histogram() -> HistogramSection {
    HistogramSection { bins: default_bins(), range: None }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReweightingSection {
    /// Only `temperature` is built in: the chain runs at `sampling_beta` and
    /// the weights restore the target temperature of the potential section.
    pub kind: String,
    pub sampling_beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Dataset file; defaults to `<output>/dataset.eigdata`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub k: usize,
    pub omega: Vec<f64>,
    pub alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub sort_networks: bool,
    #[serde(default = "default_final_phase")]
    pub final_phase_steps: usize,
    /// Hidden layer widths; the full architecture is `(d, hidden..., 1)`.
    pub hidden: Vec<usize>,
    /// Checkpoint every this many steps (0 = only at termination).
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default = "default_adam")]
    pub adam: AdamSection,
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            omega: self.omega.clone(),
            alpha: self.alpha,
            steps: self.steps,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            sort_networks: self.sort_networks,
            adam: AdamParams {
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                epsilon: self.adam.epsilon,
            },
            final_phase_steps: self.final_phase_steps,
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Result<NetworkArchitecture> {
        if self.hidden.is_empty() {
            bail!("training.hidden must name at least one hidden layer");
        }
        Ok(NetworkArchitecture::scalar(input_dim, &self.hidden)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSection {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_adam() -> AdamSection {
    AdamSection { beta1: default_beta1(), beta2: default_beta2(), epsilon: default_epsilon() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvmSection {
    /// Truncated domain `[[x_lo, x_hi], [y_lo, y_hi]]`.
    pub domain: [[f64; 2]; 2],
    pub nx: usize,
    pub ny: usize,
    /// Number of non-trivial eigenpairs to report.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// One checkpoint per eigenfunction, in order.
    pub checkpoints: Vec<PathBuf>,
    /// Dataset for the ERQ / orthonormality report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Planar grid for the eigenfunction-on-grid export.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<EvalGridSection>,
    /// Reference eigenfunction tables (CSV) for the sign-aligned
    /// L2(mu)-difference report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGridSection {
    pub domain: [[f64; 2]; 2],
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_bins() -> usize {
    100
}

fn default_final_phase() -> usize {
    100
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_k() -> usize {
    3
}

fn default_tol() -> f64 {
    1e-8
}
