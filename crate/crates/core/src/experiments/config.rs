use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::VeSchedule;
use crate::error::{CoreError, Result};
use crate::model::{HiddenActivation, TimeFeature, MAX_EXACT_DIM};
use crate::objectives::{LaplacianMode, ProbeDist, TimeGrid};
use crate::sampler::LangevinConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// A 2-D density name, `gaussian` (standard normal in `dim` dimensions)
    /// or `idx` (image file at `path`).
    pub name: String,
    /// Size of the fixed training set.
    pub n_train: usize,
    pub dim: usize,
    pub path: Option<PathBuf>,
    /// Keep only the first `limit` images.
    pub limit: Option<usize>,
    /// Gaussian noise added to images after scaling to `[−1, 1]`.
    pub preprocess_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "moons".into(),
            n_train: 10_000,
            dim: 2,
            path: None,
            limit: None,
            preprocess_sigma: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeFeatureKind {
    Scalar,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    pub time_feature: TimeFeatureKind,
    pub frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![300, 300, 300],
            activation: HiddenActivation::Gelu,
            time_feature: TimeFeatureKind::Scalar,
            frequencies: 4,
        }
    }
}

impl ModelConfig {
    pub fn time_feature(&self) -> TimeFeature {
        match self.time_feature {
            TimeFeatureKind::Scalar => TimeFeature::Scalar,
            TimeFeatureKind::Sinusoidal => TimeFeature::Sinusoidal {
                frequencies: self.frequencies,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DcdVe,
    Cd,
    Pcd,
    DcdVeTime,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::DcdVe => "dcd_ve",
            LossKind::Cd => "cd",
            LossKind::Pcd => "pcd",
            LossKind::DcdVeTime => "dcd_ve_time",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplacianKind {
    Exact,
    Hutchinson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub t: f64,
    pub g0_sq: f64,
    pub laplacian: LaplacianKind,
    pub n_probes: usize,
    pub probe_dist: ProbeDist,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::DcdVe,
            t: 0.0005,
            g0_sq: 1.0,
            laplacian: LaplacianKind::Exact,
            n_probes: 1,
            probe_dist: ProbeDist::Rademacher,
        }
    }
}

impl LossConfig {
    pub fn laplacian_mode(&self) -> LaplacianMode {
        match self.laplacian {
            LaplacianKind::Exact => LaplacianMode::Exact,
            LaplacianKind::Hutchinson => LaplacianMode::Hutchinson {
                n_probes: self.n_probes,
                dist: self.probe_dist,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 1000,
            iterations: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub step_size: f64,
    /// Defaults to 10 for CD and 20 for PCD.
    pub n_steps: Option<usize>,
    /// Defaults to ten batches.
    pub buffer_capacity: Option<usize>,
    pub reinit_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.001,
            n_steps: None,
            buffer_capacity: None,
            reinit_fraction: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionKind {
    Const,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub kind: DiffusionKind,
    /// Defaults to `√loss.g0_sq`.
    pub g0: Option<f64>,
    pub t_max: f64,
    /// Smallest level of the time grid.
    pub t_min: f64,
    pub levels: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            kind: DiffusionKind::Const,
            g0: None,
            t_max: 80.0,
            t_min: 0.01,
            levels: 18,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Log the score-matching loss every this many iterations (0: final only).
    pub every: usize,
    /// Rows of the training set used for evaluation (default: all).
    pub n_eval: Option<usize>,
    /// Defaults to exact when the dimension allows it.
    pub laplacian: Option<LaplacianKind>,
    pub n_probes: usize,
    pub chunk: usize,
    pub denoise_sigmas: Vec<f64>,
    pub denoise_steps: usize,
    pub denoise_step_size: f64,
    pub n_denoise: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 0,
            n_eval: None,
            laplacian: None,
            n_probes: 16,
            chunk: 1000,
            denoise_sigmas: vec![0.3, 0.6, 0.9],
            denoise_steps: 50,
            denoise_step_size: 0.05,
            n_denoise: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub name: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.optimizer.batch_size == 0 {
            return bad("optimizer.batch_size must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr must be positive".into());
        }
        for b in [self.optimizer.beta1, self.optimizer.beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam beta {b} outside [0, 1)"));
            }
        }
        if self.dataset.name != "idx" && self.dataset.n_train == 0 {
            return bad("dataset.n_train must be positive".into());
        }
        if self.dataset.name == "idx" && self.dataset.path.is_none() {
            return bad("dataset.path is required for idx data".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be positive".into());
        }
        if self.loss.kind == LossKind::DcdVe && !(self.loss.t > 0.0) {
            return bad("loss.t must be positive".into());
        }
        if self.loss.laplacian == LaplacianKind::Hutchinson && self.loss.n_probes == 0 {
            return bad("loss.n_probes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sampler.reinit_fraction) {
            return bad("sampler.reinit_fraction outside [0, 1]".into());
        }
        if let Some(g0) = self.diffusion.g0 {
            if (g0 * g0 - self.loss.g0_sq).abs() > 1e-12 * self.loss.g0_sq.max(1.0)
                && self.loss.g0_sq != LossConfig::default().g0_sq
            {
                return bad(format!(
                    "diffusion.g0 = {g0} conflicts with loss.g0_sq = {}",
                    self.loss.g0_sq
                ));
            }
        }
        self.langevin()?;
        self.schedule()?;
        if self.loss.kind == LossKind::DcdVeTime {
            self.time_grid()?;
        }
        Ok(())
    }

    pub fn data_dim(&self) -> Option<usize> {
        match self.dataset.name.as_str() {
            "gaussian" => Some(self.dataset.dim),
            "idx" => None,
            _ => Some(2),
        }
    }

    /// Diffusion schedule. The one-step loss needs `t_max ≥ loss.t`.
    pub fn schedule(&self) -> Result<VeSchedule> {
        let t_max = match self.loss.kind {
            LossKind::DcdVeTime => self.diffusion.t_max,
            _ => self.diffusion.t_max.max(self.loss.t),
        };
        match self.diffusion.kind {
            DiffusionKind::Const => {
                let g0 = self.diffusion.g0.unwrap_or_else(|| self.loss.g0_sq.sqrt());
                VeSchedule::constant(g0, t_max)
            }
            DiffusionKind::Linear => VeSchedule::linear(t_max),
        }
        .map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::geometric(self.diffusion.t_min, self.diffusion.t_max, self.diffusion.levels)
            .map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn n_steps(&self) -> usize {
        self.sampler.n_steps.unwrap_or(match self.loss.kind {
            LossKind::Pcd => 20,
            _ => 10,
        })
    }

    pub fn langevin(&self) -> Result<LangevinConfig> {
        LangevinConfig::new(self.sampler.step_size, self.n_steps(), true)
            .map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn buffer_capacity(&self) -> usize {
        self.sampler
            .buffer_capacity
            .unwrap_or(10 * self.optimizer.batch_size)
    }

    pub fn eval_mode(&self, dim: usize) -> LaplacianMode {
        let kind = self.eval.laplacian.unwrap_or(if dim <= MAX_EXACT_DIM {
            LaplacianKind::Exact
        } else {
            LaplacianKind::Hutchinson
        });
        match kind {
            LaplacianKind::Exact => LaplacianMode::Exact,
            LaplacianKind::Hutchinson => LaplacianMode::Hutchinson {
                n_probes: self.eval.n_probes.max(1),
                dist: ProbeDist::Rademacher,
            },
        }
    }

    /// Score evaluations charged per training iteration.
    pub fn score_evals_per_iter(&self, dim: usize) -> usize {
        match self.loss.kind {
            LossKind::Cd | LossKind::Pcd => self.n_steps(),
            LossKind::DcdVe | LossKind::DcdVeTime => 1 + self.loss.laplacian_mode().score_evals(dim),
        }
    }
}
