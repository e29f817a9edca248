//! Experiment configuration. Every field has a default so a config on disk can
//! be as small as a name, a sweep and a training family; the resolved form is
//! written back next to the results and replays the run exactly.

use std::path::{Path, PathBuf};

use icl_core::numerics::{from_row_major, haar_orthogonal};
use icl_core::pde::{pde_task_distribution, CoefficientLaw, GalerkinGrid, PdeTaskSpec, SineBasis};
use icl_core::tasks::equal_correlated_cov;
use icl_core::{CovariateDistribution, Rng, Rotation, TaskDistribution};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Stream used to draw fixed rotations from their seed.
const ROTATION_STREAM: u64 = 0x5257;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Inference prompt length.
    M,
    /// Training prompt length.
    N,
    /// Number of training prompts.
    #[serde(rename = "N")]
    Prompts,
}

impl Axis {
    pub fn label(&self) -> &'static str {
        match self {
            Axis::M => "m",
            Axis::N => "n",
            Axis::Prompts => "N",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: Axis,
    /// Explicit grid; when empty it is generated from `start`, `ratio`, `points`.
    #[serde(default)]
    pub grid: Vec<usize>,
    #[serde(default)]
    pub start: Option<usize>,
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    #[serde(default)]
    pub points: Option<usize>,
}

fn default_ratio() -> usize {
    2
}

impl Sweep {
    pub fn resolve(&mut self) -> Result<()> {
        if self.grid.is_empty() {
            let (Some(start), Some(points)) = (self.start, self.points) else {
                return Err(HarnessError::Config("sweep needs a grid or start and points".into()));
            };
            if self.ratio < 2 || start == 0 {
                return Err(HarnessError::Config(
                    "geometric grid needs start >= 1 and ratio >= 2".into(),
                ));
            }
            self.grid = (0..points).map(|k| start * self.ratio.pow(k as u32)).collect();
        }
        if self.grid[0] == 0 || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config(
                "grid must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationSpec {
    #[default]
    Fresh,
    Fixed {
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    RotatedDiagonal {
        a: f64,
        b: f64,
        #[serde(default)]
        rotation: RotationSpec,
    },
    ConstantMultiple {
        a: f64,
        b: f64,
    },
    /// Row-major atoms drawn uniformly.
    Atomic {
        atoms: Vec<Vec<f64>>,
    },
    Pde {
        a: CoefficientLaw,
        v: CoefficientLaw,
        #[serde(default)]
        field_modes: Option<usize>,
        #[serde(default)]
        reference_modes: Option<usize>,
    },
}

impl TaskSpec {
    pub fn is_pde(&self) -> bool {
        matches!(self, TaskSpec::Pde { .. })
    }

    pub fn resolve(&mut self, d: usize) {
        if let TaskSpec::Pde {
            field_modes,
            reference_modes,
            ..
        } = self
        {
            field_modes.get_or_insert(4 * d);
            reference_modes.get_or_insert(4 * d);
        }
    }

    pub fn build(&self, d: usize) -> Result<TaskDistribution> {
        let dist = match self {
            TaskSpec::RotatedDiagonal { a, b, rotation } => {
                let rotation = match rotation {
                    RotationSpec::Fresh => Rotation::Fresh,
                    RotationSpec::Fixed { seed } => {
                        Rotation::Fixed(haar_orthogonal(&mut Rng::new(*seed, ROTATION_STREAM), d))
                    }
                };
                TaskDistribution::rotated_diagonal(d, *a, *b, rotation)?
            }
            TaskSpec::ConstantMultiple { a, b } => TaskDistribution::constant_multiple(d, *a, *b)?,
            TaskSpec::Atomic { atoms } => {
                let mats = atoms
                    .iter()
                    .map(|a| from_row_major(d, d, a))
                    .collect::<icl_core::Result<Vec<_>>>()?;
                TaskDistribution::atomic(mats)?
            }
            TaskSpec::Pde { .. } => pde_task_distribution(self.pde_spec(d)?)?,
        };
        Ok(dist)
    }

    pub fn pde_spec(&self, d: usize) -> Result<PdeTaskSpec> {
        match self {
            TaskSpec::Pde { a, v, field_modes, .. } => {
                let modes = field_modes.unwrap_or(4 * d);
                let panels = SineBasis::new(d)
                    .default_panels()
                    .max(SineBasis::new(modes).default_panels());
                Ok(PdeTaskSpec::with_resolution(*a, *v, d, modes, panels)?)
            }
            _ => Err(HarnessError::Config("not a pde task family".into())),
        }
    }

    pub fn reference_grid(&self, d: usize) -> Option<GalerkinGrid> {
        match self {
            TaskSpec::Pde { reference_modes, .. } => Some(GalerkinGrid::with_default_panels(SineBasis::new(
                reference_modes.unwrap_or(4 * d),
            ))),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub tasks: TaskSpec,
    /// Equal correlation of the Gaussian covariates.
    #[serde(default)]
    pub rho: f64,
}

impl DistributionSpec {
    pub fn covariates(&self, d: usize) -> Result<CovariateDistribution> {
        Ok(CovariateDistribution::new(equal_correlated_cov(d, self.rho)?))
    }
}

/// An evaluation distribution; missing parts fall back to the training ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub label: String,
    #[serde(default)]
    pub tasks: Option<TaskSpec>,
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Gaussian entries with scale `0.1/√d`.
    #[default]
    Default,
    Gaussian {
        scale: f64,
    },
    /// `(I, Σ⁻¹)` plus noise.
    NearIdentity {
        noise: f64,
    },
    /// `(K, Σ⁻¹K⁻¹)` with `K = diag(U[lo, hi])` drawn per seed, plus noise.
    NearDiagonal {
        lo: f64,
        hi: f64,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub minibatch: Option<usize>,
}

fn default_step() -> f64 {
    1.0
}
fn default_iterations() -> usize {
    50_000
}
fn default_grad_tol() -> f64 {
    1e-8
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            step_size: default_step(),
            max_iterations: default_iterations(),
            grad_tol: default_grad_tol(),
            minibatch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_d")]
    pub d: usize,
    pub sweep: Sweep,
    /// Training prompt length.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Training prompt count.
    #[serde(rename = "N", default = "default_prompts")]
    pub prompts: usize,
    /// Inference prompt length for n- and N-sweeps.
    #[serde(default = "default_m")]
    pub m: usize,
    pub train: DistributionSpec,
    /// Extra evaluation distributions; the training one is always evaluated as `in_domain`.
    #[serde(default)]
    pub tests: Vec<TargetSpec>,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Monte-Carlo episodes per m-sweep curve.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Tasks in the shared sample behind closed-form evaluations.
    #[serde(default = "default_task_samples")]
    pub task_samples: usize,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_d() -> usize {
    5
}
fn default_n() -> usize {
    2000
}
fn default_prompts() -> usize {
    5000
}
fn default_m() -> usize {
    4096
}
fn default_episodes() -> usize {
    2000
}
fn default_task_samples() -> usize {
    4000
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const IN_DOMAIN: &str = "in_domain";

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fill defaults in place and validate.
    pub fn resolve(&mut self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', ',', '\n']) {
            return Err(HarnessError::Config(
                "name must be nonempty without '/', ',' or newlines".into(),
            ));
        }
        if self.d == 0 || self.n == 0 || self.prompts == 0 || self.m == 0 {
            return Err(HarnessError::Config("d, n, N and m must be positive".into()));
        }
        self.sweep.resolve()?;
        if self.seeds.is_empty() {
            self.seeds = DEFAULT_SEEDS.to_vec();
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        let d = self.d;
        self.train.tasks.resolve(d);
        let pde = self.train.tasks.is_pde();
        let mut labels = vec![IN_DOMAIN.to_string()];
        for t in &mut self.tests {
            if let Some(tasks) = &mut t.tasks {
                tasks.resolve(d);
                if tasks.is_pde() != pde {
                    return Err(HarnessError::Config("cannot mix pde and matrix task families".into()));
                }
            }
            if labels.contains(&t.label) || t.label.contains([',', '/', '\n']) || t.label.is_empty() {
                return Err(HarnessError::Config(format!(
                    "bad or repeated target label {:?}",
                    t.label
                )));
            }
            labels.push(t.label.clone());
        }
        if pde && (self.train.rho != 0.0 || self.tests.iter().any(|t| t.rho.is_some_and(|r| r != 0.0))) {
            return Err(HarnessError::Config(
                "pde sources are white noise; rho must be 0".into(),
            ));
        }
        if self.budget.is_none() {
            let inv = equal_correlated_cov(d, self.train.rho)?.inverse_op_norm();
            self.budget = Some(10.0 * inv.max(1.0));
        }
        if self.episodes == 0 || self.task_samples == 0 {
            return Err(HarnessError::Config(
                "episodes and task_samples must be positive".into(),
            ));
        }
        if self.output.is_none() {
            self.output = Some(PathBuf::from("runs").join(&self.name));
        }
        Ok(())
    }

    pub fn budget(&self) -> f64 {
        self.budget.expect("resolved config")
    }

    pub fn output_dir(&self) -> &Path {
        self.output.as_deref().expect("resolved config")
    }

    /// Training distribution followed by the extra targets, each as `(label, tasks, rho)`.
    pub fn targets(&self) -> Vec<(String, TaskSpec, f64)> {
        let mut out = vec![(IN_DOMAIN.to_string(), self.train.tasks.clone(), self.train.rho)];
        for t in &self.tests {
            out.push((
                t.label.clone(),
                t.tasks.clone().unwrap_or_else(|| self.train.tasks.clone()),
                t.rho.unwrap_or(self.train.rho),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "tiny",
        "sweep": {"axis": "m", "start": 16, "points": 4},
        "train": {"tasks": {"family": "rotated_diagonal", "a": 1.0, "b": 2.0}}
    }"#;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.sweep.grid, vec![16, 32, 64, 128]);
        assert_eq!(cfg.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(cfg.d, 5);
        assert_eq!(cfg.budget(), 10.0);
        assert_eq!(cfg.output_dir(), Path::new("runs/tiny"));
        assert_eq!(
            cfg.train.tasks,
            TaskSpec::RotatedDiagonal {
                a: 1.0,
                b: 2.0,
                rotation: RotationSpec::Fresh
            }
        );
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_grids_and_fields() {
        let bad = MINIMAL.replace(r#""start": 16, "points": 4"#, r#""grid": [4, 4, 8]"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = MINIMAL.replace(r#""name": "tiny","#, r#""name": "tiny", "colour": 1,"#);
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn axis_names() {
        let s: Sweep = serde_json::from_str(r#"{"axis": "N", "grid": [1, 2]}"#).unwrap();
        assert_eq!(s.axis, Axis::Prompts);
        let s: Sweep = serde_json::from_str(r#"{"axis": "n", "grid": [1, 2]}"#).unwrap();
        assert_eq!(s.axis, Axis::N);
    }

    #[test]
    fn fixed_rotation_is_reproducible() {
        let spec = TaskSpec::RotatedDiagonal {
            a: 1.0,
            b: 2.0,
            rotation: RotationSpec::Fixed { seed: 3 },
        };
        let a = spec.build(4).unwrap();
        let b = spec.build(4).unwrap();
        let mut r1 = Rng::new(1, 0);
        let mut r2 = Rng::new(1, 0);
        assert_eq!(a.sample(&mut r1), b.sample(&mut r2));
    }
}
