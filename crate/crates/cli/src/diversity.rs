//! `icl diversity`: verdict, evidence and distance surrogate for a train/test pair,
//! plus the randomized centralizer classifier trials.

use std::path::{Path, PathBuf};

use icl_core::diversity::{centralizer, distance_surrogate, diversity_verdict, sample_generators, DEFAULT_PAIRS};
use icl_core::numerics::{Mat, NULLSPACE_TOL};
use icl_core::tasks::equal_correlated_cov;
use icl_core::{Rng, Rotation, TaskDistribution, Theta};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::TaskSpec;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityConfig {
    pub name: String,
    #[serde(default = "default_d")]
    pub d: usize,
    pub train: TaskSpec,
    pub test: TaskSpec,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_task_samples")]
    pub task_samples: usize,
    /// Parameters for the distance surrogate; `(I, Σ⁻¹)` when absent.
    #[serde(default)]
    pub theta: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_d() -> usize {
    5
}
fn default_pairs() -> usize {
    DEFAULT_PAIRS
}
fn default_tol() -> f64 {
    NULLSPACE_TOL
}
fn default_seed() -> u64 {
    1
}
fn default_task_samples() -> usize {
    4000
}

impl DiversityConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.train.resolve(cfg.d);
        cfg.test.resolve(cfg.d);
        if cfg.output.is_none() {
            cfg.output = Some(PathBuf::from("runs").join(&cfg.name));
        }
        Ok(cfg)
    }
}

/// Verdict JSON with the surrogate distance appended.
pub fn run_diversity(cfg: &DiversityConfig) -> Result<serde_json::Value> {
    let d = cfg.d;
    let train = cfg.train.build(d)?;
    let test = cfg.test.build(d)?;
    let cov = equal_correlated_cov(d, cfg.rho)?;
    let rng = Rng::new(cfg.seed, 0);
    let verdict = diversity_verdict(&train, &test, &cov, cfg.pairs, cfg.tol, &rng)?;
    let theta = match &cfg.theta {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
            Theta::from_json(&text)?
        }
        None => Theta::new(Mat::identity(d, d), cov.inverse().clone(), f64::MAX)?,
    };
    let surrogate = distance_surrogate(&train, &test, &theta, &cov, cfg.task_samples, &rng.child(9))?;
    let mut out = verdict.to_json();
    out["distance_surrogate"] = json!(surrogate);
    out["name"] = json!(cfg.name);
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
        let path = dir.join("diversity.json");
        std::fs::write(&path, serde_json::to_string_pretty(&out).expect("json"))
            .map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierTally {
    pub trials: usize,
    pub misclassified: usize,
}

/// Randomized trials over constant-multiple, fixed-rotation and fresh-rotation
/// families with random sizes and intervals; only the last should have a trivial centralizer.
pub fn classifier_trials(trials: usize, seed: u64) -> Result<ClassifierTally> {
    let mut misclassified = 0;
    for t in 0..trials {
        let mut rng = Rng::new(seed, t as u64);
        let d = 2 + rng.index(7);
        let a = rng.uniform(0.2, 2.0);
        let b = a + rng.uniform(0.1, 3.0);
        let kind = t % 3;
        let dist = match kind {
            0 => TaskDistribution::constant_multiple(d, a, b)?,
            1 => {
                let u = icl_core::numerics::haar_orthogonal(&mut rng, d);
                TaskDistribution::rotated_diagonal(d, a, b, Rotation::Fixed(u))?
            }
            _ => TaskDistribution::rotated_diagonal(d, a, b, Rotation::Fresh)?,
        };
        let gens = sample_generators(&dist, DEFAULT_PAIRS, &rng.child(1))?;
        let report = centralizer(&gens, NULLSPACE_TOL)?;
        if report.trivial != (kind == 2) {
            misclassified += 1;
        }
    }
    Ok(ClassifierTally { trials, misclassified })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_small_run() {
        assert_eq!(classifier_trials(9, 5).unwrap().misclassified, 0);
    }

    #[test]
    fn verdict_report_from_config() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"{{"name": "cm", "d": 3,
                "train": {{"family": "constant_multiple", "a": 1.0, "b": 2.0}},
                "test": {{"family": "rotated_diagonal", "a": 1.0, "b": 2.0}},
                "output": {:?}}}"#,
            dir.path().to_str().unwrap()
        );
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, text).unwrap();
        let cfg = DiversityConfig::load(&path).unwrap();
        let out = run_diversity(&cfg).unwrap();
        assert_eq!(out["verdict"], "not_diverse");
        assert!(out["distance_surrogate"].as_f64().unwrap() >= 0.0);
        assert!(dir.path().join("diversity.json").exists());
    }
}
