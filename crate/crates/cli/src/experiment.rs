//! Sweep orchestration: train per seed (and grid point, for n- and N-sweeps),
//! evaluate every target distribution, normalize against a floor and fit slopes.

use std::fmt::Write as _;
use std::path::Path;

use icl_core::numerics::{Mat, Vector};
use icl_core::pde::{pde_monte_carlo_curve, GalerkinGrid, PdeTaskSpec};
use icl_core::risk::{
    closed_form_risk, ground_truth_norm, limiting_risk_for_sample, monte_carlo_curve, optimal_q_for_sample,
};
use icl_core::training::{train, Batch, Init, TrainConfig};
use icl_core::{RiskContext, Rng, TaskSample, Theta};
use rayon::prelude::*;

use crate::config::{Axis, ExperimentConfig, InitSpec, IN_DOMAIN};
use crate::error::{Context, HarnessError, Result};
use crate::fit::{fit_slope, shifted_relative_error, Slope};
use crate::plot::{log_log_svg, Series};

pub const CSV_HEADER: &str = "experiment,axis,value,seed,raw_error,floor,shifted_error";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub experiment: String,
    pub axis: Axis,
    pub value: usize,
    pub seed: u64,
    pub raw_error: f64,
    pub floor: f64,
    pub shifted_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    pub shifted_mean: f64,
    /// Standard deviation across seeds.
    pub shifted_std: f64,
    pub raw_mean: f64,
    pub floor_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetCurve {
    pub label: String,
    pub points: Vec<SweepPoint>,
    pub slope: Option<Slope>,
}

impl TargetCurve {
    pub fn shifted(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.value as f64, p.shifted_mean)).collect()
    }

    pub fn raw(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.value as f64, p.raw_mean)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub name: String,
    pub axis: Axis,
    pub targets: Vec<TargetCurve>,
    pub records: Vec<Record>,
    /// File stem and trained parameters for every trained model.
    pub thetas: Vec<(String, Theta)>,
}

impl SweepResult {
    pub fn target(&self, label: &str) -> Option<&TargetCurve> {
        self.targets.iter().find(|t| t.label == label)
    }

    pub fn in_domain(&self) -> &TargetCurve {
        self.target(IN_DOMAIN).expect("in-domain target always present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.experiment,
                r.axis.label(),
                r.value,
                r.seed,
                r.raw_error,
                r.floor,
                r.shifted_error
            );
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let series: Vec<Series> = self
            .targets
            .iter()
            .map(|t| Series {
                label: t.label.clone(),
                points: t.shifted(),
                note: t.slope.map(|s| format!("slope {:.2} ± {:.2}", s.slope, s.std_error)),
            })
            .collect();
        log_log_svg(&self.name, self.axis.label(), "shifted relative error", &series)
    }
}

struct Target {
    label: String,
    ctx: RiskContext,
    sample: TaskSample,
    truth: f64,
    pde: Option<(PdeTaskSpec, GalerkinGrid)>,
}

struct Prepared {
    train_ctx: RiskContext,
    targets: Vec<Target>,
}

/// H¹ weights `1 + k²π²` of the orthonormal sine coefficients.
fn h1_weight(d: usize) -> Mat {
    Mat::from_diagonal(&Vector::from_fn(d, |k, _| {
        let w = (k + 1) as f64 * std::f64::consts::PI;
        1.0 + w * w
    }))
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = cfg.d;
    let pde = cfg.train.tasks.is_pde();
    let train_ctx = RiskContext::new(cfg.train.tasks.build(d)?, cfg.train.covariates(d)?, cfg.n)?;
    let targets = cfg
        .targets()
        .into_iter()
        .map(|(label, tasks, rho)| {
            let covs = crate::config::DistributionSpec {
                tasks: tasks.clone(),
                rho,
            }
            .covariates(d)?;
            let mut ctx = RiskContext::new(tasks.build(d)?, covs, cfg.m)?;
            if pde {
                ctx = ctx.with_weight(h1_weight(d))?;
            }
            let sample = TaskSample::for_distribution(&ctx.tasks, cfg.task_samples)?;
            let truth = ground_truth_norm(&ctx, &sample);
            let pde = match &tasks {
                t if t.is_pde() => Some((t.pde_spec(d)?, t.reference_grid(d).expect("pde family"))),
                _ => None,
            };
            Ok(Target {
                label,
                ctx,
                sample,
                truth,
                pde,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { train_ctx, targets })
}

fn train_config(cfg: &ExperimentConfig, n: usize, prompts: usize, ctx: &RiskContext, job: &Rng) -> Result<TrainConfig> {
    let d = cfg.d;
    let mut tc = TrainConfig::new(d, prompts, n, cfg.budget());
    tc.step_size = cfg.training.step_size;
    tc.max_iterations = cfg.training.max_iterations;
    tc.grad_tol = cfg.training.grad_tol;
    tc.batch = cfg.training.minibatch.map_or(Batch::Full, Batch::Mini);
    let sigma_inv = ctx.cov().inverse().clone();
    tc.init = match &cfg.init {
        InitSpec::Default => Init::default_for(d),
        InitSpec::Gaussian { scale } => Init::Gaussian { scale: *scale },
        InitSpec::NearIdentity { noise } => Init::Near {
            p0: Mat::identity(d, d),
            q0: sigma_inv,
            noise: *noise,
        },
        InitSpec::NearDiagonal { lo, hi, noise } => {
            if !(lo > &0.0 && hi >= lo) {
                return Err(HarnessError::Config("near_diagonal needs 0 < lo <= hi".into()));
            }
            let mut r = job.child(3);
            let k = Vector::from_fn(d, |_, _| r.uniform(*lo, *hi));
            let kinv = Mat::from_diagonal(&k.map(|x| 1.0 / x));
            Init::Near {
                p0: Mat::from_diagonal(&k),
                q0: sigma_inv * kinv,
                noise: *noise,
            }
        }
    };
    Ok(tc)
}

/// One trained model and the per-target `(value, raw, floor, shifted)` rows it produced.
struct JobOutput {
    seed: u64,
    theta_name: String,
    theta: Theta,
    rows: Vec<Vec<(usize, f64, f64, f64)>>,
}

fn m_sweep_job(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<JobOutput> {
    let job = Rng::new(seed, 0);
    let ctx_msg = || format!("{} seed {seed}", cfg.name);
    let tc = train_config(cfg, cfg.n, cfg.prompts, &prep.train_ctx, &job)?;
    let (theta, _) = train(&tc, &prep.train_ctx, &job.child(1)).context(|| format!("training {}", ctx_msg()))?;
    let grid = &cfg.sweep.grid;
    let eval = job.child(2);
    let mut rows = Vec::with_capacity(prep.targets.len());
    let mut floor = f64::NAN;
    for (ti, target) in prep.targets.iter().enumerate() {
        let stream = eval.child(ti as u64);
        let (limit, excess, truth) = match &target.pde {
            Some((spec, reference)) => {
                let curve = pde_monte_carlo_curve(&theta, spec, reference, grid, cfg.episodes, &stream)
                    .context(|| format!("pde evaluation {} on {}", ctx_msg(), target.label))?;
                let ex: Vec<f64> = curve.points.iter().map(|p| p.excess.value).collect();
                (curve.limit_error.value, ex, curve.reference_norm_sq.value)
            }
            None => {
                let limit = limiting_risk_for_sample(&theta, &target.ctx, &target.sample).value;
                let curve = monte_carlo_curve(&theta, &target.ctx, grid, cfg.episodes, &stream)
                    .context(|| format!("evaluation {} on {}", ctx_msg(), target.label))?;
                let ex: Vec<f64> = curve.iter().map(|p| p.excess.value).collect();
                (limit, ex, target.truth)
            }
        };
        if ti == 0 {
            floor = limit;
        }
        rows.push(
            grid.iter()
                .zip(&excess)
                .map(|(&m, e)| {
                    let raw = limit + e;
                    (m, raw, floor, shifted_relative_error(raw, floor, truth))
                })
                .collect(),
        );
    }
    Ok(JobOutput {
        seed,
        theta_name: format!("theta_seed{seed}"),
        theta,
        rows,
    })
}

fn size_sweep_job(cfg: &ExperimentConfig, prep: &Prepared, floor: f64, value: usize, seed: u64) -> Result<JobOutput> {
    let job = Rng::new(seed, 0);
    let (n, prompts) = match cfg.sweep.axis {
        Axis::N => (value, cfg.prompts),
        _ => (cfg.n, value),
    };
    let tc = train_config(cfg, n, prompts, &prep.train_ctx, &job)?;
    let (theta, _) = train(&tc, &prep.train_ctx, &job.child(1)).context(|| {
        format!(
            "training {} at {}={value} seed {seed}",
            cfg.name,
            cfg.sweep.axis.label()
        )
    })?;
    let rows = prep
        .targets
        .iter()
        .map(|t| {
            let raw = closed_form_risk(&theta, &t.ctx, &t.sample).value;
            vec![(value, raw, floor, shifted_relative_error(raw, floor, t.truth))]
        })
        .collect();
    Ok(JobOutput {
        seed,
        theta_name: format!("theta_{}{value}_seed{seed}", cfg.sweep.axis.label()),
        theta,
        rows,
    })
}

/// `R_m(I, Q_m)` on the training distribution, the reference floor of size sweeps.
fn reference_floor(cfg: &ExperimentConfig, prep: &Prepared) -> Result<f64> {
    let ctx = prep.targets[0].ctx.with_length(cfg.m)?;
    let sample = &prep.targets[0].sample;
    let q = optimal_q_for_sample(&ctx, sample).context(|| format!("{}: reference Q", cfg.name))?;
    let theta = Theta::new(Mat::identity(cfg.d, cfg.d), q.q, f64::MAX)?;
    Ok(closed_form_risk(&theta, &ctx, sample).value)
}

fn aggregate(cfg: &ExperimentConfig, labels: &[String], jobs: Vec<JobOutput>) -> SweepResult {
    let mut records = Vec::new();
    let mut targets = Vec::new();
    for (ti, label) in labels.iter().enumerate() {
        let experiment = format!("{}/{}", cfg.name, label);
        let mut points = Vec::new();
        for &value in &cfg.sweep.grid {
            let mut rows = Vec::new();
            for job in &jobs {
                for &(v, raw, floor, shifted) in &job.rows[ti] {
                    if v == value {
                        rows.push((job.seed, raw, floor, shifted));
                    }
                }
            }
            rows.sort_by_key(|r| r.0);
            let k = rows.len() as f64;
            let mean = |f: fn(&(u64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / k;
            let shifted_mean = mean(|r| r.3);
            let var = if rows.len() > 1 {
                rows.iter().map(|r| (r.3 - shifted_mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            points.push(SweepPoint {
                value,
                shifted_mean,
                shifted_std: var.sqrt(),
                raw_mean: mean(|r| r.1),
                floor_mean: mean(|r| r.2),
            });
            for (seed, raw, floor, shifted) in rows {
                records.push(Record {
                    experiment: experiment.clone(),
                    axis: cfg.sweep.axis,
                    value,
                    seed,
                    raw_error: raw,
                    floor,
                    shifted_error: shifted,
                });
            }
        }
        let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.value as f64, p.shifted_mean)).collect();
        targets.push(TargetCurve {
            label: label.clone(),
            slope: fit_slope(&pts).ok(),
            points,
        });
    }
    let mut thetas: Vec<(String, Theta)> = jobs.into_iter().map(|j| (j.theta_name, j.theta)).collect();
    thetas.sort_by(|a, b| a.0.cmp(&b.0));
    SweepResult {
        name: cfg.name.clone(),
        axis: cfg.sweep.axis,
        targets,
        records,
        thetas,
    }
}

/// Run the sweep without touching the filesystem.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let prep = prepare(cfg)?;
    let labels: Vec<String> = prep.targets.iter().map(|t| t.label.clone()).collect();
    let jobs = match cfg.sweep.axis {
        Axis::M => cfg
            .seeds
            .par_iter()
            .map(|&seed| m_sweep_job(cfg, &prep, seed))
            .collect::<Result<Vec<_>>>()?,
        Axis::N | Axis::Prompts => {
            let floor = reference_floor(cfg, &prep)?;
            let pairs: Vec<(usize, u64)> = cfg
                .sweep
                .grid
                .iter()
                .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
                .collect();
            pairs
                .par_iter()
                .map(|&(v, s)| size_sweep_job(cfg, &prep, floor, v, s))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(aggregate(cfg, &labels, jobs))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::Io(path.display().to_string(), e))
}

/// Write results.csv, config.json, plot.svg and one theta file per model.
pub fn write_artifacts(cfg: &ExperimentConfig, result: &SweepResult) -> Result<()> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
    write(&dir.join("results.csv"), &result.to_csv())?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    write(&dir.join("plot.svg"), &result.to_svg())?;
    for (name, theta) in &result.thetas {
        write(&dir.join(format!("{name}.json")), &theta.to_json())?;
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let result = run_sweep(cfg)?;
    write_artifacts(cfg, &result)?;
    Ok(result)
}

/// Run `f` on a pool of `threads` workers, or the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(axis: &str, grid: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "name": "tiny", "d": 2, "n": 32, "N": 200, "m": 64,
                "sweep": {{"axis": "{axis}", "grid": {grid}}},
                "train": {{"tasks": {{"family": "rotated_diagonal", "a": 1.0, "b": 2.0}}}},
                "tests": [{{"label": "shifted", "tasks": {{"family": "rotated_diagonal", "a": 2.0, "b": 3.0}}}}],
                "seeds": [1, 2], "episodes": 50, "task_samples": 200,
                "training": {{"max_iterations": 300, "grad_tol": 1e-6}}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn m_sweep_shapes() {
        let cfg = tiny("m", "[8, 16, 32, 64, 128]");
        let r = run_sweep(&cfg).unwrap();
        assert_eq!(r.records.len(), 2 * 5 * 2);
        assert_eq!(r.thetas.len(), 2);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(csv.lines().nth(1).unwrap().starts_with("tiny/in_domain,m,8,1,"));
        assert!(r.records.iter().all(|x| x.shifted_error >= 0.0 && x.raw_error >= 0.0));
        assert!(r.in_domain().slope.is_some());
        assert!(r.to_svg().contains("shifted"));
    }

    #[test]
    fn size_sweep_shapes_and_floor() {
        let cfg = tiny("n", "[4, 8]");
        let r = run_sweep(&cfg).unwrap();
        assert_eq!(r.records.len(), 2 * 2 * 2);
        assert!(r.in_domain().slope.is_none());
        let floors: Vec<f64> = r.records.iter().map(|x| x.floor).collect();
        assert!(floors.windows(2).all(|w| w[0] == w[1]));
        assert!(r
            .records
            .iter()
            .filter(|x| x.experiment.ends_with("in_domain"))
            .all(|x| x.raw_error >= x.floor));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = tiny("m", "[8, 16, 32, 64, 128]");
        let one = with_threads(Some(1), || run_sweep(&cfg).unwrap().to_csv());
        let three = with_threads(Some(3), || run_sweep(&cfg).unwrap().to_csv());
        assert_eq!(one, three);
    }
}
