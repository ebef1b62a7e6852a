//! Experiment configuration and the three workflows behind the CLI: seeded
//! regret runs, the sensitivity audit and the baseline comparison.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capri::{run_observed, run_uniform, EpochView, RegretLog, RunConfig, WidthRule};
use crate::environment::{generate_instance, Environment, InstanceSpec};
use crate::error::{Error, Result};
use crate::estimator::{noise_scale, PrivacyMode, PrivacyParams};
use crate::kernels::{KernelConfig, KernelFamilyName, KernelSpec, MaternNu};

/// Tolerance on the sensitivity ratio before the audit flags a violation.
pub const AUDIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub mode: PrivacyMode,
    pub epsilon: f64,
    pub delta_dp: f64,
}

/// A complete, self-contained experiment description. Every field is
/// required in the JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `T`, at least 4.
    pub horizon: usize,
    pub kernel: KernelConfig,
    /// Grid sizes, embedding dimensions, `κ`, `B` and observation noise.
    pub environment: InstanceSpec,
    pub tau: f64,
    pub privacy: PrivacyConfig,
    /// `δ_ERR`.
    pub delta_err: f64,
    /// Multiplier on the theoretical confidence width.
    pub width_scale: f64,
    /// Each seed drives one instance and one run.
    pub seeds: Vec<u64>,
    /// Output directory.
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn emit(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let env = &self.environment;
        if self.horizon < 4 {
            return Err(Error::config("horizon", format!("must be at least 4, got {}", self.horizon)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.delta_err > 0.0 && self.delta_err < 1.0) {
            return Err(Error::config("delta_err", format!("must lie in (0, 1), got {}", self.delta_err)));
        }
        if !(self.width_scale >= 0.0 && self.width_scale.is_finite()) {
            return Err(Error::config("width_scale", format!("must be >= 0, got {}", self.width_scale)));
        }
        if !(self.privacy.epsilon > 0.0) {
            return Err(Error::config("privacy.epsilon", format!("must be positive, got {}", self.privacy.epsilon)));
        }
        let log_t = (self.horizon as f64).ln();
        let d = self.privacy.delta_dp;
        if !(d > 0.0 && d < 1.0) || !(1.25 * log_t / d > 1.0) {
            return Err(Error::config(
                "privacy.delta_dp",
                format!("must lie in (0, 1) with 1.25 log T / delta_dp > 1, got {d}"),
            ));
        }
        if !(self.kernel.lengthscale > 0.0 && self.kernel.lengthscale.is_finite()) {
            return Err(Error::config("kernel.lengthscale", format!("must be positive, got {}", self.kernel.lengthscale)));
        }
        match (self.kernel.family, self.kernel.nu) {
            (KernelFamilyName::Matern, Some(nu)) => {
                MaternNu::from_value(nu).map_err(|e| Error::config("kernel.nu", e.to_string()))?;
            }
            (KernelFamilyName::Matern, None) => {
                return Err(Error::config("kernel.nu", "required for the matern kernel"));
            }
            (_, Some(_)) => {
                return Err(Error::config("kernel.nu", "must be null unless the family is matern"));
            }
            (_, None) => {}
        }
        let checks: [(&str, bool, &str); 9] = [
            ("environment.contexts", env.contexts >= 1, "must be at least 1"),
            ("environment.actions", env.actions >= 1, "must be at least 1"),
            ("environment.context_dim", env.context_dim + env.action_dim >= 1, "context_dim + action_dim must be at least 1"),
            ("environment.embedding_scale", env.embedding_scale > 0.0 && env.embedding_scale.is_finite(), "must be positive"),
            ("environment.reward_centers", env.reward_centers >= 1, "must be at least 1"),
            ("environment.reward_bound", env.reward_bound > 0.0 && env.reward_bound.is_finite(), "must be positive"),
            ("environment.reward_norm", env.reward_norm > 0.0 && env.reward_norm <= env.reward_bound, "must lie in (0, reward_bound]"),
            ("environment.noise_scale", (0.0..=1.0).contains(&env.noise_scale), "must lie in [0, 1]"),
            (
                "environment.context_weights",
                env.context_weights.as_ref().is_none_or(|w| {
                    w.len() == env.contexts
                        && w.iter().all(|v| *v >= 0.0 && v.is_finite())
                        && w.iter().sum::<f64>() > 0.0
                }),
                "must have one nonnegative weight per context with a positive sum",
            ),
        ];
        for (field, ok, message) in checks {
            if !ok {
                return Err(Error::config(field, message));
            }
        }
        Ok(())
    }

    pub fn privacy_params(&self, mode: PrivacyMode) -> Result<PrivacyParams> {
        PrivacyParams::new(self.privacy.epsilon, self.privacy.delta_dp, mode, self.horizon)
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            horizon: self.horizon,
            tau: self.tau,
            delta_err: self.delta_err,
            width: WidthRule::Scaled(self.width_scale),
        }
    }

    /// The environment and resolved kernel for one seed.
    pub fn instance(&self, seed: u64) -> Result<(Environment, KernelSpec)> {
        let env = generate_instance(&self.environment, &self.kernel, seed)?;
        let spec = self.kernel.to_spec(env.grid().points())?;
        Ok((env, spec))
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub log: RegretLog,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub runs: Vec<SeedRun>,
    pub mean_curve: Vec<f64>,
    pub median_curve: Vec<f64>,
}

#[derive(Serialize)]
struct StepRow {
    seed: u64,
    t: usize,
    context: usize,
    action: usize,
    reward: f64,
    inst_regret: f64,
    cum_regret: f64,
    epoch: usize,
}

#[derive(Serialize)]
struct EpochRow {
    seed: u64,
    epoch: usize,
    #[serde(rename = "T_r")]
    t_r: usize,
    delta_r: Option<f64>,
    sigma_max_sq: f64,
    noise_draws: usize,
}

#[derive(Serialize)]
struct CurveRow {
    t: usize,
    mean_cum_regret: f64,
    median_cum_regret: f64,
}

#[derive(Serialize)]
struct EpochSummary {
    epoch: usize,
    #[serde(rename = "T_r")]
    t_r: usize,
    steps: usize,
    completed: bool,
    delta_r: Option<f64>,
    sigma_max_sq: f64,
    sigma0: f64,
    information_gain: f64,
    simple_regret: f64,
    active_sizes: Vec<usize>,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    final_regret: f64,
    noise_draws: usize,
    epochs: Vec<EpochSummary>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pointwise aggregate of equally long curves.
fn aggregate(curves: &[Vec<f64>], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let len = curves.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| f(&curves.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .collect()
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish_csv(mut writer: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    writer.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn capri_runs(
    config: &ExperimentConfig,
    mode: PrivacyMode,
    seeds: &[u64],
) -> Result<Vec<SeedRun>> {
    let privacy = config.privacy_params(mode)?;
    let run_config = config.run_config();
    seeds
        .par_iter()
        .map(|&seed| {
            let (env, spec) = config.instance(seed)?;
            let log = run_observed(&env, &spec, &privacy, &run_config, seed, |_| Ok(()))?;
            Ok(SeedRun { seed, log })
        })
        .collect()
}

/// One run per seed in the configured privacy mode. Writes `steps.csv`,
/// `epochs.csv`, `curves.csv`, `summary.json` and one replayable instance
/// file per seed into `config.output`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let out = &config.output;
    prepare_output(out)?;
    let runs = capri_runs(config, config.privacy.mode, &config.seeds)?;

    let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.log.cumulative_regret()).collect();
    let report = RunReport {
        mean_curve: aggregate(&curves, mean),
        median_curve: aggregate(&curves, median),
        runs,
    };

    let steps_path = out.join("steps.csv");
    let mut steps = csv_writer(&steps_path)?;
    for (run, cum) in report.runs.iter().zip(&curves) {
        for (s, c) in run.log.steps.iter().zip(cum) {
            steps.serialize(StepRow {
                seed: run.seed,
                t: s.t,
                context: s.context,
                action: s.action,
                reward: s.reward,
                inst_regret: s.inst_regret,
                cum_regret: *c,
                epoch: s.epoch,
            })?;
        }
    }
    finish_csv(steps, &steps_path)?;

    let epochs_path = out.join("epochs.csv");
    let mut epochs = csv_writer(&epochs_path)?;
    for run in &report.runs {
        for e in &run.log.epochs {
            epochs.serialize(EpochRow {
                seed: run.seed,
                epoch: e.epoch,
                t_r: e.length,
                delta_r: e.delta_r,
                sigma_max_sq: e.sigma_max_sq,
                noise_draws: e.noise_draws,
            })?;
        }
    }
    finish_csv(epochs, &epochs_path)?;

    let curves_path = out.join("curves.csv");
    let mut curve_writer = csv_writer(&curves_path)?;
    for (i, (m, md)) in report.mean_curve.iter().zip(&report.median_curve).enumerate() {
        curve_writer.serialize(CurveRow {
            t: i + 1,
            mean_cum_regret: *m,
            median_cum_regret: *md,
        })?;
    }
    finish_csv(curve_writer, &curves_path)?;

    let summary: Vec<SeedSummary> = report
        .runs
        .iter()
        .map(|r| SeedSummary {
            seed: r.seed,
            final_regret: r.log.total_regret(),
            noise_draws: r.log.noise_draws,
            epochs: r
                .log
                .epochs
                .iter()
                .map(|e| EpochSummary {
                    epoch: e.epoch,
                    t_r: e.length,
                    steps: e.steps,
                    completed: e.completed,
                    delta_r: e.delta_r,
                    sigma_max_sq: e.sigma_max_sq,
                    sigma0: e.sigma0,
                    information_gain: e.information_gain,
                    simple_regret: e.simple_regret,
                    active_sizes: e.active.sizes(),
                })
                .collect(),
        })
        .collect();
    write_json(&out.join("summary.json"), &summary)?;

    let instances = out.join("instances");
    prepare_output(&instances)?;
    for &seed in &config.seeds {
        let (env, _) = config.instance(seed)?;
        env.to_instance_file(&config.kernel, seed)
            .write(&instances.join(format!("seed_{seed}.json")))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub seed: u64,
    pub epoch: usize,
    #[serde(rename = "T_r")]
    pub t_r: usize,
    pub sigma_max_sq: f64,
    /// `max ‖per-point statistic‖₂` over the support and `y = ±B`.
    pub max_statistic_norm: f64,
    /// `B · σ̃_max`.
    pub sensitivity_bound: f64,
    pub ratio: f64,
    pub sigma0_used: f64,
    pub sigma0_recomputed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max)
    }

    pub fn sigma0_mismatches(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.sigma0_used.to_bits() != r.sigma0_recomputed.to_bits())
            .count()
    }

    pub fn passed(&self) -> bool {
        self.max_ratio() <= 1.0 + AUDIT_TOLERANCE && self.sigma0_mismatches() == 0
    }
}

fn audit_epoch(
    view: &EpochView<'_>,
    seed: u64,
    bound: f64,
    privacy: &PrivacyParams,
) -> Result<AuditRow> {
    let mut worst = 0.0f64;
    for w in view.support {
        for y in [bound, -bound] {
            worst = worst.max(view.kernel.per_point_statistic(w, y)?.norm());
        }
    }
    let sigma_max = view.sigma_max_sq.sqrt();
    let sensitivity_bound = bound * sigma_max;
    let ratio = if sensitivity_bound > 0.0 {
        worst / sensitivity_bound
    } else if worst == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let sigma0_recomputed = match privacy.mode {
        PrivacyMode::NonPrivate => 0.0,
        PrivacyMode::Jdp | PrivacyMode::Ldp => noise_scale(
            sigma_max,
            bound,
            privacy.horizon as f64,
            privacy.epsilon,
            privacy.delta,
        )?,
    };
    Ok(AuditRow {
        seed,
        epoch: view.epoch,
        t_r: view.length,
        sigma_max_sq: view.sigma_max_sq,
        max_statistic_norm: worst,
        sensitivity_bound,
        ratio,
        sigma0_used: view.sigma0,
        sigma0_recomputed,
    })
}

/// Replays every seed in the configured mode and, for each epoch's `(S, R)`,
/// scans the support with `y = ±B` for the largest per-point statistic.
/// Writes `audit.csv`.
pub fn privacy_audit(config: &ExperimentConfig) -> Result<AuditReport> {
    config.validate()?;
    prepare_output(&config.output)?;
    let privacy = config.privacy_params(config.privacy.mode)?;
    let run_config = config.run_config();
    let per_seed: Vec<Vec<AuditRow>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let (env, spec) = config.instance(seed)?;
            let bound = env.reward_bound();
            let mut rows = Vec::new();
            run_observed(&env, &spec, &privacy, &run_config, seed, |view| {
                rows.push(audit_epoch(view, seed, bound, &privacy)?);
                Ok(())
            })?;
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let report = AuditReport {
        rows: per_seed.into_iter().flatten().collect(),
    };
    let path = config.output.join("audit.csv");
    let mut writer = csv_writer(&path)?;
    for row in &report.rows {
        writer.serialize(row)?;
    }
    finish_csv(writer, &path)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Uniform,
    #[serde(rename = "nonprivate")]
    NonPrivate,
    Jdp,
    Ldp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Uniform, Variant::NonPrivate, Variant::Jdp, Variant::Ldp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Uniform => "uniform",
            Variant::NonPrivate => "nonprivate",
            Variant::Jdp => "jdp",
            Variant::Ldp => "ldp",
        }
    }

    fn mode(self) -> Option<PrivacyMode> {
        match self {
            Variant::Uniform => None,
            Variant::NonPrivate => Some(PrivacyMode::NonPrivate),
            Variant::Jdp => Some(PrivacyMode::Jdp),
            Variant::Ldp => Some(PrivacyMode::Ldp),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub log: RegretLog,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// Variant-major, seeds in config order.
    pub runs: Vec<VariantRun>,
}

impl ComparisonReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &VariantRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn mean_final_regret(&self, variant: Variant) -> f64 {
        let finals: Vec<f64> = self.runs_of(variant).map(|r| r.log.total_regret()).collect();
        mean(&finals)
    }

    pub fn mean_curve(&self, variant: Variant) -> Vec<f64> {
        let curves: Vec<Vec<f64>> = self.runs_of(variant).map(|r| r.log.cumulative_regret()).collect();
        aggregate(&curves, mean)
    }
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    variant: &'a str,
    seed: u64,
    final_cum_regret: f64,
}

#[derive(Serialize)]
struct ComparisonCurveRow {
    t: usize,
    uniform: f64,
    nonprivate: f64,
    jdp: f64,
    ldp: f64,
}

/// Uniform-random, non-private, JDP and LDP runs on the same instance for
/// every seed. Writes `comparison.csv` (one row per variant and seed) and
/// `comparison_curves.csv` (mean cumulative regret per variant).
pub fn compare_baselines(config: &ExperimentConfig) -> Result<ComparisonReport> {
    config.validate()?;
    prepare_output(&config.output)?;
    let run_config = config.run_config();
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let (env, spec) = config.instance(seed)?;
            let log = match variant.mode() {
                None => run_uniform(&env, config.horizon, seed)?,
                Some(mode) => {
                    let privacy = config.privacy_params(mode)?;
                    run_observed(&env, &spec, &privacy, &run_config, seed, |_| Ok(()))?
                }
            };
            Ok(VariantRun { variant, seed, log })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ComparisonReport { runs };

    let path = config.output.join("comparison.csv");
    let mut writer = csv_writer(&path)?;
    for r in &report.runs {
        writer.serialize(ComparisonRow {
            variant: r.variant.name(),
            seed: r.seed,
            final_cum_regret: r.log.total_regret(),
        })?;
    }
    finish_csv(writer, &path)?;

    let curves: Vec<Vec<f64>> = Variant::ALL.iter().map(|&v| report.mean_curve(v)).collect();
    let path = config.output.join("comparison_curves.csv");
    let mut writer = csv_writer(&path)?;
    for (i, uniform) in curves[0].iter().enumerate() {
        writer.serialize(ComparisonCurveRow {
            t: i + 1,
            uniform: *uniform,
            nonprivate: curves[1][i],
            jdp: curves[2][i],
            ldp: curves[3][i],
        })?;
    }
    finish_csv(writer, &path)?;
    Ok(report)
}
