//! The explore-then-eliminate loop: doubling epochs, per-context active action
//! sets, confidence widths, pruning and projection-set resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{ContextDistribution, Environment, Grid};
use crate::error::{Error, Result};
use crate::estimator::{
    GaussianNoise, PrivacyMode, PrivacyParams, PrivateEstimator, ProjectedKernel, ProjectionPair,
    StatisticAccumulator,
};
use crate::gp::information_gain;
use crate::kernels::{KernelSpec, Point};

/// Surviving actions `X_r(c)` for every context, each kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSets {
    sets: Vec<Vec<usize>>,
}

impl ActiveSets {
    /// `X_1(c) = X` for every context.
    pub fn full(num_contexts: usize, num_actions: usize) -> Result<Self> {
        if num_contexts == 0 || num_actions == 0 {
            return Err(Error::invalid("active sets need at least one context and one action"));
        }
        Ok(ActiveSets {
            sets: vec![(0..num_actions).collect(); num_contexts],
        })
    }

    pub fn from_sets(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.is_empty() || sets.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every context needs at least one active action"));
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        Ok(ActiveSets { sets })
    }

    pub fn num_contexts(&self) -> usize {
        self.sets.len()
    }

    pub fn get(&self, context: usize) -> &[usize] {
        &self.sets[context]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    pub fn contains(&self, context: usize, action: usize) -> bool {
        self.sets[context].binary_search(&action).is_ok()
    }

    pub fn is_subset_of(&self, other: &ActiveSets) -> bool {
        self.sets.len() == other.sets.len()
            && self
                .sets
                .iter()
                .enumerate()
                .all(|(c, s)| s.iter().all(|x| other.contains(c, *x)))
    }

    /// `supp(ϱ_r) = {(c, x) : x ∈ X_r(c)}` as grid points.
    pub fn support(&self, grid: &Grid) -> Vec<Point> {
        self.sets
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |&x| grid.point(c, x).clone()))
            .collect()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `β(δ) = 90B√log(168T/δ) + 52B√(log(168T/δ) log(12/δ))/√τ + 3B√(2 log(6/δ)) + √(24τ)`.
pub fn beta(delta: f64, reward_bound: f64, tau: f64, horizon: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(tau > 0.0) || !(horizon >= 1.0) || !(reward_bound >= 0.0) {
        return Err(Error::invalid(format!(
            "beta needs tau > 0, T >= 1, B >= 0 (got {tau}, {horizon}, {reward_bound})"
        )));
    }
    let b = reward_bound;
    let l168 = (168.0 * horizon / delta).ln();
    Ok(90.0 * b * l168.sqrt()
        + 52.0 * b * (l168 * (12.0 / delta).ln()).sqrt() / tau.sqrt()
        + 3.0 * b * (2.0 * (6.0 / delta).ln()).sqrt()
        + (24.0 * tau).sqrt())
}

/// `β₁ = (8B log T / ε) · log(3/δ) · √log(1.25 log T / δ_DP)`.
/// Only `δ > 0` is required here; `log(3/δ)` stays positive up to `δ = 3`.
pub fn beta1(epsilon: f64, delta_dp: f64, delta: f64, reward_bound: f64, horizon: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    if !(epsilon > 0.0) || !(reward_bound >= 0.0) {
        return Err(Error::invalid(format!(
            "beta1 needs epsilon > 0 and B >= 0 (got {epsilon}, {reward_bound})"
        )));
    }
    if !(delta_dp > 0.0 && delta_dp < 1.0) {
        return Err(Error::invalid(format!("delta_dp must lie in (0, 1), got {delta_dp}")));
    }
    let log_t = horizon.ln();
    let inner = 1.25 * log_t / delta_dp;
    if !(inner > 1.0) {
        return Err(Error::invalid(format!(
            "1.25 log T / delta_dp = {inner} must exceed 1"
        )));
    }
    Ok(8.0 * reward_bound * log_t / epsilon * (3.0 / delta).ln() * inner.ln().sqrt())
}

/// `β_{1,LDP} = √T_r · β₁`.
pub fn beta1_ldp(
    epoch_len: usize,
    epsilon: f64,
    delta_dp: f64,
    delta: f64,
    reward_bound: f64,
    horizon: f64,
) -> Result<f64> {
    Ok((epoch_len as f64).sqrt() * beta1(epsilon, delta_dp, delta, reward_bound, horizon)?)
}

/// `Δ_r = β σ̃_max + β₁ σ̃²_max`.
pub fn confidence_width(beta_v: f64, beta1_v: f64, sigma_max_sq: f64) -> f64 {
    beta_v * sigma_max_sq.max(0.0).sqrt() + beta1_v * sigma_max_sq.max(0.0)
}

/// Keeps `x` with `μ̂(c, x) >= max_{x'} μ̂(c, x') − 4Δ_r`, for an arbitrary
/// estimate `μ̂(c, x)`.
pub fn prune_with(
    active: &ActiveSets,
    delta_r: f64,
    mut estimate: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<ActiveSets> {
    if !(delta_r >= 0.0) {
        return Err(Error::invalid(format!("delta_r must be >= 0, got {delta_r}")));
    }
    let mut sets = Vec::with_capacity(active.num_contexts());
    for (c, set) in active.sets.iter().enumerate() {
        let values = set
            .iter()
            .map(|&x| estimate(c, x))
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite estimate in context {c}")));
        }
        let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = top - 4.0 * delta_r;
        sets.push(
            set.iter()
                .zip(&values)
                .filter(|(_, v)| **v >= threshold)
                .map(|(x, _)| *x)
                .collect(),
        );
    }
    Ok(ActiveSets { sets })
}

pub fn prune(est: &PrivateEstimator, grid: &Grid, active: &ActiveSets, delta_r: f64) -> Result<ActiveSets> {
    prune_with(active, delta_r, |c, x| est.predict(grid.point(c, x)))
}

/// Nominal epoch lengths `⌈√T⌉, 2⌈√T⌉, …` and the number of steps each one
/// actually gets; only the last can be cut short.
pub fn epoch_lengths(horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut len = (horizon as f64).sqrt().ceil() as usize;
    while len * len < horizon {
        len += 1;
    }
    let mut remaining = horizon;
    while remaining > 0 {
        let played = len.min(remaining);
        out.push((len, played));
        remaining -= played;
        len *= 2;
    }
    out
}

/// Draws `c ~ κ` then `x ~ Unif(X_r(c))`.
pub fn sample_query(dist: &ContextDistribution, grid: &Grid, active: &ActiveSets, rng: &mut impl Rng) -> Point {
    let c = dist.sample(rng);
    let x = select_action(active, c, rng);
    grid.point(c, x).clone()
}

/// `S` and `R`, each `T_r` i.i.d. queries, from two independent streams.
pub fn sample_projection_sets(
    dist: &ContextDistribution,
    grid: &Grid,
    active: &ActiveSets,
    epoch_len: usize,
    tau: f64,
    basis_rng: &mut impl Rng,
    surrogate_rng: &mut impl Rng,
) -> Result<ProjectionPair> {
    let basis = (0..epoch_len)
        .map(|_| sample_query(dist, grid, active, basis_rng))
        .collect();
    let surrogate = (0..epoch_len)
        .map(|_| sample_query(dist, grid, active, surrogate_rng))
        .collect();
    ProjectionPair::new(basis, surrogate, tau)
}

/// Reward-independent action choice: uniform over `X_r(c)`.
pub fn select_action(active: &ActiveSets, context: usize, rng: &mut impl Rng) -> usize {
    let set = active.get(context);
    set[rng.random_range(0..set.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRule {
    /// `width_scale · (β σ̃_max + β₁ σ̃²_max)`.
    Scaled(f64),
    /// Largest absolute error of the estimate over the current support,
    /// measured against the true reward. Needs ground truth.
    MeasuredError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub horizon: usize,
    pub tau: f64,
    /// `δ_ERR`.
    pub delta_err: f64,
    pub width: WidthRule,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.horizon < 4 {
            return Err(Error::invalid(format!("horizon must be at least 4, got {}", self.horizon)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        check_delta(self.delta_err)?;
        if let WidthRule::Scaled(s) = self.width {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("width scale must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based.
    pub t: usize,
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    pub inst_regret: f64,
    /// 1-based.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Nominal `T_r`.
    pub length: usize,
    pub steps: usize,
    pub completed: bool,
    /// `None` for a truncated final epoch, which does not prune.
    pub delta_r: Option<f64>,
    pub sigma_max_sq: f64,
    pub sigma0: f64,
    /// Privacy-noise vectors drawn during this epoch.
    pub noise_draws: usize,
    /// Information gain of the points played in this epoch.
    pub information_gain: f64,
    /// Mean instantaneous regret over the epoch.
    pub simple_regret: f64,
    /// `X_r` at the start of the epoch.
    pub active: ActiveSets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_active: ActiveSets,
    pub noise_draws: usize,
}

impl RegretLog {
    pub fn cumulative_regret(&self) -> Vec<f64> {
        self.steps
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s.inst_regret;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_regret(&self) -> f64 {
        self.steps.iter().map(|s| s.inst_regret).sum()
    }
}

/// What an observer sees at the start of every epoch, after `σ̃²_max` and
/// `σ₀` are fixed.
#[derive(Debug)]
pub struct EpochView<'a> {
    pub epoch: usize,
    pub length: usize,
    pub pair: &'a ProjectionPair,
    pub kernel: &'a ProjectedKernel,
    pub support: &'a [Point],
    pub sigma_max_sq: f64,
    pub sigma0: f64,
    pub active: &'a ActiveSets,
}

/// Independent random streams of one run, all derived from a single seed.
pub(crate) struct Streams {
    pub contexts: ChaCha8Rng,
    pub actions: ChaCha8Rng,
    pub observations: ChaCha8Rng,
    pub basis: ChaCha8Rng,
    pub surrogate: ChaCha8Rng,
    pub privacy: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Streams {
            contexts: stream(1),
            actions: stream(2),
            observations: stream(3),
            basis: stream(4),
            surrogate: stream(5),
            privacy: stream(6),
        }
    }
}

struct Epoch {
    index: usize,
    kernel: ProjectedKernel,
    accumulator: StatisticAccumulator,
    sigma_max_sq: f64,
    sigma0: f64,
    active: ActiveSets,
    played: Vec<Point>,
    regret_sum: f64,
    draws_at_start: usize,
}

pub fn run(
    env: &Environment,
    spec: &KernelSpec,
    privacy: &PrivacyParams,
    config: &RunConfig,
    seed: u64,
) -> Result<RegretLog> {
    run_observed(env, spec, privacy, config, seed, |_| Ok(()))
}

/// [`run`] with a callback at the start of every epoch.
pub fn run_observed(
    env: &Environment,
    spec: &KernelSpec,
    privacy: &PrivacyParams,
    config: &RunConfig,
    seed: u64,
    mut observer: impl FnMut(&EpochView<'_>) -> Result<()>,
) -> Result<RegretLog> {
    config.validate()?;
    if privacy.horizon != config.horizon {
        return Err(Error::invalid(format!(
            "privacy horizon {} differs from run horizon {}",
            privacy.horizon, config.horizon
        )));
    }
    let grid = env.grid();
    let bound = env.reward_bound();
    let horizon = config.horizon as f64;
    let delta = config.delta_err / (grid.size() as f64 * horizon * horizon.ln());
    let beta_v = beta(delta, bound, config.tau, horizon)?;
    let beta1_v = match privacy.mode {
        PrivacyMode::NonPrivate => 0.0,
        PrivacyMode::Jdp | PrivacyMode::Ldp => {
            beta1(privacy.epsilon, privacy.delta, delta, bound, horizon)?
        }
    };

    let mut streams = Streams::new(seed);
    let mut noise = GaussianNoise::new(streams.privacy.clone());
    let schedule = epoch_lengths(config.horizon);
    let best: Vec<f64> = (0..grid.num_contexts()).map(|c| env.best_value(c)).collect();

    let start_epoch = |index: usize,
                           length: usize,
                           active: ActiveSets,
                           streams: &mut Streams,
                           noise: &GaussianNoise,
                           observer: &mut dyn FnMut(&EpochView<'_>) -> Result<()>|
     -> Result<Epoch> {
        let pair = sample_projection_sets(
            env.context_distribution(),
            grid,
            &active,
            length,
            config.tau,
            &mut streams.basis,
            &mut streams.surrogate,
        )?;
        let kernel = ProjectedKernel::new(&pair, spec)?;
        let support = active.support(grid);
        let sigma_max_sq = kernel.max_projected_variance(&support)?;
        let sigma0 = privacy.sigma0(sigma_max_sq.sqrt(), bound)?;
        observer(&EpochView {
            epoch: index,
            length,
            pair: &pair,
            kernel: &kernel,
            support: &support,
            sigma_max_sq,
            sigma0,
            active: &active,
        })?;
        let accumulator = StatisticAccumulator::new(&kernel, privacy.mode, sigma0)?;
        Ok(Epoch {
            index,
            kernel,
            accumulator,
            sigma_max_sq,
            sigma0,
            active,
            played: Vec::with_capacity(length),
            regret_sum: 0.0,
            draws_at_start: noise.vector_draws(),
        })
    };

    let mut steps = Vec::with_capacity(config.horizon);
    let mut epochs = Vec::with_capacity(schedule.len());
    let mut active = ActiveSets::full(grid.num_contexts(), grid.num_actions())?;
    let mut t = 0usize;

    for (i, &(length, played)) in schedule.iter().enumerate() {
        let mut epoch = start_epoch(i + 1, length, active.clone(), &mut streams, &noise, &mut observer)?;
        for _ in 0..played {
            t += 1;
            let c = env.sample_context(&mut streams.contexts);
            let x = select_action(&epoch.active, c, &mut streams.actions);
            let y = env.observe(c, x, &mut streams.observations);
            let w = grid.point(c, x);
            epoch.accumulator.observe(&epoch.kernel, w, y, &mut noise)?;
            let inst_regret = best[c] - env.mean(c, x);
            epoch.played.push(w.clone());
            epoch.regret_sum += inst_regret;
            steps.push(StepRecord {
                t,
                context: c,
                action: x,
                reward: y,
                inst_regret,
                epoch: epoch.index,
            });
        }

        let completed = played == length;
        let delta_r = if completed {
            let current = &epoch.active;
            let est = epoch.accumulator.clone().finish(&epoch.kernel, &mut noise)?;
            let delta_r = match config.width {
                WidthRule::Scaled(s) => {
                    let b1 = match privacy.mode {
                        PrivacyMode::Ldp => (length as f64).sqrt() * beta1_v,
                        _ => beta1_v,
                    };
                    s * confidence_width(beta_v, b1, epoch.sigma_max_sq)
                }
                WidthRule::MeasuredError => {
                    let mut worst = 0.0f64;
                    for w in current.support(grid) {
                        let err = (est.predict(&w)? - env.mean(w.context, w.action)).abs();
                        worst = worst.max(err);
                    }
                    worst
                }
            };
            active = prune(&est, grid, current, delta_r)?;
            Some(delta_r)
        } else {
            None
        };

        epochs.push(EpochRecord {
            epoch: epoch.index,
            length,
            steps: played,
            completed,
            delta_r,
            sigma_max_sq: epoch.sigma_max_sq,
            sigma0: epoch.sigma0,
            noise_draws: noise.vector_draws() - epoch.draws_at_start,
            information_gain: information_gain(&epoch.played, config.tau, spec)?,
            simple_regret: epoch.regret_sum / played as f64,
            active: epoch.active,
        });
    }

    Ok(RegretLog {
        steps,
        epochs,
        final_active: active,
        noise_draws: noise.vector_draws(),
    })
}

/// Uniform-random baseline over the full action set. Shares the context and
/// observation streams with [`run`] for the same seed.
pub fn run_uniform(env: &Environment, horizon: usize, seed: u64) -> Result<RegretLog> {
    if horizon < 4 {
        return Err(Error::invalid(format!("horizon must be at least 4, got {horizon}")));
    }
    let grid = env.grid();
    let mut streams = Streams::new(seed);
    let active = ActiveSets::full(grid.num_contexts(), grid.num_actions())?;
    let best: Vec<f64> = (0..grid.num_contexts()).map(|c| env.best_value(c)).collect();
    let steps = (1..=horizon)
        .map(|t| {
            let c = env.sample_context(&mut streams.contexts);
            let x = select_action(&active, c, &mut streams.actions);
            let y = env.observe(c, x, &mut streams.observations);
            StepRecord {
                t,
                context: c,
                action: x,
                reward: y,
                inst_regret: best[c] - env.mean(c, x),
                epoch: 1,
            }
        })
        .collect();
    Ok(RegretLog {
        steps,
        epochs: Vec::new(),
        final_active: active,
        noise_draws: 0,
    })
}
