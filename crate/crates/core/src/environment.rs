//! Synthetic contextual-bandit environments on a finite context x action grid.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, kernel_eval, KernelConfig, KernelSpec, Point};

/// Finite grid `C x X` with real embeddings for every context and action.
#[derive(Debug, Clone)]
pub struct Grid {
    contexts: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    points: Vec<Point>,
}

impl Grid {
    pub fn new(contexts: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        if contexts.is_empty() || actions.is_empty() {
            return Err(Error::invalid("grid needs at least one context and one action"));
        }
        let dc = contexts[0].len();
        let da = actions[0].len();
        if contexts.iter().any(|c| c.len() != dc) || actions.iter().any(|a| a.len() != da) {
            return Err(Error::invalid("grid embeddings have mixed dimensions"));
        }
        let mut points = Vec::with_capacity(contexts.len() * actions.len());
        for (c, ce) in contexts.iter().enumerate() {
            for (x, ae) in actions.iter().enumerate() {
                let mut e = ce.clone();
                e.extend_from_slice(ae);
                points.push(Point::new(c, x, e)?);
            }
        }
        Ok(Grid {
            contexts,
            actions,
            points,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    /// `|W| = |C| · |X|`.
    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn point(&self, context: usize, action: usize) -> &Point {
        &self.points[context * self.actions.len() + action]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn context_embeddings(&self) -> &[Vec<f64>] {
        &self.contexts
    }

    pub fn action_embeddings(&self) -> &[Vec<f64>] {
        &self.actions
    }
}

/// Categorical context distribution `κ`, sampled by inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDistribution {
    probabilities: Vec<f64>,
    cdf: Vec<f64>,
}

impl ContextDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::invalid("context distribution is empty"));
        }
        if probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("context probabilities must be finite and nonnegative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "context probabilities sum to {total}, expected 1"
            )));
        }
        let cdf = probabilities
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(ContextDistribution { probabilities, cdf })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("context distribution is empty"));
        }
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let last_positive = self
            .probabilities
            .iter()
            .rposition(|p| *p > 0.0)
            .unwrap_or(self.probabilities.len() - 1);
        self.cdf
            .iter()
            .zip(&self.probabilities)
            .position(|(c, p)| *p > 0.0 && u < *c)
            .unwrap_or(last_positive)
    }
}

/// `f(w) = Σ_j α_j k(w, z_j)` with RKHS norm at most `norm_bound`.
#[derive(Debug, Clone)]
pub struct RkhsReward {
    spec: KernelSpec,
    centers: Vec<Point>,
    coefficients: Vec<f64>,
    norm_bound: f64,
}

impl RkhsReward {
    pub fn eval(&self, w: &Point) -> Result<f64> {
        let mut acc = 0.0;
        for (z, a) in self.centers.iter().zip(&self.coefficients) {
            acc += a * kernel_eval(&self.spec, w, z)?;
        }
        Ok(acc)
    }

    /// `√(αᵀ K α)`.
    pub fn rkhs_norm(&self) -> Result<f64> {
        rkhs_norm(&self.spec, &self.centers, &self.coefficients)
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }
}

fn rkhs_norm(spec: &KernelSpec, centers: &[Point], coeffs: &[f64]) -> Result<f64> {
    let k = gram(spec, centers)?;
    let n = centers.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += coeffs[i] * k[(i, j)] * coeffs[j];
        }
    }
    Ok(q.max(0.0).sqrt())
}

/// Builds a kernel expansion and rescales its coefficients so that the RKHS
/// norm is `min(B, original norm)`.
pub fn make_rkhs_reward(
    spec: &KernelSpec,
    centers: Vec<Point>,
    raw_coeffs: Vec<f64>,
    bound: f64,
) -> Result<RkhsReward> {
    if centers.is_empty() || centers.len() != raw_coeffs.len() {
        return Err(Error::invalid(format!(
            "{} centers but {} coefficients",
            centers.len(),
            raw_coeffs.len()
        )));
    }
    if !(bound > 0.0) {
        return Err(Error::invalid(format!("reward bound must be positive, got {bound}")));
    }
    if raw_coeffs.iter().all(|a| *a == 0.0) {
        return Err(Error::DegenerateReward("all coefficients are zero".into()));
    }
    let norm = rkhs_norm(spec, &centers, &raw_coeffs)?;
    if !(norm > 0.0) {
        return Err(Error::DegenerateReward("reward function has zero RKHS norm".into()));
    }
    let scale = if norm > bound { bound / norm } else { 1.0 };
    Ok(RkhsReward {
        spec: *spec,
        centers,
        coefficients: raw_coeffs.into_iter().map(|a| a * scale).collect(),
        norm_bound: bound,
    })
}

/// `y = f(w) + η` with `η ~ Unif[−s(B − |f(w)|), s(B − |f(w)|)]`, so that
/// `|y| <= B` always. `noise_scale = s ∈ [0, 1]`; zero disables the noise.
pub fn observe(f: &RkhsReward, w: &Point, noise_scale: f64, rng: &mut impl Rng) -> Result<f64> {
    let mean = f.eval(w)?;
    Ok(noisy_reward(mean, f.norm_bound(), noise_scale, rng))
}

fn noisy_reward(mean: f64, bound: f64, noise_scale: f64, rng: &mut impl Rng) -> f64 {
    let half_width = noise_scale * (bound - mean.abs()).max(0.0);
    let eta = if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    };
    (mean + eta).clamp(-bound, bound)
}

/// Exhaustive argmax of `values` over `actions`; ties go to the smallest id.
pub fn best_of(values: impl Fn(usize) -> f64, actions: &[usize]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &x in actions {
        let v = values(x);
        best = match best {
            Some((bx, bv)) if bv > v || (bv == v && bx < x) => Some((bx, bv)),
            _ => Some((x, v)),
        };
    }
    best.ok_or_else(|| Error::invalid("action set is empty"))
}

/// A full bandit instance: grid, context distribution, reward function and
/// observation noise level, with `f` tabulated over the grid.
#[derive(Debug, Clone)]
pub struct Environment {
    grid: Grid,
    contexts: ContextDistribution,
    reward: RkhsReward,
    noise_scale: f64,
    means: Vec<f64>,
}

impl Environment {
    pub fn new(grid: Grid, contexts: ContextDistribution, reward: RkhsReward, noise_scale: f64) -> Result<Self> {
        if contexts.len() != grid.num_contexts() {
            return Err(Error::invalid(format!(
                "context distribution has {} entries for {} contexts",
                contexts.len(),
                grid.num_contexts()
            )));
        }
        if !(0.0..=1.0).contains(&noise_scale) {
            return Err(Error::invalid(format!("noise scale must lie in [0, 1], got {noise_scale}")));
        }
        let means = grid
            .points()
            .iter()
            .map(|w| reward.eval(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Environment {
            grid,
            contexts,
            reward,
            noise_scale,
            means,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn context_distribution(&self) -> &ContextDistribution {
        &self.contexts
    }

    pub fn reward(&self) -> &RkhsReward {
        &self.reward
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward.norm_bound()
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    /// `f(c, x)`.
    pub fn mean(&self, context: usize, action: usize) -> f64 {
        self.means[context * self.grid.num_actions() + action]
    }

    pub fn sample_context(&self, rng: &mut impl Rng) -> usize {
        self.contexts.sample(rng)
    }

    pub fn observe(&self, context: usize, action: usize, rng: &mut impl Rng) -> f64 {
        noisy_reward(self.mean(context, action), self.reward_bound(), self.noise_scale, rng)
    }

    /// `argmax_{x ∈ actions} f(c, x)`, ties to the smallest action id.
    pub fn best_action(&self, context: usize, actions: &[usize]) -> Result<(usize, f64)> {
        best_of(|x| self.mean(context, x), actions)
    }

    /// `max_x f(c, x)` over every action.
    pub fn best_value(&self, context: usize) -> f64 {
        (0..self.grid.num_actions())
            .map(|x| self.mean(context, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_instance_file(&self, kernel: &KernelConfig, seed: u64) -> InstanceFile {
        InstanceFile {
            seed,
            kernel: kernel.clone(),
            context_embeddings: self.grid.contexts.clone(),
            action_embeddings: self.grid.actions.clone(),
            context_probabilities: self.contexts.probabilities.clone(),
            centers: self
                .reward
                .centers
                .iter()
                .map(|p| p.embedding().to_vec())
                .collect(),
            coefficients: self.reward.coefficients.clone(),
            reward_bound: self.reward.norm_bound,
            noise_scale: self.noise_scale,
        }
    }

    pub fn from_instance_file(file: &InstanceFile) -> Result<Self> {
        let grid = Grid::new(file.context_embeddings.clone(), file.action_embeddings.clone())?;
        let spec = file.kernel.to_spec(grid.points())?;
        let centers = file
            .centers
            .iter()
            .map(|e| Point::new(usize::MAX, usize::MAX, e.clone()))
            .collect::<Result<Vec<_>>>()?;
        // Stored coefficients already satisfy the norm bound; keep them verbatim.
        let norm = rkhs_norm(&spec, &centers, &file.coefficients)?;
        if norm > file.reward_bound * (1.0 + 1e-9) {
            return Err(Error::invalid(format!(
                "stored reward has RKHS norm {norm} above its bound {}",
                file.reward_bound
            )));
        }
        let reward = RkhsReward {
            spec,
            centers,
            coefficients: file.coefficients.clone(),
            norm_bound: file.reward_bound,
        };
        Environment::new(
            grid,
            ContextDistribution::new(file.context_probabilities.clone())?,
            reward,
            file.noise_scale,
        )
    }
}

/// Everything needed to rebuild an [`Environment`] bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub seed: u64,
    pub kernel: KernelConfig,
    pub context_embeddings: Vec<Vec<f64>>,
    pub action_embeddings: Vec<Vec<f64>>,
    pub context_probabilities: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub reward_bound: f64,
    pub noise_scale: f64,
}

impl InstanceFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// How [`generate_instance`] lays out a random environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub contexts: usize,
    pub actions: usize,
    pub context_dim: usize,
    pub action_dim: usize,
    /// Embedding coordinates are drawn uniformly from `[0, embedding_scale]`.
    pub embedding_scale: f64,
    /// `null` for a uniform `κ`.
    pub context_weights: Option<Vec<f64>>,
    /// Number of grid points used as kernel-expansion centers of `f`.
    pub reward_centers: usize,
    /// RKHS norm of `f`, at most `reward_bound`.
    pub reward_norm: f64,
    pub reward_bound: f64,
    /// Observation noise level in `[0, 1]`.
    pub noise_scale: f64,
}

/// Draws a random instance from `seed`: embeddings, reward centers (distinct
/// grid points) and Gaussian coefficients rescaled to `reward_norm`.
pub fn generate_instance(spec: &InstanceSpec, kernel: &KernelConfig, seed: u64) -> Result<Environment> {
    if spec.contexts == 0 || spec.actions == 0 {
        return Err(Error::invalid("instance needs at least one context and one action"));
    }
    if !(spec.reward_norm > 0.0 && spec.reward_norm <= spec.reward_bound) {
        return Err(Error::invalid(format!(
            "reward norm {} must lie in (0, reward bound {}]",
            spec.reward_norm, spec.reward_bound
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |n: usize, d: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * spec.embedding_scale).collect())
            .collect()
    };
    let contexts = draw(spec.contexts, spec.context_dim, &mut rng);
    let actions = draw(spec.actions, spec.action_dim, &mut rng);
    let grid = Grid::new(contexts, actions)?;
    let kspec = kernel.to_spec(grid.points())?;

    let n_centers = spec.reward_centers.clamp(1, grid.size());
    let mut center_ids = sample_indices(&mut rng, grid.size(), n_centers).into_vec();
    center_ids.sort_unstable();
    let centers: Vec<Point> = center_ids.iter().map(|&i| grid.points()[i].clone()).collect();
    let raw: Vec<f64> = (0..n_centers).map(|_| rng.sample(StandardNormal)).collect();
    let raw_norm = rkhs_norm(&kspec, &centers, &raw)?;
    if !(raw_norm > 0.0) {
        return Err(Error::DegenerateReward("random reward has zero RKHS norm".into()));
    }
    let scaled = raw.iter().map(|a| a * spec.reward_norm / raw_norm).collect();
    let reward = make_rkhs_reward(&kspec, centers, scaled, spec.reward_bound)?;

    let kappa = match &spec.context_weights {
        Some(w) => {
            if w.len() != spec.contexts {
                return Err(Error::invalid(format!(
                    "{} context weights for {} contexts",
                    w.len(),
                    spec.contexts
                )));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::invalid("context weights must have a positive sum"));
            }
            ContextDistribution::new(w.iter().map(|v| v / total).collect())?
        }
        None => ContextDistribution::uniform(spec.contexts)?,
    };
    Environment::new(grid, kappa, reward, spec.noise_scale)
}
