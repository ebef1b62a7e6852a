//! Private projected kernel-ridge estimator.
//!
//! Given a projection basis `S` and an independent covariance surrogate `R`
//! (both i.i.d. copies of the query distribution), the estimator is
//!
//! ```text
//! μ̂(w) = k_S(w)ᵀ M^{-½} (M^{-½} K_{S,W} y + z),    M = K_{S,R} K_{R,S} + τ K_{S,S}
//! ```
//!
//! with Gaussian noise `z` added once per estimator (JDP) or once per data
//! point before accumulation (LDP).
//!
//! [`ProjectedKernel`] factorizes everything that depends only on `(S, R)`.
//! Both sets are folded onto their distinct points first. Writing `C` for the
//! `|U| x |S|` selection matrix of the distinct basis points `U` and
//! `D = C Cᵀ` for their multiplicities, `M = Cᵀ M_U C` with
//! `M_U = K_{U,R} K_{R,U} + τ K_{U,U}`. The nonzero spectrum of `M` is that of
//! `N = D^½ M_U D^½`, and `k_S(w) = Cᵀ k_U(w)` lies in the range of `Cᵀ`, so
//! `M^{-½}` is applied exactly through `N` on `|U|` coordinates. Directions of
//! `M` that are null (duplicated basis points, or a finite-dimensional kernel)
//! are mapped to zero, i.e. the pseudo-inverse square root.
//!
//! The projected variance is evaluated through a second, independent route:
//! the `R`-side form `(k(w,w) − k_Sᵀ V k_S) / τ` with
//! `V = K_SS⁻¹ K_SR (τI + K_RS K_SS⁻¹ K_SR)⁻¹ K_RS K_SS⁻¹`, written with
//! Nyström features `f(w) = Σ^{-½} Pᵀ k_U(w)` of `K_UU = P Σ Pᵀ` so that no
//! `K_SS⁻¹` is ever formed explicitly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::LabeledDataset;
use crate::kernels::{kernel_eval, kernel_matrix, kernel_vector, KernelSpec, Multiset, Point};
use crate::numerics::{sym_eig, SymMatrix, DEFAULT_EIGEN_FLOOR};

/// Projection basis `S` and covariance surrogate `R`, of equal size.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    basis: Vec<Point>,
    surrogate: Vec<Point>,
    tau: f64,
}

/// Relative rank cutoff for `N`. `N` carries the squared conditioning of the
/// basis Gram matrix, so eigenvalues below this fraction of the largest have
/// too few correct digits to invert.
pub const OPERATOR_RANK_TOLERANCE: f64 = 1e-8;

impl ProjectionPair {
    pub fn new(basis: Vec<Point>, surrogate: Vec<Point>, tau: f64) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::invalid("projection basis is empty"));
        }
        if basis.len() != surrogate.len() {
            return Err(Error::invalid(format!(
                "projection basis has {} points, surrogate has {}",
                basis.len(),
                surrogate.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        Ok(ProjectionPair {
            basis,
            surrogate,
            tau,
        })
    }

    pub fn basis(&self) -> &[Point] {
        &self.basis
    }

    pub fn surrogate(&self) -> &[Point] {
        &self.surrogate
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    #[serde(rename = "nonprivate")]
    NonPrivate,
    Jdp,
    Ldp,
}

impl std::fmt::Display for PrivacyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrivacyMode::NonPrivate => "nonprivate",
            PrivacyMode::Jdp => "jdp",
            PrivacyMode::Ldp => "ldp",
        })
    }
}

/// `(ε, δ)` budget, privacy mode and horizon `T`. `ε = +∞` is accepted and
/// yields a zero noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub mode: PrivacyMode,
    pub horizon: usize,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64, mode: PrivacyMode, horizon: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
        }
        if horizon < 2 {
            return Err(Error::invalid(format!("horizon must be at least 2, got {horizon}")));
        }
        Ok(PrivacyParams {
            epsilon,
            delta,
            mode,
            horizon,
        })
    }

    /// Noise scale for this budget, zero when not private.
    pub fn sigma0(&self, sigma_max: f64, reward_bound: f64) -> Result<f64> {
        match self.mode {
            PrivacyMode::NonPrivate => Ok(0.0),
            PrivacyMode::Jdp | PrivacyMode::Ldp => noise_scale(
                sigma_max,
                reward_bound,
                self.horizon as f64,
                self.epsilon,
                self.delta,
            ),
        }
    }
}

/// Gaussian-mechanism scale
/// `σ₀ = σ̃_max · (4B log T / ε) · √(log(1.25 log T / δ))`, natural logs.
pub fn noise_scale(sigma_max: f64, reward_bound: f64, horizon: f64, epsilon: f64, delta_dp: f64) -> Result<f64> {
    if !(sigma_max >= 0.0) || !(reward_bound > 0.0) || !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "noise scale needs sigma_max >= 0, B > 0, epsilon > 0 (got {sigma_max}, {reward_bound}, {epsilon})"
        )));
    }
    if !(delta_dp > 0.0 && delta_dp < 1.0) {
        return Err(Error::invalid(format!("delta_dp must lie in (0, 1), got {delta_dp}")));
    }
    let log_t = horizon.ln();
    let inner = 1.25 * log_t / delta_dp;
    if !(inner > 1.0) {
        return Err(Error::invalid(format!(
            "1.25 log T / delta_dp = {inner} must exceed 1 (T = {horizon}, delta_dp = {delta_dp})"
        )));
    }
    Ok(sigma_max * (4.0 * reward_bound * log_t / epsilon) * inner.ln().sqrt())
}

/// Precomputed operators for one `(S, R, τ)` under a kernel.
#[derive(Debug, Clone)]
pub struct ProjectedKernel {
    spec: KernelSpec,
    tau: f64,
    basis: Vec<Point>,
    folded: Multiset,
    sqrt_counts: Vec<f64>,
    /// `Σ^{-½} Pᵀ` for the retained eigenpairs of `K_UU`.
    nystrom: DMatrix<f64>,
    /// `F̃ᵀ (τI + F̃ F̃ᵀ)⁻¹ F̃` with `F̃` the count-weighted Nyström features of `R`.
    surrogate_form: DMatrix<f64>,
    /// `N^{+½}` on the folded coordinates.
    half_inverse: DMatrix<f64>,
    /// `M_U⁺ = D^½ N⁺ D^½`.
    m_pinv: DMatrix<f64>,
}

impl ProjectedKernel {
    pub fn new(pair: &ProjectionPair, spec: &KernelSpec) -> Result<Self> {
        let tau = pair.tau();
        let folded = Multiset::new(pair.basis());
        let surrogate = Multiset::new(pair.surrogate());
        let m = folded.len();

        let k_uu = SymMatrix::new(kernel_matrix(spec, &folded.unique, &folded.unique)?)?;
        let k_vu = kernel_matrix(spec, &surrogate.unique, &folded.unique)?;

        // Nyström map of span(S).
        let eig_uu = sym_eig(&k_uu)?;
        let cutoff = DEFAULT_EIGEN_FLOOR * eig_uu.max_value().max(0.0);
        let kept: Vec<usize> = (0..m).filter(|&j| eig_uu.values[j] > cutoff).collect();
        let rank = kept.len();
        if rank == 0 {
            return Err(Error::InvalidMatrix("projection basis Gram matrix is zero".into()));
        }
        let nystrom = DMatrix::from_fn(rank, m, |a, i| {
            let j = kept[a];
            eig_uu.vectors[(i, j)] / eig_uu.values[j].sqrt()
        });

        // R-side form: F̃ = D_R^½ K_VU (Σ^{-½} Pᵀ)ᵀ, |V| x rank.
        let sqrt_r: Vec<f64> = surrogate.counts.iter().map(|c| c.sqrt()).collect();
        let mut f_r = &k_vu * nystrom.transpose();
        for (v, s) in sqrt_r.iter().enumerate() {
            f_r.row_mut(v).scale_mut(*s);
        }
        let mut inner = &f_r * f_r.transpose();
        for i in 0..inner.nrows() {
            inner[(i, i)] += tau;
        }
        let inner_inv = sym_eig(&SymMatrix::new(inner)?)?.map_spectrum(|l| 1.0 / l);
        let surrogate_form = symmetrize(f_r.transpose() * inner_inv * &f_r);

        // S-side operator: N = D^½ (K_UR K_RU + τ K_UU) D^½.
        let sqrt_counts: Vec<f64> = folded.counts.iter().map(|c| c.sqrt()).collect();
        let mut k_vu_weighted = k_vu.clone();
        for (v, c) in surrogate.counts.iter().enumerate() {
            k_vu_weighted.row_mut(v).scale_mut(*c);
        }
        let m_u = k_vu.transpose() * k_vu_weighted + tau * k_uu.as_matrix();
        let n = SymMatrix::from_fn(m, |i, j| sqrt_counts[i] * m_u[(i, j)] * sqrt_counts[j])?;
        let eig_n = sym_eig(&n)?;
        let half_inverse = eig_n.pseudo_power(-0.5, OPERATOR_RANK_TOLERANCE);
        let n_pinv = eig_n.pseudo_power(-1.0, OPERATOR_RANK_TOLERANCE);
        let m_pinv = DMatrix::from_fn(m, m, |i, j| sqrt_counts[i] * n_pinv[(i, j)] * sqrt_counts[j]);

        Ok(ProjectedKernel {
            spec: *spec,
            tau,
            basis: pair.basis().to_vec(),
            folded,
            sqrt_counts,
            nystrom,
            surrogate_form,
            half_inverse,
            m_pinv,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn basis(&self) -> &[Point] {
        &self.basis
    }

    /// `|S|`, the dimension of statistics and weights.
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Number of distinct basis points.
    pub fn distinct_basis_points(&self) -> usize {
        self.folded.len()
    }

    fn k_u(&self, w: &Point) -> Result<DVector<f64>> {
        kernel_vector(&self.spec, &self.folded.unique, w)
    }

    /// `σ̃²(w) = (k(w,w) − k_S(w)ᵀ V k_S(w)) / τ`, clamped at zero.
    pub fn projected_variance(&self, w: &Point) -> Result<f64> {
        let kww = kernel_eval(&self.spec, w, w)?;
        let f = &self.nystrom * self.k_u(w)?;
        let explained = f.dot(&(&self.surrogate_form * &f));
        Ok(((kww - explained) / self.tau).max(0.0))
    }

    /// Largest projected variance over a finite support.
    pub fn max_projected_variance(&self, support: &[Point]) -> Result<f64> {
        if support.is_empty() {
            return Err(Error::invalid("support is empty"));
        }
        let mut best = f64::NEG_INFINITY;
        for w in support {
            best = best.max(self.projected_variance(w)?);
        }
        Ok(best)
    }

    /// `y · M^{-½} k_S(w)`, a vector of length `|S|`.
    pub fn per_point_statistic(&self, w: &Point, y: f64) -> Result<DVector<f64>> {
        let mut q = self.k_u(w)?;
        for (j, s) in self.sqrt_counts.iter().enumerate() {
            q[j] *= s;
        }
        let reduced = &self.half_inverse * q;
        Ok(self.lift(&reduced, y))
    }

    /// Applies `M^{-½}` to a vector of length `|S|`.
    pub fn apply_half_inverse(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector has length {}, expected {}",
                g.len(),
                self.dim()
            )));
        }
        let mut q = DVector::zeros(self.folded.len());
        for (i, &j) in self.folded.group.iter().enumerate() {
            q[j] += g[i];
        }
        for (j, s) in self.sqrt_counts.iter().enumerate() {
            q[j] /= s;
        }
        let reduced = &self.half_inverse * q;
        Ok(self.lift(&reduced, 1.0))
    }

    /// `Qᵀ x` scaled by `y`: basis point `i` in group `j` gets `y · x_j / √c_j`.
    fn lift(&self, reduced: &DVector<f64>, y: f64) -> DVector<f64> {
        let scaled: Vec<f64> = reduced
            .iter()
            .zip(&self.sqrt_counts)
            .map(|(x, s)| y * x / s)
            .collect();
        DVector::from_iterator(
            self.folded.group.len(),
            self.folded.group.iter().map(|&j| scaled[j]),
        )
    }

    /// Coefficients on the distinct basis points of the noiseless projected
    /// mean `k_S(w)ᵀ M⁻¹ K_{S,W} y`.
    fn projected_mean_coefficients(&self, data: &LabeledDataset) -> Result<DVector<f64>> {
        let mut b = DVector::zeros(self.folded.len());
        for (w, y) in data.points().iter().zip(data.rewards()) {
            b += self.k_u(w)? * *y;
        }
        Ok(&self.m_pinv * b)
    }

    /// `k_S(w)ᵀ (K_SR K_RS + τ K_SS)⁻¹ K_{S,W} y`.
    pub fn nonprivate_projected_mean(&self, data: &LabeledDataset, w: &Point) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        Ok(self.k_u(w)?.dot(&self.projected_mean_coefficients(data)?))
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// `σ̃²(w)` for a projection pair. Builds the operators on every call; use
/// [`ProjectedKernel`] directly when evaluating many points.
pub fn projected_variance(pair: &ProjectionPair, spec: &KernelSpec, w: &Point) -> Result<f64> {
    ProjectedKernel::new(pair, spec)?.projected_variance(w)
}

pub fn max_projected_variance(pair: &ProjectionPair, spec: &KernelSpec, support: &[Point]) -> Result<f64> {
    ProjectedKernel::new(pair, spec)?.max_projected_variance(support)
}

pub fn per_point_statistic(pair: &ProjectionPair, spec: &KernelSpec, w: &Point, y: f64) -> Result<DVector<f64>> {
    ProjectedKernel::new(pair, spec)?.per_point_statistic(w, y)
}

pub fn nonprivate_projected_mean(
    data: &LabeledDataset,
    pair: &ProjectionPair,
    spec: &KernelSpec,
    w: &Point,
) -> Result<f64> {
    ProjectedKernel::new(pair, spec)?.nonprivate_projected_mean(data, w)
}

/// Source of privatization noise. Counts every vector it hands out so noise
/// schedules can be audited.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
    vector_draws: usize,
}

impl GaussianNoise {
    pub fn new(rng: ChaCha8Rng) -> Self {
        GaussianNoise {
            rng,
            vector_draws: 0,
        }
    }

    /// One vector of i.i.d. `N(0, std²)` coordinates.
    pub fn draw(&mut self, dim: usize, std: f64) -> DVector<f64> {
        self.vector_draws += 1;
        let rng = &mut self.rng;
        DVector::from_fn(dim, |_, _| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn vector_draws(&self) -> usize {
        self.vector_draws
    }
}

/// Client-side LDP privatization: the only value derived from `(w, y)` that
/// leaves the client.
pub fn ldp_upload(
    kernel: &ProjectedKernel,
    w: &Point,
    y: f64,
    sigma0: f64,
    noise: &mut GaussianNoise,
) -> Result<DVector<f64>> {
    let stat = kernel.per_point_statistic(w, y)?;
    let dim = stat.len();
    Ok(stat + noise.draw(dim, sigma0))
}

/// Running sum of per-point statistics for one estimator.
#[derive(Debug, Clone)]
pub struct StatisticAccumulator {
    mode: PrivacyMode,
    sigma0: f64,
    sum: DVector<f64>,
    steps: usize,
    noise_draws: usize,
}

impl StatisticAccumulator {
    pub fn new(kernel: &ProjectedKernel, mode: PrivacyMode, sigma0: f64) -> Result<Self> {
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::invalid(format!("noise scale must be finite and >= 0, got {sigma0}")));
        }
        let sigma0 = if mode == PrivacyMode::NonPrivate { 0.0 } else { sigma0 };
        Ok(StatisticAccumulator {
            mode,
            sigma0,
            sum: DVector::zeros(kernel.dim()),
            steps: 0,
            noise_draws: 0,
        })
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sum(&self) -> &DVector<f64> {
        &self.sum
    }

    /// Adds one observation. Under LDP the statistic is privatized by
    /// [`ldp_upload`] before it reaches the sum.
    pub fn observe(
        &mut self,
        kernel: &ProjectedKernel,
        w: &Point,
        y: f64,
        noise: &mut GaussianNoise,
    ) -> Result<()> {
        match self.mode {
            PrivacyMode::Ldp => {
                let upload = ldp_upload(kernel, w, y, self.sigma0, noise)?;
                self.accept_upload(upload)
            }
            PrivacyMode::Jdp | PrivacyMode::NonPrivate => {
                let stat = kernel.per_point_statistic(w, y)?;
                self.sum += stat;
                self.steps += 1;
                Ok(())
            }
        }
    }

    /// Server side of LDP: accumulates an already privatized upload.
    pub fn accept_upload(&mut self, upload: DVector<f64>) -> Result<()> {
        if self.mode != PrivacyMode::Ldp {
            return Err(Error::invalid("uploads are only accepted in LDP mode"));
        }
        if upload.len() != self.sum.len() {
            return Err(Error::invalid(format!(
                "upload has length {}, expected {}",
                upload.len(),
                self.sum.len()
            )));
        }
        self.sum += upload;
        self.steps += 1;
        self.noise_draws += 1;
        Ok(())
    }

    /// Closes the accumulator: adds the single JDP noise vector if needed and
    /// applies the second `M^{-½}`.
    pub fn finish(mut self, kernel: &ProjectedKernel, noise: &mut GaussianNoise) -> Result<PrivateEstimator> {
        if self.mode == PrivacyMode::Jdp {
            self.sum += noise.draw(self.sum.len(), self.sigma0);
            self.noise_draws += 1;
        }
        let weights = kernel.apply_half_inverse(&self.sum)?;
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("estimator weights are not finite".into()));
        }
        Ok(PrivateEstimator {
            basis: kernel.basis().to_vec(),
            spec: *kernel.spec(),
            weights,
            sigma0: self.sigma0,
            noise_draw_count: self.noise_draws,
        })
    }
}

/// `μ̂(w) = k_S(w) · v`.
#[derive(Debug, Clone)]
pub struct PrivateEstimator {
    basis: Vec<Point>,
    spec: KernelSpec,
    weights: DVector<f64>,
    sigma0: f64,
    noise_draw_count: usize,
}

impl PrivateEstimator {
    /// An estimator with explicit weights and no noise accounting.
    pub fn from_weights(basis: Vec<Point>, spec: KernelSpec, weights: DVector<f64>) -> Result<Self> {
        if basis.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} basis points but {} weights",
                basis.len(),
                weights.len()
            )));
        }
        Ok(PrivateEstimator {
            basis,
            spec,
            weights,
            sigma0: 0.0,
            noise_draw_count: 0,
        })
    }

    pub fn predict(&self, w: &Point) -> Result<f64> {
        let mut acc = 0.0;
        for (s, v) in self.basis.iter().zip(self.weights.iter()) {
            acc += kernel_eval(&self.spec, s, w)? * v;
        }
        Ok(acc)
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn basis(&self) -> &[Point] {
        &self.basis
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn noise_draw_count(&self) -> usize {
        self.noise_draw_count
    }
}

fn check_batch(kernel: &ProjectedKernel, data: &LabeledDataset) -> Result<()> {
    if data.len() != kernel.dim() {
        return Err(Error::invalid(format!(
            "dataset has {} points but the projection sets have {}",
            data.len(),
            kernel.dim()
        )));
    }
    Ok(())
}

/// JDP estimator: sum of per-point statistics plus one noise vector with
/// per-coordinate scale `σ₀`. `NonPrivate` mode is accepted and adds no noise.
pub fn assemble_jdp(
    kernel: &ProjectedKernel,
    data: &LabeledDataset,
    privacy: &PrivacyParams,
    sigma_max: f64,
    noise: &mut GaussianNoise,
) -> Result<PrivateEstimator> {
    if privacy.mode == PrivacyMode::Ldp {
        return Err(Error::invalid("assemble_jdp called with LDP parameters"));
    }
    check_batch(kernel, data)?;
    let sigma0 = privacy.sigma0(sigma_max, data.reward_bound())?;
    let mut acc = StatisticAccumulator::new(kernel, privacy.mode, sigma0)?;
    for (w, y) in data.points().iter().zip(data.rewards()) {
        acc.observe(kernel, w, *y, noise)?;
    }
    acc.finish(kernel, noise)
}

/// LDP estimator: every per-point statistic is privatized with its own noise
/// vector of scale `σ₀` before accumulation. `NonPrivate` mode is accepted.
pub fn assemble_ldp(
    kernel: &ProjectedKernel,
    data: &LabeledDataset,
    privacy: &PrivacyParams,
    sigma_max: f64,
    noise: &mut GaussianNoise,
) -> Result<PrivateEstimator> {
    if privacy.mode == PrivacyMode::Jdp {
        return Err(Error::invalid("assemble_ldp called with JDP parameters"));
    }
    check_batch(kernel, data)?;
    let sigma0 = privacy.sigma0(sigma_max, data.reward_bound())?;
    let mut acc = StatisticAccumulator::new(kernel, privacy.mode, sigma0)?;
    for (w, y) in data.points().iter().zip(data.rewards()) {
        acc.observe(kernel, w, *y, noise)?;
    }
    acc.finish(kernel, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn se() -> KernelSpec {
        KernelSpec::squared_exponential(1.0).unwrap()
    }

    fn p(c: usize, e: &[f64]) -> Point {
        Point::new(c, 0, e.to_vec()).unwrap()
    }

    fn noise(seed: u64) -> GaussianNoise {
        GaussianNoise::new(ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn pair_invariants() {
        let w = p(0, &[0.0]);
        assert!(ProjectionPair::new(vec![], vec![], 1.0).is_err());
        assert!(ProjectionPair::new(vec![w.clone()], vec![], 1.0).is_err());
        assert!(ProjectionPair::new(vec![w.clone()], vec![w.clone()], 0.0).is_err());
        assert!(ProjectionPair::new(vec![w.clone()], vec![w], 1.0).is_ok());
    }

    #[test]
    fn single_point_closed_forms() {
        let w = p(0, &[0.3, 0.1]);
        let pair = ProjectionPair::new(vec![w.clone()], vec![w.clone()], 1.0).unwrap();
        let k = ProjectedKernel::new(&pair, &se()).unwrap();
        assert!((k.projected_variance(&w).unwrap() - 0.5).abs() < 1e-15);
        let g = k.per_point_statistic(&w, 1.0).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g[0] - 0.5_f64.sqrt()).abs() < 1e-15);
        assert!((g.norm() - k.projected_variance(&w).unwrap().sqrt()).abs() < 1e-15);
        assert_eq!(k.per_point_statistic(&w, 0.0).unwrap()[0], 0.0);

        let data = LabeledDataset::new(vec![w.clone()], vec![1.0], 1.0).unwrap();
        assert!((k.nonprivate_projected_mean(&data, &w).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_query_keeps_prior_variance() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            p(i, &v)
        };
        let grid = vec![e(0), e(1), e(2)];
        let lin = KernelSpec::normalized_linear(&grid).unwrap();
        let pair = ProjectionPair::new(vec![e(0), e(1)], vec![e(0), e(1)], 0.5).unwrap();
        let k = ProjectedKernel::new(&pair, &lin).unwrap();
        assert!((k.projected_variance(&e(2)).unwrap() - 1.0 / 0.5).abs() < 1e-14);
    }

    #[test]
    fn max_variance_semantics() {
        let pts: Vec<Point> = (0..5).map(|i| p(i, &[i as f64 * 0.4])).collect();
        let pair = ProjectionPair::new(pts[..2].to_vec(), pts[1..3].to_vec(), 1.0).unwrap();
        let k = ProjectedKernel::new(&pair, &se()).unwrap();
        let max = k.max_projected_variance(&pts).unwrap();
        for w in &pts {
            assert!(max >= k.projected_variance(w).unwrap());
        }
        assert_eq!(
            k.max_projected_variance(&pts[3..4]).unwrap(),
            k.projected_variance(&pts[3]).unwrap()
        );
        assert!(k.max_projected_variance(&[]).is_err());
    }

    #[test]
    fn noise_scale_formula() {
        let e = std::f64::consts::E;
        assert_eq!(noise_scale(0.0, 1.0, 1024.0, 1.0, 0.01).unwrap(), 0.0);
        let s = noise_scale(1.0, 1.0, e, 4.0, 1.25 / e).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let a = noise_scale(0.3, 1.0, 500.0, 2.0, 0.05).unwrap();
        let b = noise_scale(0.3, 2.0, 500.0, 2.0, 0.05).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(noise_scale(1.0, 1.0, 2.0, 1.0, 0.9).is_err());
        assert_eq!(noise_scale(1.0, 1.0, 100.0, f64::INFINITY, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn privacy_params_validation() {
        assert!(PrivacyParams::new(0.0, 0.1, PrivacyMode::Jdp, 100).is_err());
        assert!(PrivacyParams::new(1.0, 1.0, PrivacyMode::Jdp, 100).is_err());
        assert!(PrivacyParams::new(1.0, 0.1, PrivacyMode::Jdp, 1).is_err());
        let nonprivate = PrivacyParams::new(1.0, 0.1, PrivacyMode::NonPrivate, 100).unwrap();
        assert_eq!(nonprivate.sigma0(0.7, 1.0).unwrap(), 0.0);
    }

    fn small_instance() -> (ProjectedKernel, LabeledDataset) {
        let pts: Vec<Point> = (0..6).map(|i| p(i, &[i as f64 * 0.3, 0.1])).collect();
        let s = vec![pts[0].clone(), pts[2].clone(), pts[2].clone(), pts[5].clone()];
        let r = vec![pts[1].clone(), pts[3].clone(), pts[4].clone(), pts[4].clone()];
        let pair = ProjectionPair::new(s, r, 1.0).unwrap();
        let data = LabeledDataset::new(
            vec![pts[0].clone(), pts[1].clone(), pts[3].clone(), pts[5].clone()],
            vec![0.5, -0.2, 0.9, -1.0],
            1.0,
        )
        .unwrap();
        (ProjectedKernel::new(&pair, &se()).unwrap(), data)
    }

    #[test]
    fn noise_accounting_per_mode() {
        let (k, data) = small_instance();
        let jdp = PrivacyParams::new(1.0, 0.1, PrivacyMode::Jdp, 64).unwrap();
        let ldp = PrivacyParams::new(1.0, 0.1, PrivacyMode::Ldp, 64).unwrap();
        let off = PrivacyParams::new(1.0, 0.1, PrivacyMode::NonPrivate, 64).unwrap();

        let mut n = noise(1);
        let est = assemble_jdp(&k, &data, &jdp, 0.3, &mut n).unwrap();
        assert_eq!(est.noise_draw_count(), 1);
        assert_eq!(n.vector_draws(), 1);

        let mut n = noise(1);
        let est = assemble_ldp(&k, &data, &ldp, 0.3, &mut n).unwrap();
        assert_eq!(est.noise_draw_count(), data.len());
        assert_eq!(n.vector_draws(), data.len());

        let mut n = noise(1);
        let est = assemble_jdp(&k, &data, &off, 0.3, &mut n).unwrap();
        assert_eq!(est.noise_draw_count(), 0);
        assert_eq!(est.sigma0(), 0.0);
        assert_eq!(n.vector_draws(), 0);

        assert!(assemble_jdp(&k, &data, &ldp, 0.3, &mut noise(0)).is_err());
        assert!(assemble_ldp(&k, &data, &jdp, 0.3, &mut noise(0)).is_err());
    }

    #[test]
    fn assembly_is_deterministic_under_a_seed() {
        let (k, data) = small_instance();
        let jdp = PrivacyParams::new(1.0, 0.1, PrivacyMode::Jdp, 64).unwrap();
        let a = assemble_jdp(&k, &data, &jdp, 0.3, &mut noise(42)).unwrap();
        let b = assemble_jdp(&k, &data, &jdp, 0.3, &mut noise(42)).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn zero_rewards_without_noise_predict_zero() {
        let (k, data) = small_instance();
        let zero = LabeledDataset::new(data.points().to_vec(), vec![0.0; 4], 1.0).unwrap();
        let off = PrivacyParams::new(1.0, 0.1, PrivacyMode::NonPrivate, 64).unwrap();
        let est = assemble_jdp(&k, &zero, &off, 0.3, &mut noise(0)).unwrap();
        assert!(est.weights().iter().all(|v| *v == 0.0));
        for w in data.points() {
            assert_eq!(est.predict(w).unwrap(), 0.0);
        }
    }

    #[test]
    fn infinite_epsilon_recovers_the_projected_mean() {
        let (k, data) = small_instance();
        let jdp = PrivacyParams::new(f64::INFINITY, 0.1, PrivacyMode::Jdp, 64).unwrap();
        let est = assemble_jdp(&k, &data, &jdp, 0.3, &mut noise(3)).unwrap();
        assert_eq!(est.noise_draw_count(), 1);
        for i in 0..8 {
            let w = p(i, &[i as f64 * 0.2, 0.0]);
            let a = est.predict(&w).unwrap();
            let b = k.nonprivate_projected_mean(&data, &w).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn ldp_with_zero_noise_matches_jdp_with_zero_noise() {
        let (k, data) = small_instance();
        let ldp = PrivacyParams::new(f64::INFINITY, 0.1, PrivacyMode::Ldp, 64).unwrap();
        let jdp = PrivacyParams::new(f64::INFINITY, 0.1, PrivacyMode::Jdp, 64).unwrap();
        let a = assemble_ldp(&k, &data, &ldp, 0.3, &mut noise(1)).unwrap();
        let b = assemble_jdp(&k, &data, &jdp, 0.3, &mut noise(2)).unwrap();
        assert!((a.weights() - b.weights()).norm() < 1e-12);
    }

    #[test]
    fn ldp_replay_matches_recorded_noise() {
        let (k, data) = small_instance();
        let sigma0 = 0.25;
        let mut acc = StatisticAccumulator::new(&k, PrivacyMode::Ldp, sigma0).unwrap();
        let mut live = noise(9);
        for (w, y) in data.points().iter().zip(data.rewards()) {
            acc.observe(&k, w, *y, &mut live).unwrap();
        }
        // Replay the same noise stream by hand.
        let mut replay = noise(9);
        let mut expected = DVector::zeros(k.dim());
        let mut recorded = DVector::zeros(k.dim());
        for (w, y) in data.points().iter().zip(data.rewards()) {
            expected += k.per_point_statistic(w, *y).unwrap();
            recorded += replay.draw(k.dim(), sigma0);
        }
        assert!((acc.sum() - (expected + recorded)).norm() < 1e-12);
        assert_eq!(acc.steps(), data.len());
    }

    #[test]
    fn predict_is_linear_in_weights() {
        let (k, _) = small_instance();
        let basis = k.basis().to_vec();
        let a = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![-0.7, 0.2, 0.1, 1.5]);
        let ea = PrivateEstimator::from_weights(basis.clone(), se(), a.clone()).unwrap();
        let eb = PrivateEstimator::from_weights(basis.clone(), se(), b.clone()).unwrap();
        let eab = PrivateEstimator::from_weights(basis.clone(), se(), a + b).unwrap();
        let w = p(9, &[0.4, 0.4]);
        let lhs = eab.predict(&w).unwrap();
        let rhs = ea.predict(&w).unwrap() + eb.predict(&w).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let mut e1 = DVector::zeros(4);
        e1[0] = 1.0;
        let unit = PrivateEstimator::from_weights(basis.clone(), se(), e1).unwrap();
        let other = PrivateEstimator::from_weights(basis.clone(), se(), DVector::zeros(4)).unwrap();
        assert_eq!(other.predict(&w).unwrap(), 0.0);
        // Basis point 0 is distinct from the rest, k(s_0, s_0) = 1.
        assert_eq!(unit.predict(&basis[0]).unwrap(), 1.0);
    }

    #[test]
    fn batch_size_must_match_projection_size() {
        let (k, data) = small_instance();
        let short = LabeledDataset::new(data.points()[..2].to_vec(), vec![0.1, 0.2], 1.0).unwrap();
        let off = PrivacyParams::new(1.0, 0.1, PrivacyMode::NonPrivate, 64).unwrap();
        assert!(assemble_jdp(&k, &short, &off, 0.3, &mut noise(0)).is_err());
    }
}
