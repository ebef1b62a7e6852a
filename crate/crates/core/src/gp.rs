//! Non-private GP-model quantities: posterior mean and variance, information
//! gain, and an empirical covariance-concentration statistic for kernels with
//! explicit features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{explicit_features, gram, kernel_eval, kernel_vector, KernelSpec, Multiset, Point};
use crate::numerics::{inv_sqrt_psd, solve_regularized, spectral_norm, sym_eig, SymMatrix, DEFAULT_EIGEN_FLOOR};

/// Query points with their observed rewards, all bounded by `reward_bound`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    points: Vec<Point>,
    rewards: Vec<f64>,
    reward_bound: f64,
}

impl LabeledDataset {
    pub fn new(points: Vec<Point>, rewards: Vec<f64>, reward_bound: f64) -> Result<Self> {
        if points.len() != rewards.len() {
            return Err(Error::invalid(format!(
                "{} points but {} rewards",
                points.len(),
                rewards.len()
            )));
        }
        if !(reward_bound > 0.0) {
            return Err(Error::invalid(format!(
                "reward bound must be positive, got {reward_bound}"
            )));
        }
        if let Some(y) = rewards.iter().find(|y| !(y.abs() <= reward_bound)) {
            return Err(Error::invalid(format!(
                "reward {y} exceeds the bound {reward_bound}"
            )));
        }
        Ok(LabeledDataset {
            points,
            rewards,
            reward_bound,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau must be positive, got {tau}")))
    }
}

/// `μ(w) = k_W(w)ᵀ (τI + K_{W,W})⁻¹ y`; zero for an empty dataset.
pub fn posterior_mean(data: &LabeledDataset, tau: f64, spec: &KernelSpec, w: &Point) -> Result<f64> {
    check_tau(tau)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let k = gram(spec, data.points())?;
    let y = DVector::from_column_slice(data.rewards());
    let alpha = solve_regularized(&k, tau, &y)?;
    Ok(kernel_vector(spec, data.points(), w)?.dot(&alpha))
}

/// `σ²(w) = k(w,w) − k_W(w)ᵀ (τI + K_{W,W})⁻¹ k_W(w)`, clamped to `[0, k(w,w)]`.
pub fn posterior_variance(points: &[Point], tau: f64, spec: &KernelSpec, w: &Point) -> Result<f64> {
    check_tau(tau)?;
    let prior = kernel_eval(spec, w, w)?;
    if points.is_empty() {
        return Ok(prior);
    }
    let k = gram(spec, points)?;
    let kw = kernel_vector(spec, points, w)?;
    let x = solve_regularized(&k, tau, &kw)?;
    Ok((prior - kw.dot(&x)).clamp(0.0, prior))
}

/// `½ log det(I + τ⁻¹ K_{W,W})`.
///
/// Repeated points are folded together first: with multiplicities `D` over the
/// distinct points `U`, `det(I + K_WW/τ) = det(I + D^½ K_UU D^½ / τ)`.
pub fn information_gain(points: &[Point], tau: f64, spec: &KernelSpec) -> Result<f64> {
    check_tau(tau)?;
    if points.is_empty() {
        return Ok(0.0);
    }
    let ms = Multiset::new(points);
    let k = gram(spec, &ms.unique)?;
    let sqrt_counts: Vec<f64> = ms.counts.iter().map(|c| c.sqrt()).collect();
    let weighted = SymMatrix::from_fn(ms.len(), |i, j| sqrt_counts[i] * k[(i, j)] * sqrt_counts[j])?;
    let eig = sym_eig(&weighted)?;
    let gain = eig
        .values
        .iter()
        .map(|&l| (1.0 + l.max(0.0) / tau).ln())
        .sum::<f64>()
        * 0.5;
    Ok(gain.max(0.0))
}

/// Spectral deviation `‖Z^{-½} (Φ_R Φ_Rᵀ + τI) Z^{-½} − I‖₂` with
/// `Z = T·Λ + τI` and `Λ = E_{w∼ϱ}[φ(w)φ(w)ᵀ]` computed exactly from the
/// measure's support. `T` is the sample size; an empty sample leaves `R = τI`.
pub fn covariance_concentration_stat(
    spec: &KernelSpec,
    measure: &[(Point, f64)],
    sample: &[Point],
    tau: f64,
) -> Result<f64> {
    if !spec.is_finite_dimensional() {
        return Err(Error::Unsupported(
            "covariance concentration needs a kernel with explicit features".into(),
        ));
    }
    check_tau(tau)?;
    let (first, _) = measure
        .first()
        .ok_or_else(|| Error::invalid("measure has empty support"))?;
    let total: f64 = measure.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 || measure.iter().any(|(_, p)| *p < 0.0) {
        return Err(Error::invalid(format!(
            "measure probabilities must be nonnegative and sum to 1, got {total}"
        )));
    }
    let d = explicit_features(spec, first)?.len();

    let mut lambda = DMatrix::<f64>::zeros(d, d);
    for (w, p) in measure {
        let phi = explicit_features(spec, w)?;
        lambda += *p * &phi * phi.transpose();
    }
    let t = sample.len() as f64;
    let mut z = t * lambda;
    let mut r = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        z[(i, i)] += tau;
        r[(i, i)] += tau;
    }
    for w in sample {
        let phi = explicit_features(spec, w)?;
        r += &phi * phi.transpose();
    }
    let z_inv_sqrt = inv_sqrt_psd(&SymMatrix::new(z)?, DEFAULT_EIGEN_FLOOR)?;
    let zm = z_inv_sqrt.as_matrix();
    let mut dev = zm * r * zm;
    for i in 0..d {
        dev[(i, i)] -= 1.0;
    }
    spectral_norm(&SymMatrix::new(dev)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Point> {
        (0..n)
            .map(|i| Point::new(i, 0, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    fn se() -> KernelSpec {
        KernelSpec::squared_exponential(0.8).unwrap()
    }

    #[test]
    fn dataset_invariants() {
        let p = Point::new(0, 0, vec![0.0]).unwrap();
        assert!(LabeledDataset::new(vec![p.clone()], vec![], 1.0).is_err());
        assert!(LabeledDataset::new(vec![p.clone()], vec![1.5], 1.0).is_err());
        assert!(LabeledDataset::new(vec![p.clone()], vec![1.0], 0.0).is_err());
        assert!(LabeledDataset::new(vec![p], vec![-1.0], 1.0).is_ok());
    }

    #[test]
    fn posterior_mean_basic_cases() {
        let w = Point::new(0, 0, vec![0.1, 0.2]).unwrap();
        let empty = LabeledDataset::new(vec![], vec![], 1.0).unwrap();
        assert_eq!(posterior_mean(&empty, 1.0, &se(), &w).unwrap(), 0.0);

        let single = LabeledDataset::new(vec![w.clone()], vec![0.8], 1.0).unwrap();
        let mu = posterior_mean(&single, 1.0, &se(), &w).unwrap();
        assert!((mu - 0.4).abs() < 1e-15);
        assert!(posterior_mean(&single, 0.0, &se(), &w).is_err());
        assert!(posterior_mean(&single, -1.0, &se(), &w).is_err());
    }

    #[test]
    fn posterior_mean_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts = random_points(15, 2, &mut rng);
        let ys: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = LabeledDataset::new(pts.clone(), ys.clone(), 1.0).unwrap();
        let tau = 0.3;
        let mut k = kernel_matrix(&se(), &pts, &pts).unwrap();
        for i in 0..15 {
            k[(i, i)] += tau;
        }
        let inv = k.try_inverse().unwrap();
        let alpha = inv * DVector::from_vec(ys);
        for probe in random_points(10, 2, &mut rng) {
            let expected = kernel_vector(&se(), &pts, &probe).unwrap().dot(&alpha);
            let got = posterior_mean(&data, tau, &se(), &probe).unwrap();
            assert!((expected - got).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rewards_give_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(12, 3, &mut rng);
        let data = LabeledDataset::new(pts, vec![0.0; 12], 1.0).unwrap();
        for probe in random_points(5, 3, &mut rng) {
            assert_eq!(posterior_mean(&data, 1.0, &se(), &probe).unwrap(), 0.0);
        }
    }

    #[test]
    fn posterior_variance_basic_cases() {
        let w = Point::new(0, 0, vec![0.5]).unwrap();
        assert_eq!(posterior_variance(&[], 1.0, &se(), &w).unwrap(), 1.0);
        let v = posterior_variance(std::slice::from_ref(&w), 1.0, &se(), &w).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(posterior_variance(&[], 0.0, &se(), &w).is_err());
    }

    #[test]
    fn adding_points_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let probes = random_points(20, 2, &mut rng);
        let mut pts = Vec::new();
        let mut prev: Vec<f64> = probes
            .iter()
            .map(|p| posterior_variance(&pts, 0.5, &se(), p).unwrap())
            .collect();
        for extra in random_points(15, 2, &mut rng) {
            pts.push(extra);
            for (p, before) in probes.iter().zip(prev.iter_mut()) {
                let now = posterior_variance(&pts, 0.5, &se(), p).unwrap();
                assert!(now <= *before + 1e-10);
                assert!(now >= 0.0);
                *before = now;
            }
        }
    }

    #[test]
    fn information_gain_closed_forms() {
        let w = Point::new(0, 0, vec![0.0, 0.0]).unwrap();
        let one = information_gain(std::slice::from_ref(&w), 1.0, &se()).unwrap();
        assert!((one - 0.5 * 2.0_f64.ln()).abs() < 1e-15);
        assert!((one - 0.346574).abs() < 1e-6);
        let two = information_gain(&[w.clone(), w], 1.0, &se()).unwrap();
        assert!((two - 0.5 * 3.0_f64.ln()).abs() < 1e-14);
        assert_eq!(information_gain(&[], 1.0, &se()).unwrap(), 0.0);
    }

    #[test]
    fn information_gain_matches_dense_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut pts = random_points(30, 2, &mut rng);
        // Include duplicates so the folded path is exercised.
        pts.push(pts[3].clone());
        pts.push(pts[3].clone());
        pts.push(pts[17].clone());
        let tau = 0.7;
        let k = gram(&se(), &pts).unwrap();
        let eig = sym_eig(&k).unwrap();
        let dense: f64 = eig.values.iter().map(|l| (1.0 + l.max(0.0) / tau).ln()).sum::<f64>() * 0.5;
        let got = information_gain(&pts, tau, &se()).unwrap();
        assert!((dense - got).abs() < 1e-9, "{dense} vs {got}");
    }

    #[test]
    fn information_gain_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let all = random_points(25, 2, &mut rng);
        let mut prev = 0.0;
        for n in 1..=all.len() {
            let g = information_gain(&all[..n], 1.0, &se()).unwrap();
            assert!(g >= prev - 1e-10);
            prev = g;
        }
    }

    fn basis_points(d: usize) -> Vec<Point> {
        (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                Point::new(i, 0, e).unwrap()
            })
            .collect()
    }

    #[test]
    fn concentration_is_zero_for_a_point_mass() {
        let pts = basis_points(3);
        let spec = KernelSpec::normalized_linear(&pts).unwrap();
        let measure = vec![(pts[1].clone(), 1.0)];
        let sample = vec![pts[1].clone(); 16];
        let stat = covariance_concentration_stat(&spec, &measure, &sample, 1.0).unwrap();
        assert!(stat.abs() < 1e-12);
    }

    #[test]
    fn concentration_with_empty_sample_by_hand() {
        // Λ = diag(0.5, 0.25, 0.25), T = 0 -> Z = τI and R = τI, deviation 0.
        let pts = basis_points(3);
        let spec = KernelSpec::normalized_linear(&pts).unwrap();
        let measure = vec![(pts[0].clone(), 0.5), (pts[1].clone(), 0.25), (pts[2].clone(), 0.25)];
        let stat = covariance_concentration_stat(&spec, &measure, &[], 2.0).unwrap();
        assert!(stat.abs() < 1e-14);

        // Two samples of e_0 with τ = 1: Z = diag(2·0.5+1, 2·0.25+1, 2·0.25+1) = diag(2, 1.5, 1.5),
        // R = diag(3, 1, 1); Z^{-½} R Z^{-½} - I = diag(1/2, -1/3, -1/3) -> norm 1/2.
        let sample = vec![pts[0].clone(), pts[0].clone()];
        let stat = covariance_concentration_stat(&spec, &measure, &sample, 1.0).unwrap();
        assert!((stat - 0.5).abs() < 1e-12, "{stat}");
    }

    #[test]
    fn concentration_rejects_bad_inputs() {
        let pts = basis_points(2);
        let lin = KernelSpec::normalized_linear(&pts).unwrap();
        let bad_measure = vec![(pts[0].clone(), 0.4)];
        assert!(covariance_concentration_stat(&lin, &bad_measure, &[], 1.0).is_err());
        let measure = vec![(pts[0].clone(), 1.0)];
        assert!(matches!(
            covariance_concentration_stat(&se(), &measure, &[], 1.0),
            Err(Error::Unsupported(_))
        ));
    }
}
