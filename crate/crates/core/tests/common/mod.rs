#![allow(dead_code)]

use capri::kernels::{kernel_eval, KernelSpec, Point};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_points(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|i| Point::new(i, 0, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

pub fn kmat(spec: &KernelSpec, a: &[Point], b: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel_eval(spec, &a[i], &b[j]).unwrap())
}

pub fn kvec(spec: &KernelSpec, s: &[Point], w: &Point) -> DVector<f64> {
    DVector::from_fn(s.len(), |i, _| kernel_eval(spec, &s[i], w).unwrap())
}

/// Moore-Penrose inverse through the SVD, dropping singular values below
/// `rel · σ_max`.
pub fn pinv(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.pseudo_inverse(rel * smax).unwrap()
}

/// `(1/τ)(k(w,w) − k_Sᵀ V k_S)` with
/// `V = K⁺ K_SR (τI + K_RS K⁺ K_SR)⁻¹ K_RS K⁺`, evaluated literally.
pub fn dense_projected_variance(spec: &KernelSpec, s: &[Point], r: &[Point], tau: f64, w: &Point) -> f64 {
    let k_ss_pinv = pinv(&kmat(spec, s, s), 1e-12);
    let k_sr = kmat(spec, s, r);
    let k_rs = k_sr.transpose();
    let inner = DMatrix::identity(r.len(), r.len()) * tau + &k_rs * &k_ss_pinv * &k_sr;
    let v = &k_ss_pinv * &k_sr * inner.try_inverse().unwrap() * &k_rs * &k_ss_pinv;
    let ks = kvec(spec, s, w);
    (kernel_eval(spec, w, w).unwrap() - ks.dot(&(&v * &ks))) / tau
}

/// `k_Sᵀ (K_SR K_RS + τ K_SS)⁺ K_SW y`.
pub fn dense_projected_mean(
    spec: &KernelSpec,
    s: &[Point],
    r: &[Point],
    tau: f64,
    data: &[Point],
    y: &[f64],
    w: &Point,
) -> f64 {
    let k_sr = kmat(spec, s, r);
    let m = &k_sr * k_sr.transpose() + kmat(spec, s, s) * tau;
    let rhs = kmat(spec, s, data) * DVector::from_column_slice(y);
    kvec(spec, s, w).dot(&(pinv(&m, 1e-12) * rhs))
}

/// Explicit features `e / √Z` of the normalized linear kernel, one column per
/// point, with `Z` the largest squared norm among `all`.
pub fn linear_features(points: &[Point], all: &[Point]) -> DMatrix<f64> {
    let z = all
        .iter()
        .map(|p| p.embedding().iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let d = points[0].dim();
    DMatrix::from_fn(d, points.len(), |i, j| points[j].embedding()[i] / z.sqrt())
}

/// Orthogonal projector onto the column span of `phi`.
pub fn span_projector(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = phi.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let mut p = DMatrix::zeros(phi.nrows(), phi.nrows());
    for (k, sv) in svd.singular_values.iter().enumerate() {
        if *sv > 1e-12 * smax {
            let col = u.column(k);
            p += col * col.transpose();
        }
    }
    p
}

/// `A = P_S Φ_R Φ_Rᵀ P_S + τI` in feature space.
pub fn feature_operator(phi_s: &DMatrix<f64>, phi_r: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = span_projector(phi_s);
    let d = phi_s.nrows();
    let a = &p * phi_r * phi_r.transpose() * &p + DMatrix::identity(d, d) * tau;
    (a, p)
}

/// `φ(w)ᵀ A⁻¹ φ(w)`.
pub fn feature_variance(a: &DMatrix<f64>, phi_w: &DVector<f64>) -> f64 {
    phi_w.dot(&(a.clone().try_inverse().unwrap() * phi_w))
}

/// `φ(w)ᵀ A⁻¹ P_S Φ_W y`.
pub fn feature_mean(a: &DMatrix<f64>, p: &DMatrix<f64>, phi_data: &DMatrix<f64>, y: &[f64], phi_w: &DVector<f64>) -> f64 {
    let rhs = p * phi_data * DVector::from_column_slice(y);
    phi_w.dot(&(a.clone().try_inverse().unwrap() * rhs))
}
