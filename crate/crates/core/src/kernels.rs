//! Kernels on the joint context-action space.
//!
//! A [`Point`] is a grid cell `(context, action)` carrying the concatenation of
//! the context and action embeddings. All kernels are normalized so that
//! `k(w, w) <= 1`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SymMatrix;

/// A context-action pair `w = (c, x)` with its joint embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub context: usize,
    pub action: usize,
    embedding: Arc<[f64]>,
}

impl Point {
    pub fn new(context: usize, action: usize, embedding: Vec<f64>) -> Result<Self> {
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point embedding has a non-finite coordinate"));
        }
        Ok(Point {
            context,
            action,
            embedding: embedding.into(),
        })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    /// Bit pattern of the embedding, used to group exact duplicates.
    pub(crate) fn embedding_key(&self) -> Vec<u64> {
        self.embedding.iter().map(|v| v.to_bits()).collect()
    }
}

/// Matérn smoothness. Only the half-integer cases with closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternNu {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[serde(rename = "2.5")]
    FiveHalves,
}

impl MaternNu {
    pub fn from_value(nu: f64) -> Result<Self> {
        match nu {
            0.5 => Ok(MaternNu::Half),
            1.5 => Ok(MaternNu::ThreeHalves),
            2.5 => Ok(MaternNu::FiveHalves),
            other => Err(Error::Unsupported(format!(
                "Matern nu must be one of 0.5, 1.5, 2.5; got {other}"
            ))),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    SquaredExponential,
    Matern(MaternNu),
    /// `k(u, v) = <u, v> / Z` where `Z` is the largest squared embedding norm
    /// over the instance grid. Finite-dimensional, with an explicit feature map.
    NormalizedLinear { norm_sq_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Ignored by [`KernelFamily::NormalizedLinear`].
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn squared_exponential(lengthscale: f64) -> Result<Self> {
        check_lengthscale(lengthscale)?;
        Ok(KernelSpec {
            family: KernelFamily::SquaredExponential,
            lengthscale,
        })
    }

    pub fn matern(nu: MaternNu, lengthscale: f64) -> Result<Self> {
        check_lengthscale(lengthscale)?;
        Ok(KernelSpec {
            family: KernelFamily::Matern(nu),
            lengthscale,
        })
    }

    /// Normalized linear kernel whose normalizer is the largest squared norm
    /// among `grid`.
    pub fn normalized_linear<'a>(grid: impl IntoIterator<Item = &'a Point>) -> Result<Self> {
        let z = grid
            .into_iter()
            .map(|p| p.embedding().iter().map(|v| v * v).sum::<f64>())
            .fold(0.0_f64, f64::max);
        if !(z > 0.0) {
            return Err(Error::invalid(
                "normalized linear kernel needs at least one nonzero embedding",
            ));
        }
        Ok(KernelSpec {
            family: KernelFamily::NormalizedLinear { norm_sq_max: z },
            lengthscale: 1.0,
        })
    }

    pub fn is_finite_dimensional(&self) -> bool {
        matches!(self.family, KernelFamily::NormalizedLinear { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamilyName {
    SquaredExponential,
    Matern,
    NormalizedLinear,
}

/// Serializable kernel choice (`kernel.family`, `kernel.lengthscale`,
/// `kernel.nu`). `nu` is required for Matérn and must be `null` otherwise;
/// `lengthscale` is ignored by the normalized linear kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamilyName,
    pub lengthscale: f64,
    pub nu: Option<f64>,
}

impl KernelConfig {
    /// Resolves the config against a grid; the grid is only consulted for the
    /// normalized linear kernel's normalizer.
    pub fn to_spec(&self, grid: &[Point]) -> Result<KernelSpec> {
        match (self.family, self.nu) {
            (KernelFamilyName::SquaredExponential, None) => {
                KernelSpec::squared_exponential(self.lengthscale)
            }
            (KernelFamilyName::Matern, Some(nu)) => {
                KernelSpec::matern(MaternNu::from_value(nu)?, self.lengthscale)
            }
            (KernelFamilyName::Matern, None) => {
                Err(Error::invalid("matern kernel needs nu"))
            }
            (KernelFamilyName::NormalizedLinear, None) => KernelSpec::normalized_linear(grid),
            (_, Some(_)) => Err(Error::invalid("nu is only meaningful for the matern kernel")),
        }
    }
}

fn check_lengthscale(l: f64) -> Result<()> {
    if l > 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("lengthscale must be positive, got {l}")))
    }
}

fn check_dims(u: &Point, v: &Point) -> Result<()> {
    if u.dim() == v.dim() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "embedding dimension mismatch: {} vs {}",
            u.dim(),
            v.dim()
        )))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Matérn kernel as a function of distance `r`, unit variance.
pub fn matern_profile(nu: MaternNu, r: f64, lengthscale: f64) -> f64 {
    let s = r / lengthscale;
    match nu {
        MaternNu::Half => (-s).exp(),
        MaternNu::ThreeHalves => {
            let a = 3.0_f64.sqrt() * s;
            (1.0 + a) * (-a).exp()
        }
        MaternNu::FiveHalves => {
            let a = 5.0_f64.sqrt() * s;
            (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, u: &Point, v: &Point) -> Result<f64> {
    check_dims(u, v)?;
    Ok(eval_unchecked(spec, u.embedding(), v.embedding()))
}

fn eval_unchecked(spec: &KernelSpec, u: &[f64], v: &[f64]) -> f64 {
    match spec.family {
        KernelFamily::SquaredExponential => {
            (-sq_dist(u, v) / (2.0 * spec.lengthscale * spec.lengthscale)).exp()
        }
        KernelFamily::Matern(nu) => matern_profile(nu, sq_dist(u, v).sqrt(), spec.lengthscale),
        KernelFamily::NormalizedLinear { norm_sq_max } => {
            u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm_sq_max
        }
    }
}

fn check_list(points: &[Point], what: &str) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} point list is empty")))?;
    let d = first.dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(Error::invalid(format!("{what} points have mixed dimensions")));
    }
    Ok(d)
}

/// `[k(a_i, b_j)]`, an `|A| x |B|` matrix.
pub fn kernel_matrix(spec: &KernelSpec, a: &[Point], b: &[Point]) -> Result<DMatrix<f64>> {
    let da = check_list(a, "left")?;
    let db = check_list(b, "right")?;
    if da != db {
        return Err(Error::invalid(format!("embedding dimension mismatch: {da} vs {db}")));
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        eval_unchecked(spec, a[i].embedding(), b[j].embedding())
    }))
}

/// Symmetric Gram matrix `K_{A,A}`.
pub fn gram(spec: &KernelSpec, a: &[Point]) -> Result<SymMatrix> {
    SymMatrix::new(kernel_matrix(spec, a, a)?)
}

/// `k_S(w) = [k(s_1, w), ..., k(s_n, w)]`.
pub fn kernel_vector(spec: &KernelSpec, s: &[Point], w: &Point) -> Result<DVector<f64>> {
    let d = check_list(s, "basis")?;
    if d != w.dim() {
        return Err(Error::invalid(format!(
            "embedding dimension mismatch: {d} vs {}",
            w.dim()
        )));
    }
    Ok(DVector::from_iterator(
        s.len(),
        s.iter().map(|p| eval_unchecked(spec, p.embedding(), w.embedding())),
    ))
}

/// Feature map `φ(w)` with `φ(u)·φ(v) = k(u, v)`; only the normalized linear
/// kernel has one in finite dimension.
pub fn explicit_features(spec: &KernelSpec, w: &Point) -> Result<DVector<f64>> {
    match spec.family {
        KernelFamily::NormalizedLinear { norm_sq_max } => {
            let scale = norm_sq_max.sqrt();
            Ok(DVector::from_iterator(
                w.dim(),
                w.embedding().iter().map(|v| v / scale),
            ))
        }
        _ => Err(Error::Unsupported(
            "explicit features exist only for the normalized linear kernel".into(),
        )),
    }
}

/// Distinct points of a list together with their multiplicities.
///
/// Projection and data sets drawn from a finite grid repeat points heavily;
/// every Gram-matrix quantity in this crate factors through the distinct
/// points, which keeps the dense algebra at grid size instead of sample size.
#[derive(Debug, Clone)]
pub(crate) struct Multiset {
    pub unique: Vec<Point>,
    pub counts: Vec<f64>,
    /// `group[i]` is the index in `unique` of the i-th input point.
    pub group: Vec<usize>,
}

impl Multiset {
    pub fn new(points: &[Point]) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut unique = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut group = Vec::with_capacity(points.len());
        for p in points {
            let id = *index.entry(p.embedding_key()).or_insert_with(|| {
                unique.push(p.clone());
                counts.push(0.0);
                unique.len() - 1
            });
            counts[id] += 1.0;
            group.push(id);
        }
        Multiset {
            unique,
            counts,
            group,
        }
    }

    pub fn len(&self) -> usize {
        self.unique.len()
    }
}
