//! von Mises-Fisher primitives on the unit sphere `S^{d-1}`.
//!
//! Everything works in log space. `C_d(kappa)` is the normalizer of the density
//! `C_d(kappa) exp(kappa mu^T z)` and `A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)`
//! is the mean resultant length.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::special::{bessel_ratio, log_bessel_i};

const UNIT_TOLERANCE: f64 = 1e-9;
const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// A point on `S^{d-1}` with `d >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    coords: Vec<f64>,
}

impl UnitVector {
    /// Wraps coordinates that are already unit norm (within 1e-9).
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::domain(format!(
                "unit vectors need at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("unit vector has non-finite coordinates"));
        }
        let norm = norm(&coords);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::domain(format!("vector norm {norm} is not 1")));
        }
        Ok(Self { coords })
    }

    /// Scales `coords` onto the sphere.
    pub fn normalize(mut coords: Vec<f64>) -> Result<Self> {
        let n = norm(&coords);
        if !(n.is_finite() && n > 1e-300) {
            return Err(Error::Degenerate(format!("cannot normalize vector of norm {n}")));
        }
        coords.iter_mut().for_each(|c| *c /= n);
        Self::new(coords)
    }

    /// The `axis`-th standard basis vector of dimension `dim`.
    pub fn basis(dim: usize, axis: usize) -> Result<Self> {
        if axis >= dim {
            return Err(Error::Shape {
                expected: dim,
                actual: axis + 1,
            });
        }
        let mut coords = vec![0.0; dim];
        coords[axis] = 1.0;
        Self::new(coords)
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.coords
    }

    pub fn dot(&self, other: &UnitVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.coords, &other.coords))
    }
}

/// Mean direction and concentration of one vMF distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    pub mu: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self> {
        validate_kappa(kappa)?;
        Ok(Self { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn validate_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("concentration must be positive and finite, got {kappa}")))
    }
}

fn validate_dim(d: usize) -> Result<()> {
    if d >= 2 {
        Ok(())
    } else {
        Err(Error::domain(format!("sphere dimension d must be >= 2, got {d}")))
    }
}

/// `log Area(S^{d-1}) = log(2 pi^{d/2} / Gamma(d/2))`.
pub fn log_sphere_area(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    std::f64::consts::LN_2 + half * std::f64::consts::PI.ln() - libm::lgamma(half)
}

/// `log C_d(kappa) = (d/2 - 1) log kappa - (d/2) log 2 pi - log I_{d/2-1}(kappa)`.
pub fn log_norm_const(d: usize, kappa: f64) -> Result<f64> {
    validate_dim(d)?;
    validate_kappa(kappa)?;
    let order = d as f64 / 2.0 - 1.0;
    Ok(order * kappa.ln() - (d as f64 / 2.0) * LOG_2PI - log_bessel_i(order, kappa)?)
}

/// Mean resultant length `A_d(kappa)`, in (0, 1) and increasing in kappa.
pub fn mean_resultant(d: usize, kappa: f64) -> Result<f64> {
    validate_dim(d)?;
    validate_kappa(kappa)?;
    bessel_ratio(d as f64 / 2.0 - 1.0, kappa)
}

/// `dA_d/dkappa = 1 - A^2 - (d - 1) A / kappa`.
pub fn mean_resultant_derivative(d: usize, kappa: f64) -> Result<f64> {
    let a = mean_resultant(d, kappa)?;
    Ok(1.0 - a * a - (d as f64 - 1.0) * a / kappa)
}

/// `log C_d(kappa) + kappa mu^T z`.
pub fn log_density(params: &VmfParams, z: &UnitVector) -> Result<f64> {
    let cos = params.mu.dot(z)?;
    Ok(log_norm_const(params.dim(), params.kappa)? + params.kappa * cos)
}

/// Differential entropy `-log C_d(kappa) - kappa A_d(kappa)`.
pub fn entropy(d: usize, kappa: f64) -> Result<f64> {
    Ok(-log_norm_const(d, kappa)? - kappa * mean_resultant(d, kappa)?)
}

/// `KL(p || q) = log(C_d(kp) / C_d(kq)) + A_d(kp) (kp - kq mu_p^T mu_q)`.
pub fn kl_divergence(p: &VmfParams, q: &VmfParams) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let d = p.dim();
    let cos = p.mu.dot(&q.mu)?;
    let log_ratio = log_norm_const(d, p.kappa)? - log_norm_const(d, q.kappa)?;
    Ok(log_ratio + mean_resultant(d, p.kappa)? * (p.kappa - q.kappa * cos))
}

/// Draws `count` samples with Wood's rejection scheme for the cosine to the
/// mean direction and a uniform tangent direction for the rest.
pub fn sample(params: &VmfParams, count: usize, seed: u64) -> Result<Vec<UnitVector>> {
    if count == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    let mut rng = rng::seeded(seed);
    sample_with(params, count, &mut rng)
}

pub(crate) fn sample_with<R: Rng + ?Sized>(
    params: &VmfParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<UnitVector>> {
    let d = params.dim();
    let kappa = params.kappa;
    let dm1 = d as f64 - 1.0;
    // b = (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1), written without cancellation
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0)
        .map_err(|e| Error::Numerical(format!("beta sampler: {e}")))?;
    let mu = params.mu.as_slice();

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        let tangent = loop {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&v, mu);
            v.iter_mut().zip(mu).for_each(|(x, m)| *x -= along * m);
            let n = norm(&v);
            if n > 1e-12 {
                v.iter_mut().for_each(|x| *x /= n);
                break v;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let coords: Vec<f64> = mu.iter().zip(&tangent).map(|(m, t)| w * m + s * t).collect();
        out.push(UnitVector::normalize(coords)?);
    }
    Ok(out)
}

/// Uniform points on `S^{d-1}` (normalized Gaussians).
pub fn sample_uniform(d: usize, count: usize, seed: u64) -> Result<Vec<UnitVector>> {
    validate_dim(d)?;
    let mut rng = rng::seeded(seed);
    Ok((0..count).map(|_| uniform_with(d, &mut rng)).collect())
}

pub(crate) fn uniform_with<R: Rng + ?Sized>(d: usize, rng: &mut R) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = UnitVector::normalize(v) {
            return u;
        }
    }
}
