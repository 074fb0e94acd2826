//! Modified Bessel functions of the first kind, evaluated in log space.
//!
//! Three regimes cover the supported domain:
//!
//! * ascending power series, used while `x <= SERIES_RATIO * order` or the
//!   order is small and `x` moderate;
//! * Debye's uniform asymptotic expansion for orders `>= DEBYE_MIN_ORDER`
//!   past the series crossover;
//! * Hankel's large-argument expansion for small orders and large `x`.
//!
//! The series is summed with running rescaling so that it never overflows,
//! which keeps it valid well beyond the crossover. Tests compare the regimes
//! on both sides of every seam.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Series is used for `x <= SERIES_RATIO * order` (and Debye beyond it).
pub const SERIES_RATIO: f64 = 2.0;
/// Smallest order handed to the uniform expansion.
pub const DEBYE_MIN_ORDER: f64 = 20.0;
/// Largest supported order.
pub const MAX_ORDER: f64 = 8192.0;

const DEBYE_TERMS: usize = 13;
const RESCALE: f64 = 1e250;

/// `log I_order(x)` for `order >= 0`, `x > 0`.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    validate(order, x)?;
    Ok(match regime(order, x) {
        Regime::Series => log_i_series(order, x),
        Regime::Debye => log_i_debye(order, x),
        Regime::Hankel => log_i_hankel(order, x),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Regime {
    Series,
    Debye,
    Hankel,
}

pub(crate) fn regime(order: f64, x: f64) -> Regime {
    if order >= DEBYE_MIN_ORDER {
        if x <= SERIES_RATIO * order {
            Regime::Series
        } else {
            Regime::Debye
        }
    } else if x >= hankel_threshold(order) {
        Regime::Hankel
    } else {
        Regime::Series
    }
}

fn hankel_threshold(order: f64) -> f64 {
    (2.0 * order * order).max(40.0)
}

fn validate(order: f64, x: f64) -> Result<()> {
    if !order.is_finite() || !(0.0..=MAX_ORDER).contains(&order) {
        return Err(Error::domain(format!(
            "Bessel order must lie in [0, {MAX_ORDER}], got {order}"
        )));
    }
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::domain(format!(
            "Bessel argument must be finite and positive, got {x}"
        )));
    }
    Ok(())
}

/// Ascending series `(x/2)^v / Gamma(v+1) * sum_k (x^2/4)^k / (k! (v+1)_k)`.
pub(crate) fn log_i_series(order: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut log_scale = 0.0_f64;
    let mut k = 0.0_f64;
    loop {
        k += 1.0;
        let ratio = q / (k * (order + k));
        term *= ratio;
        sum += term;
        if sum > RESCALE {
            sum /= RESCALE;
            term /= RESCALE;
            log_scale += RESCALE.ln();
        }
        if ratio < 1.0 && term <= sum * 1e-17 {
            break;
        }
    }
    order * (0.5 * x).ln() - libm::lgamma(order + 1.0) + sum.ln() + log_scale
}

/// Uniform expansion `I_v(v z) ~ e^{v eta} / (sqrt(2 pi v) (1+z^2)^{1/4}) sum u_k(t) / v^k`.
pub(crate) fn log_i_debye(order: f64, x: f64) -> f64 {
    let root = order.hypot(x);
    let t = order / root;
    let eta_v = root + order * (x / (order + root)).ln();
    let polys = debye_polynomials();
    let mut sum = 0.0;
    let mut inv_pow = 1.0;
    for poly in polys.iter() {
        sum += horner(poly, t) * inv_pow;
        inv_pow /= order;
    }
    eta_v - 0.5 * (2.0 * std::f64::consts::PI * order).ln() - 0.5 * (root / order).ln() + sum.ln()
}

/// Large-argument expansion `I_v(x) ~ e^x / sqrt(2 pi x) sum (-1)^k a_k(v) / x^k`.
pub(crate) fn log_i_hankel(order: f64, x: f64) -> f64 {
    let mu = 4.0 * order * order;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (8.0 * kf * x);
        if next == 0.0 {
            break;
        }
        if next.abs() > term.abs() {
            // asymptotic series started to diverge; truncate at the smallest term
            break;
        }
        term = next;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Coefficients (ascending powers of t) of the Debye polynomials u_0..u_{DEBYE_TERMS-1},
/// built from `u_{k+1} = t^2 (1 - t^2) u_k' / 2 + (1/8) int_0^t (1 - 5 s^2) u_k(s) ds`.
fn debye_polynomials() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys: Vec<Vec<f64>> = vec![vec![1.0]];
        for _ in 1..DEBYE_TERMS {
            let prev = polys.last().expect("seeded with u_0");
            let mut next = vec![0.0; prev.len() + 3];
            // t^2 (1 - t^2) / 2 * u'
            for (i, &c) in prev.iter().enumerate().skip(1) {
                let d = c * i as f64;
                next[i + 1] += 0.5 * d;
                next[i + 3] -= 0.5 * d;
            }
            // (1/8) * integral of (1 - 5 s^2) u
            for (i, &c) in prev.iter().enumerate() {
                next[i + 1] += c / (8.0 * (i as f64 + 1.0));
                next[i + 3] -= 5.0 * c / (8.0 * (i as f64 + 3.0));
            }
            while next.last() == Some(&0.0) {
                next.pop();
            }
            polys.push(next);
        }
        polys
    })
}

/// Ratio `I_{order+1}(x) / I_order(x)` by the Gauss continued fraction,
/// evaluated with the modified Lentz algorithm.
///
/// The fraction converges for every positive `x`; the number of iterations
/// grows roughly linearly with `x / order` once `x` exceeds the order.
pub fn bessel_ratio(order: f64, x: f64) -> Result<f64> {
    validate(order, x)?;
    const TINY: f64 = 1e-300;
    const MAX_ITERS: usize = 10_000_000;
    let two_over_x = 2.0 / x;
    // f = b_1 + 1/(b_2 + 1/(b_3 + ...)), b_j = 2 (order + j) / x
    let mut f = two_over_x * (order + 1.0);
    let mut c = f;
    let mut d = 0.0;
    for j in 2..MAX_ITERS {
        let b = two_over_x * (order + j as f64);
        d = b + d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            return Ok(1.0 / f);
        }
    }
    Err(Error::Numerical(format!(
        "Bessel ratio continued fraction did not converge for order {order}, x {x}"
    )))
}
