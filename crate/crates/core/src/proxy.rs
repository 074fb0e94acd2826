//! Energy-minimized proxy anchors on the hypersphere.
//!
//! Proxies are spread over `S^{d-1}` by projected gradient descent on the
//! Riesz s-energy of their pairwise geodesic distances, then split into base
//! proxies (one per known class) and open proxies.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng;
use crate::vmf::{self, UnitVector};

const PROXY_MAGIC: &[u8; 4] = b"GCPX";
const PROXY_VERSION: u32 = 1;
/// Inner products are clamped away from +-1 before differentiating arccos.
const CLAMP: f64 = 1.0 - 1e-12;
const MIN_SEPARATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyMinConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub step_size: f64,
    /// Stop once the relative energy decrease of an accepted step falls below this.
    pub tolerance: f64,
}

impl Default for EnergyMinConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 5000,
            step_size: 0.05,
            tolerance: 1e-15,
        }
    }
}

impl EnergyMinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::config("restarts and max_iters must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step_size must be positive"));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config("tolerance must be positive"));
        }
        Ok(())
    }
}

/// How base proxies are drawn from the full set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSelection {
    /// Uniformly random subset (seeded).
    #[default]
    Random,
    /// Greedy farthest-point selection from a seeded random start.
    MaxMinSpread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    /// n x d, unit rows.
    pub vectors: DMatrix<f64>,
    pub s: f64,
    pub energy: f64,
    /// `base_indices[c]` is the proxy anchoring base class `c`.
    pub base_indices: Vec<usize>,
    pub open_indices: Vec<usize>,
    pub converged: bool,
    /// Energies of the accepted iterates of the winning restart, starting with its initialization.
    pub energy_trace: Vec<f64>,
    /// Energy of every restart's random initialization.
    pub initial_energies: Vec<f64>,
}

impl ProxySet {
    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn proxy(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().copied().collect()
    }

    pub fn base_proxies(&self) -> DMatrix<f64> {
        select_rows(&self.vectors, &self.base_indices)
    }

    pub fn open_proxies(&self) -> DMatrix<f64> {
        select_rows(&self.vectors, &self.open_indices)
    }

    /// min / mean / max of all pairwise geodesic distances.
    pub fn distance_stats(&self) -> (f64, f64, f64) {
        let n = self.count();
        let mut min = f64::INFINITY;
        let mut max: f64 = 0.0;
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                let g = row_geodesic(&self.vectors, i, j);
                min = min.min(g);
                max = max.max(g);
                sum += g;
                pairs += 1;
            }
        }
        if pairs == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (min, sum / pairs as f64, max)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(PROXY_MAGIC);
        w.u32(PROXY_VERSION);
        w.u32(self.count() as u32);
        w.u32(self.dim() as u32);
        w.f64(self.s);
        for i in 0..self.count() {
            for j in 0..self.dim() {
                w.f64(self.vectors[(i, j)]);
            }
        }
        w.u32(self.base_indices.len() as u32);
        for &b in &self.base_indices {
            w.u32(b as u32);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(PROXY_MAGIC)?;
        r.expect_version(PROXY_VERSION)?;
        let n = r.u32("proxy count")? as usize;
        let d = r.u32("dimension")? as usize;
        let s_at = r.offset();
        let s = r.f64("riesz exponent")?;
        if s < 0.0 {
            return Err(Error::format(s_at, "negative riesz exponent"));
        }
        let rows_at = r.offset();
        let data = r.f64_vec(n * d, "proxy vectors")?;
        let vectors = DMatrix::from_row_slice(n, d, &data);
        for i in 0..n {
            let norm = vectors.row(i).norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::format(
                    rows_at + (8 * i * d) as u64,
                    format!("proxy row {i} has norm {norm}"),
                ));
            }
        }
        let count_at = r.offset();
        let nb = r.u32("base index count")? as usize;
        if nb > n {
            return Err(Error::format(count_at, format!("{nb} base indices for {n} proxies")));
        }
        let base: Vec<usize> = r.u32_vec(nb, "base indices")?.into_iter().map(|v| v as usize).collect();
        r.finish()?;
        let open = complement(n, &base).map_err(|e| Error::format(count_at, e.to_string()))?;
        let energy = if n >= 2 { riesz_energy(&vectors, s).unwrap_or(f64::NAN) } else { 0.0 };
        Ok(Self {
            vectors,
            s,
            energy,
            base_indices: base,
            open_indices: open,
            converged: true,
            energy_trace: Vec::new(),
            initial_energies: Vec::new(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn complement(n: usize, chosen: &[usize]) -> Result<Vec<usize>> {
    let mut used = vec![false; n];
    for &c in chosen {
        if c >= n {
            return Err(Error::Data(format!("index {c} out of range for {n} proxies")));
        }
        if used[c] {
            return Err(Error::Data(format!("index {c} listed twice")));
        }
        used[c] = true;
    }
    Ok((0..n).filter(|&i| !used[i]).collect())
}

/// `arccos(clamp(u^T v, -1, 1))`.
pub fn geodesic_distance(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    Ok(u.dot(v)?.clamp(-1.0, 1.0).acos())
}

fn row_geodesic(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    m.row(i).dot(&m.row(j)).clamp(-1.0, 1.0).acos()
}

fn kernel(gamma: f64, s: f64) -> f64 {
    if s > 0.0 {
        gamma.powf(-s)
    } else {
        -gamma.ln()
    }
}

/// d kernel / d gamma.
fn kernel_slope(gamma: f64, s: f64) -> f64 {
    if s > 0.0 {
        -s * gamma.powf(-s - 1.0)
    } else {
        -1.0 / gamma
    }
}

fn validate_s(s: f64) -> Result<()> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("riesz exponent must be finite and >= 0, got {s}")))
    }
}

/// Riesz s-energy summed over ordered pairs `i != j`; `s = 0` selects the
/// logarithmic kernel `log(1 / gamma)`.
pub fn riesz_energy(proxies: &DMatrix<f64>, s: f64) -> Result<f64> {
    validate_s(s)?;
    let n = proxies.nrows();
    if n < 2 {
        return Err(Error::config("riesz energy needs at least two proxies"));
    }
    let gram = proxies * proxies.transpose();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let gamma = gram[(i, j)].clamp(-1.0, 1.0).acos();
            if gamma <= MIN_SEPARATION {
                return Err(Error::Degenerate(format!("proxies {i} and {j} coincide")));
            }
            total += 2.0 * kernel(gamma, s);
        }
    }
    Ok(total)
}

/// Euclidean gradient of the energy projected onto each row's tangent space.
fn tangent_gradient(proxies: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let n = proxies.nrows();
    let gram = proxies * proxies.transpose();
    // coefficient matrix: d E / d <u_i, u_j> (both ordered pairs folded in)
    let mut coef = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = gram[(i, j)].clamp(-CLAMP, CLAMP);
            let gamma = c.acos();
            let dgamma_dc = -1.0 / (1.0 - c * c).sqrt();
            let w = 2.0 * kernel_slope(gamma, s) * dgamma_dc;
            coef[(i, j)] = w;
            coef[(j, i)] = w;
        }
    }
    let mut grad = &coef * proxies;
    for i in 0..n {
        let radial = grad.row(i).dot(&proxies.row(i));
        for k in 0..proxies.ncols() {
            grad[(i, k)] -= radial * proxies[(i, k)];
        }
    }
    grad
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
}

struct Descent {
    vectors: DMatrix<f64>,
    energy: f64,
    converged: bool,
    trace: Vec<f64>,
}

fn descend(mut x: DMatrix<f64>, s: f64, config: &EnergyMinConfig) -> Result<Descent> {
    let mut energy = riesz_energy(&x, s)?;
    let mut trace = vec![energy];
    let mut step = config.step_size;
    let mut converged = false;
    for _ in 0..config.max_iters {
        let grad = tangent_gradient(&x, s);
        let mut candidate = &x - &grad * step;
        normalize_rows(&mut candidate);
        let next = riesz_energy(&candidate, s).unwrap_or(f64::INFINITY);
        if next.is_finite() && next <= energy {
            let rel = (energy - next) / energy.abs().max(f64::MIN_POSITIVE);
            x = candidate;
            energy = next;
            trace.push(energy);
            step *= 1.2;
            if rel < config.tolerance {
                converged = true;
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-18 {
                // no representable descent step left
                converged = true;
                break;
            }
        }
    }
    Ok(Descent {
        vectors: x,
        energy,
        converged,
        trace,
    })
}

/// Best of `config.restarts` projected-gradient runs from uniform random starts.
/// All proxies start as open; see [`assign_base_proxies`].
pub fn minimize_energy(n: usize, d: usize, s: f64, config: &EnergyMinConfig, seed: u64) -> Result<ProxySet> {
    if n < 2 {
        return Err(Error::config(format!("need at least two proxies, got {n}")));
    }
    if d < 2 {
        return Err(Error::config(format!("sphere dimension must be >= 2, got {d}")));
    }
    validate_s(s)?;
    config.validate()?;

    let mut best: Option<Descent> = None;
    let mut initial_energies = Vec::with_capacity(config.restarts);
    for restart in 0..config.restarts {
        let mut r = rng::seeded(rng::derive_seed(seed, restart as u64));
        let mut init = DMatrix::zeros(n, d);
        for i in 0..n {
            let u = vmf::uniform_with(d, &mut r);
            for (k, &c) in u.as_slice().iter().enumerate() {
                init[(i, k)] = c;
            }
        }
        let run = descend(init, s, config)?;
        initial_energies.push(run.trace[0]);
        if best.as_ref().is_none_or(|b| run.energy < b.energy) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(ProxySet {
        vectors: best.vectors,
        s,
        energy: best.energy,
        base_indices: Vec::new(),
        open_indices: (0..n).collect(),
        converged: best.converged,
        energy_trace: best.trace,
        initial_energies,
    })
}

/// Chooses `num_base` base proxies; the rest become open proxies.
pub fn assign_base_proxies(proxies: &ProxySet, num_base: usize, seed: u64) -> Result<ProxySet> {
    assign_base_proxies_with(proxies, num_base, seed, BaseSelection::Random)
}

pub fn assign_base_proxies_with(
    proxies: &ProxySet,
    num_base: usize,
    seed: u64,
    selection: BaseSelection,
) -> Result<ProxySet> {
    let n = proxies.count();
    if num_base > n {
        return Err(Error::Capacity {
            requested: num_base,
            available: n,
        });
    }
    let mut r = rng::seeded(seed);
    let base: Vec<usize> = match selection {
        BaseSelection::Random => index::sample(&mut r, n, num_base).into_vec(),
        BaseSelection::MaxMinSpread => {
            let mut chosen: Vec<usize> = Vec::with_capacity(num_base);
            if num_base > 0 {
                chosen.push(index::sample(&mut r, n, 1).index(0));
            }
            while chosen.len() < num_base {
                let next = (0..n)
                    .filter(|i| !chosen.contains(i))
                    .map(|i| {
                        let spread = chosen
                            .iter()
                            .map(|&c| row_geodesic(&proxies.vectors, i, c))
                            .fold(f64::INFINITY, f64::min);
                        (i, spread)
                    })
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
                chosen.push(next.0);
            }
            chosen
        }
    };
    let open = complement(n, &base)?;
    Ok(ProxySet {
        base_indices: base,
        open_indices: open,
        ..proxies.clone()
    })
}
