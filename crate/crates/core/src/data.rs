//! Synthetic shifted, long-tailed benchmarks and the embedding file formats.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::objective::Domain;
use crate::rng;
use crate::vmf::{self, UnitVector, VmfParams};

const EMBED_MAGIC: &[u8; 4] = b"GCPE";
const EMBED_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;
const FLAG_UNLABELED: u32 = 2;

/// Minimum pairwise angle between generating class directions.
pub const MIN_CLASS_ANGLE_DEG: f64 = 30.0;
/// Candidate directions drawn before giving up on separation.
const SEPARATION_BUDGET: usize = 20_000;
/// Smallest novel class the generator will emit.
pub const MIN_CLASS_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub d_feature: usize,
    pub d_embed: usize,
    pub num_base: usize,
    pub num_novel: usize,
    /// Instances per base class in each split; also the largest novel class.
    pub per_base_count: usize,
    /// Largest novel class over smallest.
    pub imbalance_ratio: f64,
    /// Rotation of every base-class direction in the unlabeled domain.
    pub shift_angle_deg: f64,
    pub gen_kappa: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_feature: 64,
            d_embed: 16,
            num_base: 5,
            num_novel: 3,
            per_base_count: 100,
            imbalance_ratio: 8.0,
            shift_angle_deg: 15.0,
            gen_kappa: 20.0,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_base == 0 || self.num_novel == 0 || self.per_base_count == 0 {
            return Err(Error::config("class counts and per_base_count must be at least 1"));
        }
        if self.d_embed < 2 || self.d_feature == 0 {
            return Err(Error::config("d_embed must be >= 2 and d_feature >= 1"));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::config(format!("imbalance_ratio must be >= 1, got {}", self.imbalance_ratio)));
        }
        if !(0.0..=90.0).contains(&self.shift_angle_deg) {
            return Err(Error::config(format!("shift_angle_deg must lie in [0, 90], got {}", self.shift_angle_deg)));
        }
        if !(self.gen_kappa > 0.0 && self.gen_kappa.is_finite()) {
            return Err(Error::config("gen_kappa must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Novel class sizes, largest first: `per_base_count * ratio^(-i / (num_novel - 1))`.
    pub fn novel_sizes(&self) -> Vec<usize> {
        let m = self.num_novel;
        (0..m)
            .map(|i| {
                let t = if m == 1 { 0.0 } else { i as f64 / (m - 1) as f64 };
                (self.per_base_count as f64 * self.imbalance_ratio.powf(-t)).round() as usize
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    /// `N x D`.
    pub features: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub base_classes: BTreeSet<usize>,
}

impl EmbeddingDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Data(format!("{} labels for {} rows", labels.len(), self.len())));
            }
            if self.domain == Domain::Base {
                let present: BTreeSet<usize> = labels.iter().copied().collect();
                if let Some(c) = self.base_classes.iter().find(|c| !present.contains(c)) {
                    return Err(Error::Data(format!("base class {c} has no labeled instance")));
                }
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(EMBED_MAGIC);
        w.u32(EMBED_VERSION);
        let mut flags = 0;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.domain == Domain::Unlabeled {
            flags |= FLAG_UNLABELED;
        }
        w.u32(flags);
        w.u32(self.len() as u32);
        w.u32(self.dim() as u32);
        for i in 0..self.len() {
            for j in 0..self.dim() {
                w.f64(self.features[(i, j)]);
            }
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                w.u32(l as u32);
            }
        }
        w.u32(self.base_classes.len() as u32);
        for &c in &self.base_classes {
            w.u32(c as u32);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(EMBED_MAGIC)?;
        r.expect_version(EMBED_VERSION)?;
        let flags_at = r.offset();
        let flags = r.u32("flags")?;
        if flags & !(FLAG_LABELS | FLAG_UNLABELED) != 0 {
            return Err(Error::format(flags_at, format!("unknown flag bits {flags:#x}")));
        }
        let n = r.u32("row count")? as usize;
        let d = r.u32("dimension")? as usize;
        let data = r.f64_vec(n.saturating_mul(d), "features")?;
        let labels = if flags & FLAG_LABELS != 0 {
            Some(r.u32_vec(n, "labels")?.into_iter().map(|v| v as usize).collect())
        } else {
            None
        };
        let count = r.u32("base class count")? as usize;
        let base_classes = r.u32_vec(count, "base classes")?.into_iter().map(|v| v as usize).collect();
        r.finish()?;
        Ok(Self {
            features: DMatrix::from_row_slice(n, d, &data),
            labels,
            domain: if flags & FLAG_UNLABELED != 0 { Domain::Unlabeled } else { Domain::Base },
            base_classes,
        })
    }

    /// `id,label,f0..` with 17 significant digits; `label` is empty when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{i},");
            if let Some(labels) = &self.labels {
                let _ = write!(out, "{}", labels[i]);
            }
            for j in 0..self.dim() {
                let _ = write!(out, ",{:.16e}", self.features[(i, j)]);
            }
            out.push('\n');
        }
        out
    }

    /// Rows are taken in file order. A file with any label is a base split whose
    /// roster is its label set; a file without labels is unlabeled.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or_else(|| Error::format(0, "empty CSV file"))?;
        let columns: Vec<&str> = header.trim_end().split(',').collect();
        if columns.len() < 2 || columns[0] != "id" || columns[1] != "label" {
            return Err(Error::format(0, "CSV header must start with id,label"));
        }
        let d = columns.len() - 2;
        for (j, c) in columns[2..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::format(0, format!("unexpected column {c:?}, expected f{j}")));
            }
        }
        offset += header.len() as u64;
        let mut data = Vec::new();
        let mut labels: Vec<Option<usize>> = Vec::new();
        for line in lines {
            let at = offset;
            offset += line.len() as u64;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(Error::format(at, format!("expected {} fields, found {}", d + 2, fields.len())));
            }
            labels.push(if fields[1].is_empty() {
                None
            } else {
                Some(fields[1].parse().map_err(|_| Error::format(at, format!("bad label {:?}", fields[1])))?)
            });
            for f in &fields[2..] {
                let v: f64 = f.parse().map_err(|_| Error::format(at, format!("bad number {f:?}")))?;
                if !v.is_finite() {
                    return Err(Error::format(at, "non-finite feature value"));
                }
                data.push(v);
            }
        }
        let n = labels.len();
        let labeled = labels.iter().filter(|l| l.is_some()).count();
        let (labels, domain, base_classes) = if labeled == 0 {
            (None, Domain::Unlabeled, BTreeSet::new())
        } else if labeled == n {
            let l: Vec<usize> = labels.into_iter().flatten().collect();
            let roster = l.iter().copied().collect();
            (Some(l), Domain::Base, roster)
        } else {
            return Err(Error::format(offset, "labels must be present on every row or on none"));
        };
        Ok(Self {
            features: DMatrix::from_row_slice(n, d, &data),
            labels,
            domain,
            base_classes,
        })
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Binary unless the path ends in `.csv`.
pub fn write_embeddings(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        std::fs::write(path, dataset.to_csv())?;
    } else {
        std::fs::write(path, dataset.to_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "CSV is not UTF-8"))?;
        EmbeddingDataset::from_csv(&text)
    } else {
        EmbeddingDataset::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub base: EmbeddingDataset,
    pub unlabeled: EmbeddingDataset,
    /// True class of every unlabeled row; novel classes are `num_base..`.
    pub truth: Vec<usize>,
    /// Generating directions, one row per class, before the domain shift.
    pub directions: DMatrix<f64>,
    /// Generating directions of the base classes in the unlabeled domain.
    pub shifted_directions: DMatrix<f64>,
}

fn separated_directions(d: usize, count: usize, r: &mut rng::SeededRng) -> Result<Vec<Vec<f64>>> {
    let max_cos = MIN_CLASS_ANGLE_DEG.to_radians().cos();
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..SEPARATION_BUDGET {
        let u = gaussian_unit(d, r);
        if chosen.iter().all(|c| dot(c, &u) <= max_cos) {
            chosen.push(u);
            if chosen.len() == count {
                return Ok(chosen);
            }
        }
    }
    Err(Error::Separation(format!(
        "could not place {count} class directions {MIN_CLASS_ANGLE_DEG} degrees apart in dimension {d}; \
         use fewer classes or a larger d_embed"
    )))
}

fn gaussian_unit(d: usize, r: &mut rng::SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `cos(theta) u + sin(theta) w` with `w` a random unit vector orthogonal to `u`.
fn rotate_in_random_plane(u: &[f64], theta: f64, r: &mut rng::SeededRng) -> Vec<f64> {
    let w = loop {
        let g = gaussian_unit(u.len(), r);
        let p = dot(&g, u);
        let w: Vec<f64> = g.iter().zip(u).map(|(g, u)| g - p * u).collect();
        let n = dot(&w, &w).sqrt();
        if n > 1e-6 {
            break w.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let (s, c) = theta.sin_cos();
    let v: Vec<f64> = u.iter().zip(&w).map(|(u, w)| c * u + s * w).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let sizes = config.novel_sizes();
    if let Some(&small) = sizes.last().filter(|&&s| s < MIN_CLASS_SIZE) {
        return Err(Error::Separation(format!(
            "smallest novel class would hold {small} instances (< {MIN_CLASS_SIZE}); \
             raise per_base_count or lower imbalance_ratio"
        )));
    }
    let (nb, nn, de, df) = (config.num_base, config.num_novel, config.d_embed, config.d_feature);
    let mut r = rng::seeded(rng::derive_seed(config.seed, 0));
    let dirs = separated_directions(de, nb + nn, &mut r)?;
    let theta = config.shift_angle_deg.to_radians();
    let shifted: Vec<Vec<f64>> = dirs[..nb]
        .iter()
        .map(|u| if theta == 0.0 { u.clone() } else { rotate_in_random_plane(u, theta, &mut r) })
        .collect();
    let scale = 1.0 / (de as f64).sqrt();
    let map = DMatrix::from_fn(df, de, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        z * scale
    });

    let mut stream = 1u64;
    let mut draw = |dir: &[f64], count: usize, r: &mut rng::SeededRng| -> Result<Vec<Vec<f64>>> {
        let params = VmfParams::new(UnitVector::normalize(dir.to_vec())?, config.gen_kappa)?;
        let zs = vmf::sample(&params, count, rng::derive_seed(config.seed, stream))?;
        stream += 1;
        Ok(zs
            .into_iter()
            .map(|z| {
                let clean = &map * nalgebra::DVector::from_column_slice(z.as_slice());
                clean
                    .iter()
                    .map(|&x| {
                        let e: f64 = StandardNormal.sample(r);
                        x + config.noise_sigma * e
                    })
                    .collect()
            })
            .collect())
    };

    let mut base_rows = Vec::new();
    let mut base_labels = Vec::new();
    for (c, dir) in dirs[..nb].iter().enumerate() {
        for row in draw(dir, config.per_base_count, &mut r)? {
            base_rows.push(row);
            base_labels.push(c);
        }
    }
    let mut unl: Vec<(Vec<f64>, usize)> = Vec::new();
    for (c, dir) in shifted.iter().enumerate() {
        unl.extend(draw(dir, config.per_base_count, &mut r)?.into_iter().map(|x| (x, c)));
    }
    for (i, (dir, &size)) in dirs[nb..].iter().zip(&sizes).enumerate() {
        unl.extend(draw(dir, size, &mut r)?.into_iter().map(|x| (x, nb + i)));
    }
    unl.shuffle(&mut r);

    let base_classes: BTreeSet<usize> = (0..nb).collect();
    let to_matrix = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), df, |i, j| rows[i][j]);
    let unl_rows: Vec<Vec<f64>> = unl.iter().map(|(x, _)| x.clone()).collect();
    let flat = |v: &[Vec<f64>]| DMatrix::from_fn(v.len(), de, |i, j| v[i][j]);
    Ok(SyntheticBenchmark {
        base: EmbeddingDataset {
            features: to_matrix(&base_rows),
            labels: Some(base_labels),
            domain: Domain::Base,
            base_classes: base_classes.clone(),
        },
        unlabeled: EmbeddingDataset {
            features: to_matrix(&unl_rows),
            labels: None,
            domain: Domain::Unlabeled,
            base_classes,
        },
        truth: unl.iter().map(|(_, c)| *c).collect(),
        directions: flat(&dirs),
        shifted_directions: flat(&shifted),
    })
}
