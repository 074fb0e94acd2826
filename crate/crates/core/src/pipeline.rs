//! Encode, estimate the class count, cluster.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cluster::{spherical_kmeans_restarts, ClusterAssignment};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{estimate_class_count, SpectralConfig, SpectralEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encode,
    Estimate,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoverConfig {
    /// Cluster count; estimated from the embeddings when absent.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
    pub spectral: SpectralConfig,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            max_iters: 100,
            restarts: 10,
            spectral: SpectralConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discovery {
    pub assignment: ClusterAssignment,
    pub estimate: Option<SpectralEstimate>,
    /// Stages in the order they ran.
    pub stages: Vec<Stage>,
}

impl Discovery {
    pub fn k(&self) -> usize {
        self.assignment.k()
    }
}

/// Clusters already-normalized embeddings, estimating `k` first if needed.
pub fn discover_embeddings(directions: &DMatrix<f64>, config: &DiscoverConfig) -> Result<Discovery> {
    let mut stages = Vec::new();
    let (k, estimate) = match config.k {
        Some(k) => (k, None),
        None => {
            stages.push(Stage::Estimate);
            let spectral = SpectralConfig {
                seed: rng::derive_seed(config.seed, 1),
                ..config.spectral
            };
            let e = estimate_class_count(directions, &spectral)?;
            (e.count(), Some(e))
        }
    };
    stages.push(Stage::Cluster);
    let assignment = spherical_kmeans_restarts(directions, k, rng::derive_seed(config.seed, 2), config.max_iters, config.restarts)?;
    Ok(Discovery {
        assignment,
        estimate,
        stages,
    })
}

/// Encodes the unlabeled features to mean directions (concentrations are
/// dropped) and clusters them.
pub fn discover(model: &EncoderModel, features: &DMatrix<f64>, config: &DiscoverConfig) -> Result<Discovery> {
    if features.ncols() != model.input_dim() {
        return Err(Error::Shape {
            expected: model.input_dim(),
            actual: features.ncols(),
        });
    }
    let directions = model.encode_directions(features)?;
    let mut out = discover_embeddings(&directions, config)?;
    out.stages.insert(0, Stage::Encode);
    Ok(out)
}

/// Rows scaled to unit norm; zero rows are rejected.
pub fn normalize_rows(features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = features.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let n = row.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Data(format!("feature row {i} cannot be normalized (norm {n})")));
        }
        row /= n;
    }
    Ok(out)
}

/// Spherical k-means on the raw features, the comparison point for learned embeddings.
pub fn cluster_raw_features(features: &DMatrix<f64>, k: usize, config: &DiscoverConfig) -> Result<ClusterAssignment> {
    let x = normalize_rows(features)?;
    spherical_kmeans_restarts(&x, k, rng::derive_seed(config.seed, 2), config.max_iters, config.restarts)
}
