//! Hungarian matching of clusters to classes and the Acc/F1 report.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest number of distinct labels accepted on either side of a match.
pub const MAX_LABELS: usize = 512;

/// Exact minimum-cost assignment on a square matrix (shortest augmenting
/// paths with potentials). Returns `row -> column` and the total cost.
pub fn linear_sum_assignment(cost: &DMatrix<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if n != cost.ncols() {
        return Err(Error::Shape {
            expected: n,
            actual: cost.ncols(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("assignment costs must be finite"));
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[(i, assignment[i])]).sum();
    Ok((assignment, total))
}

/// Cluster-to-class correspondence maximizing the number of matched instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    /// `(predicted cluster, true class)` for every matched cluster.
    pub pairs: Vec<(usize, usize)>,
    pub overlap: usize,
}

impl Matching {
    pub fn class_of(&self, cluster: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == cluster).map(|p| p.1)
    }

    pub fn cluster_of(&self, class: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == class).map(|p| p.0)
    }
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn hungarian_match(pred: &[usize], truth: &[usize]) -> Result<Matching> {
    if pred.is_empty() {
        return Err(Error::Contract("cannot match empty label sequences".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut clusters = distinct(pred);
    let classes = distinct(truth);
    if clusters.len() > MAX_LABELS || classes.len() > MAX_LABELS {
        return Err(Error::Capacity {
            requested: clusters.len().max(classes.len()),
            available: MAX_LABELS,
        });
    }
    let ti: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut rows: BTreeMap<usize, Vec<usize>> = clusters.iter().map(|&c| (c, vec![0; classes.len()])).collect();
    for (p, t) in pred.iter().zip(truth) {
        rows.get_mut(p).expect("cluster listed")[ti[t]] += 1;
    }
    // Solve in an order fixed by the contingency rows so that tied optima
    // resolve the same way under any renaming of cluster ids.
    clusters.sort_by(|a, b| rows[b].cmp(&rows[a]).then(a.cmp(b)));
    let ci: BTreeMap<usize, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = clusters.len().max(classes.len());
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for (p, t) in pred.iter().zip(truth) {
        counts[(ci[p], ti[t])] += 1.0;
    }
    let (assignment, _) = linear_sum_assignment(&counts.map(|c| -c))?;
    let mut pairs = Vec::new();
    let mut overlap = 0usize;
    for (r, &c) in assignment.iter().enumerate() {
        if r < clusters.len() && c < classes.len() {
            pairs.push((clusters[r], classes[c]));
            overlap += counts[(r, c)] as usize;
        }
    }
    pairs.sort_unstable();
    Ok(Matching { pairs, overlap })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc_all: f64,
    pub acc_known: f64,
    pub acc_novel: f64,
    pub f1_all: f64,
    pub f1_known: f64,
    pub f1_novel: f64,
    pub matching: Matching,
    /// Instances per true class.
    pub class_counts: BTreeMap<usize, usize>,
    pub known_instances: usize,
    pub novel_instances: usize,
}

/// One global match; subset accuracies and macro F1 are read off it.
/// Empty subsets score 0.
pub fn compute_metrics(pred: &[usize], truth: &[usize], base_classes: &BTreeSet<usize>) -> Result<MetricsReport> {
    let matching = hungarian_match(pred, truth)?;
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in truth {
        *class_counts.entry(t).or_default() += 1;
    }
    if let Some(bad) = base_classes.iter().find(|c| !class_counts.contains_key(c)) {
        return Err(Error::Data(format!("base class {bad} does not occur in the true labels")));
    }
    let mut cluster_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in pred {
        *cluster_sizes.entry(p).or_default() += 1;
    }
    let class_to_cluster: BTreeMap<usize, usize> = matching.pairs.iter().map(|&(p, t)| (t, p)).collect();
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut known_n, mut known_hit, mut novel_n, mut novel_hit) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        let hit = class_to_cluster.get(&t) == Some(&p);
        if hit {
            *hits.entry(t).or_default() += 1;
        }
        if base_classes.contains(&t) {
            known_n += 1;
            known_hit += hit as usize;
        } else {
            novel_n += 1;
            novel_hit += hit as usize;
        }
    }
    let f1 = |t: usize| -> f64 {
        let tp = hits.get(&t).copied().unwrap_or(0) as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let cluster = class_to_cluster[&t];
        let precision = tp / cluster_sizes[&cluster] as f64;
        let recall = tp / class_counts[&t] as f64;
        2.0 * precision * recall / (precision + recall)
    };
    let macro_f1 = |keep: &dyn Fn(usize) -> bool| -> f64 {
        let scores: Vec<f64> = class_counts.keys().copied().filter(|&t| keep(t)).map(f1).collect();
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricsReport {
        acc_all: ratio(matching.overlap, pred.len()),
        acc_known: ratio(known_hit, known_n),
        acc_novel: ratio(novel_hit, novel_n),
        f1_all: macro_f1(&|_| true),
        f1_known: macro_f1(&|t| base_classes.contains(&t)),
        f1_novel: macro_f1(&|t| !base_classes.contains(&t)),
        matching,
        class_counts,
        known_instances: known_n,
        novel_instances: novel_n,
    })
}
