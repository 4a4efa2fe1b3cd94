//! Set partitions and the distance-dependent Chinese restaurant process
//! prior over them.
//!
//! Items are seated one at a time in permutation order. Item `sigma_t` opens
//! a new subset with probability `m0 / (m0 + t - 1)` and joins an existing
//! subset `S` with probability
//! `(t - 1) / (m0 + t - 1) * sum_{s in S} sim(sigma_t, s) / sum_{s < t} sim(sigma_t, s)`.
//! When the denominator is zero the similarity ratio is replaced by the
//! uniform ratio `|S| / (t - 1)`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cluster labels for `n` items, contiguous `0..n_clusters` with every
/// cluster non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl TryFrom<Vec<usize>> for Partition {
    type Error = Error;

    fn try_from(labels: Vec<usize>) -> Result<Self> {
        Partition::new(labels)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.labels
    }
}

impl Partition {
    /// Validates that labels are contiguous and every cluster is used.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; n_clusters];
        for &l in &labels {
            used[l] = true;
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(Error::InvalidPartition(format!("cluster {k} is empty")));
        }
        Ok(Self { labels, n_clusters })
    }

    /// Relabels arbitrary labels by order of first appearance.
    pub fn from_labels<T: Eq + std::hash::Hash + Clone>(raw: &[T]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(l.clone()).or_insert(next)
            })
            .collect();
        Self {
            labels,
            n_clusters: map.len(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            n_clusters: n,
        }
    }

    pub fn one_cluster(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            n_clusters: usize::from(n > 0),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn n_items(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Canonical form: labels renumbered by first appearance.
    pub fn canonical(&self) -> Self {
        Self::from_labels(&self.labels)
    }

    pub fn same_cluster(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }
}

/// Similarity matrix, seating permutation and mass parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityContext {
    pub similarity: DMatrix<f64>,
    pub perm: Vec<usize>,
    pub m0: f64,
}

impl SimilarityContext {
    pub fn new(similarity: DMatrix<f64>, perm: Vec<usize>, m0: f64) -> Result<Self> {
        let ctx = Self {
            similarity,
            perm,
            m0,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    /// Identity permutation.
    pub fn with_natural_order(similarity: DMatrix<f64>, m0: f64) -> Result<Self> {
        let n = similarity.nrows();
        Self::new(similarity, (0..n).collect(), m0)
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_similarity(&self.similarity)?;
        validate_permutation(&self.perm, self.similarity.nrows())?;
        if !(self.m0 > 0.0 && self.m0.is_finite()) {
            return Err(Error::InvalidSimilarity(format!(
                "mass {} must be positive",
                self.m0
            )));
        }
        Ok(())
    }
}

pub fn validate_similarity(s: &DMatrix<f64>) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::InvalidSimilarity("matrix is not square".into()));
    }
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            let v = s[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSimilarity(format!("entry ({i},{j}) = {v}")));
            }
            if v != s[(j, i)] {
                return Err(Error::InvalidSimilarity(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidSimilarity(format!(
            "permutation has length {} for {n} items",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidSimilarity(
                "permutation is not a bijection".into(),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Log of one seating factor at 1-based step `t`.
///
/// `same_count` and `same_sim` describe the earlier-seated members of the
/// subset being joined (zero count means a new subset); `total_sim` is the
/// similarity to all earlier-seated items.
pub(crate) fn log_seating_factor(
    t: usize,
    m0: f64,
    same_count: usize,
    same_sim: f64,
    total_sim: f64,
) -> f64 {
    let prev = (t - 1) as f64;
    if same_count == 0 {
        return m0.ln() - (m0 + prev).ln();
    }
    let ratio = if total_sim > 0.0 {
        same_sim / total_sim
    } else {
        same_count as f64 / prev
    };
    prev.ln() - (m0 + prev).ln() + ratio.ln()
}

/// Log probability of `part` under the ddCRP prior.
pub fn ddcrp_log_pmf(part: &Partition, ctx: &SimilarityContext) -> Result<f64> {
    let n = ctx.n();
    if part.n_items() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: part.n_items(),
        });
    }
    let s = &ctx.similarity;
    let mut total = 0.0;
    for t in 1..=n {
        let item = ctx.perm[t - 1];
        let label = part.label(item);
        let mut same_count = 0;
        let mut same_sim = 0.0;
        let mut total_sim = 0.0;
        for &prev in &ctx.perm[..t - 1] {
            let v = s[(item, prev)];
            total_sim += v;
            if part.label(prev) == label {
                same_count += 1;
                same_sim += v;
            }
        }
        total += log_seating_factor(t, ctx.m0, same_count, same_sim, total_sim);
    }
    Ok(total)
}

/// Probabilities of seating a new item next to already-seated ones:
/// one entry per existing cluster followed by the new-cluster entry.
///
/// `sims[i]` is the similarity of the new item to seated item `i` and
/// `labels[i]` is its cluster.
pub fn seating_probabilities(
    sims: &[f64],
    labels: &[usize],
    n_clusters: usize,
    m0: f64,
) -> Vec<f64> {
    let seated = labels.len();
    let mut probs = vec![0.0; n_clusters + 1];
    let prev = seated as f64;
    if seated == 0 {
        probs[n_clusters] = 1.0;
        return probs;
    }
    let total: f64 = sims.iter().sum();
    for (i, &l) in labels.iter().enumerate() {
        probs[l] += if total > 0.0 {
            sims[i] / total
        } else {
            1.0 / prev
        };
    }
    for p in probs.iter_mut().take(n_clusters) {
        *p *= prev / (m0 + prev);
    }
    probs[n_clusters] = m0 / (m0 + prev);
    probs
}

/// Draws a partition by sequential seating in permutation order.
pub fn ddcrp_sample<R: Rng + ?Sized>(ctx: &SimilarityContext, rng: &mut R) -> Partition {
    let n = ctx.n();
    let mut labels = vec![usize::MAX; n];
    let mut n_clusters = 0;
    let mut seated_labels = Vec::with_capacity(n);
    let mut sims = Vec::with_capacity(n);
    for (t, &item) in ctx.perm.iter().enumerate() {
        sims.clear();
        sims.extend(ctx.perm[..t].iter().map(|&p| ctx.similarity[(item, p)]));
        let probs = seating_probabilities(&sims, &seated_labels, n_clusters, ctx.m0);
        let k = sample_index(&probs, rng);
        if k == n_clusters {
            n_clusters += 1;
        }
        labels[item] = k;
        seated_labels.push(k);
    }
    Partition::from_labels(&labels)
}

/// Samples an index proportional to non-negative weights.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// Samples an index from unnormalized log weights.
pub fn sample_log_index<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let max = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    sample_index(&w, rng)
}
