//! Posterior summaries and sampler-quality checks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::serde_matrix;
use crate::mcmc::{ChainOutput, Draw, McmcConfig, Sampler, SigmaEpsMode};
use crate::model::{ClusterParams, Hyperparams, ModelData};
use crate::partition::Partition;
use crate::simulate::GroundTruth;

/// Posterior co-clustering frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoClusterMatrix {
    #[serde(with = "serde_matrix")]
    pub matrix: DMatrix<f64>,
    pub n_draws: usize,
}

impl CoClusterMatrix {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn write_csv<W: Write>(&self, ids: &[String], writer: W) -> Result<()> {
        crate::model::write_similarity_csv(&self.matrix, ids, writer)
    }
}

/// Co-clustering matrix of a set of label vectors.
pub fn coclustering_from_labels<'a, I>(labels: I) -> Result<CoClusterMatrix>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut counts: Option<DMatrix<f64>> = None;
    let mut n_draws = 0;
    for l in labels {
        let n = l.len();
        let m = counts.get_or_insert_with(|| DMatrix::zeros(n, n));
        if m.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: n,
            });
        }
        for i in 0..n {
            for j in 0..=i {
                if l[i] == l[j] {
                    m[(i, j)] += 1.0;
                }
            }
        }
        n_draws += 1;
    }
    let mut m = counts.ok_or(Error::EmptyChain)?;
    let total = n_draws as f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            let v = m[(i, j)] / total;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] = 1.0;
    }
    Ok(CoClusterMatrix { matrix: m, n_draws })
}

pub fn coclustering_matrix(chain: &ChainOutput) -> Result<CoClusterMatrix> {
    coclustering_from_labels(chain.draws.iter().map(|d| d.labels.as_slice()))
}

/// Empirical distribution of the number of clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCountPosterior {
    pub counts: BTreeMap<usize, usize>,
    pub pmf: BTreeMap<usize, f64>,
}

impl ClusterCountPosterior {
    /// Most frequent count; ties go to the smaller count.
    pub fn mode(&self) -> usize {
        let mut best = (0, 0);
        for (&r, &c) in &self.counts {
            if c > best.1 {
                best = (r, c);
            }
        }
        best.0
    }

    pub fn mass_off(&self, r: usize) -> f64 {
        1.0 - self.pmf.get(&r).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.pmf.iter().map(|(&r, &p)| r as f64 * p).sum()
    }
}

pub fn cluster_count_posterior(chain: &ChainOutput) -> Result<ClusterCountPosterior> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    let mut counts = BTreeMap::new();
    for d in &chain.draws {
        *counts.entry(d.n_clusters()).or_insert(0usize) += 1;
    }
    let total = chain.draws.len() as f64;
    let mut pmf = BTreeMap::new();
    let mut acc = 0.0;
    let last = *counts.keys().next_back().expect("non-empty");
    for (&r, &c) in &counts {
        // the last mass closes the sum, so summing in key order gives exactly 1
        let p = if r == last {
            1.0 - acc
        } else {
            c as f64 / total
        };
        acc += p;
        pmf.insert(r, p);
    }
    Ok(ClusterCountPosterior { counts, pmf })
}

/// Sample autocorrelations at lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let max_lag = max_lag.min(n - 1);
    if c0 <= 0.0 {
        let mut out = vec![0.0; max_lag + 1];
        out[0] = 1.0;
        return out;
    }
    (0..=max_lag).map(|k| autocov(x, mean, k) / c0).collect()
}

fn autocov(x: &[f64], mean: f64, k: usize) -> f64 {
    let n = x.len();
    x[..n - k]
        .iter()
        .zip(&x[k..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size with Geyer's initial monotone sequence estimator.
/// Capped at the number of draws; a constant trace counts as independent.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = autocov(x, mean, 0);
    if c0 <= 0.0 || !c0.is_finite() {
        return n as f64;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = (autocov(x, mean, k) + autocov(x, mean, k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 2;
    }
    // sum covers lag 0 once, so tau = 2 * sum - 1
    let tau = (2.0 * sum - 1.0).max(1e-12);
    (n as f64 / tau).min(n as f64)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub ess: f64,
    /// Autocorrelations at lags 1, 2, ...
    pub acf: Vec<f64>,
}

impl PosteriorSummary {
    pub fn covers(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }
}

pub const SUMMARY_LAGS: usize = 10;

/// Equal-tailed summary of one scalar trace.
pub fn summarize(name: impl Into<String>, trace: &[f64], level: f64) -> Result<PosteriorSummary> {
    if trace.is_empty() {
        return Err(Error::EmptyChain);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "credible level must lie in (0,1), got {level}"
        )));
    }
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let sd = if trace.len() > 1 {
        (trace.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = trace.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let acf = autocorrelation(trace, SUMMARY_LAGS);
    Ok(PosteriorSummary {
        name: name.into(),
        mean,
        sd,
        median: quantile_sorted(&sorted, 0.5),
        level,
        lower: quantile_sorted(&sorted, tail),
        upper: quantile_sorted(&sorted, 1.0 - tail),
        ess: effective_sample_size(trace),
        acf: acf.into_iter().skip(1).collect(),
    })
}

/// Named scalar traces, one value per stored draw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    pub iterations: Vec<usize>,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Traces {
    fn push(&mut self, name: String, values: Vec<f64>) {
        self.names.push(name);
        self.values.push(values);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn summaries(&self, level: f64) -> Result<Vec<PosteriorSummary>> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| summarize(n.clone(), v, level))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![String::from("iteration")];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (t, it) in self.iterations.iter().enumerate() {
            let mut row = vec![it.to_string()];
            row.extend(self.values.iter().map(|v| format!("{:?}", v[t])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cluster of `draw` standing in for each reference cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMatching {
    /// `mapping[k]` is the draw's cluster matched to reference cluster `k`.
    pub mapping: Vec<usize>,
    /// False when some reference cluster had to share a draw cluster.
    pub bijective: bool,
}

/// Scale separating the overlap count from the tie-breaking term.
const OVERLAP_UNIT: i64 = 1 << 24;

/// Best assignment of draw clusters to reference clusters by co-membership
/// overlap, ties broken by parameter distance to `reference_params` when
/// supplied. When the draw has fewer clusters than the reference, unmatched
/// reference clusters fall back to the draw cluster holding most of their
/// members.
pub fn match_clusters(
    draw_labels: &[usize],
    draw_params: &[ClusterParams],
    reference: &Partition,
    reference_params: Option<&[ClusterParams]>,
) -> Result<ClusterMatching> {
    let n = reference.n_items();
    if draw_labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: draw_labels.len(),
        });
    }
    let r_ref = reference.n_clusters();
    let r_draw = draw_params.len();
    let mut overlap = vec![vec![0i64; r_draw]; r_ref];
    for (i, &l) in draw_labels.iter().enumerate() {
        if l >= r_draw {
            return Err(Error::InvalidPartition(format!(
                "label {l} with {r_draw} clusters"
            )));
        }
        overlap[reference.label(i)][l] += 1;
    }
    let penalty = |k: usize, c: usize| -> i64 {
        match reference_params {
            Some(p) => {
                let d = (&p[k].beta - &draw_params[c].beta).norm_squared()
                    + if p[k].gamma.shape() == draw_params[c].gamma.shape() {
                        (&p[k].gamma - &draw_params[c].gamma).norm_squared()
                    } else {
                        0.0
                    };
                // bounded so the summed penalties never outweigh one member
                let scaled = d / (1.0 + d) * (OVERLAP_UNIT as f64 / (r_ref.max(r_draw) + 1) as f64);
                scaled as i64
            }
            None => 0,
        }
    };
    let score = |k: usize, c: usize| overlap[k][c] * OVERLAP_UNIT - penalty(k, c);
    if r_ref <= r_draw {
        let w = Matrix::from_fn(r_ref, r_draw, |(k, c)| score(k, c));
        let (_, mapping) = kuhn_munkres(&w);
        return Ok(ClusterMatching {
            mapping,
            bijective: true,
        });
    }
    // more reference clusters than draw clusters: match draw clusters onto
    // reference clusters, then seat the leftovers by majority overlap
    let w = Matrix::from_fn(r_draw, r_ref, |(c, k)| score(k, c));
    let (_, inverse) = kuhn_munkres(&w);
    let mut mapping = vec![usize::MAX; r_ref];
    for (c, &k) in inverse.iter().enumerate() {
        mapping[k] = c;
    }
    for (k, slot) in mapping.iter_mut().enumerate() {
        if *slot == usize::MAX {
            *slot = (0..r_draw)
                .max_by_key(|&c| score(k, c))
                .ok_or(Error::LabelMatchFailure)?;
        }
    }
    Ok(ClusterMatching {
        mapping,
        bijective: false,
    })
}

/// Strict variant: fails when no bijective matching exists.
pub fn match_clusters_strict(
    draw_labels: &[usize],
    draw_params: &[ClusterParams],
    reference: &Partition,
) -> Result<ClusterMatching> {
    let m = match_clusters(draw_labels, draw_params, reference, None)?;
    if m.bijective {
        Ok(m)
    } else {
        Err(Error::LabelMatchFailure)
    }
}

/// Least-squares partition estimate: the stored draw whose co-clustering
/// indicator is closest to the posterior co-clustering matrix.
pub fn dahl_partition(chain: &ChainOutput) -> Result<(usize, Partition)> {
    let cc = coclustering_matrix(chain)?;
    let n = cc.n();
    let mut best = (f64::INFINITY, 0);
    for (t, d) in chain.draws.iter().enumerate() {
        let mut loss = 0.0;
        for i in 0..n {
            for j in 0..i {
                let a = if d.labels[i] == d.labels[j] { 1.0 } else { 0.0 };
                loss += (a - cc.matrix[(i, j)]).powi(2);
            }
        }
        if loss < best.0 {
            best = (loss, t);
        }
    }
    Ok((best.1, Partition::from_labels(&chain.draws[best.1].labels)))
}

/// Adjusted Rand index of two clusterings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    let pa = Partition::from_labels(a);
    let pb = Partition::from_labels(b);
    let mut table = vec![vec![0u64; pb.n_clusters()]; pa.n_clusters()];
    for i in 0..n {
        table[pa.label(i)][pb.label(i)] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sa: f64 = pa.sizes().iter().map(|&v| c2(v as u64)).sum();
    let sb: f64 = pb.sizes().iter().map(|&v| c2(v as u64)).sum();
    let total = c2(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both clusterings trivial in the same way
        return Ok(if pa.canonical() == pb.canonical() {
            1.0
        } else {
            0.0
        });
    }
    Ok((index - expected) / (max - expected))
}

/// Traces of the label-free scalars: noise variance, mass, cluster count and
/// noise correlations.
pub fn scalar_traces(chain: &ChainOutput) -> Result<Traces> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    let d = &chain.draws;
    let mut t = Traces {
        iterations: d.iter().map(|d| d.iteration).collect(),
        ..Default::default()
    };
    t.push(
        "sigma_eps2".into(),
        d.iter().map(|d| d.sigma_eps2).collect(),
    );
    t.push("m0".into(), d.iter().map(|d| d.m0).collect());
    t.push(
        "n_clusters".into(),
        d.iter().map(|d| d.n_clusters() as f64).collect(),
    );
    let q = chain.q;
    for a in 0..q {
        for b in (a + 1)..q {
            t.push(
                format!("sigma_omega[{a},{b}]"),
                d.iter().map(|d| d.sigma_omega[(a, b)]).collect(),
            );
        }
    }
    Ok(t)
}

/// Cluster-parameter traces after matching every draw to a reference
/// partition. Names are `beta[k,q,s]` and `gamma[k,q,d]`.
pub fn matched_traces(
    chain: &ChainOutput,
    reference: &Partition,
    reference_params: Option<&[ClusterParams]>,
) -> Result<(Traces, usize)> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    let r = reference.n_clusters();
    let (q, s, dd) = (chain.q, chain.s, chain.d_star);
    let mut beta = vec![vec![Vec::with_capacity(chain.draws.len()); q * s]; r];
    let mut gamma = vec![vec![Vec::with_capacity(chain.draws.len()); q * dd]; r];
    let mut fallbacks = 0;
    for d in &chain.draws {
        let m = match_clusters(&d.labels, &d.clusters, reference, reference_params)?;
        if !m.bijective {
            fallbacks += 1;
        }
        for k in 0..r {
            let c = &d.clusters[m.mapping[k]];
            for qi in 0..q {
                for si in 0..s {
                    beta[k][qi * s + si].push(c.beta[(qi, si)]);
                }
                for di in 0..dd {
                    gamma[k][qi * dd + di].push(c.gamma[(qi, di)]);
                }
            }
        }
    }
    let mut t = Traces {
        iterations: chain.draws.iter().map(|d| d.iteration).collect(),
        ..Default::default()
    };
    for (k, cols) in beta.into_iter().enumerate() {
        for (idx, v) in cols.into_iter().enumerate() {
            t.push(format!("beta[{},{},{}]", k, idx / s, idx % s), v);
        }
    }
    for (k, cols) in gamma.into_iter().enumerate() {
        for (idx, v) in cols.into_iter().enumerate() {
            t.push(format!("gamma[{},{},{}]", k, idx / dd, idx % dd), v);
        }
    }
    Ok((t, fallbacks))
}

/// Equal-tailed intervals for the label-free scalars and for the cluster
/// parameters matched to the least-squares partition.
pub fn credible_intervals(chain: &ChainOutput, level: f64) -> Result<Vec<PosteriorSummary>> {
    let mut out = scalar_traces(chain)?.summaries(level)?;
    let (_, map) = dahl_partition(chain)?;
    let (matched, _) = matched_traces(chain, &map, None)?;
    out.extend(matched.summaries(level)?);
    Ok(out)
}

/// Mean squared error of the draws against a simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    /// Per truth cluster, Q x S.
    #[serde(with = "crate::linalg::serde_matrix_vec")]
    pub beta: Vec<DMatrix<f64>>,
    /// Per truth cluster, Q x D*; absent when the fitted basis has another D*.
    #[serde(with = "crate::linalg::serde_matrix_vec")]
    pub gamma: Vec<DMatrix<f64>>,
    pub sigma_eps2: f64,
    /// Upper-triangle entries of the noise correlation in row order.
    pub sigma_omega: Vec<f64>,
    /// Draws where the matching was not bijective.
    pub fallback_draws: usize,
    pub n_draws: usize,
}

impl MseTable {
    pub fn beta_mean(&self) -> f64 {
        let (sum, cnt) = self
            .beta
            .iter()
            .fold((0.0, 0usize), |(s, c), m| (s + m.sum(), c + m.len()));
        sum / cnt as f64
    }

    pub fn beta_max(&self) -> f64 {
        self.beta
            .iter()
            .flat_map(|m| m.iter().copied())
            .fold(0.0, f64::max)
    }
}

fn check_truth(chain: &ChainOutput, truth: &GroundTruth) -> Result<Partition> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    if truth.labels.len() != chain.n {
        return Err(Error::DimensionMismatch {
            expected: chain.n,
            got: truth.labels.len(),
        });
    }
    let b = &truth.betas[0];
    if b.nrows() != chain.q || b.ncols() != chain.s {
        return Err(Error::DimensionMismatch {
            expected: chain.q * chain.s,
            got: b.len(),
        });
    }
    Ok(truth.partition())
}

fn truth_params(truth: &GroundTruth) -> Vec<ClusterParams> {
    truth
        .betas
        .iter()
        .zip(&truth.gammas)
        .map(|(b, g)| ClusterParams {
            beta: b.clone(),
            gamma: g.clone(),
        })
        .collect()
}

pub fn mse_vs_truth(chain: &ChainOutput, truth: &GroundTruth) -> Result<MseTable> {
    let reference = check_truth(chain, truth)?;
    let tp = truth_params(truth);
    let r = reference.n_clusters();
    let (q, s) = (chain.q, chain.s);
    let gamma_ok = truth.gammas[0].ncols() == chain.d_star;
    let mut beta = vec![DMatrix::zeros(q, s); r];
    let mut gamma = if gamma_ok {
        vec![DMatrix::zeros(q, chain.d_star); r]
    } else {
        Vec::new()
    };
    let mut s2 = 0.0;
    let mut so = vec![0.0; q * q.saturating_sub(1) / 2];
    let mut fallback_draws = 0;
    for d in &chain.draws {
        let m = match_clusters(&d.labels, &d.clusters, &reference, Some(&tp))?;
        if !m.bijective {
            fallback_draws += 1;
        }
        for k in 0..r {
            let c = &d.clusters[m.mapping[k]];
            beta[k] += (&c.beta - &truth.betas[k]).map(|v| v * v);
            if gamma_ok {
                gamma[k] += (&c.gamma - &truth.gammas[k]).map(|v| v * v);
            }
        }
        s2 += (d.sigma_eps2 - truth.sigma_eps2).powi(2);
        let mut idx = 0;
        for a in 0..q {
            for b in (a + 1)..q {
                so[idx] += (d.sigma_omega[(a, b)] - truth.sigma_omega[(a, b)]).powi(2);
                idx += 1;
            }
        }
    }
    let t = chain.draws.len() as f64;
    beta.iter_mut().for_each(|m| *m /= t);
    gamma.iter_mut().for_each(|m| *m /= t);
    so.iter_mut().for_each(|v| *v /= t);
    Ok(MseTable {
        beta,
        gamma,
        sigma_eps2: s2 / t,
        sigma_omega: so,
        fallback_draws,
        n_draws: chain.draws.len(),
    })
}

/// Share of truth cluster coefficients covered by their matched intervals.
pub fn beta_coverage(chain: &ChainOutput, truth: &GroundTruth, level: f64) -> Result<f64> {
    let reference = check_truth(chain, truth)?;
    let tp = truth_params(truth);
    let (traces, _) = matched_traces(chain, &reference, Some(&tp))?;
    let mut hit = 0;
    let mut total = 0;
    for (name, values) in traces.names.iter().zip(&traces.values) {
        let Some(idx) = name.strip_prefix("beta[") else {
            continue;
        };
        let parts: Vec<usize> = idx
            .trim_end_matches(']')
            .split(',')
            .map(|p| p.parse().expect("trace index"))
            .collect();
        let sm = summarize(name.clone(), values, level)?;
        total += 1;
        if sm.covers(truth.betas[parts[0]][(parts[1], parts[2])]) {
            hit += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Mean over draws, visits and items of the squared error of the fitted
/// combination effect `gamma_{c_i} h_ij` against `true_effects` (N x Q).
pub fn combination_effect_mse(
    chain: &ChainOutput,
    data: &ModelData,
    true_effects: &DMatrix<f64>,
) -> Result<f64> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    if true_effects.shape() != (data.n_visits(), data.q()) {
        return Err(Error::DimensionMismatch {
            expected: data.n_visits() * data.q(),
            got: true_effects.len(),
        });
    }
    let mut total = 0.0;
    for d in &chain.draws {
        total += draw_effect_sse(d, data, true_effects);
    }
    Ok(total / (chain.draws.len() * true_effects.len()) as f64)
}

/// Squared error of the posterior-mean combination effect: draws are averaged
/// per visit first, so this measures bias of the point estimate rather than
/// the spread of the posterior.
pub fn posterior_mean_effect_mse(
    chain: &ChainOutput,
    data: &ModelData,
    true_effects: &DMatrix<f64>,
) -> Result<f64> {
    if chain.draws.is_empty() {
        return Err(Error::EmptyChain);
    }
    if true_effects.shape() != (data.n_visits(), data.q()) {
        return Err(Error::DimensionMismatch {
            expected: data.n_visits() * data.q(),
            got: true_effects.len(),
        });
    }
    let mut mean = DMatrix::<f64>::zeros(data.n_visits(), data.q());
    for d in &chain.draws {
        for (i, r) in data.ranges.iter().enumerate() {
            let g = &d.params_of(i).gamma;
            let mut rows = mean.rows_mut(r.start, r.len());
            rows += data.h.rows(r.start, r.len()) * g.transpose();
        }
    }
    mean /= chain.draws.len() as f64;
    Ok((mean - true_effects).norm_squared() / true_effects.len() as f64)
}

fn draw_effect_sse(d: &Draw, data: &ModelData, true_effects: &DMatrix<f64>) -> f64 {
    let mut sse = 0.0;
    for (i, r) in data.ranges.iter().enumerate() {
        let g = &d.params_of(i).gamma;
        let est = data.h.rows(r.start, r.len()) * g.transpose();
        sse += (est - true_effects.rows(r.start, r.len())).norm_squared();
    }
    sse
}

/// Summary bundle written by the `diagnose` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub n_draws: usize,
    pub level: f64,
    pub cluster_count: ClusterCountPosterior,
    pub map_draw: usize,
    pub map_clusters: usize,
    pub permutation_acceptance: Option<f64>,
    pub sigma_omega_acceptance: Option<f64>,
    pub summaries: Vec<PosteriorSummary>,
    pub mse: Option<MseTable>,
    pub map_ari: Option<f64>,
    pub beta_coverage: Option<f64>,
}

impl DiagnosticReport {
    pub fn build(chain: &ChainOutput, level: f64, truth: Option<&GroundTruth>) -> Result<Self> {
        let (map_draw, map) = dahl_partition(chain)?;
        let rate = |v: f64| v.is_finite().then_some(v);
        let (mse, map_ari, coverage) = match truth {
            Some(t) => (
                Some(mse_vs_truth(chain, t)?),
                Some(adjusted_rand_index(map.labels(), &t.labels)?),
                Some(beta_coverage(chain, t, level)?),
            ),
            None => (None, None, None),
        };
        Ok(Self {
            n_draws: chain.draws.len(),
            level,
            cluster_count: cluster_count_posterior(chain)?,
            map_draw,
            map_clusters: map.n_clusters(),
            permutation_acceptance: rate(chain.acceptance.permutation.rate()),
            sigma_omega_acceptance: rate(chain.acceptance.sigma_omega.rate()),
            summaries: credible_intervals(chain, level)?,
            mse,
            map_ari,
            beta_coverage: coverage,
        })
    }

    /// Writes `summary.json`, `summaries.csv`, `traces.csv`, `acf.csv`,
    /// `cluster_counts.csv` and `coclustering.csv` into `dir`.
    pub fn write_dir(
        &self,
        chain: &ChainOutput,
        ids: &[String],
        dir: impl AsRef<Path>,
    ) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("summary.json"))?, self)?;
        write_summaries_csv(
            &self.summaries,
            std::fs::File::create(dir.join("summaries.csv"))?,
        )?;

        let (_, map) = dahl_partition(chain)?;
        let mut traces = scalar_traces(chain)?;
        let (matched, _) = matched_traces(chain, &map, None)?;
        traces.names.extend(matched.names);
        traces.values.extend(matched.values);
        traces.write_csv(std::fs::File::create(dir.join("traces.csv"))?)?;

        let mut w = csv::Writer::from_path(dir.join("acf.csv"))?;
        w.write_record(["parameter", "lag", "acf"])?;
        for (name, v) in traces.names.iter().zip(&traces.values) {
            for (lag, a) in autocorrelation(v, 50).iter().enumerate() {
                w.write_record([name.clone(), lag.to_string(), format!("{a:?}")])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("cluster_counts.csv"))?;
        w.write_record(["n_clusters", "draws", "probability"])?;
        for (r, p) in &self.cluster_count.pmf {
            w.write_record([
                r.to_string(),
                self.cluster_count.counts[r].to_string(),
                format!("{p:?}"),
            ])?;
        }
        w.flush()?;

        coclustering_matrix(chain)?
            .write_csv(ids, std::fs::File::create(dir.join("coclustering.csv"))?)
    }
}

pub fn write_summaries_csv<W: Write>(summaries: &[PosteriorSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "parameter",
        "mean",
        "sd",
        "median",
        "level",
        "lower",
        "upper",
        "ess",
        "acf1",
    ])?;
    for s in summaries {
        w.write_record([
            s.name.clone(),
            format!("{:?}", s.mean),
            format!("{:?}", s.sd),
            format!("{:?}", s.median),
            format!("{:?}", s.level),
            format!("{:?}", s.lower),
            format!("{:?}", s.upper),
            format!("{:?}", s.ess),
            s.acf.first().map(|v| format!("{v:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Settings of the joint-distribution sampler test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GewekeConfig {
    pub n: usize,
    pub visits: usize,
    pub q: usize,
    pub s: usize,
    pub d_star: usize,
    /// Sweeps of the successive-conditional chain.
    pub n_iter: usize,
    pub burn_in: usize,
    /// Independent prior-predictive draws.
    pub n_prior: usize,
    pub seed: u64,
    pub sigma_eps_mode: SigmaEpsMode,
    pub sigma_omega_step: f64,
    pub sigma_omega_proposals: usize,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        Self {
            n: 8,
            visits: 2,
            q: 2,
            s: 2,
            d_star: 2,
            n_iter: 20_000,
            burn_in: 1_000,
            n_prior: 20_000,
            seed: 11,
            sigma_eps_mode: SigmaEpsMode::Consistent,
            sigma_omega_step: 0.4,
            sigma_omega_proposals: 4,
        }
    }
}

impl GewekeConfig {
    /// Proper priors with finite second moments for every tracked quantity.
    pub fn hyperparams(&self) -> Hyperparams {
        let (s, d) = (self.s, self.d_star);
        let b0 = s as f64 + 6.0;
        let lambda0 = d as f64 + 6.0;
        Hyperparams {
            c0: 2.0,
            d0: 2.0,
            g1: 6.0,
            g2: 5.0,
            e0: DMatrix::identity(s, s),
            b0,
            b0_scale: DMatrix::identity(s, s) * (b0 - s as f64 - 1.0),
            f0: DMatrix::identity(d, d),
            lambda0,
            lambda0_scale: DMatrix::identity(d, d) * (lambda0 - d as f64 - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeMoment {
    pub name: String,
    pub prior_mean: f64,
    pub sampler_mean: f64,
    pub sampler_ess: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeReport {
    pub config: GewekeConfig,
    pub inconclusive: bool,
    pub moments: Vec<GewekeMoment>,
}

impl GewekeReport {
    pub const FLAG_Z: f64 = 4.0;

    pub fn fraction_within(&self, bound: f64) -> f64 {
        if self.moments.is_empty() {
            return 0.0;
        }
        self.moments.iter().filter(|m| m.z.abs() < bound).count() as f64 / self.moments.len() as f64
    }

    pub fn flagged(&self) -> Vec<&GewekeMoment> {
        self.moments
            .iter()
            .filter(|m| m.z.abs() > Self::FLAG_Z)
            .collect()
    }

    pub fn is_flagged(&self, name: &str) -> bool {
        self.flagged().iter().any(|m| m.name == name)
    }
}

/// Quantities tracked by the joint test, first moments followed by squares.
fn geweke_functions(sampler: &Sampler) -> Vec<(String, f64)> {
    let st = &sampler.state;
    let p0 = &st.clusters[st.labels[0]];
    let mut base = vec![
        ("sigma_eps2".to_string(), st.noise.sigma_eps2),
        ("m0".to_string(), st.m0),
        ("n_clusters".to_string(), st.clusters.len() as f64),
        ("sigma_omega[0,1]".to_string(), st.noise.sigma_omega[(0, 1)]),
        ("e[0,0]".to_string(), st.latent.e[0][0]),
        ("B[0][0,0]".to_string(), st.latent.b[0][(0, 0)]),
        ("Lambda[0][0,0]".to_string(), st.latent.lambda[0][(0, 0)]),
    ];
    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        base.push((format!("beta_0[{a},{b}]"), p0.beta[(a, b)]));
        base.push((format!("gamma_0[{a},{b}]"), p0.gamma[(a, b)]));
    }
    for c in 0..2 {
        base.push((format!("omega[0,{c}]"), st.noise.omega[(0, c)]));
        base.push((format!("y[0,{c}]"), sampler.data.y[(0, c)]));
    }
    let mut out = base.clone();
    for (name, v) in &base {
        out.push((format!("{name}^2"), v * v));
    }
    out.push((
        "same_cluster(0,1)".to_string(),
        if st.labels[0] == st.labels[1] {
            1.0
        } else {
            0.0
        },
    ));
    out
}

fn tiny_model(cfg: &GewekeConfig, rng: &mut ChaCha8Rng) -> Result<(ModelData, DMatrix<f64>)> {
    let rows = cfg.n * cfg.visits;
    let normal = rand_distr::StandardNormal;
    let x = DMatrix::from_fn(rows, cfg.s, |_, c| {
        if c == 0 {
            1.0
        } else {
            rng.sample::<f64, _>(normal)
        }
    });
    let h = DMatrix::from_fn(rows, cfg.d_star, |_, _| rng.sample::<f64, _>(normal));
    let y = DMatrix::zeros(rows, cfg.q);
    let data = ModelData::new(y, x, h, &vec![cfg.visits; cfg.n])?;
    let mut sim = DMatrix::from_element(cfg.n, cfg.n, 1.0);
    for i in 0..cfg.n {
        for j in 0..i {
            let v = rng.random_range(0.1..1.0);
            sim[(i, j)] = v;
            sim[(j, i)] = v;
        }
    }
    Ok((data, sim))
}

/// Joint-distribution test: moments of independent prior-predictive draws
/// against a chain alternating sampler sweeps with fresh outcomes. With
/// zero sweeps the report is inconclusive.
pub fn geweke_joint_test(cfg: &GewekeConfig) -> Result<GewekeReport> {
    if cfg.q < 2 || cfg.s < 2 || cfg.d_star < 2 || cfg.n < 2 {
        return Err(Error::InvalidConfig(
            "joint test needs n, Q, S and D* of at least 2".into(),
        ));
    }
    if cfg.n_iter == 0 || cfg.n_prior == 0 || cfg.burn_in >= cfg.n_iter {
        return Ok(GewekeReport {
            config: cfg.clone(),
            inconclusive: true,
            moments: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (data, sim) = tiny_model(cfg, &mut rng)?;
    let hyper = cfg.hyperparams();
    let mcmc = McmcConfig {
        n_iter: cfg.n_iter,
        burn_in: 0,
        thin: 1,
        seed: rng.random(),
        sigma_eps_mode: cfg.sigma_eps_mode,
        sigma_omega_step: cfg.sigma_omega_step,
        sigma_omega_proposals: cfg.sigma_omega_proposals,
        permutation_shuffle_size: 3,
        hyperparams: Some(hyper.clone()),
        ..McmcConfig::default()
    };
    let mut sampler = Sampler::new(data, sim, hyper, mcmc)?;

    let mut prior: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for _ in 0..cfg.n_prior {
        sampler.draw_state_from_prior()?;
        sampler.regenerate_outcomes();
        let g = geweke_functions(&sampler);
        if names.is_empty() {
            names = g.iter().map(|(n, _)| n.clone()).collect();
            prior = vec![Vec::with_capacity(cfg.n_prior); g.len()];
        }
        for (k, (_, v)) in g.into_iter().enumerate() {
            prior[k].push(v);
        }
    }

    sampler.draw_state_from_prior()?;
    sampler.regenerate_outcomes();
    let mut chain = vec![Vec::with_capacity(cfg.n_iter - cfg.burn_in); names.len()];
    for it in 0..cfg.n_iter {
        sampler.step()?;
        sampler.regenerate_outcomes();
        if it >= cfg.burn_in {
            for (k, (_, v)) in geweke_functions(&sampler).into_iter().enumerate() {
                chain[k].push(v);
            }
        }
    }

    let moments = names
        .into_iter()
        .zip(prior.iter().zip(&chain))
        .map(|(name, (p, c))| {
            let (pm, pv) = mean_var(p);
            let (cm, cv) = mean_var(c);
            let ess = effective_sample_size(c);
            let se = (pv / p.len() as f64 + cv / ess).sqrt();
            let z = if se > 0.0 { (pm - cm) / se } else { 0.0 };
            GewekeMoment {
                name,
                prior_mean: pm,
                sampler_mean: cm,
                sampler_ess: ess,
                z,
            }
        })
        .collect();
    Ok(GewekeReport {
        config: cfg.clone(),
        inconclusive: false,
        moments,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coclustering_of_identical_draws() {
        let l = [0usize, 0, 1, 2, 1];
        let cc = coclustering_from_labels([&l[..], &l[..]]).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(cc.matrix[(i, j)], if l[i] == l[j] { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn coclustering_averages_two_partitions() {
        let a = [0usize, 0, 1];
        let b = [0usize, 1, 1];
        let cc = coclustering_from_labels([&a[..], &b[..]]).unwrap();
        assert_eq!(cc.matrix[(0, 1)], 0.5);
        assert_eq!(cc.matrix[(1, 2)], 0.5);
        assert_eq!(cc.matrix[(0, 2)], 0.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let none: [&[usize]; 0] = [];
        assert_eq!(
            coclustering_from_labels(none).unwrap_err(),
            Error::EmptyChain
        );
        assert!(summarize("x", &[], 0.9).is_err());
        assert!(summarize("x", &[1.0], 1.0).is_err());
    }

    #[test]
    fn ess_of_white_noise_and_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let white: Vec<f64> = (0..20_000)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let ess = effective_sample_size(&white);
        assert!((ess / 20_000.0 - 1.0).abs() < 0.1, "{ess}");
        // AR(1) with phi = 0.8 has ESS ratio (1 - phi) / (1 + phi)
        let mut x = 0.0;
        let ar: Vec<f64> = (0..50_000)
            .map(|_| {
                x = 0.8 * x + rng.sample::<f64, _>(rand_distr::StandardNormal);
                x
            })
            .collect();
        let ratio = effective_sample_size(&ar) / 50_000.0;
        assert!((ratio - 1.0 / 9.0).abs() < 0.03, "{ratio}");
    }

    #[test]
    fn ari_bounds() {
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(),
            1.0
        );
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn matching_follows_overlap() {
        let reference = Partition::from_labels(&[0, 0, 1, 1, 2]);
        let params = vec![ClusterParams::zeros(1, 1, 1); 3];
        let m = match_clusters(&[2, 2, 0, 0, 1], &params, &reference, None).unwrap();
        assert_eq!(m.mapping, vec![2, 0, 1]);
        assert!(m.bijective);
        let m = match_clusters(&[0, 0, 0, 0, 1], &params[..2], &reference, None).unwrap();
        assert!(!m.bijective);
        assert_eq!(m.mapping[2], 1);
        assert!(match_clusters_strict(&[0, 0, 0, 0, 1], &params[..2], &reference).is_err());
    }

    #[test]
    fn zero_iterations_is_inconclusive() {
        let cfg = GewekeConfig {
            n_iter: 0,
            ..GewekeConfig::default()
        };
        let r = geweke_joint_test(&cfg).unwrap();
        assert!(r.inconclusive);
        assert!(r.moments.is_empty());
    }
}
