#![allow(dead_code)]

pub mod fragments;

use artmix::mcmc::{McmcConfig, Sampler, UpdateMask};
use artmix::model::{ClusterParams, ModelData};
use artmix::partition::Partition;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All set partitions of `n` items as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..=max {
            cur.push(l);
            rec(i + 1, n, cur, if l == max { max + 1 } else { max }, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    rec(0, n, &mut Vec::new(), 0, &mut out);
    out
}

/// Relabels a partition to its restricted growth string.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    Partition::from_labels(labels).canonical().labels().to_vec()
}

pub fn random_positive_sim(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 + rng.random::<f64>();
        for j in 0..i {
            let v = 0.01 + rng.random::<f64>() * 3.0;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn toy_data(n: usize, visits: usize, q: usize, s: usize, d: usize, seed: u64) -> ModelData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = n * visits;
    let y = DMatrix::from_fn(rows, q, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let x = DMatrix::from_fn(rows, s, |_, c| {
        if c == 0 {
            1.0
        } else {
            rng.random::<f64>() * 2.0 - 1.0
        }
    });
    let h = DMatrix::from_fn(rows, d, |_, _| rng.random::<f64>() - 0.5);
    ModelData::new(y, x, h, &vec![visits; n]).unwrap()
}

pub fn no_updates() -> UpdateMask {
    UpdateMask {
        partition: false,
        mass: false,
        permutation: false,
        cluster_params: false,
        hyper: false,
        omega: false,
        sigma_omega: false,
        sigma_eps: false,
    }
}

pub fn config_with(updates: UpdateMask, seed: u64) -> McmcConfig {
    McmcConfig {
        n_iter: 2,
        burn_in: 1,
        thin: 1,
        seed,
        updates,
        ..McmcConfig::default()
    }
}

/// Replaces the sampler's partition, giving every cluster zero parameters.
pub fn set_partition(sampler: &mut Sampler, labels: &[usize]) {
    let part = Partition::from_labels(labels);
    let (q, s, d) = (sampler.data.q(), sampler.data.s(), sampler.data.d_star());
    sampler.state.labels = part.labels().to_vec();
    sampler.state.sizes = part.sizes();
    sampler.state.clusters = vec![ClusterParams::zeros(q, s, d); part.n_clusters()];
}

/// Monte Carlo standard error of a trace mean, from its effective sample size.
pub fn mc_se(trace: &[f64]) -> f64 {
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let var = trace.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ess = artmix::diagnostics::effective_sample_size(trace).max(1.0);
    (var / ess).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One row of the exact-posterior partition comparison.
pub struct PartitionFrequency {
    pub labels: Vec<usize>,
    pub exact: f64,
    pub observed: f64,
    pub se: f64,
}

impl PartitionFrequency {
    pub fn within(&self, k: f64) -> bool {
        (self.observed - self.exact).abs() <= k * self.se
    }
}

/// Log density of `y ~ N(0, X X' + H H' + I)` on the stacked rows of one
/// cluster, per item.
fn cluster_log_marginal(data: &ModelData, members: &[usize]) -> f64 {
    let rows: Vec<usize> = members
        .iter()
        .flat_map(|&i| data.ranges[i].clone())
        .collect();
    let m = rows.len();
    let x = DMatrix::from_fn(m, data.s(), |r, c| data.x[(rows[r], c)]);
    let h = DMatrix::from_fn(m, data.d_star(), |r, c| data.h[(rows[r], c)]);
    let cov = &x * x.transpose() + &h * h.transpose() + DMatrix::identity(m, m);
    let chol = cov.cholesky().unwrap();
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let mut total = 0.0;
    for q in 0..data.q() {
        let y = nalgebra::DVector::from_fn(m, |r, _| data.y[(rows[r], q)]);
        let quad = y.dot(&chol.solve(&y));
        total += -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    }
    total
}

/// Runs partition and cluster-parameter updates under a plain CRP prior with
/// every other quantity held at `omega = 0`, `sigma_eps2 = 1`, `e = f = 0`,
/// `B = Lambda = I`, and compares the visited partition frequencies with the
/// brute-force posterior.
pub fn exact_partition_posterior_check(sweeps: usize, seed: u64) -> Vec<PartitionFrequency> {
    use artmix::mcmc::BaselineMode;
    let n = 4;
    let y = DMatrix::from_row_slice(8, 1, &[1.6, 1.1, 0.9, 1.8, -1.0, -1.5, 0.3, -0.2]);
    let x = DMatrix::from_element(8, 1, 1.0);
    let h = DMatrix::from_row_slice(8, 1, &[0.4, -0.1, 0.2, 0.3, -0.4, 0.1, 0.0, -0.3]);
    let data = ModelData::new(y, x, h, &[2; 4]).unwrap();
    let m0: f64 = 1.0;

    let parts = set_partitions(n);
    let log_post: Vec<f64> = parts
        .iter()
        .map(|p| {
            let part = Partition::new(p.clone()).unwrap();
            let mut lp = m0.ln() * part.n_clusters() as f64;
            for size in part.sizes() {
                lp += (1..size).map(|k| (k as f64).ln()).sum::<f64>();
            }
            for members in part.members() {
                lp += cluster_log_marginal(&data, &members);
            }
            lp
        })
        .collect();
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_post.iter().map(|l| (l - max).exp()).sum();
    let exact: Vec<f64> = log_post.iter().map(|l| (l - max).exp() / z).collect();

    let updates = UpdateMask {
        partition: true,
        cluster_params: true,
        ..no_updates()
    };
    let mut cfg = config_with(updates, seed);
    cfg.baseline_mode = BaselineMode::DpLinear;
    cfg.initial_m0 = m0;
    let hyper = artmix::model::Hyperparams::defaults(1, 1);
    let mut sampler = Sampler::new(data, DMatrix::from_element(n, n, 1.0), hyper, cfg).unwrap();
    let index: std::collections::HashMap<Vec<usize>, usize> = parts
        .iter()
        .enumerate()
        .map(|(k, p)| (p.clone(), k))
        .collect();
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(sweeps); parts.len()];
    for _ in 0..sweeps {
        sampler.step().unwrap();
        let k = index[&canonical(&sampler.state.labels)];
        for (j, t) in traces.iter_mut().enumerate() {
            t.push(if j == k { 1.0 } else { 0.0 });
        }
    }
    parts
        .into_iter()
        .zip(exact)
        .zip(traces)
        .map(|((labels, exact), trace)| {
            let ess = artmix::diagnostics::effective_sample_size(&trace).max(1.0);
            PartitionFrequency {
                labels,
                exact,
                observed: mean(&trace),
                se: (exact * (1.0 - exact) / ess).sqrt(),
            }
        })
        .collect()
}
