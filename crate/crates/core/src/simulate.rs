//! Synthetic datasets with known truth for recovery experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::std_normal_vec;
use crate::error::{Error, Result};
use crate::features::{FeatureKernel, FeatureMatrix, FeatureOptions, KernelFeatureBasis};
use crate::kernel::{similarity_matrix, KernelConfig, MatchMode};
use crate::linalg::{cholesky, is_positive_definite, serde_matrix, serde_matrix_vec};
use crate::model::{Individual, LongitudinalDataset, Visit};
use crate::partition::{ddcrp_sample, Partition, SimilarityContext};
use crate::regimen::{DrugClass, DrugDictionary, Regimen, RegimenHistory};

/// Cluster-by-item coefficient truths reported for the three-cluster,
/// three-item, three-covariate design (`[cluster][item][covariate]`).
pub const TABLE_S1_BETA: [[[f64; 3]; 3]; 3] = [
    [
        [0.4201738, -1.5065858, 0.4573016],
        [0.1002570, 0.3885576, -2.5187332],
        [0.8705657, -0.3111586, -0.5348084],
    ],
    [
        [-1.2951632, -0.07094494, -0.7004121],
        [-0.8044954, 0.12646919, -0.3280640],
        [1.3418530, -0.98949773, -0.3472228],
    ],
    [
        [0.4265138, -0.2214469, 0.1368007],
        [-0.3282160, -2.4289411, -0.5135745],
        [0.5458084, 1.7959664, 0.7342632],
    ],
];

/// Where treatment histories come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistorySource {
    /// Random visit sequences over a popularity-weighted regimen catalog.
    Synthetic {
        pool_size: usize,
        min_len: usize,
        max_len: usize,
    },
    /// CSV `individual_id,visit_index,regimen`, sampled without replacement.
    PoolFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionTruth {
    /// One draw from the ddCRP prior.
    Prior,
    /// Prior draws rejected until exactly `clusters` clusters of at least
    /// `min_size` members appear.
    PriorConditioned {
        clusters: usize,
        min_size: usize,
        max_tries: usize,
    },
    /// A supplied partition (zero-based labels).
    Fixed { labels: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaTruth {
    #[default]
    StandardNormal,
    /// The published coefficient table (requires 3 clusters, Q = S = 3).
    TableS1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub q: usize,
    pub s: usize,
    pub eta_true: f64,
    pub match_mode: MatchMode,
    pub history_source: HistorySource,
    pub rep_threshold: usize,
    pub variance_threshold: f64,
    /// Upper-triangle correlations in row-major order: (12, 13, ..., 23, ...).
    pub correlation_offdiag: Vec<f64>,
    pub sigma_eps2_true: f64,
    pub m0_true: f64,
    pub partition: PartitionTruth,
    pub beta_truth: BetaTruth,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 200,
            q: 3,
            s: 3,
            eta_true: 0.5,
            match_mode: MatchMode::Strict,
            history_source: HistorySource::Synthetic {
                pool_size: 400,
                min_len: 2,
                max_len: 38,
            },
            rep_threshold: crate::features::DEFAULT_REP_THRESHOLD,
            variance_threshold: crate::features::DEFAULT_VARIANCE_THRESHOLD,
            correlation_offdiag: vec![0.25, 0.5, 0.75],
            sigma_eps2_true: 1.0,
            m0_true: 1.0,
            partition: PartitionTruth::Prior,
            beta_truth: BetaTruth::StandardNormal,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn correlation_matrix(&self) -> Result<DMatrix<f64>> {
        let q = self.q;
        let expected = q * (q - 1) / 2;
        if self.correlation_offdiag.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.correlation_offdiag.len(),
            });
        }
        let mut m = DMatrix::identity(q, q);
        let mut it = self.correlation_offdiag.iter();
        for i in 0..q {
            for j in (i + 1)..q {
                let v = *it.next().expect("length checked");
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        if !is_positive_definite(&m) {
            return Err(Error::InvalidConfig(
                "correlation_offdiag is not a valid correlation matrix".into(),
            ));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.q < 1 || self.s < 1 {
            return Err(Error::InvalidConfig("need n >= 2, q >= 1, s >= 1".into()));
        }
        if !(self.sigma_eps2_true > 0.0 && self.m0_true > 0.0) {
            return Err(Error::InvalidConfig(
                "sigma_eps2_true and m0_true must be positive".into(),
            ));
        }
        KernelConfig::new(self.eta_true, self.match_mode)?;
        self.correlation_matrix()?;
        if let HistorySource::Synthetic {
            pool_size,
            min_len,
            max_len,
        } = self.history_source
        {
            if pool_size < self.n {
                return Err(Error::PoolTooSmall {
                    pool: pool_size,
                    requested: self.n,
                });
            }
            if min_len == 0 || min_len > max_len {
                return Err(Error::InvalidConfig("need 1 <= min_len <= max_len".into()));
            }
        }
        Ok(())
    }
}

/// Per-visit regimens of one (synthetic or pooled) individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSequence {
    pub owner: String,
    pub visits: Vec<Option<Regimen>>,
}

impl VisitSequence {
    pub fn history(&self, keep_duplicates: bool) -> RegimenHistory {
        RegimenHistory::from_visits(
            self.owner.clone(),
            self.visits.iter().map(Option::as_ref),
            keep_duplicates,
        )
    }
}

/// Class-plausible regimens over `dict`: one to four drugs, always with at
/// least one NRTI backbone agent, ordered canonically.
pub fn regimen_catalog(dict: &DrugDictionary) -> Vec<Regimen> {
    let nrti: Vec<&str> = dict.codes_in_class(DrugClass::Nrti);
    let anchors: Vec<&str> = [
        DrugClass::Nnrti,
        DrugClass::Pi,
        DrugClass::Insti,
        DrugClass::Ei,
    ]
    .iter()
    .flat_map(|&c| dict.codes_in_class(c))
    .collect();
    let pis: Vec<&str> = dict.codes_in_class(DrugClass::Pi);
    let mut out = std::collections::BTreeSet::new();
    let mut push = |codes: &[&str]| {
        if let Ok(r) = Regimen::from_codes(codes.iter().copied()) {
            out.insert(r);
        }
    };
    for (i, a) in nrti.iter().enumerate() {
        push(&[a]);
        for b in &nrti[i + 1..] {
            push(&[a, b]);
            for x in &anchors {
                push(&[a, b, x]);
            }
            // ritonavir-boosted protease inhibitors
            if pis.contains(&"RTV") {
                for p in pis.iter().filter(|&&p| p != "RTV") {
                    push(&[a, b, p, "RTV"]);
                }
            }
        }
        for x in &anchors {
            push(&[a, x]);
        }
    }
    out.into_iter().collect()
}

/// Draws visit sequences with lengths uniform in `[min_len, max_len]`.
///
/// Regimen popularity follows a Zipf-like law over a randomly ranked
/// catalog; each individual keeps the current regimen with probability 0.8
/// per visit and otherwise switches to a fresh draw. About 2% of later
/// visits record no treatment.
pub fn generate_visit_sequences<R: Rng + ?Sized>(
    pool_size: usize,
    min_len: usize,
    max_len: usize,
    dict: &DrugDictionary,
    rng: &mut R,
) -> Vec<VisitSequence> {
    let mut catalog = regimen_catalog(dict);
    catalog.shuffle(rng);
    let weights: Vec<f64> = (0..catalog.len())
        .map(|r| (r as f64 + 1.0).powf(-1.1))
        .collect();
    let draw = |rng: &mut R| catalog[crate::partition::sample_index(&weights, rng)].clone();
    (0..pool_size)
        .map(|p| {
            let len = rng.random_range(min_len..=max_len);
            let mut visits = Vec::with_capacity(len);
            let mut current = draw(rng);
            for j in 0..len {
                if j > 0 && rng.random::<f64>() >= 0.8 {
                    current = draw(rng);
                }
                if j > 0 && rng.random::<f64>() < 0.02 {
                    visits.push(None);
                } else {
                    visits.push(Some(current.clone()));
                }
            }
            VisitSequence {
                owner: format!("P{:04}", p + 1),
                visits,
            }
        })
        .collect()
}

/// Episode histories of a synthetic pool.
pub fn generate_histories<R: Rng + ?Sized>(
    pool_size: usize,
    max_len: usize,
    dict: &DrugDictionary,
    rng: &mut R,
) -> Vec<RegimenHistory> {
    generate_visit_sequences(pool_size, 1, max_len, dict, rng)
        .iter()
        .map(|v| v.history(false))
        .collect()
}

/// Reads a history pool CSV `individual_id,visit_index,regimen`.
pub fn read_pool(path: impl AsRef<Path>, dict: &DrugDictionary) -> Result<Vec<VisitSequence>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut order = Vec::new();
    let mut by_id: BTreeMap<String, Vec<(i64, Option<Regimen>)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Parse(
                "pool rows need individual_id,visit_index,regimen".into(),
            ));
        }
        let id = rec[0].to_string();
        let idx: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad visit_index `{}`", &rec[1])))?;
        let text = rec[2].trim();
        let reg = if text.is_empty() {
            None
        } else {
            Some(Regimen::parse(text, dict)?)
        };
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push((idx, reg));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let mut v = by_id.remove(&id).unwrap_or_default();
            v.sort_by_key(|(i, _)| *i);
            VisitSequence {
                owner: id,
                visits: v.into_iter().map(|(_, r)| r).collect(),
            }
        })
        .filter(|v| v.visits.iter().any(Option::is_some))
        .collect())
}

/// Known parameters behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Zero-based cluster label per individual.
    pub labels: Vec<usize>,
    pub r_true: usize,
    /// Per cluster, Q x S.
    #[serde(with = "serde_matrix_vec")]
    pub betas: Vec<DMatrix<f64>>,
    /// Per cluster, Q x D*.
    #[serde(with = "serde_matrix_vec")]
    pub gammas: Vec<DMatrix<f64>>,
    #[serde(with = "serde_matrix")]
    pub sigma_omega: DMatrix<f64>,
    pub sigma_eps2: f64,
    pub m0: f64,
    pub eta: f64,
    pub perm: Vec<usize>,
    pub histories: Vec<RegimenHistory>,
    pub basis: KernelFeatureBasis,
}

impl GroundTruth {
    pub fn partition(&self) -> Partition {
        Partition::new(self.labels.clone()).expect("truth labels are contiguous")
    }

    /// True combination effects `gamma_k H_ij` (N x Q) given the true
    /// reduced features and visit counts.
    pub fn combination_effects(
        &self,
        h: &DMatrix<f64>,
        visits_per_individual: &[usize],
    ) -> DMatrix<f64> {
        let q = self.gammas[0].nrows();
        let mut out = DMatrix::zeros(h.nrows(), q);
        let mut row = 0;
        for (i, &j) in visits_per_individual.iter().enumerate() {
            let g = &self.gammas[self.labels[i]];
            for _ in 0..j {
                let e = g * h.row(row).transpose();
                out.set_row(row, &e.transpose());
                row += 1;
            }
        }
        out
    }

    pub fn to_json_path(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: LongitudinalDataset,
    pub truth: GroundTruth,
    /// True features (subset-tree kernel at the true decay factor).
    pub features: FeatureMatrix,
    pub similarity: DMatrix<f64>,
}

impl Simulation {
    pub fn true_effects(&self) -> DMatrix<f64> {
        let counts: Vec<usize> = self
            .dataset
            .individuals
            .iter()
            .map(|i| i.visits.len())
            .collect();
        self.truth
            .combination_effects(&self.features.reduced, &counts)
    }
}

fn draw_partition<R: Rng + ?Sized>(
    cfg: &SimConfig,
    ctx: &SimilarityContext,
    rng: &mut R,
) -> Result<Partition> {
    match &cfg.partition {
        PartitionTruth::Prior => Ok(ddcrp_sample(ctx, rng)),
        PartitionTruth::PriorConditioned {
            clusters,
            min_size,
            max_tries,
        } => {
            for _ in 0..*max_tries {
                let p = ddcrp_sample(ctx, rng);
                if p.n_clusters() == *clusters && p.sizes().iter().all(|s| s >= min_size) {
                    return Ok(p);
                }
            }
            Err(Error::InvalidConfig(format!(
                "no prior draw with {clusters} clusters of size >= {min_size} in {max_tries} tries"
            )))
        }
        PartitionTruth::Fixed { labels } => {
            if labels.len() != cfg.n {
                return Err(Error::DimensionMismatch {
                    expected: cfg.n,
                    got: labels.len(),
                });
            }
            Partition::new(labels.clone())
        }
    }
}

/// Simulates histories, a partition from the ddCRP prior, coefficients and
/// outcomes from the sampling model.
pub fn generate_dataset(cfg: &SimConfig, dict: &DrugDictionary) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, q, s) = (cfg.n, cfg.q, cfg.s);

    let pool = match &cfg.history_source {
        HistorySource::Synthetic {
            pool_size,
            min_len,
            max_len,
        } => generate_visit_sequences(*pool_size, *min_len, *max_len, dict, &mut rng),
        HistorySource::PoolFile { path } => read_pool(path, dict)?,
    };
    if pool.len() < n {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            requested: n,
        });
    }
    let chosen: Vec<VisitSequence> = rand::seq::index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();

    let kcfg = KernelConfig::new(cfg.eta_true, cfg.match_mode)?;
    let histories: Vec<RegimenHistory> = chosen.iter().map(|v| v.history(false)).collect();
    let similarity = similarity_matrix(&histories, dict, &kcfg)?;
    let visit_regimens: Vec<Option<Regimen>> = chosen
        .iter()
        .flat_map(|v| v.visits.iter().cloned())
        .collect();
    let features = KernelFeatureBasis::fit(
        &visit_regimens,
        dict,
        FeatureKernel::SubsetTree(kcfg),
        &FeatureOptions {
            rep_threshold: cfg.rep_threshold,
            variance_threshold: cfg.variance_threshold,
            center: true,
        },
    )?;
    let d_star = features.basis.d_star();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let ctx = SimilarityContext::new(similarity.clone(), perm.clone(), cfg.m0_true)?;
    let part = draw_partition(cfg, &ctx, &mut rng)?;
    let r = part.n_clusters();

    let betas: Vec<DMatrix<f64>> = match cfg.beta_truth {
        BetaTruth::StandardNormal => (0..r)
            .map(|_| DMatrix::from_fn(q, s, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect(),
        BetaTruth::TableS1 => {
            if r != 3 || q != 3 || s != 3 {
                return Err(Error::InvalidConfig(
                    "the published coefficient table needs 3 clusters and Q = S = 3".into(),
                ));
            }
            TABLE_S1_BETA
                .iter()
                .map(|k| DMatrix::from_fn(3, 3, |qi, si| k[qi][si]))
                .collect()
        }
    };
    let gammas: Vec<DMatrix<f64>> = (0..r)
        .map(|_| DMatrix::from_fn(q, d_star, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let sigma_omega = cfg.correlation_matrix()?;
    let l_omega = cholesky(&sigma_omega, "correlation")?.l();
    let sd = cfg.sigma_eps2_true.sqrt();

    let mut individuals = Vec::with_capacity(n);
    let mut row = 0;
    for (i, seq) in chosen.iter().enumerate() {
        let k = part.label(i);
        let x0: f64 = rng.sample(StandardNormal);
        let mut visits = Vec::with_capacity(seq.visits.len());
        for (j, reg) in seq.visits.iter().enumerate() {
            let x = DVector::from_fn(s, |c, _| match c {
                0 => 1.0,
                1 if s >= 3 => x0,
                _ => rng.sample(StandardNormal),
            });
            let h = features.reduced.row(row).transpose();
            let omega = &l_omega * std_normal_vec(&mut rng, q) * sd;
            let eps = std_normal_vec(&mut rng, q) * sd;
            let y = &betas[k] * &x + &gammas[k] * h + omega + eps;
            visits.push(Visit {
                visit_index: j as i64 + 1,
                y: y.iter().copied().collect(),
                x: x.iter().copied().collect(),
                regimen: reg.clone(),
            });
            row += 1;
        }
        individuals.push(Individual {
            id: seq.owner.clone(),
            visits,
        });
    }
    let dataset = LongitudinalDataset::new(
        individuals,
        (1..=q).map(|i| format!("y{i}")).collect(),
        (1..=s).map(|i| format!("x{i}")).collect(),
    )?;
    let truth = GroundTruth {
        labels: part.labels().to_vec(),
        r_true: r,
        betas,
        gammas,
        sigma_omega,
        sigma_eps2: cfg.sigma_eps2_true,
        m0: cfg.m0_true,
        eta: cfg.eta_true,
        perm,
        histories,
        basis: features.basis.clone(),
    };
    Ok(Simulation {
        dataset,
        truth,
        features,
        similarity,
    })
}
