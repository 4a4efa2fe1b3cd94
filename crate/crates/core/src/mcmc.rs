//! Gibbs / Metropolis-Hastings sampler for the ddCRP mixture model.
//!
//! One iteration runs, in order: partition reallocation, mass parameter,
//! seating permutation, cluster parameters, base-measure hyperparameters,
//! correlated noise terms, noise correlation matrix and noise variance.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist;
use crate::error::{Error, Result};
use crate::kernel::MatchMode;
use crate::linalg::{serde_matrix, spd_inverse, spd_log_det, symmetrize};
use crate::model::{ClusterParams, Hyperparams, LatentHyper, ModelData, NoiseState};
use crate::partition::{
    ddcrp_log_pmf, ddcrp_sample, log_seating_factor, sample_log_index, Partition, SimilarityContext,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaEpsMode {
    /// Conditional exactly as written: ignores the noise-term prior.
    Paper,
    /// Also counts `omega ~ N(0, sigma_eps2 Sigma_omega)`.
    #[default]
    Consistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// ddCRP prior with subset-tree history similarity and features.
    #[default]
    DdcrpSt,
    /// Constant similarity (plain CRP) with linear-kernel features.
    DpLinear,
    /// One cluster per individual with linear-kernel features.
    NormalLinear,
}

impl BaselineMode {
    pub fn label(self) -> &'static str {
        match self {
            BaselineMode::DdcrpSt => "ddcrp_st",
            BaselineMode::DpLinear => "dp_linear",
            BaselineMode::NormalLinear => "normal_linear",
        }
    }
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddcrp_st" => Ok(BaselineMode::DdcrpSt),
            "dp_linear" => Ok(BaselineMode::DpLinear),
            "normal_linear" => Ok(BaselineMode::NormalLinear),
            other => Err(Error::InvalidConfig(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Starting partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPartition {
    #[default]
    OneCluster,
    Singletons,
    /// A draw from the ddCRP prior at the initial mass.
    Prior,
}

/// Switches for individual updates. Disabled updates keep their current
/// value, which lets tests target a single conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateMask {
    pub partition: bool,
    pub mass: bool,
    pub permutation: bool,
    pub cluster_params: bool,
    pub hyper: bool,
    pub omega: bool,
    pub sigma_omega: bool,
    pub sigma_eps: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        Self {
            partition: true,
            mass: true,
            permutation: true,
            cluster_params: true,
            hyper: true,
            omega: true,
            sigma_omega: true,
            sigma_eps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Number of permutation positions reshuffled per proposal.
    pub permutation_shuffle_size: usize,
    /// Permutation refreshed every this many iterations.
    pub permutation_interval: usize,
    pub sigma_omega_step: f64,
    /// Random-walk proposals per correlation update.
    pub sigma_omega_proposals: usize,
    pub sigma_eps_mode: SigmaEpsMode,
    pub eta: f64,
    pub match_mode: MatchMode,
    pub baseline_mode: BaselineMode,
    pub rep_threshold: usize,
    pub variance_threshold: f64,
    pub center_pca: bool,
    pub keep_duplicate_episodes: bool,
    pub init: InitPartition,
    pub initial_m0: f64,
    pub updates: UpdateMask,
    /// Overrides the default hyperparameters.
    pub hyperparams: Option<Hyperparams>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 10_000,
            burn_in: 5_000,
            thin: 10,
            seed: 1,
            permutation_shuffle_size: 3,
            permutation_interval: 1,
            sigma_omega_step: 0.05,
            sigma_omega_proposals: 1,
            sigma_eps_mode: SigmaEpsMode::Consistent,
            eta: 0.5,
            match_mode: MatchMode::Strict,
            baseline_mode: BaselineMode::DdcrpSt,
            rep_threshold: crate::features::DEFAULT_REP_THRESHOLD,
            variance_threshold: crate::features::DEFAULT_VARIANCE_THRESHOLD,
            center_pca: true,
            keep_duplicate_episodes: false,
            init: InitPartition::OneCluster,
            initial_m0: 1.0,
            updates: UpdateMask::default(),
            hyperparams: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter <= self.burn_in {
            return Err(Error::InvalidConfig("n_iter must exceed burn_in".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        if self.permutation_shuffle_size < 2 {
            return Err(Error::InvalidConfig(
                "permutation shuffle size must be at least 2".into(),
            ));
        }
        if self.permutation_interval == 0 {
            return Err(Error::InvalidConfig(
                "permutation interval must be at least 1".into(),
            ));
        }
        if !(self.sigma_omega_step > 0.0 && self.sigma_omega_step.is_finite()) {
            return Err(Error::InvalidConfig(
                "sigma_omega_step must be positive".into(),
            ));
        }
        if !(self.initial_m0 > 0.0) {
            return Err(Error::InvalidConfig("initial_m0 must be positive".into()));
        }
        crate::kernel::KernelConfig::new(self.eta, self.match_mode)?;
        Ok(())
    }

    /// Number of stored draws.
    pub fn n_draws(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Accepted / proposed counts of one Metropolis-Hastings move.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveCounter {
    pub accepted: u64,
    pub proposed: u64,
}

impl MoveCounter {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acceptance {
    pub permutation: MoveCounter,
    pub sigma_omega: MoveCounter,
}

/// All latent quantities of one iteration.
#[derive(Debug, Clone)]
pub struct McmcState {
    pub labels: Vec<usize>,
    pub clusters: Vec<ClusterParams>,
    pub sizes: Vec<usize>,
    pub latent: LatentHyper,
    pub noise: NoiseState,
    pub m0: f64,
    pub perm: Vec<usize>,
    pub tau0: f64,
}

impl McmcState {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn partition(&self) -> Partition {
        Partition::new(self.labels.clone()).expect("sampler keeps labels contiguous")
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.clusters.len();
        if self.sizes.len() != r || self.sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidPartition("empty or untracked cluster".into()));
        }
        let mut counts = vec![0; r];
        for &l in &self.labels {
            if l >= r {
                return Err(Error::InvalidPartition(format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        if counts != self.sizes {
            return Err(Error::InvalidPartition("cluster sizes out of sync".into()));
        }
        self.noise.validate()
    }
}

/// One stored posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    /// Zero-based cluster label per individual.
    pub labels: Vec<usize>,
    pub clusters: Vec<ClusterParams>,
    #[serde(with = "serde_matrix")]
    pub sigma_omega: DMatrix<f64>,
    pub sigma_eps2: f64,
    pub m0: f64,
    pub latent: LatentHyper,
}

impl Draw {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Parameters of individual `i`.
    pub fn params_of(&self, i: usize) -> &ClusterParams {
        &self.clusters[self.labels[i]]
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub config: McmcConfig,
    pub hyperparams: Hyperparams,
    pub acceptance: Acceptance,
    pub n: usize,
    pub q: usize,
    pub s: usize,
    pub d_star: usize,
    pub draws: Vec<Draw>,
}

#[derive(Serialize, Deserialize)]
struct ChainMeta {
    config: McmcConfig,
    hyperparams: Hyperparams,
    acceptance: Acceptance,
    acceptance_rates: AcceptanceRates,
    n: usize,
    q: usize,
    s: usize,
    d_star: usize,
    n_draws: usize,
}

#[derive(Serialize, Deserialize)]
struct AcceptanceRates {
    permutation: Option<f64>,
    sigma_omega: Option<f64>,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ChainOutput {
    /// Writes `draws.jsonl`, `meta.json` and `assignments.csv` (one row per
    /// draw, one-based cluster ids) into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>, ids: &[String]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("draws.jsonl"))?);
        for d in &self.draws {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let meta = ChainMeta {
            config: self.config.clone(),
            hyperparams: self.hyperparams.clone(),
            acceptance: self.acceptance,
            acceptance_rates: AcceptanceRates {
                permutation: finite_or_none(self.acceptance.permutation.rate()),
                sigma_omega: finite_or_none(self.acceptance.sigma_omega.rate()),
            },
            n: self.n,
            q: self.q,
            s: self.s,
            d_star: self.d_star,
            n_draws: self.draws.len(),
        };
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("meta.json"))?, &meta)?;

        let mut w = csv::Writer::from_path(dir.join("assignments.csv"))?;
        let mut header = vec![String::from("iteration")];
        header.extend(ids.iter().cloned());
        w.write_record(&header)?;
        for d in &self.draws {
            let mut row = vec![d.iteration.to_string()];
            row.extend(d.labels.iter().map(|l| (l + 1).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ChainMeta = serde_json::from_reader(std::fs::File::open(dir.join("meta.json"))?)?;
        let reader = std::io::BufReader::new(std::fs::File::open(dir.join("draws.jsonl"))?);
        let mut draws = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            draws.push(serde_json::from_str(&line)?);
        }
        if draws.len() != meta.n_draws {
            return Err(Error::Parse(format!(
                "meta.json lists {} draws but draws.jsonl has {}",
                meta.n_draws,
                draws.len()
            )));
        }
        Ok(Self {
            config: meta.config,
            hyperparams: meta.hyperparams,
            acceptance: meta.acceptance,
            n: meta.n,
            q: meta.q,
            s: meta.s,
            d_star: meta.d_star,
            draws,
        })
    }
}

/// First-component probability of the two-component Gamma mixture for the
/// mass parameter given the auxiliary `tau0`.
pub fn mass_mixture_weight(c0: f64, d0: f64, r: usize, n: usize, tau0: f64) -> f64 {
    let a = c0 + r as f64 - 1.0;
    let b = n as f64 * (d0 - tau0.ln());
    a / (a + b)
}

/// Log seating factor of the item at 1-based position `t` given the
/// similarity mass `num` and count `cnt` of its earlier cluster-mates and the
/// similarity mass `den` of all earlier items.
fn seat_term(t: usize, m0: f64, num: f64, cnt: usize, den: f64) -> f64 {
    log_seating_factor(t, m0, cnt, num, den)
}

/// Per-item partial sums of the ddCRP product under the current permutation.
#[derive(Debug, Clone)]
struct SeatingCache {
    pos: Vec<usize>,
    num: Vec<f64>,
    cnt: Vec<usize>,
    den: Vec<f64>,
}

impl SeatingCache {
    fn build(sim: &DMatrix<f64>, perm: &[usize], labels: &[usize]) -> Self {
        let n = perm.len();
        let mut pos = vec![0; n];
        for (p, &item) in perm.iter().enumerate() {
            pos[item] = p;
        }
        let mut num = vec![0.0; n];
        let mut cnt = vec![0; n];
        let mut den = vec![0.0; n];
        for (t, &item) in perm.iter().enumerate() {
            for &prev in &perm[..t] {
                let v = sim[(item, prev)];
                den[item] += v;
                if labels[prev] == labels[item] {
                    num[item] += v;
                    cnt[item] += 1;
                }
            }
        }
        Self { pos, num, cnt, den }
    }
}

/// Mutable sampler bound to one dataset and similarity matrix.
pub struct Sampler {
    pub data: ModelData,
    pub similarity: DMatrix<f64>,
    pub hyper: Hyperparams,
    pub config: McmcConfig,
    pub state: McmcState,
    pub acceptance: Acceptance,
    rng: ChaCha8Rng,
    b_inv: Vec<DMatrix<f64>>,
    lambda_inv: Vec<DMatrix<f64>>,
    e0_inv: DMatrix<f64>,
    f0_inv: DMatrix<f64>,
    log_pmf: Option<f64>,
    iteration: usize,
}

impl Sampler {
    /// Builds the sampler and its starting state.
    pub fn new(
        data: ModelData,
        similarity: DMatrix<f64>,
        hyper: Hyperparams,
        config: McmcConfig,
    ) -> Result<Self> {
        config.validate()?;
        hyper.validate()?;
        let n = data.n();
        if hyper.s() != data.s() || hyper.d_star() != data.d_star() {
            return Err(Error::DimensionMismatch {
                expected: data.s() + data.d_star(),
                got: hyper.s() + hyper.d_star(),
            });
        }
        crate::partition::validate_similarity(&similarity)?;
        if similarity.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: similarity.nrows(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (q, s, d) = (data.q(), data.s(), data.d_star());
        let perm: Vec<usize> = (0..n).collect();
        let labels = if config.baseline_mode == BaselineMode::NormalLinear {
            (0..n).collect()
        } else {
            match config.init {
                InitPartition::OneCluster => vec![0; n],
                InitPartition::Singletons => (0..n).collect(),
                InitPartition::Prior => {
                    let ctx = SimilarityContext::new(
                        similarity.clone(),
                        perm.clone(),
                        config.initial_m0,
                    )?;
                    ddcrp_sample(&ctx, &mut rng).labels().to_vec()
                }
            }
        };
        let part = Partition::from_labels(&labels);
        let latent = LatentHyper {
            e: vec![DVector::zeros(s); q],
            b: vec![DMatrix::identity(s, s); q],
            f: vec![DVector::zeros(d); q],
            lambda: vec![DMatrix::identity(d, d); q],
        };
        let n_visits = data.n_visits();
        let state = McmcState {
            labels: part.labels().to_vec(),
            clusters: vec![ClusterParams::zeros(q, s, d); part.n_clusters()],
            sizes: part.sizes(),
            latent,
            noise: NoiseState::zeros(n_visits, q),
            m0: config.initial_m0,
            perm,
            tau0: 0.5,
        };
        let e0_inv = spd_inverse(&hyper.e0, "E0")?;
        let f0_inv = spd_inverse(&hyper.f0, "F0")?;
        let mut sampler = Self {
            data,
            similarity,
            hyper,
            config,
            state,
            acceptance: Acceptance::default(),
            rng,
            b_inv: Vec::new(),
            lambda_inv: Vec::new(),
            e0_inv,
            f0_inv,
            log_pmf: None,
            iteration: 0,
        };
        sampler.refresh_inverses()?;
        sampler.update_cluster_params()?;
        Ok(sampler)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Replaces the base-measure hyperparameters `(e, B, f, Lambda)`.
    pub fn set_latent(&mut self, latent: LatentHyper) -> Result<()> {
        let (q, s, d) = (self.data.q(), self.data.s(), self.data.d_star());
        let ok = latent.q() == q
            && latent.e.iter().all(|v| v.len() == s)
            && latent.b.iter().all(|m| m.nrows() == s && m.ncols() == s)
            && latent.f.iter().all(|v| v.len() == d)
            && latent
                .lambda
                .iter()
                .all(|m| m.nrows() == d && m.ncols() == d);
        if !ok {
            return Err(Error::InvalidConfig(
                "latent hyperparameter dimensions".into(),
            ));
        }
        self.state.latent = latent;
        self.refresh_inverses()
    }

    fn refresh_inverses(&mut self) -> Result<()> {
        self.b_inv = self
            .state
            .latent
            .b
            .iter()
            .map(|b| spd_inverse(b, "B_q"))
            .collect::<Result<_>>()?;
        self.lambda_inv = self
            .state
            .latent
            .lambda
            .iter()
            .map(|l| spd_inverse(l, "Lambda_q"))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn partition_fixed(&self) -> bool {
        self.config.baseline_mode == BaselineMode::NormalLinear
    }

    /// One full sweep.
    pub fn step(&mut self) -> Result<()> {
        self.iteration += 1;
        let u = self.config.updates;
        let fixed = self.partition_fixed();
        self.log_pmf = None;
        if u.partition && !fixed {
            self.update_partition()?;
        }
        if u.mass && !fixed {
            self.update_mass();
        }
        if u.permutation && !fixed && self.iteration % self.config.permutation_interval == 0 {
            self.update_permutation()?;
        }
        if u.cluster_params {
            self.update_cluster_params()?;
        }
        if u.hyper {
            self.update_hyperparams()?;
        }
        if u.omega {
            self.update_omega()?;
        }
        if u.sigma_omega {
            self.update_sigma_omega();
        }
        if u.sigma_eps {
            self.update_sigma_eps();
        }
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        let st = &self.state;
        if !(st.noise.sigma_eps2.is_finite() && st.noise.sigma_eps2 > 0.0) {
            return Err(Error::NonFiniteState("sigma_eps2"));
        }
        if !(st.m0.is_finite() && st.m0 > 0.0) {
            return Err(Error::NonFiniteState("m0"));
        }
        if st.clusters.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteState("cluster parameters"));
        }
        if st.noise.omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState("omega"));
        }
        Ok(())
    }

    /// Draws cluster parameters from the base measure.
    pub fn draw_from_base<R: Rng + ?Sized>(
        latent: &LatentHyper,
        rng: &mut R,
    ) -> Result<ClusterParams> {
        let q = latent.q();
        let s = latent.e[0].len();
        let d = latent.f[0].len();
        let mut p = ClusterParams::zeros(q, s, d);
        for qi in 0..q {
            let b = dist::mvn(rng, &latent.e[qi], &latent.b[qi])?;
            p.beta.set_row(qi, &b.transpose());
            let g = dist::mvn(rng, &latent.f[qi], &latent.lambda[qi])?;
            p.gamma.set_row(qi, &g.transpose());
        }
        Ok(p)
    }

    /// `-SSE / (2 sigma_eps2)` of individual `i` under `params`, where
    /// `resid` holds `Y_i - omega_i`.
    fn individual_loglik(&self, i: usize, resid: &DMatrix<f64>, params: &ClusterParams) -> f64 {
        let r = &self.data.ranges[i];
        let xi = self.data.x.rows(r.start, r.len());
        let hi = self.data.h.rows(r.start, r.len());
        let fitted = xi * params.beta.transpose() + hi * params.gamma.transpose();
        -0.5 * (resid - fitted).norm_squared() / self.state.noise.sigma_eps2
    }

    /// Reallocates every individual in random order (auxiliary-parameter
    /// Gibbs with one fresh base-measure draw for the new-cluster option).
    pub fn update_partition(&mut self) -> Result<()> {
        let n = self.data.n();
        let mut cache = SeatingCache::build(&self.similarity, &self.state.perm, &self.state.labels);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let m0 = self.state.m0;
        let mut acc_num = Vec::new();
        let mut acc_cnt = Vec::new();
        let mut with_i = Vec::new();
        let mut without_i = Vec::new();
        let mut inf_without = Vec::new();
        for &i in &order {
            let old = self.state.labels[i];
            let p = cache.pos[i];
            // take i out of its cluster
            for t in 0..n {
                if t != i && cache.pos[t] > p && self.state.labels[t] == old {
                    cache.num[t] -= self.similarity[(t, i)];
                    cache.cnt[t] -= 1;
                }
            }
            self.state.sizes[old] -= 1;
            let singleton = self.state.sizes[old] == 0;
            let r = self.state.clusters.len();

            acc_num.clear();
            acc_num.resize(r, 0.0);
            acc_cnt.clear();
            acc_cnt.resize(r, 0usize);
            with_i.clear();
            with_i.resize(r, 0.0);
            without_i.clear();
            without_i.resize(r, 0.0);
            inf_without.clear();
            inf_without.resize(r, false);
            for t in 0..n {
                if t == i {
                    continue;
                }
                let c = self.state.labels[t];
                if cache.pos[t] < p {
                    acc_num[c] += self.similarity[(i, t)];
                    acc_cnt[c] += 1;
                } else {
                    let pt = cache.pos[t] + 1;
                    let s_ti = self.similarity[(t, i)];
                    with_i[c] +=
                        seat_term(pt, m0, cache.num[t] + s_ti, cache.cnt[t] + 1, cache.den[t]);
                    let w = seat_term(pt, m0, cache.num[t], cache.cnt[t], cache.den[t]);
                    if w == f64::NEG_INFINITY {
                        inf_without[c] = true;
                    } else {
                        without_i[c] += w;
                    }
                }
            }
            let n_inf = inf_without.iter().filter(|&&b| b).count();
            let finite_without: f64 = without_i.iter().sum();

            let mut resid = self
                .data
                .y
                .rows(self.data.ranges[i].start, self.data.ranges[i].len())
                - self
                    .state
                    .noise
                    .omega
                    .rows(self.data.ranges[i].start, self.data.ranges[i].len());
            resid = resid.clone_owned();

            let aux = if singleton {
                self.state.clusters[old].clone()
            } else {
                Self::draw_from_base(&self.state.latent, &mut self.rng)?
            };

            let mut candidates: Vec<usize> = Vec::with_capacity(r + 1);
            let mut logw: Vec<f64> = Vec::with_capacity(r + 1);
            for k in 0..r {
                if self.state.sizes[k] == 0 {
                    continue;
                }
                let others_inf = n_inf - usize::from(inf_without[k]);
                let prior = if others_inf > 0 {
                    f64::NEG_INFINITY
                } else {
                    let others = finite_without - without_i[k];
                    seat_term(p + 1, m0, acc_num[k], acc_cnt[k], cache.den[i]) + with_i[k] + others
                };
                let lw = if prior == f64::NEG_INFINITY {
                    prior
                } else {
                    prior + self.individual_loglik(i, &resid, &self.state.clusters[k])
                };
                candidates.push(k);
                logw.push(lw);
            }
            let new_prior = if n_inf > 0 {
                f64::NEG_INFINITY
            } else {
                seat_term(p + 1, m0, 0.0, 0, cache.den[i]) + finite_without
            };
            let new_lw = if new_prior == f64::NEG_INFINITY {
                new_prior
            } else {
                new_prior + self.individual_loglik(i, &resid, &aux)
            };
            candidates.push(usize::MAX);
            logw.push(new_lw);

            let pick = sample_log_index(&logw, &mut self.rng);
            let chosen = candidates[pick];
            let k = if chosen == usize::MAX {
                if singleton {
                    old
                } else {
                    self.state.clusters.push(aux);
                    self.state.sizes.push(0);
                    self.state.clusters.len() - 1
                }
            } else {
                chosen
            };
            self.state.labels[i] = k;
            self.state.sizes[k] += 1;
            if chosen == usize::MAX {
                cache.num[i] = 0.0;
                cache.cnt[i] = 0;
            } else {
                cache.num[i] = acc_num[k];
                cache.cnt[i] = acc_cnt[k];
            }
            for t in 0..n {
                if t != i && cache.pos[t] > p && self.state.labels[t] == k {
                    cache.num[t] += self.similarity[(t, i)];
                    cache.cnt[t] += 1;
                }
            }
            if singleton && k != old {
                self.remove_cluster(old);
            }
        }
        Ok(())
    }

    /// Deletes an empty cluster and compacts labels.
    fn remove_cluster(&mut self, k: usize) {
        debug_assert_eq!(self.state.sizes[k], 0);
        let last = self.state.clusters.len() - 1;
        self.state.clusters.swap_remove(k);
        self.state.sizes.swap_remove(k);
        if k != last {
            for l in self.state.labels.iter_mut() {
                if *l == last {
                    *l = k;
                }
            }
        }
    }

    pub fn update_mass(&mut self) {
        let n = self.data.n();
        let r = self.state.clusters.len();
        let h = &self.hyper;
        let tau = dist::beta(&mut self.rng, self.state.m0 + 1.0, n as f64);
        let rate = h.d0 - tau.ln();
        let w1 = mass_mixture_weight(h.c0, h.d0, r, n, tau);
        let shape_low = h.c0 + r as f64 - 1.0;
        let shape = if shape_low <= 0.0 || self.rng.random::<f64>() < w1 {
            h.c0 + r as f64
        } else {
            shape_low
        };
        self.state.tau0 = tau;
        self.state.m0 = dist::gamma(&mut self.rng, shape, rate);
    }

    fn current_log_pmf(&self, perm: &[usize]) -> f64 {
        log_pmf_raw(&self.similarity, perm, &self.state.labels, self.state.m0)
    }

    pub fn update_permutation(&mut self) -> Result<()> {
        let n = self.data.n();
        if n < 2 {
            return Ok(());
        }
        let k = self.config.permutation_shuffle_size.min(n);
        let current = match self.log_pmf {
            Some(v) => v,
            None => self.current_log_pmf(&self.state.perm),
        };
        let positions = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        let mut values: Vec<usize> = positions.iter().map(|&p| self.state.perm[p]).collect();
        values.shuffle(&mut self.rng);
        let mut proposal = self.state.perm.clone();
        for (&p, &v) in positions.iter().zip(&values) {
            proposal[p] = v;
        }
        let proposed = self.current_log_pmf(&proposal);
        let log_ratio = proposed - current;
        let accept = log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio;
        self.acceptance.permutation.record(accept);
        if accept {
            self.state.perm = proposal;
            self.log_pmf = Some(proposed);
        } else {
            self.log_pmf = Some(current);
        }
        Ok(())
    }

    /// Per-cluster cross products of the design with itself and with the
    /// noise-free outcomes `Y - omega`.
    pub fn cluster_stats(&self) -> ClusterStats {
        let (q, s, d) = (self.data.q(), self.data.s(), self.data.d_star());
        let r = self.state.clusters.len();
        let mut st = ClusterStats {
            xtx: vec![DMatrix::zeros(s, s); r],
            hth: vec![DMatrix::zeros(d, d); r],
            xth: vec![DMatrix::zeros(s, d); r],
            xtr: vec![DMatrix::zeros(s, q); r],
            htr: vec![DMatrix::zeros(d, q); r],
        };
        for (i, range) in self.data.ranges.iter().enumerate() {
            let k = self.state.labels[i];
            st.xtx[k] += &self.data.xtx[i];
            st.hth[k] += &self.data.hth[i];
            st.xth[k] += &self.data.xth[i];
            let resid = self.data.y.rows(range.start, range.len())
                - self.state.noise.omega.rows(range.start, range.len());
            st.xtr[k] += self.data.x.rows(range.start, range.len()).tr_mul(&resid);
            st.htr[k] += self.data.h.rows(range.start, range.len()).tr_mul(&resid);
        }
        st
    }

    /// Precision and linear term of `beta_kq` given `gamma_kq`.
    fn beta_canonical(
        &self,
        st: &ClusterStats,
        k: usize,
        qi: usize,
        gamma: &DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let inv_s2 = 1.0 / self.state.noise.sigma_eps2;
        let prec = &st.xtx[k] * inv_s2 + &self.b_inv[qi];
        let lin = (st.xtr[k].column(qi) - &st.xth[k] * gamma) * inv_s2
            + &self.b_inv[qi] * &self.state.latent.e[qi];
        (prec, lin)
    }

    /// Precision and linear term of `gamma_kq` given `beta_kq`.
    fn gamma_canonical(
        &self,
        st: &ClusterStats,
        k: usize,
        qi: usize,
        beta: &DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let inv_s2 = 1.0 / self.state.noise.sigma_eps2;
        let prec = &st.hth[k] * inv_s2 + &self.lambda_inv[qi];
        let lin = (st.htr[k].column(qi) - st.xth[k].tr_mul(beta)) * inv_s2
            + &self.lambda_inv[qi] * &self.state.latent.f[qi];
        (prec, lin)
    }

    /// Mean and covariance of `beta_kq` given the rest of the state.
    pub fn beta_conditional(&self, k: usize, qi: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let gamma = self.state.clusters[k].gamma.row(qi).transpose();
        let (prec, lin) = self.beta_canonical(&self.cluster_stats(), k, qi, &gamma);
        moments(&prec, &lin)
    }

    /// Mean and covariance of `gamma_kq` given the rest of the state.
    pub fn gamma_conditional(&self, k: usize, qi: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let beta = self.state.clusters[k].beta.row(qi).transpose();
        let (prec, lin) = self.gamma_canonical(&self.cluster_stats(), k, qi, &beta);
        moments(&prec, &lin)
    }

    /// Conjugate draws of `beta_kq` then `gamma_kq` for every cluster and item.
    pub fn update_cluster_params(&mut self) -> Result<()> {
        let st = self.cluster_stats();
        for k in 0..self.state.clusters.len() {
            for qi in 0..self.data.q() {
                let gamma = self.state.clusters[k].gamma.row(qi).transpose();
                let (prec, lin) = self.beta_canonical(&st, k, qi, &gamma);
                let (_, beta) = dist::mvn_canonical(&mut self.rng, &prec, &lin)?;
                self.state.clusters[k].beta.set_row(qi, &beta.transpose());

                let (prec, lin) = self.gamma_canonical(&st, k, qi, &beta);
                let (_, gamma) = dist::mvn_canonical(&mut self.rng, &prec, &lin)?;
                self.state.clusters[k].gamma.set_row(qi, &gamma.transpose());
            }
        }
        Ok(())
    }

    fn e_canonical(&self, qi: usize) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.state.clusters.len() as f64;
        let sum = self
            .state
            .clusters
            .iter()
            .fold(DVector::zeros(self.data.s()), |acc, c| {
                acc + c.beta.row(qi).transpose()
            });
        (&self.e0_inv + &self.b_inv[qi] * r, &self.b_inv[qi] * sum)
    }

    fn f_canonical(&self, qi: usize) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.state.clusters.len() as f64;
        let sum = self
            .state
            .clusters
            .iter()
            .fold(DVector::zeros(self.data.d_star()), |acc, c| {
                acc + c.gamma.row(qi).transpose()
            });
        (
            &self.f0_inv + &self.lambda_inv[qi] * r,
            &self.lambda_inv[qi] * sum,
        )
    }

    /// Mean and covariance of `e_q` given the cluster coefficients and `B_q`.
    pub fn e_conditional(&self, qi: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (prec, lin) = self.e_canonical(qi);
        moments(&prec, &lin)
    }

    pub fn f_conditional(&self, qi: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (prec, lin) = self.f_canonical(qi);
        moments(&prec, &lin)
    }

    /// Inverse-Wishart degrees of freedom and scale of `B_q` given `e_q`.
    pub fn b_conditional(&self, qi: usize) -> (f64, DMatrix<f64>) {
        let mut scale = self.hyper.b0_scale.clone();
        for c in &self.state.clusters {
            let dlt = c.beta.row(qi).transpose() - &self.state.latent.e[qi];
            scale += &dlt * dlt.transpose();
        }
        symmetrize(&mut scale);
        (self.hyper.b0 + self.state.clusters.len() as f64, scale)
    }

    pub fn lambda_conditional(&self, qi: usize) -> (f64, DMatrix<f64>) {
        let mut scale = self.hyper.lambda0_scale.clone();
        for c in &self.state.clusters {
            let dlt = c.gamma.row(qi).transpose() - &self.state.latent.f[qi];
            scale += &dlt * dlt.transpose();
        }
        symmetrize(&mut scale);
        (self.hyper.lambda0 + self.state.clusters.len() as f64, scale)
    }

    pub fn update_hyperparams(&mut self) -> Result<()> {
        for qi in 0..self.data.q() {
            let (prec, lin) = self.e_canonical(qi);
            let (_, e) = dist::mvn_canonical(&mut self.rng, &prec, &lin)?;
            self.state.latent.e[qi] = e;
            let (df, scale) = self.b_conditional(qi);
            let b = dist::inverse_wishart(&mut self.rng, df, &scale)?;
            self.b_inv[qi] = spd_inverse(&b, "B_q")?;
            self.state.latent.b[qi] = b;

            let (prec, lin) = self.f_canonical(qi);
            let (_, f) = dist::mvn_canonical(&mut self.rng, &prec, &lin)?;
            self.state.latent.f[qi] = f;
            let (df, scale) = self.lambda_conditional(qi);
            let l = dist::inverse_wishart(&mut self.rng, df, &scale)?;
            self.lambda_inv[qi] = spd_inverse(&l, "Lambda_q")?;
            self.state.latent.lambda[qi] = l;
        }
        Ok(())
    }

    /// Per-visit conjugate draw of `omega_ij`.
    pub fn update_omega(&mut self) -> Result<()> {
        let q = self.data.q();
        let s2 = self.state.noise.sigma_eps2;
        let (mean_map, chol_l) = omega_conditional_factors(&self.state.noise.sigma_omega)?;
        let sd = s2.sqrt();
        for (i, range) in self.data.ranges.iter().enumerate() {
            let params = &self.state.clusters[self.state.labels[i]];
            for row in range.clone() {
                let ytilde = self.data.y.row(row).transpose() - params.mean(&self.data, row);
                let z = dist::std_normal_vec(&mut self.rng, q);
                let w = &mean_map * ytilde + &chol_l * z * sd;
                self.state.noise.omega.set_row(row, &w.transpose());
            }
        }
        Ok(())
    }

    /// Random-walk Metropolis-Hastings on single off-diagonal entries of the
    /// noise correlation matrix under the prior `p(Sigma) ∝ det(Sigma)`.
    pub fn update_sigma_omega(&mut self) {
        let q = self.data.q();
        if q < 2 {
            return;
        }
        let omega = &self.state.noise.omega;
        let scatter = omega.tr_mul(omega);
        let n_visits = omega.nrows();
        let (sigma, accepted) = sigma_omega_move(
            &mut self.rng,
            &self.state.noise.sigma_omega,
            &scatter,
            n_visits,
            self.state.noise.sigma_eps2,
            self.config.sigma_omega_step,
            self.config.sigma_omega_proposals.max(1),
        );
        self.state.noise.sigma_omega = sigma;
        for a in accepted {
            self.acceptance.sigma_omega.record(a);
        }
    }

    pub fn update_sigma_eps(&mut self) {
        let (shape, rate) = self.sigma_eps_posterior();
        self.state.noise.sigma_eps2 = dist::inverse_gamma(&mut self.rng, shape, rate);
    }

    /// Shape and rate of the inverse-gamma conditional of `sigma_eps2`.
    pub fn sigma_eps_posterior(&self) -> (f64, f64) {
        let nq = (self.data.n_visits() * self.data.q()) as f64;
        let mut sse = 0.0;
        for (i, range) in self.data.ranges.iter().enumerate() {
            let params = &self.state.clusters[self.state.labels[i]];
            for row in range.clone() {
                sse +=
                    crate::model::visit_residual(&self.data, params, &self.state.noise.omega, row)
                        .norm_squared();
            }
        }
        let mut shape = self.hyper.g1 + 0.5 * nq;
        let mut rate = self.hyper.g2 + 0.5 * sse;
        if self.config.sigma_eps_mode == SigmaEpsMode::Consistent {
            let inv = spd_inverse(&self.state.noise.sigma_omega, "Sigma_omega")
                .expect("correlation matrix stays positive definite");
            let omega = &self.state.noise.omega;
            let quad = (&inv.component_mul(&omega.tr_mul(omega))).sum();
            shape += 0.5 * nq;
            rate += 0.5 * quad;
        }
        (shape, rate)
    }

    pub fn snapshot(&self) -> Draw {
        Draw {
            iteration: self.iteration,
            labels: self.state.labels.clone(),
            clusters: self.state.clusters.clone(),
            sigma_omega: self.state.noise.sigma_omega.clone(),
            sigma_eps2: self.state.noise.sigma_eps2,
            m0: self.state.m0,
            latent: self.state.latent.clone(),
        }
    }

    /// Replaces every latent quantity with a draw from the prior.
    pub fn draw_state_from_prior(&mut self) -> Result<()> {
        let (q, s, d, n) = (
            self.data.q(),
            self.data.s(),
            self.data.d_star(),
            self.data.n(),
        );
        let h = self.hyper.clone();
        let rng = &mut self.rng;
        let m0 = dist::gamma(rng, h.c0, h.d0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let labels = if self.config.baseline_mode == BaselineMode::NormalLinear {
            (0..n).collect::<Vec<_>>()
        } else {
            let ctx = SimilarityContext::new(self.similarity.clone(), perm.clone(), m0)?;
            ddcrp_sample(&ctx, rng).labels().to_vec()
        };
        let part = Partition::from_labels(&labels);
        let mut latent = LatentHyper {
            e: Vec::with_capacity(q),
            b: Vec::with_capacity(q),
            f: Vec::with_capacity(q),
            lambda: Vec::with_capacity(q),
        };
        for _ in 0..q {
            latent.e.push(dist::mvn(rng, &DVector::zeros(s), &h.e0)?);
            latent
                .b
                .push(dist::inverse_wishart(rng, h.b0, &h.b0_scale)?);
            latent.f.push(dist::mvn(rng, &DVector::zeros(d), &h.f0)?);
            latent
                .lambda
                .push(dist::inverse_wishart(rng, h.lambda0, &h.lambda0_scale)?);
        }
        let clusters = (0..part.n_clusters())
            .map(|_| Self::draw_from_base(&latent, rng))
            .collect::<Result<Vec<_>>>()?;
        let sigma_eps2 = dist::inverse_gamma(rng, h.g1, h.g2);
        let sigma_omega = dist::lkj_correlation(rng, q, 2.0);
        let mut noise = NoiseState {
            omega: DMatrix::zeros(self.data.n_visits(), q),
            sigma_omega,
            sigma_eps2,
        };
        let chol = crate::linalg::cholesky(&noise.sigma_omega, "Sigma_omega")?;
        let l = chol.l() * sigma_eps2.sqrt();
        for row in 0..self.data.n_visits() {
            let w = &l * dist::std_normal_vec(rng, q);
            noise.omega.set_row(row, &w.transpose());
        }
        self.state = McmcState {
            labels: part.labels().to_vec(),
            sizes: part.sizes(),
            clusters,
            latent,
            noise,
            m0,
            perm,
            tau0: 0.5,
        };
        self.refresh_inverses()?;
        self.log_pmf = None;
        Ok(())
    }

    /// Redraws the outcomes from the sampling model given the current state.
    pub fn regenerate_outcomes(&mut self) {
        let q = self.data.q();
        let sd = self.state.noise.sigma_eps2.sqrt();
        for (i, range) in self.data.ranges.clone().into_iter().enumerate() {
            let params = &self.state.clusters[self.state.labels[i]];
            for row in range {
                let mean =
                    params.mean(&self.data, row) + self.state.noise.omega.row(row).transpose();
                let y = mean + dist::std_normal_vec(&mut self.rng, q) * sd;
                self.data.y.set_row(row, &y.transpose());
            }
        }
    }

    /// Runs the configured number of iterations and stores thinned draws.
    pub fn run(mut self) -> Result<ChainOutput> {
        let cfg = self.config.clone();
        let mut draws = Vec::with_capacity(cfg.n_draws());
        for it in 1..=cfg.n_iter {
            self.step()?;
            if it > cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
                draws.push(self.snapshot());
            }
        }
        Ok(ChainOutput {
            n: self.data.n(),
            q: self.data.q(),
            s: self.data.s(),
            d_star: self.data.d_star(),
            config: cfg,
            hyperparams: self.hyper,
            acceptance: self.acceptance,
            draws,
        })
    }
}

/// Log target of the noise correlation matrix given the noise scatter
/// `sum_ij omega_ij omega_ij'` over `n_visits` visits.
pub fn sigma_omega_log_target(
    sigma: &DMatrix<f64>,
    scatter: &DMatrix<f64>,
    n_visits: usize,
    sigma_eps2: f64,
) -> Option<f64> {
    let ld = spd_log_det(sigma)?;
    let inv = spd_inverse(sigma, "Sigma_omega").ok()?;
    Some((1.0 - 0.5 * n_visits as f64) * ld - 0.5 * inv.component_mul(scatter).sum() / sigma_eps2)
}

/// `proposals` single-entry random-walk steps on a correlation matrix.
/// Proposals leaving (-1, 1) or the positive definite cone are rejected.
/// Returns the final matrix and the accept flag of each proposal.
pub fn sigma_omega_move<R: Rng + ?Sized>(
    rng: &mut R,
    start: &DMatrix<f64>,
    scatter: &DMatrix<f64>,
    n_visits: usize,
    sigma_eps2: f64,
    step: f64,
    proposals: usize,
) -> (DMatrix<f64>, Vec<bool>) {
    let q = start.nrows();
    let mut sigma = start.clone();
    let mut flags = Vec::with_capacity(proposals);
    if q < 2 {
        return (sigma, flags);
    }
    let mut current =
        sigma_omega_log_target(&sigma, scatter, n_visits, sigma_eps2).unwrap_or(f64::NEG_INFINITY);
    for _ in 0..proposals {
        let a = rng.random_range(0..q);
        let mut b = rng.random_range(0..q - 1);
        if b >= a {
            b += 1;
        }
        let rho = sigma[(a, b)] + rng.random_range(-step..step);
        let mut accepted = false;
        if rho.abs() < 1.0 {
            let mut prop = sigma.clone();
            prop[(a, b)] = rho;
            prop[(b, a)] = rho;
            if let Some(t) = sigma_omega_log_target(&prop, scatter, n_visits, sigma_eps2) {
                let log_ratio = t - current;
                if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
                    sigma = prop;
                    current = t;
                    accepted = true;
                }
            }
        }
        flags.push(accepted);
    }
    (sigma, flags)
}

/// Per-cluster sufficient statistics used by the coefficient updates.
#[derive(Debug, Clone)]
pub struct ClusterStats {
    pub xtx: Vec<DMatrix<f64>>,
    pub hth: Vec<DMatrix<f64>>,
    pub xth: Vec<DMatrix<f64>>,
    /// `X' (Y - omega)` per cluster, S x Q.
    pub xtr: Vec<DMatrix<f64>>,
    pub htr: Vec<DMatrix<f64>>,
}

fn moments(prec: &DMatrix<f64>, lin: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = spd_inverse(prec, "conditional precision")?;
    Ok((&cov * lin, cov))
}

/// `(I + Sigma^{-1})^{-1}` and its Cholesky factor: the conditional mean map
/// and (up to `sigma_eps`) the covariance factor of one noise term.
pub fn omega_conditional_factors(
    sigma_omega: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = sigma_omega.nrows();
    let prec = DMatrix::identity(q, q) + spd_inverse(sigma_omega, "Sigma_omega")?;
    let cov = spd_inverse(&prec, "noise-term precision")?;
    let l = crate::linalg::cholesky(&cov, "noise-term covariance")?.l();
    Ok((cov, l))
}

/// ddCRP log pmf without building a context (no validation).
pub(crate) fn log_pmf_raw(sim: &DMatrix<f64>, perm: &[usize], labels: &[usize], m0: f64) -> f64 {
    let mut total = 0.0;
    for (t, &item) in perm.iter().enumerate() {
        let mut num = 0.0;
        let mut cnt = 0;
        let mut den = 0.0;
        for &prev in &perm[..t] {
            let v = sim[(item, prev)];
            den += v;
            if labels[prev] == labels[item] {
                num += v;
                cnt += 1;
            }
        }
        total += seat_term(t + 1, m0, num, cnt, den);
    }
    total
}

/// Convenience wrapper: builds a sampler and runs it.
pub fn run_chain(
    data: &ModelData,
    similarity: &DMatrix<f64>,
    cfg: &McmcConfig,
) -> Result<ChainOutput> {
    let hyper = cfg
        .hyperparams
        .clone()
        .unwrap_or_else(|| Hyperparams::defaults(data.s(), data.d_star()));
    Sampler::new(data.clone(), similarity.clone(), hyper, cfg.clone())?.run()
}

/// Full log pmf of a state's partition, for tests and diagnostics.
pub fn state_log_prior(sampler: &Sampler) -> Result<f64> {
    let ctx = SimilarityContext::new(
        sampler.similarity.clone(),
        sampler.state.perm.clone(),
        sampler.state.m0,
    )?;
    ddcrp_log_pmf(&sampler.state.partition(), &ctx)
}
