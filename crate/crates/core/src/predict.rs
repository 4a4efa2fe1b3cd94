//! Posterior predictive scenarios from a fitted model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::features::{Featurizer, KernelFeatureBasis};
use crate::fit::Fit;
use crate::kernel::{history_similarity, KernelConfig};
use crate::linalg::cholesky;
use crate::mcmc::{BaselineMode, ChainOutput, McmcConfig, Sampler};
use crate::model::{ClusterParams, LongitudinalDataset};
use crate::partition::{sample_index, seating_probabilities};
use crate::regimen::{DrugDictionary, Regimen, RegimenHistory};

/// Schema and training histories stored next to the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub item_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub kernel: KernelConfig,
    pub individual_ids: Vec<String>,
    pub histories: Vec<RegimenHistory>,
}

/// Everything prediction needs. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub chain: ChainOutput,
    pub basis: KernelFeatureBasis,
    pub dictionary: DrugDictionary,
    pub schema: ModelSchema,
}

impl FittedModel {
    pub fn new(
        chain: ChainOutput,
        basis: KernelFeatureBasis,
        dictionary: DrugDictionary,
        schema: ModelSchema,
    ) -> Result<Self> {
        let m = Self {
            chain,
            basis,
            dictionary,
            schema,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_fit(fit: &Fit, ds: &LongitudinalDataset, dict: &DrugDictionary) -> Result<Self> {
        let cfg: &McmcConfig = &fit.chain.config;
        Self::new(
            fit.chain.clone(),
            fit.prepared.basis().clone(),
            dict.clone(),
            ModelSchema {
                item_names: ds.item_names.clone(),
                covariate_names: ds.covariate_names.clone(),
                kernel: KernelConfig {
                    eta: cfg.eta,
                    match_mode: cfg.match_mode,
                },
                individual_ids: ds.individuals.iter().map(|i| i.id.clone()).collect(),
                histories: fit.prepared.histories.clone(),
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.chain;
        let checks = [
            (self.basis.d_star(), c.d_star),
            (self.schema.item_names.len(), c.q),
            (self.schema.covariate_names.len(), c.s),
            (self.schema.individual_ids.len(), c.n),
            (self.schema.histories.len(), c.n),
        ];
        for (expected, got) in checks {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if c.draws.is_empty() {
            return Err(Error::EmptyChain);
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.chain.q
    }

    pub fn s(&self) -> usize {
        self.chain.s
    }

    /// Bundle layout: the chain files plus `basis.json`, `dictionary.csv`
    /// and `model.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.chain.save_dir(dir, &self.schema.individual_ids)?;
        serde_json::to_writer(std::fs::File::create(dir.join("basis.json"))?, &self.basis)?;
        self.dictionary
            .write_csv(std::fs::File::create(dir.join("dictionary.csv"))?)?;
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("model.json"))?, &self.schema)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let chain = ChainOutput::load_dir(dir)?;
        let basis = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(
            dir.join("basis.json"),
        )?))?;
        let dictionary = DrugDictionary::from_csv_path(dir.join("dictionary.csv"))?;
        let schema = serde_json::from_reader(std::fs::File::open(dir.join("model.json"))?)?;
        Self::new(chain, basis, dictionary, schema)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInclusion {
    /// Mean structure only.
    MeanOnly,
    /// Adds the correlated noise term and the measurement error.
    #[default]
    WithOmegaEps,
}

/// A hypothetical next visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Training individual whose cluster draws are reused.
    #[serde(default)]
    pub individual_id: Option<String>,
    /// Regimen episodes to date, each as `CODE+CODE+...`; used to seat an
    /// individual that is not in the training data.
    #[serde(default)]
    pub history: Option<Vec<String>>,
    pub covariates: Vec<f64>,
    /// Candidate regimen as `CODE+CODE+...`.
    pub candidate: String,
    #[serde(default)]
    pub noise_inclusion: NoiseInclusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPrediction {
    pub items: Vec<String>,
    pub candidate: String,
    pub level: f64,
    pub noise_inclusion: NoiseInclusion,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_draws: usize,
    /// True when the individual was seated by history similarity.
    pub new_individual: bool,
    /// Share of draws that opened a new cluster for the individual.
    pub new_cluster_share: f64,
    /// True when the candidate had no kernel similarity to any representative.
    pub feature_fallback: bool,
}

fn parse_regimen(text: &str, dict: &DrugDictionary) -> Result<Regimen> {
    Regimen::parse(text, dict)
}

/// How the individual's cluster is chosen for each draw.
enum Seating {
    Known(usize),
    New(Vec<f64>),
    AlwaysNew,
}

fn resolve_seating(model: &FittedModel, sc: &Scenario) -> Result<(Seating, bool)> {
    if let Some(id) = &sc.individual_id {
        if let Some(i) = model.schema.individual_ids.iter().position(|x| x == id) {
            return Ok((Seating::Known(i), false));
        }
        if sc.history.is_none() {
            return Err(Error::UnknownIndividual(id.clone()));
        }
    }
    let episodes = sc
        .history
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(|e| parse_regimen(e, &model.dictionary))
        .collect::<Result<Vec<_>>>()?;
    let owner = sc.individual_id.clone().unwrap_or_else(|| "new".into());
    let hist = RegimenHistory::new(owner, episodes);
    let n = model.chain.n;
    let sims = match model.chain.config.baseline_mode {
        BaselineMode::NormalLinear => return Ok((Seating::AlwaysNew, true)),
        BaselineMode::DpLinear => vec![1.0; n],
        // an empty history carries no similarity, so seating falls back to
        // cluster sizes
        BaselineMode::DdcrpSt if hist.is_empty() => vec![0.0; n],
        BaselineMode::DdcrpSt => model
            .schema
            .histories
            .iter()
            .map(|h| history_similarity(&hist, h, &model.dictionary, &model.schema.kernel))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok((Seating::New(sims), true))
}

/// Per-draw predictive values (draws x Q) and the prediction metadata.
pub fn predictive_draws<R: Rng + ?Sized>(
    model: &FittedModel,
    sc: &Scenario,
    rng: &mut R,
) -> Result<(DMatrix<f64>, bool, f64, bool)> {
    let (q, s) = (model.q(), model.s());
    if sc.covariates.len() != s {
        return Err(Error::DimensionMismatch {
            expected: s,
            got: sc.covariates.len(),
        });
    }
    if sc.covariates.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("covariates must be finite".into()));
    }
    let candidate = parse_regimen(&sc.candidate, &model.dictionary)?;
    let (seating, new_individual) = resolve_seating(model, sc)?;
    let featurizer = Featurizer::new(&model.basis, &model.dictionary)?;
    let (h, fallback) = featurizer.features(Some(&candidate))?;
    let x = DVector::from_column_slice(&sc.covariates);

    let draws = &model.chain.draws;
    let mut out = DMatrix::zeros(draws.len(), q);
    let mut opened = 0usize;
    for (t, d) in draws.iter().enumerate() {
        let fresh;
        let params: &ClusterParams = match &seating {
            Seating::Known(i) => d.params_of(*i),
            Seating::New(sims) => {
                let probs = seating_probabilities(sims, &d.labels, d.n_clusters(), d.m0);
                let k = sample_index(&probs, rng);
                if k < d.n_clusters() {
                    &d.clusters[k]
                } else {
                    opened += 1;
                    fresh = Sampler::draw_from_base(&d.latent, rng)?;
                    &fresh
                }
            }
            Seating::AlwaysNew => {
                opened += 1;
                fresh = Sampler::draw_from_base(&d.latent, rng)?;
                &fresh
            }
        };
        let mut y = &params.beta * &x + &params.gamma * &h;
        if sc.noise_inclusion == NoiseInclusion::WithOmegaEps {
            // omega + eps ~ N(0, sigma_eps2 (Sigma_omega + I))
            let cov = (&d.sigma_omega + DMatrix::identity(q, q)) * d.sigma_eps2;
            let l = cholesky(&cov, "predictive noise covariance")?.l();
            y += l * crate::dist::std_normal_vec(rng, q);
        }
        out.set_row(t, &y.transpose());
    }
    let share = opened as f64 / draws.len() as f64;
    Ok((out, new_individual, share, fallback))
}

/// Predictive mean and equal-tailed band per item.
pub fn predict_scenario<R: Rng + ?Sized>(
    model: &FittedModel,
    sc: &Scenario,
    level: f64,
    rng: &mut R,
) -> Result<ScenarioPrediction> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "level must lie in (0,1), got {level}"
        )));
    }
    let (values, new_individual, new_cluster_share, feature_fallback) =
        predictive_draws(model, sc, rng)?;
    let tail = (1.0 - level) / 2.0;
    let q = values.ncols();
    let mut mean = Vec::with_capacity(q);
    let mut lower = Vec::with_capacity(q);
    let mut upper = Vec::with_capacity(q);
    for c in 0..q {
        let mut col: Vec<f64> = values.column(c).iter().copied().collect();
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, tail));
        upper.push(quantile_sorted(&col, 1.0 - tail));
    }
    Ok(ScenarioPrediction {
        items: model.schema.item_names.clone(),
        candidate: parse_regimen(&sc.candidate, &model.dictionary)?.to_string(),
        level,
        noise_inclusion: sc.noise_inclusion,
        mean,
        lower,
        upper,
        n_draws: values.nrows(),
        new_individual,
        new_cluster_share,
        feature_fallback,
    })
}
