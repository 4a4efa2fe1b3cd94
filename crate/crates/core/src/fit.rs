//! End-to-end fitting: features, similarity matrix and the chain.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::features::{FeatureKernel, FeatureMatrix, FeatureOptions, KernelFeatureBasis};
use crate::kernel::{similarity_matrix, KernelConfig};
use crate::mcmc::{run_chain, BaselineMode, ChainOutput, McmcConfig};
use crate::model::{LongitudinalDataset, ModelData};
use crate::regimen::{DrugDictionary, RegimenHistory};

/// Inputs of the sampler derived from a dataset under one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: FeatureMatrix,
    pub histories: Vec<RegimenHistory>,
    pub similarity: DMatrix<f64>,
    pub data: ModelData,
}

impl Prepared {
    pub fn basis(&self) -> &KernelFeatureBasis {
        &self.features.basis
    }
}

pub fn feature_kernel(cfg: &McmcConfig) -> FeatureKernel {
    match cfg.baseline_mode {
        BaselineMode::DdcrpSt => FeatureKernel::SubsetTree(KernelConfig {
            eta: cfg.eta,
            match_mode: cfg.match_mode,
        }),
        BaselineMode::DpLinear | BaselineMode::NormalLinear => FeatureKernel::Linear,
    }
}

pub fn feature_options(cfg: &McmcConfig) -> FeatureOptions {
    FeatureOptions {
        rep_threshold: cfg.rep_threshold,
        variance_threshold: cfg.variance_threshold,
        center: cfg.center_pca,
    }
}

/// Builds features, histories and the similarity matrix. The baselines use
/// a constant similarity (their partition prior is the plain CRP or fixed).
pub fn prepare(
    ds: &LongitudinalDataset,
    dict: &DrugDictionary,
    cfg: &McmcConfig,
) -> Result<Prepared> {
    cfg.validate()?;
    ds.validate()?;
    let features = KernelFeatureBasis::fit(
        &ds.visit_regimens(),
        dict,
        feature_kernel(cfg),
        &feature_options(cfg),
    )?;
    let histories = ds.histories(cfg.keep_duplicate_episodes);
    let similarity = match cfg.baseline_mode {
        BaselineMode::DdcrpSt => similarity_matrix(
            &histories,
            dict,
            &KernelConfig {
                eta: cfg.eta,
                match_mode: cfg.match_mode,
            },
        )?,
        BaselineMode::DpLinear | BaselineMode::NormalLinear => {
            DMatrix::from_element(ds.n(), ds.n(), 1.0)
        }
    };
    let data = ModelData::from_dataset(ds, &features.reduced)?;
    Ok(Prepared {
        features,
        histories,
        similarity,
        data,
    })
}

/// A finished fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub prepared: Prepared,
    pub chain: ChainOutput,
}

pub fn fit(ds: &LongitudinalDataset, dict: &DrugDictionary, cfg: &McmcConfig) -> Result<Fit> {
    let prepared = prepare(ds, dict, cfg)?;
    let chain = run_chain(&prepared.data, &prepared.similarity, cfg)?;
    Ok(Fit { prepared, chain })
}
