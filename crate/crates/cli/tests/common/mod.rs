#![allow(dead_code)]

use artmix::features::{
    pca_fit, FeatureKernel, KernelFeatureBasis, KernelSmoother, RepresentativeSet,
};
use artmix::kernel::KernelConfig;
use artmix::mcmc::{Acceptance, ChainOutput, Draw, McmcConfig};
use artmix::model::{ClusterParams, Hyperparams, LatentHyper};
use artmix::predict::{FittedModel, ModelSchema};
use artmix::regimen::{DrugDictionary, Regimen, RegimenHistory};
use nalgebra::{DMatrix, DVector};

pub const BETA: [f64; 4] = [1.0, 0.5, -1.0, 2.0];

/// Two individuals sharing one cluster and a single stored draw, Q = S = 2.
pub fn one_draw_model(gamma_zero: bool) -> FittedModel {
    let dict = DrugDictionary::wihs();
    let reps: Vec<Regimen> = ["AZT+LAM+EFV", "TDF+FTC+EFV", "TDF+FTC+LPV+RTV"]
        .iter()
        .map(|r| Regimen::parse(r, &dict).unwrap())
        .collect();
    let kernel = FeatureKernel::SubsetTree(KernelConfig::default());
    let set = RepresentativeSet {
        regimens: reps.clone(),
        min_visit_threshold: 1,
    };
    let smoother = KernelSmoother::new(&set, kernel, &dict).unwrap();
    let rows: Vec<DVector<f64>> = reps
        .iter()
        .map(|r| smoother.weight_row(Some(r)).unwrap().weights)
        .collect();
    let h = DMatrix::from_fn(3, 3, |i, j| rows[i][j]);
    let pca = pca_fit(&h, 0.999, true).unwrap();
    let d = pca.d_star;
    let basis = KernelFeatureBasis {
        kernel,
        representatives: set,
        pca,
    };
    let (q, s) = (2, 2);
    let params = ClusterParams {
        beta: DMatrix::from_row_slice(q, s, &BETA),
        gamma: if gamma_zero {
            DMatrix::zeros(q, d)
        } else {
            DMatrix::from_fn(q, d, |i, j| 0.3 * (i + 1) as f64 - 0.2 * j as f64)
        },
    };
    let draw = Draw {
        iteration: 1,
        labels: vec![0, 0],
        clusters: vec![params],
        sigma_omega: DMatrix::identity(q, q),
        sigma_eps2: 1.0,
        m0: 1.0,
        latent: LatentHyper::initial(q, &Hyperparams::defaults(s, d)),
    };
    let chain = ChainOutput {
        config: McmcConfig::default(),
        hyperparams: Hyperparams::defaults(s, d),
        acceptance: Acceptance::default(),
        n: 2,
        q,
        s,
        d_star: d,
        draws: vec![draw],
    };
    FittedModel::new(
        chain,
        basis,
        dict,
        ModelSchema {
            item_names: vec!["cesd".into(), "somatic".into()],
            covariate_names: vec!["intercept".into(), "age".into()],
            kernel: KernelConfig::default(),
            individual_ids: vec!["A".into(), "B".into()],
            histories: vec![
                RegimenHistory::new("A", vec![reps[0].clone()]),
                RegimenHistory::new("B", vec![reps[1].clone()]),
            ],
        },
    )
    .unwrap()
}

/// The same model with its one draw repeated, so noisy predictions have a
/// band.
pub fn repeated_draw_model(copies: usize) -> FittedModel {
    let mut m = one_draw_model(false);
    let d = m.chain.draws[0].clone();
    m.chain.draws = vec![d; copies];
    m
}
