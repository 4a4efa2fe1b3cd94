use artmix::features::Featurizer;
use artmix::fit::fit;
use artmix::mcmc::{BaselineMode, McmcConfig};
use artmix::predict::{predict_scenario, predictive_draws, FittedModel, NoiseInclusion, Scenario};
use artmix::regimen::{DrugDictionary, Regimen};
use artmix::simulate::{generate_dataset, HistorySource, SimConfig};
use artmix::Error;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fitted(baseline: BaselineMode) -> FittedModel {
    let dict = DrugDictionary::wihs();
    let sim = generate_dataset(
        &SimConfig {
            n: 30,
            history_source: HistorySource::Synthetic {
                pool_size: 80,
                min_len: 2,
                max_len: 10,
            },
            seed: 12,
            ..SimConfig::default()
        },
        &dict,
    )
    .unwrap();
    let cfg = McmcConfig {
        n_iter: 300,
        burn_in: 100,
        thin: 2,
        seed: 3,
        baseline_mode: baseline,
        ..McmcConfig::default()
    };
    let f = fit(&sim.dataset, &dict, &cfg).unwrap();
    FittedModel::from_fit(&f, &sim.dataset, &dict).unwrap()
}

fn known(model: &FittedModel, candidate: &str, noise: NoiseInclusion) -> Scenario {
    Scenario {
        individual_id: Some(model.schema.individual_ids[3].clone()),
        history: None,
        covariates: vec![1.0, 0.2, -0.5],
        candidate: candidate.into(),
        noise_inclusion: noise,
    }
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn bundle_round_trip_predicts_identically() {
    let model = fitted(BaselineMode::DdcrpSt);
    let dir = tempfile::tempdir().unwrap();
    model.save_dir(dir.path()).unwrap();
    let back = FittedModel::load_dir(dir.path()).unwrap();
    assert_eq!(back.chain, model.chain);
    assert_eq!(back.schema, model.schema);
    let sc = known(&model, "TDF+FTC+EFV", NoiseInclusion::WithOmegaEps);
    let a = predict_scenario(&model, &sc, 0.95, &mut seeded(1)).unwrap();
    let b = predict_scenario(&back, &sc, 0.95, &mut seeded(1)).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn mean_only_single_draw_is_closed_form() {
    let mut model = fitted(BaselineMode::DdcrpSt);
    model.chain.draws.truncate(1);
    let dict = &model.dictionary;
    let cand = Regimen::parse("AZT+LAM+NVP", dict).unwrap();
    let (h, _) = Featurizer::new(&model.basis, dict)
        .unwrap()
        .features(Some(&cand))
        .unwrap();
    let sc = known(&model, "AZT+LAM+NVP", NoiseInclusion::MeanOnly);
    let x = DVector::from_column_slice(&sc.covariates);
    let p = model.chain.draws[0].params_of(3);
    let want = &p.beta * &x + &p.gamma * &h;
    let got = predict_scenario(&model, &sc, 0.9, &mut seeded(2)).unwrap();
    assert_eq!(got.n_draws, 1);
    assert!(!got.new_individual);
    for k in 0..model.q() {
        assert!((got.mean[k] - want[k]).abs() < 1e-12);
        assert_eq!(got.lower[k], got.mean[k]);
        assert_eq!(got.upper[k], got.mean[k]);
    }

    for d in &mut model.chain.draws {
        for c in &mut d.clusters {
            c.gamma.fill(0.0);
        }
    }
    let got = predict_scenario(&model, &sc, 0.9, &mut seeded(2)).unwrap();
    let bx = &model.chain.draws[0].params_of(3).beta * &x;
    for k in 0..model.q() {
        assert!((got.mean[k] - bx[k]).abs() < 1e-12);
    }
}

#[test]
fn bands_nest_and_noise_widens() {
    let model = fitted(BaselineMode::DdcrpSt);
    let sc = known(&model, "TDF+FTC+ATZ+RTV", NoiseInclusion::WithOmegaEps);
    let wide = predict_scenario(&model, &sc, 0.95, &mut seeded(4)).unwrap();
    let narrow = predict_scenario(&model, &sc, 0.5, &mut seeded(4)).unwrap();
    let mean_only = predict_scenario(
        &model,
        &Scenario {
            noise_inclusion: NoiseInclusion::MeanOnly,
            ..sc.clone()
        },
        0.95,
        &mut seeded(4),
    )
    .unwrap();
    for k in 0..model.q() {
        assert!(wide.lower[k] <= narrow.lower[k] && narrow.upper[k] <= wide.upper[k]);
        assert!(wide.lower[k] <= wide.mean[k] && wide.mean[k] <= wide.upper[k]);
        assert!(mean_only.upper[k] - mean_only.lower[k] < wide.upper[k] - wide.lower[k]);
    }
}

#[test]
fn doubling_noise_variance_scales_band_by_root_two() {
    let mut model = fitted(BaselineMode::DdcrpSt);
    // one posterior draw repeated, so the band is pure noise
    let d = model.chain.draws[0].clone();
    model.chain.draws = vec![d; 40_000];
    let sc = known(&model, "TDF+FTC+EFV", NoiseInclusion::WithOmegaEps);
    let base = predict_scenario(&model, &sc, 0.95, &mut seeded(5)).unwrap();
    model
        .chain
        .draws
        .iter_mut()
        .for_each(|d| d.sigma_eps2 *= 2.0);
    let doubled = predict_scenario(&model, &sc, 0.95, &mut seeded(6)).unwrap();
    for k in 0..model.q() {
        let ratio = (doubled.upper[k] - doubled.lower[k]) / (base.upper[k] - base.lower[k]);
        assert!(
            (ratio - 2f64.sqrt()).abs() < 0.04,
            "item {k}: ratio {ratio}"
        );
    }
}

#[test]
fn noise_draws_have_the_model_covariance() {
    let mut model = fitted(BaselineMode::DdcrpSt);
    let d = model.chain.draws[0].clone();
    model.chain.draws = vec![d.clone(); 60_000];
    let sc = known(&model, "TDF+FTC+EFV", NoiseInclusion::WithOmegaEps);
    let (v, ..) = predictive_draws(&model, &sc, &mut seeded(8)).unwrap();
    let q = model.q();
    let n = v.nrows() as f64;
    let mean = v.row_mean();
    let centered = DMatrix::from_fn(v.nrows(), q, |r, c| v[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    let want = (&d.sigma_omega + DMatrix::identity(q, q)) * d.sigma_eps2;
    for a in 0..q {
        for b in 0..q {
            let se = ((want[(a, a)] * want[(b, b)] + want[(a, b)].powi(2)) / n).sqrt();
            assert!(
                (cov[(a, b)] - want[(a, b)]).abs() < 4.0 * se,
                "({a},{b}) {} vs {}",
                cov[(a, b)],
                want[(a, b)]
            );
        }
    }
}

#[test]
fn new_individuals_are_seated() {
    let model = fitted(BaselineMode::DdcrpSt);
    let sc = Scenario {
        individual_id: Some("newcomer".into()),
        history: Some(vec!["AZT+LAM+EFV".into(), "TDF+FTC+EFV".into()]),
        covariates: vec![1.0, 0.0, 0.0],
        candidate: "TDF+FTC+EFV".into(),
        noise_inclusion: NoiseInclusion::MeanOnly,
    };
    let p = predict_scenario(&model, &sc, 0.95, &mut seeded(9)).unwrap();
    assert!(p.new_individual);
    assert!((0.0..=1.0).contains(&p.new_cluster_share));
    assert!(p.mean.iter().all(|v| v.is_finite()));

    let empty = Scenario {
        individual_id: None,
        history: Some(vec![]),
        ..sc
    };
    assert!(
        predict_scenario(&model, &empty, 0.95, &mut seeded(9))
            .unwrap()
            .new_individual
    );
}

#[test]
fn normal_linear_always_opens_a_cluster() {
    let model = fitted(BaselineMode::NormalLinear);
    let sc = Scenario {
        individual_id: None,
        history: Some(vec!["AZT+LAM+EFV".into()]),
        covariates: vec![1.0, 0.0, 0.0],
        candidate: "AZT+LAM+EFV".into(),
        noise_inclusion: NoiseInclusion::MeanOnly,
    };
    let p = predict_scenario(&model, &sc, 0.95, &mut seeded(10)).unwrap();
    assert_eq!(p.new_cluster_share, 1.0);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let model = fitted(BaselineMode::DdcrpSt);
    let sc = known(&model, "TDF+FTC+EFV", NoiseInclusion::MeanOnly);
    for level in [0.0, 1.0, 1.5, f64::NAN] {
        assert!(matches!(
            predict_scenario(&model, &sc, level, &mut seeded(1)),
            Err(Error::InvalidConfig(_))
        ));
    }
    let unknown = Scenario {
        individual_id: Some("nobody".into()),
        ..sc.clone()
    };
    assert!(
        matches!(predict_scenario(&model, &unknown, 0.95, &mut seeded(1)), Err(Error::UnknownIndividual(id)) if id == "nobody")
    );
    let drug = Scenario {
        candidate: "TDF+XYZ".into(),
        ..sc.clone()
    };
    assert!(
        matches!(predict_scenario(&model, &drug, 0.95, &mut seeded(1)), Err(Error::UnknownDrug(c)) if c == "XYZ")
    );
    let short = Scenario {
        covariates: vec![1.0],
        ..sc.clone()
    };
    assert!(matches!(
        predict_scenario(&model, &short, 0.95, &mut seeded(1)),
        Err(Error::DimensionMismatch { .. })
    ));
    let nan = Scenario {
        covariates: vec![1.0, f64::NAN, 0.0],
        ..sc.clone()
    };
    assert!(predict_scenario(&model, &nan, 0.95, &mut seeded(1)).is_err());

    let json = r#"{"individual_id":"x","covariates":[1,0,0],"candidate":"TDF+FTC+EFV","bogus":1}"#;
    assert!(serde_json::from_str::<Scenario>(json).is_err());
    let json = r#"{"covariates":[1,0,0],"candidate":"TDF+FTC+EFV","noise_inclusion":"mean_only"}"#;
    assert_eq!(
        serde_json::from_str::<Scenario>(json)
            .unwrap()
            .noise_inclusion,
        NoiseInclusion::MeanOnly
    );
}

#[test]
fn predictions_are_seed_deterministic() {
    let model = fitted(BaselineMode::DdcrpSt);
    let sc = known(&model, "AZT+LAM+NVP", NoiseInclusion::WithOmegaEps);
    let first =
        serde_json::to_vec(&predict_scenario(&model, &sc, 0.95, &mut seeded(42)).unwrap()).unwrap();
    for _ in 0..20 {
        let again =
            serde_json::to_vec(&predict_scenario(&model, &sc, 0.95, &mut seeded(42)).unwrap())
                .unwrap();
        assert_eq!(again, first);
    }
}
