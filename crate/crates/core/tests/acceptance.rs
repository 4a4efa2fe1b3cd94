//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use artmix::diagnostics::{
    adjusted_rand_index, beta_coverage, cluster_count_posterior, combination_effect_mse,
    dahl_partition, geweke_joint_test, matched_traces, mse_vs_truth, posterior_mean_effect_mse,
    GewekeConfig, PosteriorSummary,
};
use artmix::fit::{fit, Fit};
use artmix::kernel::{
    gram_matrix, prepared_kernel, regimen_kernel, KernelConfig, MatchMode, PreparedTree,
};
use artmix::mcmc::{BaselineMode, McmcConfig};
use artmix::model::ClusterParams;
use artmix::partition::{ddcrp_log_pmf, Partition, SimilarityContext};
use artmix::predict::{predict_scenario, FittedModel, NoiseInclusion, Scenario};
use artmix::regimen::{build_regimen_tree, DrugDictionary, Regimen};
use artmix::simulate::{generate_dataset, PartitionTruth, SimConfig, Simulation};
use common::fragments::{
    all_regimens, fragment_bag, oracle_exact, regimen_node, ten_drugs, to_f64,
};
use common::{random_perm, random_positive_sim, set_partitions};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KERNEL_TOL: f64 = 1e-12;
const GRAM_MIN_EIG: f64 = -1e-8;
const PMF_SUM_TOL: f64 = 1e-10;
const EWENS_TOL: f64 = 1e-12;
const GEWEKE_Z: f64 = 3.0;
const GEWEKE_SHARE: f64 = 0.95;
const EXACT_SE: f64 = 3.0;
const RECOVERY_N: usize = 60;
const RECOVERY_REPS: usize = 20;
const MODE_SHARE: f64 = 0.8;
const MIN_MEAN_ARI: f64 = 0.8;
const MAX_ENTRY_MSE: f64 = 0.05;
const COVERAGE: (f64, f64) = (0.85, 1.0);
const BASELINE_REPS: usize = 10;
const BASELINE_SHARE: f64 = 0.8;
const ETAS: [f64; 3] = [0.1, 0.5, 1.0];
const OVERLAP_SHARE: f64 = 0.9;
const EXPLAINED: f64 = 0.999;
const SERVICE_REPEATS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, started: Instant, limit: Option<Duration>, outcome: Outcome) -> bool {
    let elapsed = started.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = outcome.pass && in_time;
    let budget = limit
        .map(|l| format!(" (limit {}s)", l.as_secs()))
        .unwrap_or_default();
    println!(
        "{} {name}: {} [{:.1}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn kernel_correctness() -> Outcome {
    let dict = ten_drugs();
    let codes = [
        "ABC", "AZT", "D4T", "LAM", "TDF", "EFV", "NVP", "ATZ", "RTV", "RAL",
    ];
    let regimens = all_regimens(&codes, 4);
    let half = Ratio::new(1, 2);
    let mut worst = 0.0f64;
    for mode in [MatchMode::Strict, MatchMode::ClassRelaxed] {
        let relaxed = mode == MatchMode::ClassRelaxed;
        let bags: Vec<_> = regimens
            .iter()
            .map(|r| fragment_bag(&regimen_node(r, &dict), relaxed))
            .collect();
        let trees: Vec<_> = regimens
            .iter()
            .map(|r| {
                let reg = Regimen::from_codes(r.iter().copied()).unwrap();
                PreparedTree::new(&build_regimen_tree(&reg, &dict).unwrap(), mode)
            })
            .collect();
        for i in 0..regimens.len() {
            for j in i..regimens.len() {
                let exact = to_f64(oracle_exact(&bags[i], &bags[j], half));
                worst = worst.max((prepared_kernel(&trees[i], &trees[j], 0.5) - exact).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut min_eig = f64::INFINITY;
    for _ in 0..20 {
        let picks: Vec<_> = (0..25)
            .map(|_| &regimens[rng.random_range(0..regimens.len())])
            .collect();
        for mode in [MatchMode::Strict, MatchMode::ClassRelaxed] {
            let trees: Vec<_> = picks
                .iter()
                .map(|r| {
                    let reg = Regimen::from_codes(r.iter().copied()).unwrap();
                    PreparedTree::new(&build_regimen_tree(&reg, &dict).unwrap(), mode)
                })
                .collect();
            for eta in [0.1, 0.5, 1.0] {
                let eig = SymmetricEigen::new(gram_matrix(&trees, eta)).eigenvalues;
                min_eig = min_eig.min(eig.iter().cloned().fold(f64::INFINITY, f64::min));
            }
        }
    }

    let wihs = DrugDictionary::wihs();
    let cfg = KernelConfig::new(0.5, MatchMode::Strict).unwrap();
    let a = Regimen::parse("D4T+LAM+EFV", &wihs).unwrap();
    let c = Regimen::parse("TDF+FTC+ATZ+RTV", &wihs).unwrap();
    let kaa = regimen_kernel(&a, &a, &wihs, &cfg).unwrap();
    let kcc = regimen_kernel(&c, &c, &wihs, &cfg).unwrap();
    let values =
        (kaa - 3.1875).abs() < KERNEL_TOL && (kcc - 4.53125).abs() < KERNEL_TOL && kcc > kaa;

    Outcome {
        pass: worst <= KERNEL_TOL && min_eig >= GRAM_MIN_EIG && values,
        detail: format!(
            "{} regimens, worst oracle gap {worst:.2e}; min Gram eigenvalue {min_eig:.2e}; k(A,A)={kaa} k(C,C)={kcc}",
            regimens.len()
        ),
    }
}

fn ddcrp_pmf() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0.0f64;
    for n in [5, 6, 7] {
        let parts = set_partitions(n);
        for _ in 0..20 {
            let sim = random_positive_sim(n, &mut rng);
            let m0 = 0.1 + rng.random::<f64>() * 5.0;
            let ctx = SimilarityContext::new(sim, random_perm(n, &mut rng), m0).unwrap();
            let total: f64 = parts
                .iter()
                .map(|p| {
                    ddcrp_log_pmf(&Partition::new(p.clone()).unwrap(), &ctx)
                        .unwrap()
                        .exp()
                })
                .sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    let mut worst_ewens = 0.0f64;
    for n in 1..=8 {
        let m0 = 0.2 + rng.random::<f64>() * 3.0;
        let sim = DMatrix::from_element(n, n, 0.5 + rng.random::<f64>());
        let ctx = SimilarityContext::new(sim, random_perm(n, &mut rng), m0).unwrap();
        for p in set_partitions(n) {
            let part = Partition::new(p).unwrap();
            let mut want = m0.ln() * part.n_clusters() as f64;
            for s in part.sizes() {
                want += (1..s).map(|k| (k as f64).ln()).sum::<f64>();
            }
            want -= (0..n).map(|t| (m0 + t as f64).ln()).sum::<f64>();
            worst_ewens = worst_ewens.max((ddcrp_log_pmf(&part, &ctx).unwrap() - want).abs());
        }
    }
    Outcome {
        pass: worst_sum <= PMF_SUM_TOL && worst_ewens <= EWENS_TOL,
        detail: format!("worst |sum-1| {worst_sum:.2e}; worst Ewens log gap {worst_ewens:.2e}"),
    }
}

fn sampler_correctness() -> Outcome {
    let geweke = geweke_joint_test(&GewekeConfig::default()).unwrap();
    let share = geweke.fraction_within(GEWEKE_Z);
    let rows = common::exact_partition_posterior_check(100_000, 5);
    let within = rows.iter().filter(|r| r.within(EXACT_SE)).count();
    let worst = rows
        .iter()
        .map(|r| (r.observed - r.exact).abs() / r.se)
        .fold(0.0, f64::max);
    Outcome {
        pass: !geweke.inconclusive && share >= GEWEKE_SHARE && within == rows.len(),
        detail: format!(
            "Geweke {}/{} moments within |z|<{GEWEKE_Z} ({:.1}%); exact n=4 posterior {within}/{} partitions within {EXACT_SE} SE (worst {worst:.2} SE)",
            (share * geweke.moments.len() as f64).round(),
            geweke.moments.len(),
            100.0 * share,
            rows.len()
        ),
    }
}

fn recovery_config(seed: u64) -> SimConfig {
    SimConfig {
        n: RECOVERY_N,
        partition: PartitionTruth::PriorConditioned {
            clusters: 3,
            min_size: RECOVERY_N / 6,
            max_tries: 1_000_000,
        },
        seed,
        ..SimConfig::default()
    }
}

fn fit_with(sim: &Simulation, baseline: BaselineMode, eta: f64, seed: u64) -> Fit {
    let cfg = McmcConfig {
        eta,
        baseline_mode: baseline,
        seed,
        ..McmcConfig::default()
    };
    fit(&sim.dataset, &DrugDictionary::wihs(), &cfg).unwrap()
}

struct Replicate {
    sim: Simulation,
    fit: Fit,
}

fn recovery(reps: &[Replicate]) -> Outcome {
    let mut mode_hits = 0;
    let mut ari_sum = 0.0;
    let mut entry_mse = vec![DMatrix::<f64>::zeros(3, 3); 3];
    let mut coverage = 0.0;
    for r in reps {
        let truth = &r.sim.truth;
        if cluster_count_posterior(&r.fit.chain).unwrap().mode() == truth.r_true {
            mode_hits += 1;
        }
        let (_, map) = dahl_partition(&r.fit.chain).unwrap();
        ari_sum += adjusted_rand_index(map.labels(), &truth.labels).unwrap();
        let mse = mse_vs_truth(&r.fit.chain, truth).unwrap();
        for (acc, m) in entry_mse.iter_mut().zip(&mse.beta) {
            *acc += m;
        }
        coverage += beta_coverage(&r.fit.chain, truth, 0.95).unwrap();
    }
    let n = reps.len() as f64;
    entry_mse.iter_mut().for_each(|m| *m /= n);
    let worst = entry_mse
        .iter()
        .flat_map(|m| m.iter().copied())
        .fold(0.0, f64::max);
    let avg = entry_mse.iter().map(|m| m.sum()).sum::<f64>() / 27.0;
    let mode_share = mode_hits as f64 / n;
    let mean_ari = ari_sum / n;
    let coverage = coverage / n;
    Outcome {
        pass: mode_share >= MODE_SHARE
            && mean_ari >= MIN_MEAN_ARI
            && worst <= MAX_ENTRY_MSE
            && (COVERAGE.0..=COVERAGE.1).contains(&coverage),
        detail: format!(
            "{} replicates: mode r=3 in {:.0}%; mean ARI {mean_ari:.3}; beta entry MSE max {worst:.4} mean {avg:.4}; 95% coverage {:.1}%",
            reps.len(),
            100.0 * mode_share,
            100.0 * coverage
        ),
    }
}

fn baseline_ordering(reps: &[Replicate], fits: &mut Vec<Fit>) -> Outcome {
    let mut wins = 0;
    let mut mean_wins = 0;
    let mut signal = 0.0;
    let mut lines = Vec::new();
    for (k, r) in reps.iter().take(BASELINE_REPS).enumerate() {
        let effects = r.sim.true_effects();
        signal += effects.norm_squared() / effects.len() as f64 / BASELINE_REPS as f64;
        let dp = fit_with(
            &r.sim,
            BaselineMode::DpLinear,
            r.sim.truth.eta,
            500 + k as u64,
        );
        let normal = fit_with(
            &r.sim,
            BaselineMode::NormalLinear,
            r.sim.truth.eta,
            600 + k as u64,
        );
        let [own, dp_mse, normal_mse] = [&r.fit, &dp, &normal]
            .map(|f| combination_effect_mse(&f.chain, &f.prepared.data, &effects).unwrap());
        let [own_pm, dp_pm, normal_pm] = [&r.fit, &dp, &normal]
            .map(|f| posterior_mean_effect_mse(&f.chain, &f.prepared.data, &effects).unwrap());
        if own < dp_mse && own < normal_mse {
            wins += 1;
        }
        if own_pm < dp_pm && own_pm < normal_pm {
            mean_wins += 1;
        }
        lines.push(format!("{own:.3}/{dp_mse:.3}/{normal_mse:.3}"));
        fits.push(dp);
        fits.push(normal);
    }
    let share = wins as f64 / BASELINE_REPS as f64;
    Outcome {
        pass: share >= BASELINE_SHARE,
        detail: format!(
            "ddcrp_st best in {wins}/{BASELINE_REPS} replicates ({mean_wins}/{BASELINE_REPS} on posterior-mean effects); \
             mean square of true effects {signal:.3}; effect MSE ddcrp_st/dp_linear/normal_linear: {}",
            lines.join(" ")
        ),
    }
}

fn eta_sensitivity(rep: &Replicate, fits: &mut Vec<Fit>) -> Outcome {
    let truth = &rep.sim.truth;
    let reference = truth.partition();
    let params: Vec<ClusterParams> = truth
        .betas
        .iter()
        .zip(&truth.gammas)
        .map(|(b, g)| ClusterParams {
            beta: b.clone(),
            gamma: g.clone(),
        })
        .collect();
    let mut runs: Vec<Vec<PosteriorSummary>> = Vec::new();
    for (k, &eta) in ETAS.iter().enumerate() {
        let f = if eta == truth.eta && rep.fit.chain.config.eta == eta {
            rep.fit.clone()
        } else {
            fit_with(&rep.sim, BaselineMode::DdcrpSt, eta, 700 + k as u64)
        };
        let (traces, _) = matched_traces(&f.chain, &reference, Some(&params)).unwrap();
        let sums: Vec<_> = traces
            .summaries(0.95)
            .unwrap()
            .into_iter()
            .filter(|s| s.name.starts_with("beta["))
            .collect();
        runs.push(sums);
        fits.push(f);
    }
    let entries = runs[0].len();
    let mut overlapping = 0;
    for e in 0..entries {
        let all =
            (0..runs.len()).all(|a| (a + 1..runs.len()).all(|b| runs[a][e].overlaps(&runs[b][e])));
        if all {
            overlapping += 1;
        }
    }
    let share = overlapping as f64 / entries as f64;
    Outcome {
        pass: share >= OVERLAP_SHARE,
        detail: format!(
            "eta in {ETAS:?}: {overlapping}/{entries} beta entries with pairwise-overlapping 95% intervals ({:.1}%)",
            100.0 * share
        ),
    }
}

fn pca_gate(fits: &[&Fit]) -> Outcome {
    let mut min_explained = f64::INFINITY;
    let mut worst_ratio = 0.0f64;
    let mut degenerate = 0;
    for f in fits {
        let pca = &f.prepared.basis().pca;
        if pca.zero_variance {
            degenerate += 1;
            continue;
        }
        min_explained = min_explained.min(pca.cumulative_explained());
        let h = &f.prepared.features.weights.rows;
        let means = DVector::from_vec(pca.column_means.clone());
        let (mut total, mut resid) = (0.0, 0.0);
        for r in 0..h.nrows() {
            let row = h.row(r).transpose();
            total += (&row - &means).norm_squared();
            let back = pca.reconstruct(&pca.project(&row).unwrap()).unwrap();
            resid += (&row - back).norm_squared();
        }
        // residual share of the total variance, against the allowed share
        worst_ratio = worst_ratio.max(resid / ((1.0 - EXPLAINED) * total));
    }
    Outcome {
        pass: degenerate == 0 && min_explained >= EXPLAINED && worst_ratio <= 1.0 + 1e-9,
        detail: format!(
            "{} fits: min explained variance {min_explained:.6}; worst residual/allowed {worst_ratio:.3}",
            fits.len()
        ),
    }
}

fn service_determinism(rep: &Replicate) -> Outcome {
    let model = FittedModel::from_fit(&rep.fit, &rep.sim.dataset, &DrugDictionary::wihs()).unwrap();
    let scenarios = [
        Scenario {
            individual_id: Some(model.schema.individual_ids[0].clone()),
            history: None,
            covariates: vec![1.0, 0.3, -0.2],
            candidate: "TDF+FTC+EFV".into(),
            noise_inclusion: NoiseInclusion::WithOmegaEps,
        },
        Scenario {
            individual_id: None,
            history: Some(vec!["AZT+LAM+NVP".into(), "TDF+FTC+ATZ+RTV".into()]),
            covariates: vec![1.0, -0.5, 0.4],
            candidate: "TDF+FTC+ATZ+RTV".into(),
            noise_inclusion: NoiseInclusion::WithOmegaEps,
        },
    ];
    let mut identical = 0;
    for sc in &scenarios {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(2024);
            serde_json::to_vec(&predict_scenario(&model, sc, 0.95, &mut rng).unwrap()).unwrap()
        };
        let first = run();
        identical += (0..SERVICE_REPEATS).filter(|_| run() == first).count();
    }
    let total = SERVICE_REPEATS * scenarios.len();
    Outcome {
        pass: identical == total,
        detail: format!("{identical}/{total} repeated predictions byte-identical"),
    }
}

fn main() {
    let mut all = true;

    let t = Instant::now();
    all &= report(
        "kernel correctness",
        t,
        Some(Duration::from_secs(60)),
        kernel_correctness(),
    );

    let t = Instant::now();
    all &= report("ddCRP pmf", t, Some(Duration::from_secs(60)), ddcrp_pmf());

    let t = Instant::now();
    all &= report(
        "sampler correctness",
        t,
        Some(Duration::from_secs(600)),
        sampler_correctness(),
    );

    let t = Instant::now();
    let dict = DrugDictionary::wihs();
    let reps: Vec<Replicate> = (0..RECOVERY_REPS as u64)
        .map(|k| {
            let sim = generate_dataset(&recovery_config(100 + k), &dict).unwrap();
            let fit = fit_with(&sim, BaselineMode::DdcrpSt, sim.truth.eta, 1 + k);
            Replicate { sim, fit }
        })
        .collect();
    all &= report(
        "simulation recovery",
        t,
        Some(Duration::from_secs(1800)),
        recovery(&reps),
    );

    let mut extra = Vec::new();
    let t = Instant::now();
    all &= report(
        "baseline ordering",
        t,
        None,
        baseline_ordering(&reps, &mut extra),
    );

    let t = Instant::now();
    all &= report(
        "eta sensitivity",
        t,
        None,
        eta_sensitivity(&reps[0], &mut extra),
    );

    let t = Instant::now();
    let fits: Vec<&Fit> = reps.iter().map(|r| &r.fit).chain(extra.iter()).collect();
    all &= report("PCA gate", t, None, pca_gate(&fits));

    let t = Instant::now();
    all &= report(
        "service determinism",
        t,
        None,
        service_determinism(&reps[0]),
    );

    if !all {
        std::process::exit(1);
    }
}
