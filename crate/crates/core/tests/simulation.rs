use std::path::Path;

use dracs::error::Error;
use dracs::linalg::sample_moments;
use dracs::pipeline::{self, SimulationSettings, SolutionArtifact};
use dracs::planner;
use dracs::safety::{axis_box_region, SafeSet};
use dracs::scenario::{BuiltScenario, Scenario};
use dracs::sim::{simulate_nominal, violation_rate, PathEnsemble, SimulationReport};
use dracs::wasserstein::{empirical_w2, gaussian_w2};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn bend() -> BuiltScenario {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/bend.json");
    Scenario::load(&p).unwrap().build().unwrap()
}

fn planned(b: &BuiltScenario) -> SolutionArtifact {
    pipeline::plan(b).unwrap().1
}

fn cloud(rng: &mut ChaCha8Rng, mu: &DVector<f64>, l: &DMatrix<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            let z = DVector::from_iterator(
                mu.len(),
                (0..mu.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            mu + l * z
        })
        .collect()
}

#[test]
fn nominal_covariance_matches_propagated_moments() {
    let b = bend();
    let art = planned(&b);
    let (schedule, view) = art.schedule(&b).unwrap();
    let n_paths = 10_000;
    let ens = simulate_nominal(&b.dm, &schedule, &b.boundary, n_paths, 11).unwrap();
    for k in 0..=b.dm.k_prime {
        let states = ens.states_at(k);
        let (mean, cov) = sample_moments(&states, b.dm.n());
        let (mu, sigma) = (&view.means[k], &view.covs[k]);
        for i in 0..b.dm.n() {
            let se_mean = (sigma[(i, i)] / n_paths as f64).sqrt();
            assert!(
                (mean[i] - mu[i]).abs() <= 3.0 * se_mean + 1e-12,
                "k {k} mean {i}"
            );
            for j in 0..b.dm.n() {
                // Gaussian sampling error of a covariance entry
                let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n_paths as f64)
                    .sqrt();
                assert!(
                    (cov[(i, j)] - sigma[(i, j)]).abs() <= 3.0 * se + 1e-12,
                    "k {k} entry ({i}, {j}): {} vs {}",
                    cov[(i, j)],
                    sigma[(i, j)]
                );
            }
        }
    }
}

#[test]
fn reports_are_identical_across_runs_and_thread_counts() {
    let b = bend();
    let art = planned(&b);
    let settings = SimulationSettings::from_scenario(&b);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let (nominal, truth, report) = pool
            .install(|| pipeline::simulate(&b, &art, &settings))
            .unwrap();
        (nominal, truth, report.to_json().unwrap())
    };
    let (n1, t1, r1) = run(1);
    let (n3, t3, r3) = run(3);
    assert_eq!(r1, r3);
    assert_eq!(n1.raw(), n3.raw());
    assert_eq!(t1.raw(), t3.raw());
    assert_eq!(r1, run(1).2);
}

#[test]
fn simulate_rejects_zero_paths_and_foreign_solutions() {
    let b = bend();
    let art = planned(&b);
    let zero = SimulationSettings {
        n_paths: 0,
        ..SimulationSettings::from_scenario(&b)
    };
    assert!(pipeline::simulate(&b, &art, &zero).is_err());

    let mut other = b.scenario.clone();
    other.monte_carlo.seed += 1;
    let other = other.build().unwrap();
    assert_ne!(other.hash, b.hash);
    assert!(art.check_hash(&other).is_err());
    assert!(art.schedule(&other).is_err());
}

#[test]
fn report_json_round_trips_and_missing_sections_are_malformed() {
    let b = bend();
    let art = planned(&b);
    let settings = SimulationSettings {
        n_paths: 300,
        ..SimulationSettings::from_scenario(&b)
    };
    let report = pipeline::simulate(&b, &art, &settings).unwrap().2;
    let text = report.to_json().unwrap();
    let back = SimulationReport::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for s in v["steps"].as_array_mut().unwrap() {
        s.as_object_mut().unwrap().remove("w2_true_nominal");
    }
    let err = SimulationReport::from_json(&v.to_string()).unwrap_err();
    assert!(matches!(err, Error::MalformedReport(_)), "{err}");
    assert!(SimulationReport::from_json("{}").is_err());
}

#[test]
fn ensemble_files_round_trip() {
    let b = bend();
    let art = planned(&b);
    let (schedule, _) = art.schedule(&b).unwrap();
    let ens = simulate_nominal(&b.dm, &schedule, &b.boundary, 50, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (bin, side) = (dir.path().join("e.bin"), dir.path().join("e.json"));
    ens.write(&bin, &side, &b.hash).unwrap();
    let (back, meta) = PathEnsemble::read(&bin, &side).unwrap();
    assert_eq!(back, ens);
    assert_eq!(meta.scenario_hash, b.hash);
    std::fs::write(&bin, [0u8; 12]).unwrap();
    assert!(PathEnsemble::read(&bin, &side).is_err());
}

#[test]
fn empirical_w2_converges_to_the_gaussian_value() {
    let mu1 = DVector::from_vec(vec![0.0, 0.0]);
    let s1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let mu2 = DVector::from_vec(vec![1.5, -0.5]);
    let s2 = DMatrix::from_row_slice(2, 2, &[2.0, -0.4, -0.4, 0.8]);
    let exact = gaussian_w2(&mu1, &s1, &mu2, &s2).unwrap();
    let (l1, l2) = (s1.cholesky().unwrap().l(), s2.cholesky().unwrap().l());
    for (n, tol) in [(2000, 0.10), (4000, 0.05)] {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, &mu1, &l1, n);
            let b = cloud(&mut rng, &mu2, &l2, n);
            let w = empirical_w2(&a, &b).unwrap();
            assert!(
                (w - exact).abs() / exact <= tol,
                "N {n} seed {seed}: {w} vs {exact}"
            );
        }
    }
}

#[test]
fn empirical_w2_is_a_metric_on_small_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l = DMatrix::identity(3, 3);
    for t in 0..20 {
        let n = 8 + 56 * t / 19;
        let c: Vec<Vec<DVector<f64>>> = (0..3)
            .map(|i| cloud(&mut rng, &DVector::from_element(3, i as f64 * 0.5), &l, n))
            .collect();
        let ab = empirical_w2(&c[0], &c[1]).unwrap();
        assert_eq!(ab, empirical_w2(&c[1], &c[0]).unwrap());
        assert!(empirical_w2(&c[0], &c[0]).unwrap() <= 1e-9);
        let bc = empirical_w2(&c[1], &c[2]).unwrap();
        let ac = empirical_w2(&c[0], &c[2]).unwrap();
        assert!(ac <= ab + bc + 1e-9, "triple {t}: {ac} > {ab} + {bc}");
    }
}

fn unit_box() -> SafeSet {
    SafeSet::new(vec![axis_box_region(
        2,
        &[0, 1],
        &[-1.0, -1.0],
        &[1.0, 1.0],
    )
    .unwrap()])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn violation_rate_ignores_path_order(
        pts in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 6), 1..40),
        shift in 0usize..40,
    ) {
        let paths: Vec<Vec<DVector<f64>>> = pts
            .iter()
            .map(|v| v.chunks(2).map(DVector::from_row_slice).collect())
            .collect();
        let mut rotated = paths.clone();
        let len = rotated.len();
        rotated.rotate_left(shift % len);
        rotated.reverse();
        let set = unit_box();
        let a = violation_rate(&PathEnsemble::from_paths(paths, 2, 0.1, 0, "p"), &set).unwrap();
        let b = violation_rate(&PathEnsemble::from_paths(rotated, 2, 0.1, 0, "p"), &set).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lifted_means_match_the_recursion(v in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let b = bend();
        let m = b.dm.m();
        let mut decision = planner::PlannerDecision {
            v: DVector::from_vec(v),
            k_gain: DMatrix::zeros(m * b.dm.k_prime, b.dm.n() + b.dm.n_w() * b.dm.k_prime),
            o_assign: DMatrix::zeros(2, b.dm.k_prime),
        };
        decision.o_assign.row_mut(0).fill(1.0);
        let (means, _) =
            planner::propagate_moments(&b.problem.lifted, &decision, &b.boundary, b.dm.delta_t).unwrap();
        let mut x = b.boundary.mu0.clone();
        for k in 0..b.dm.k_prime {
            let u = decision.v.rows(k * m, m).into_owned();
            x = &b.dm.transition * &x + &b.dm.input * u;
            prop_assert!((&means[k + 1] - &x).amax() <= 1e-10 * (1.0 + x.amax()));
        }
    }
}
