use std::path::Path;

use dracs::pipeline::{self, SimulationSettings};
use dracs::scenario::Scenario;

/// Faster filter and sampling never widen the gap between the true and the
/// nominal ensembles beyond Monte Carlo error.
#[test]
fn tighter_l1_tuning_does_not_increase_w2() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/corridor.json");
    let base = Scenario::load(&path).unwrap();
    let mut tuned = base.clone();
    tuned.l1drac.omega *= 4.0;
    tuned.l1drac.t_s /= 4.0;
    tuned.l1drac.substeps *= 4;

    let base = base.build().unwrap();
    let tuned = tuned.build().unwrap();
    let (_, art) = pipeline::plan(&base).unwrap();
    let settings = SimulationSettings {
        n_paths: 4000,
        ..SimulationSettings::from_scenario(&base)
    };
    let w2 = |built: &dracs::scenario::BuiltScenario| {
        // the planning problem does not depend on the adaptive loop
        let mut a = art.clone();
        a.scenario_hash = built.hash.clone();
        pipeline::simulate(built, &a, &settings).unwrap().2.max_w2()
    };
    let (w_base, se_base) = w2(&base);
    let (w_tuned, se_tuned) = w2(&tuned);
    let combined = (se_base * se_base + se_tuned * se_tuned).sqrt();
    assert!(
        w_tuned <= w_base + 2.0 * combined,
        "tuned {w_tuned} ± {se_tuned} vs base {w_base} ± {se_base}"
    );
}
