use std::path::PathBuf;

use adaptive_enopt::controls::ControlVector;
use adaptive_enopt::reservoir::{npv, simulate, Deck, EconParams, SimulationResult};
use proptest::prelude::*;

fn deck_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../decks")
}

#[test]
fn shipped_decks_equal_builtins() {
    let five = Deck::load(&deck_dir().join("five_spot_25.toml")).unwrap();
    assert_eq!(five, Deck::five_spot_demo());
    let flood = Deck::load(&deck_dir().join("waterflood_1d.toml")).unwrap();
    assert_eq!(flood, Deck::waterflood_1d(100));
}

#[test]
fn polymer_improves_late_oil_on_demo() {
    let deck = Deck::five_spot_demo();
    let run = |c: f64| {
        let u = ControlVector::constant(&[700.0, c, 150.0, 150.0, 150.0, 150.0], 10).unwrap();
        simulate(&deck, &u).unwrap()
    };
    let (water, polymer) = (run(0.0), run(1.0));
    let late = |r: &SimulationResult| r.q_op[6..].iter().sum::<f64>();
    assert!(late(&polymer) >= late(&water), "{} < {}", late(&polymer), late(&water));
}

#[test]
fn breakthrough_converges_under_refinement() {
    let times: Vec<f64> = [50, 100, 200]
        .iter()
        .map(|&nx| {
            let deck = Deck::waterflood_1d(nx);
            let u = ControlVector::constant(&[80.0, 0.0, 80.0], deck.schedule.n_steps).unwrap();
            let r = simulate(&deck, &u).unwrap();
            r.breakthrough_days[1].expect("producer breaks through")
        })
        .collect();
    for w in times.windows(2) {
        assert!((w[1] - w[0]).abs() / w[1] < 0.1, "{times:?}");
    }
}

fn random_result(values: &[f64], n: usize) -> SimulationResult {
    let pick = |k: usize| (0..n).map(|i| values[(i * 6 + k) % values.len()]).collect::<Vec<f64>>();
    SimulationResult {
        times_days: (1..=n).map(|i| 90.0 * i as f64).collect(),
        step_days: vec![90.0; n],
        q_op: pick(0),
        q_wp: pick(1),
        q_gp: vec![0.0; n],
        q_wi: pick(2),
        q_pi: pick(3),
        q_pp: pick(4),
        well_rates: vec![],
        bhp_bar: vec![],
        aquifer_water_in: 0.0,
        aquifer_water_out: 0.0,
        aquifer_oil_out: 0.0,
        aquifer_polymer_out: 0.0,
        water_residual: 0.0,
        polymer_residual: 0.0,
        min_saturation: 0.0,
        max_saturation: 1.0,
        min_concentration: 0.0,
        substeps: 0,
        breakthrough_days: vec![],
        final_saturation: vec![],
        final_concentration: vec![],
    }
}

proptest! {
    #[test]
    fn npv_is_discounted_sum(values in proptest::collection::vec(0.0f64..1e5, 6..60), n in 1usize..12) {
        let r = random_result(&values, n);
        let econ = EconParams::default();
        let (total, j) = npv(&r, &econ).unwrap();
        let oracle: f64 = (0..n)
            .map(|i| {
                let cash = 500.0 * r.q_op[i] - 30.0 * r.q_wi[i] - 30.0 * r.q_wp[i] - 2.5 * r.q_pi[i] - 0.5 * r.q_pp[i];
                prop_assert!((cash - j[i]).abs() <= 1e-9 * cash.abs().max(1.0));
                Ok(cash / 1.1f64.powf(r.times_days[i] / 365.0))
            })
            .sum::<Result<f64, TestCaseError>>()?;
        prop_assert!((total - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }
}
