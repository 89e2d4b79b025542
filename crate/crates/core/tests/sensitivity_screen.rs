use stabcal::blockdyn::{ParameterSet, UnitConfig, UnitModel};
use stabcal::playback::Trajectory;
use stabcal::sensitivity::{rank_parameters, sensitivity_of, ResponseScaling, SensitivityOptions};

fn event() -> Trajectory<f64> {
    Trajectory::voltage_step(10.0, 30.0, 1.0, 1.0, 0.05).unwrap()
}

fn subset(model: &UnitModel<f64>, names: &[&str]) -> ParameterSet<f64> {
    let mut ps = ParameterSet::new();
    for n in names {
        let e = model.params().get(n).unwrap();
        ps.push(n, e.base_value, &e.unit).unwrap();
    }
    ps
}

#[test]
fn calibration_candidates_survive_screening() {
    let model = UnitModel::<f64>::from_config(&UnitConfig::default()).unwrap();
    let names = ["H", "Ka", "Tb", "Ks"];
    let res = rank_parameters(&model, &event(), &subset(&model, &names), &SensitivityOptions::default()).unwrap();
    for r in &res.results {
        println!("{} {:.6}", r.name, r.s);
    }
    let mut sel = res.selected.clone();
    sel.sort();
    let mut want: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    want.sort();
    assert_eq!(sel, want);
}

#[test]
fn screening_is_smooth_in_delta() {
    let model = UnitModel::<f64>::from_config(&UnitConfig::default()).unwrap();
    let ps = subset(&model, &["H", "Ka", "Tb", "Ks"]);
    let run = |d: f64| {
        let opts = SensitivityOptions {
            delta_fraction: d,
            ..Default::default()
        };
        rank_parameters(&model, &event(), &ps, &opts).unwrap()
    };
    let (a, b) = (run(0.01), run(0.02));
    for name in &b.selected {
        let (sa, sb) = (a.get(name).unwrap(), b.get(name).unwrap());
        assert!((sa - sb).abs() <= 0.2 * sb, "{name}: {sa} vs {sb}");
    }
}

#[test]
fn disabled_stabilizer_gain_is_inert() {
    let mut cfg = UnitConfig::default();
    cfg.flags.stabilizer = false;
    let model = UnitModel::<f64>::from_config(&cfg).unwrap();
    for scaling in [ResponseScaling::Raw, ResponseScaling::RangeNormalized] {
        let s = sensitivity_of(&model, &event(), "Kpss", 0.02, scaling).unwrap();
        assert!(s.abs() < 1e-12, "{s}");
    }
}

#[test]
fn zero_base_parameter_is_reported_unscreenable() {
    let model = UnitModel::<f64>::from_config(&UnitConfig::default()).unwrap();
    let res = rank_parameters(&model, &event(), &subset(&model, &["H", "D"]), &SensitivityOptions::default()).unwrap();
    assert_eq!(res.unscreenable, ["D"]);
    assert_eq!(res.selected, ["H"]);
}
