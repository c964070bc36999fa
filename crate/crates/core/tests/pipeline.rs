use schedlab_core::harness::{evaluate, parse_scenarios, ScenarioConfig, Sweep};
use schedlab_core::metrics::{convergence_order_fit, mse};
use schedlab_core::models::{AnalyticModel, Testbed};
use schedlab_core::rng::stream_rng;
use schedlab_core::sampler::{
    first_local_error, local_inversion_errors, pinned_reconstruction, run_inversion, run_reverse,
    ModelPair, SamplerConfig,
};
use schedlab_core::schedule::{build_table, Family, ScheduleSpec};

#[test]
fn point_mass_roundtrip_on_logistic() {
    let source = AnalyticModel::point_mass(vec![0.3, -1.2, 2.0, 0.0]).unwrap();
    let models = ModelPair::new(&source, &source);
    let spec = ScheduleSpec::logistic(100);
    let config = SamplerConfig::with_steps(100);
    let table = build_table(&spec, &config.grid(spec.t_max).unwrap()).unwrap();
    let x0 = source.sample_x0(1, 1).remove(0);

    let inv = run_inversion(models, &x0, &table, &config).unwrap();
    assert_eq!(inv.len(), table.len());
    let rec = run_reverse(models, inv.last_state(), &table, &config, &mut stream_rng(1, 1)).unwrap();
    assert!(mse(&rec.output(), &x0).unwrap() <= 1e-10);
}

#[test]
fn rmse_converges_at_first_order_or_better() {
    let tb = Testbed::two_mode();
    let models = ModelPair::new(&tb.uncond, &tb.source);
    let spec = ScheduleSpec::cosine(1000);
    let x0s = tb.source.sample_x0(3, 4);
    let mut points = Vec::new();
    for n in [25, 50, 100, 200, 400] {
        let mut config = SamplerConfig::with_steps(n);
        config.w_invert = 1.0;
        config.w_reverse = 1.0;
        let table = build_table(&spec, &config.grid(spec.t_max).unwrap()).unwrap();
        let mut total = 0.0;
        for x0 in &x0s {
            let inv = run_inversion(models, x0, &table, &config).unwrap();
            let rec = run_reverse(models, inv.last_state(), &table, &config, &mut stream_rng(0, 0))
                .unwrap();
            total += mse(&rec.output(), x0).unwrap();
        }
        points.push((n, (total / x0s.len() as f64).sqrt()));
    }
    let fit = convergence_order_fit(&points).unwrap();
    assert!((0.8..=1.3).contains(&fit.order), "order {}", fit.order);
    assert!(fit.r_squared > 0.95);
}

#[test]
fn first_step_error_is_smaller_without_singularity() {
    let tb = Testbed::two_mode();
    let models = ModelPair::new(&tb.uncond, &tb.source);
    let config = SamplerConfig::with_steps(50);
    let first = |family| {
        let spec = ScheduleSpec::new(family, 100);
        let table = build_table(&spec, &config.grid(100).unwrap()).unwrap();
        tb.source
            .sample_x0(5, 20)
            .iter()
            .map(|x0| {
                let inv = run_inversion(models, x0, &table, &config).unwrap();
                let errs = local_inversion_errors(&inv, models, &table).unwrap();
                first_local_error(&errs).unwrap()
            })
            .sum::<f64>()
    };
    assert!(first(Family::Logistic) < first(Family::ScaledLinear));
}

#[test]
fn pinned_branch_under_source_retraces_inversion() {
    let tb = Testbed::two_mode();
    let source = ModelPair::new(&tb.uncond, &tb.source);
    let target = ModelPair::new(&tb.uncond, &tb.target);
    let spec = ScheduleSpec::sigmoid(100);
    let config = SamplerConfig::with_steps(20);
    let table = build_table(&spec, &config.grid(100).unwrap()).unwrap();
    let x0 = tb.source.sample_x0(9, 1).remove(0);
    let inv = run_inversion(source, &x0, &table, &config).unwrap();

    let same = pinned_reconstruction(&inv, source, source, &table, &config).unwrap();
    for (a, b) in same.output().iter().zip(&x0) {
        assert!((a - b).abs() <= 1e-9);
    }
    let edited = pinned_reconstruction(&inv, source, target, &table, &config).unwrap();
    let shift = edited.output()[1] - x0[1];
    assert!(shift > 0.5, "edit moved e2 by {shift}");
}

#[test]
fn scenario_json_drives_evaluation() {
    let text = r#"{
        "version": 1,
        "name": "json",
        "schedule": {"family": "logistic", "T": 100, "k": 0.011},
        "sampler": {"n_steps": 20, "input_scale_b": 0.9, "variance_normalize": true},
        "seeds": [1, 2, 3],
        "sweep": {"axis": "t0", "values": [40, 60]}
    }"#;
    let scenario = parse_scenarios(text).unwrap().remove(0);
    let a = evaluate(&scenario, true).unwrap();
    let b = evaluate(&scenario, true).unwrap();
    assert_eq!(a.reports.len(), 2);
    assert_eq!(a.seeds.len(), 6);
    assert_eq!(a.seeds, b.seeds);
    assert!(a.reports.iter().all(|r| r.input_scale_b == 0.9 && r.edit_drift.is_some()));
}

#[test]
fn input_scale_preset_covers_nineteen_points() {
    let mut scenario = ScenarioConfig::new("b", ScheduleSpec::logistic(100), vec![0]);
    scenario.sampler.n_steps = 10;
    scenario.sweep = Some(Sweep::InputScaleB { values: None });
    let eval = evaluate(&scenario, false).unwrap();
    assert_eq!(eval.reports.len(), 19);
    assert!(eval.reports.iter().all(|r| r.roundtrip_mse.is_finite()));
}
