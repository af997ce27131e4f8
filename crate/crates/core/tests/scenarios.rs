use riskfilter::sim::{self, dropout_scenario, kf_oracle_cvar, run_reps, run_scenario, write_records_csv, FilterVariant, Scenario};
use riskfilter::Error;

fn csv_bytes(s: &Scenario, seed: u64) -> Vec<u8> {
    let run = run_scenario(s, seed).unwrap();
    let mut out = Vec::new();
    write_records_csv(&run.records, &mut out).unwrap();
    out
}

#[test]
fn bundled_configs_parse_and_round_trip() {
    for s in [sim::example1(), sim::multimodal(), sim::dropout()] {
        let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
    }
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let text = sim::EXAMPLE1_TOML.replace("alpha = 0.2", "alpha = 0.2\nbeta = 1.0");
    match Scenario::from_toml_str(&text) {
        Err(Error::Config { path, message }) => {
            assert_eq!(path, "risk.beta");
            assert!(message.contains("unknown field"), "{message}");
        }
        other => panic!("expected config error, got {other:?}"),
    }
    let text = sim::EXAMPLE1_TOML.replace("alpha = 0.2", "alpha = \"low\"");
    match Scenario::from_toml_str(&text) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "risk.alpha"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn semantic_checks() {
    let bad_weights = sim::MULTIMODAL_TOML.replacen("weight = 0.5", "weight = 0.6", 1);
    assert!(matches!(
        Scenario::from_toml_str(&bad_weights),
        Err(Error::Config { path, .. }) if path == "initial_belief"
    ));
    let bad_rate = sim::MULTIMODAL_TOML.replace("rate_hz = 1.0", "rate_hz = 3.0");
    assert!(matches!(
        Scenario::from_toml_str(&bad_rate),
        Err(Error::Config { path, .. }) if path == "observation.rate_hz"
    ));
    let ball_on_wall = sim::EXAMPLE1_TOML.replace("variant = \"ours\"", "variant = \"be_scbf\"");
    assert!(Scenario::from_toml_str(&ball_on_wall).is_err());
    let no_floor = sim::EXAMPLE1_TOML.replace("support = \"sample_min\"", "support = \"barrier_min\"");
    assert!(Scenario::from_toml_str(&no_floor).is_err());
}

#[test]
fn unfiltered_drone_hits_the_wall() {
    let mut s = sim::example1();
    s.controller.variant = FilterVariant::None;
    let runs = run_reps(&s, 0, 20).unwrap();
    let hits = runs.iter().filter(|r| r.summary.collision).count();
    assert!(hits >= 18, "{hits} of 20");
}

#[test]
fn zero_noise_at_rest_repeats_the_first_record() {
    let mut s = sim::example1();
    s.process = sim::ProcessSpec::Integrator1d { sigma: 0.0 };
    s.initial_belief[0].std = vec![0.0];
    s.controller.reference = sim::ReferenceSpec::Constant { u: vec![0.0] };
    s.horizon = 0.5;
    let run = run_scenario(&s, 3).unwrap();
    assert_eq!(run.records.len(), s.steps() + 1);
    let first = &run.records[0];
    for r in &run.records[1..] {
        assert_eq!(r.x_true, first.x_true);
        assert_eq!(r.h_b, first.h_b);
        assert_eq!(r.cvar_hat, first.cvar_hat);
        assert_eq!(r.u_star, first.u_star);
        assert_eq!(r.collision, first.collision);
    }
}

#[test]
fn runs_are_reproducible_per_seed() {
    let s = sim::multimodal();
    let mut short = s.clone();
    short.horizon = 2.0;
    assert_eq!(csv_bytes(&short, 7), csv_bytes(&short, 7));
    assert_ne!(csv_bytes(&short, 7), csv_bytes(&short, 8));
}

#[test]
fn truth_does_not_depend_on_the_filter_noise() {
    let mut s = sim::example1();
    s.controller.variant = FilterVariant::None;
    let a = run_scenario(&s, 5).unwrap();
    s.particle_filter.particles = 1000;
    let b = run_scenario(&s, 5).unwrap();
    let truth = |r: &sim::RunOutcome| r.records.iter().map(|x| x.x_true.clone()).collect::<Vec<_>>();
    assert_eq!(truth(&a), truth(&b));
    assert_ne!(a.records.last().unwrap().h_b, b.records.last().unwrap().h_b);
}

#[test]
fn oracle_column_tracks_the_applied_inputs() {
    let s = sim::example1();
    let run = run_scenario(&s, 2).unwrap();
    let mut history = Vec::new();
    for r in &run.records {
        let expect = kf_oracle_cvar(1.5, 0.1, 0.1, &history, s.risk.alpha).unwrap();
        let got = r.cvar_true.expect("linear scenario has an oracle");
        assert!((got - expect).abs() < 1e-9, "t = {}: {got} vs {expect}", r.t);
        assert!((r.e_bar.unwrap() - (got - r.h_b)).abs() < 1e-12);
        assert!((r.e_hat.unwrap() - (got - r.cvar_hat)).abs() < 1e-12);
        history.push((s.control_period, r.u_star[0]));
    }
}

#[test]
fn nonlinear_scenarios_have_no_oracle() {
    let mut s = sim::multimodal();
    s.horizon = 0.1;
    let run = run_scenario(&s, 0).unwrap();
    assert!(run.records.iter().all(|r| r.cvar_true.is_none() && r.e_bar.is_none()));
}

#[test]
fn csv_header_layout() {
    let mut s = sim::multimodal();
    s.horizon = 0.05;
    let bytes = csv_bytes(&s, 0);
    let text = String::from_utf8(bytes).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "t,x_true_0,x_true_1,x_true_2,h_x_true,h_b,cvar_hat,cvar_true,e_hat,e_bar,\
         u_ref_0,u_ref_1,u_star_0,u_star_1,feasible,collision,jump_flag"
    );
    assert_eq!(text.lines().count(), s.steps() + 2);
}

#[test]
fn dropout_belief_spreads_from_the_start_without_a_sensor() {
    let mut s = sim::dropout();
    if let Some(sim::ObservationSpec::RangeBeacon { fail_after, .. }) = &mut s.observation {
        *fail_after = Some(0.0);
    }
    s.horizon = 4.0;
    let rep = dropout_scenario(&s, 1).unwrap();
    assert!(rep.spread_monotone);
    assert!(rep.spread_final > rep.spread_at_failure);
}

#[test]
fn dropout_filter_keeps_the_belief_out_of_the_region() {
    let s = sim::dropout();
    let rep = dropout_scenario(&s, 1).unwrap();
    assert!(rep.summary.status == sim::RunStatus::Completed);
    assert!(rep.spread_monotone);
    assert!(rep.mean_clearance_final > rep.mean_clearance_at_failure);
    assert!(rep.max_unsafe_fraction_after <= s.risk.alpha, "{}", rep.max_unsafe_fraction_after);
    assert!(!rep.summary.collision);
}

#[test]
fn dropout_without_filter_drives_particles_into_the_region() {
    let mut s = sim::dropout();
    s.controller.variant = FilterVariant::None;
    let rep = dropout_scenario(&s, 1).unwrap();
    assert!(rep.max_unsafe_fraction_after > 0.5, "{}", rep.max_unsafe_fraction_after);
}
