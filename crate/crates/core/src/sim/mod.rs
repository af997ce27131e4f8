//! Closed-loop simulation: scenario configs, ground truth, the Kalman
//! oracle, and the Monte Carlo studies.

mod config;
mod oracle;
mod run;
mod study;

pub use config::{
    BarrierSpec, ControllerSpec, FilterVariant, MixtureComponent, ObservationSpec, ProcessSpec,
    ReferenceSpec, RiskSpec, Scenario, SupportSpec,
};
pub use oracle::{kf_oracle_cvar, KfOracle};
pub use run::{
    initial_belief, mean_std, reference_input, run_reps, run_scenario, write_records_csv, RunOutcome, RunStatus,
    RunSummary, StepRecord,
};
pub use study::{
    dropout_scenario, table1_study, table1_verdict, table2_study, table2_variants, table2_verdict,
    DropoutReport, Table1Report, Table1Row, Table1Verdict, Table2Report, Table2Row, Table2Variant,
    Table2Verdict, TABLE1_PARTICLES,
};

/// The drone of Example 1: constant reference into a wall at `x = 2`.
pub const EXAMPLE1_TOML: &str = include_str!("../../../../configs/example1.toml");
/// Bimodal unicycle baseline comparison.
pub const MULTIMODAL_TOML: &str = include_str!("../../../../configs/multimodal.toml");
/// Omnidirectional robot with a sensor failure.
pub const DROPOUT_TOML: &str = include_str!("../../../../configs/dropout.toml");

pub fn example1() -> Scenario {
    Scenario::from_toml_str(EXAMPLE1_TOML).expect("bundled config is valid")
}

pub fn multimodal() -> Scenario {
    Scenario::from_toml_str(MULTIMODAL_TOML).expect("bundled config is valid")
}

pub fn dropout() -> Scenario {
    Scenario::from_toml_str(DROPOUT_TOML).expect("bundled config is valid")
}
