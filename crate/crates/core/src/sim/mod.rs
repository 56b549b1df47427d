//! Plant models, disturbance generation and closed-loop experiments.

pub mod closed_loop;
pub mod disturbance;
pub mod plant;

pub use closed_loop::{
    compute_metrics, initial_qp, realize, run_closed_loop, run_with_realization, violation_rate, ControllerKind,
    ControllerSpec, InfeasibilityPolicy, Metrics, ObjectiveKind, Realization, RunLog, Scenario, Schedule,
    ScheduleSegment, StepMode, StepRecord, WeightSpec,
};
pub use disturbance::{generate, DisturbanceSpec, DisturbanceTrace, WeatherSpec};
pub use plant::{plant_step, preset, Drift, PlantModel, PRESETS};
