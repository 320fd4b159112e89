//! Closed-loop episodes: reference trajectories, the controller, allocator,
//! actuator and plant loop, and tracking metrics.

mod episode;
mod metrics;
pub mod reference;

pub use episode::{
    hover_command, run_episode, run_scenario, seeded_disturbance, Abort, Controller, ControllerKind,
    ControllerSettings, EpisodeTrace, Scenario, ScenarioKind, StepRecord,
};
pub use metrics::{compute_metrics, MetricsAccumulator, MetricsSummary, STEADY_STATE_FRACTION};
pub use reference::{
    agile_lemniscate_reference, agile_period, hover_attitude_schedule, lemniscate_reference,
    sluggish_lemniscate_reference, DesiredState, HoverAttitudeSchedule, Reference,
};
