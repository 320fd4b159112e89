use super::episode::{EpisodeTrace, StepRecord};
use crate::linalg::wrap_angle;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Fraction of the episode, counted from the end, used for steady-state errors.
pub const STEADY_STATE_FRACTION: f64 = 0.25;

/// Tracking and actuation statistics of one episode. Errors are in m and rad,
/// times in s, control effort in N^2 s (torque terms in (N m)^2 s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub samples: usize,
    pub duration: f64,
    pub position_rmse: [f64; 3],
    pub position_rmse_total: f64,
    pub attitude_rmse: [f64; 3],
    pub attitude_rmse_total: f64,
    pub position_max_abs: [f64; 3],
    pub attitude_max_abs: [f64; 3],
    pub position_steady_state: [f64; 3],
    pub attitude_steady_state: [f64; 3],
    pub saturation_fraction: f64,
    pub solve_time_mean: f64,
    pub solve_time_max: f64,
    pub solve_time_p99: f64,
    pub control_effort: f64,
}

/// Streaming metrics. Accumulators over disjoint, consecutive parts of a trace
/// can be merged.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    dt: f64,
    steady_start: f64,
    samples: usize,
    steady_samples: usize,
    saturated: usize,
    sq_pos: [f64; 3],
    sq_att: [f64; 3],
    max_pos: [f64; 3],
    max_att: [f64; 3],
    ss_pos: [f64; 3],
    ss_att: [f64; 3],
    effort: f64,
    solve_times: Vec<f64>,
    last_t: f64,
}

impl MetricsAccumulator {
    /// `steady_start` is the first time included in the steady-state window.
    pub fn new(dt: f64, steady_start: f64) -> Self {
        Self {
            dt,
            steady_start,
            samples: 0,
            steady_samples: 0,
            saturated: 0,
            sq_pos: [0.0; 3],
            sq_att: [0.0; 3],
            max_pos: [0.0; 3],
            max_att: [0.0; 3],
            ss_pos: [0.0; 3],
            ss_att: [0.0; 3],
            effort: 0.0,
            solve_times: Vec::new(),
            last_t: 0.0,
        }
    }

    /// Accumulator whose steady-state window is the final quarter of `duration`.
    pub fn for_episode(dt: f64, duration: f64) -> Self {
        Self::new(dt, (1.0 - STEADY_STATE_FRACTION) * duration)
    }

    pub fn push(&mut self, r: &StepRecord) {
        let steady = r.t >= self.steady_start - 1e-9 * self.dt;
        for i in 0..3 {
            let ep = r.state[i] - r.reference[i];
            let ea = wrap_angle(r.state[3 + i] - r.reference[3 + i]);
            self.sq_pos[i] += ep * ep;
            self.sq_att[i] += ea * ea;
            self.max_pos[i] = self.max_pos[i].max(ep.abs());
            self.max_att[i] = self.max_att[i].max(ea.abs());
            if steady {
                self.ss_pos[i] += ep.abs();
                self.ss_att[i] += ea.abs();
            }
        }
        if steady {
            self.steady_samples += 1;
        }
        if r.saturated() {
            self.saturated += 1;
        }
        self.effort += r.wrench.norm_squared() * self.dt;
        self.solve_times.push(r.solve_time);
        self.samples += 1;
        self.last_t = r.t;
    }

    /// Absorbs an accumulator that covers the samples following this one.
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for i in 0..3 {
            self.sq_pos[i] += other.sq_pos[i];
            self.sq_att[i] += other.sq_att[i];
            self.max_pos[i] = self.max_pos[i].max(other.max_pos[i]);
            self.max_att[i] = self.max_att[i].max(other.max_att[i]);
            self.ss_pos[i] += other.ss_pos[i];
            self.ss_att[i] += other.ss_att[i];
        }
        self.samples += other.samples;
        self.steady_samples += other.steady_samples;
        self.saturated += other.saturated;
        self.effort += other.effort;
        self.solve_times.extend_from_slice(&other.solve_times);
        if other.samples > 0 {
            self.last_t = other.last_t;
        }
    }

    pub fn finish(&self) -> Result<MetricsSummary> {
        if self.samples == 0 {
            return Err(Error::EmptyTrace);
        }
        let n = self.samples as f64;
        let ss = self.steady_samples.max(1) as f64;
        let rmse = |sq: &[f64; 3]| [(sq[0] / n).sqrt(), (sq[1] / n).sqrt(), (sq[2] / n).sqrt()];
        let total = |sq: &[f64; 3]| ((sq[0] + sq[1] + sq[2]) / n).sqrt();
        let mut times = self.solve_times.clone();
        times.sort_by(f64::total_cmp);
        let p99_index = ((0.99 * times.len() as f64).ceil() as usize).clamp(1, times.len()) - 1;
        Ok(MetricsSummary {
            samples: self.samples,
            duration: self.last_t,
            position_rmse: rmse(&self.sq_pos),
            position_rmse_total: total(&self.sq_pos),
            attitude_rmse: rmse(&self.sq_att),
            attitude_rmse_total: total(&self.sq_att),
            position_max_abs: self.max_pos,
            attitude_max_abs: self.max_att,
            position_steady_state: self.ss_pos.map(|s| s / ss),
            attitude_steady_state: self.ss_att.map(|s| s / ss),
            saturation_fraction: self.saturated as f64 / n,
            solve_time_mean: times.iter().sum::<f64>() / n,
            solve_time_max: times.last().copied().unwrap_or(0.0),
            solve_time_p99: times[p99_index],
            control_effort: self.effort,
        })
    }
}

pub fn compute_metrics(trace: &EpisodeTrace) -> Result<MetricsSummary> {
    let mut acc = MetricsAccumulator::for_episode(trace.dt, trace.duration);
    for r in &trace.records {
        acc.push(r);
    }
    acc.finish()
}
