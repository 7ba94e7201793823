//! Few-step sampling: fold a trajectory projection over a decreasing time
//! schedule.
//!
//! A [`ProjectionMap`] jumps a batch from one time to an earlier one in a
//! single call. Given a schedule `1 = t_0 > t_1 > ... > t_N = 0`, sampling is
//! `x <- jump(x, t_i, t_{i+1})` per interval; a map whose jumps compose
//! exactly produces the same endpoint for every schedule. NFE counts
//! underlying field/network evaluations, so a one-call student and a
//! many-step teacher baseline land in the same column honestly.

use crate::error::CoreError;
use crate::linalg::Mat;
use crate::teacher::{integrate, SolverKind, VelocityField};

/// Decreasing times from 1 to 0 inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    times: Vec<f64>,
}

impl StepSchedule {
    /// `n` equal intervals: `t_i = (n - i) / n`.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "a schedule needs at least one interval");
        let times = (0..=n).map(|i| (n - i) as f64 / n as f64).collect();
        StepSchedule { times }
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self, CoreError> {
        if times.len() < 2 {
            return Err(CoreError::BadSchedule(format!(
                "need at least two time points, got {}",
                times.len()
            )));
        }
        if times[0] != 1.0 {
            return Err(CoreError::BadSchedule(format!("must start at 1, got {}", times[0])));
        }
        if *times.last().unwrap() != 0.0 {
            return Err(CoreError::BadSchedule(format!(
                "must end at 0, got {}",
                times.last().unwrap()
            )));
        }
        for w in times.windows(2) {
            if !(w[1] < w[0]) {
                return Err(CoreError::BadSchedule(format!(
                    "times must strictly decrease, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(CoreError::BadSchedule("times must be finite".into()));
        }
        Ok(StepSchedule { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn num_intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Consecutive `(t, s)` jump pairs, `t > s`.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Anything that can move a batch from time `t` to an earlier time `s` in one
/// call.
pub trait ProjectionMap {
    fn dim(&self) -> usize;
    fn jump(&self, x: &Mat, t: f64, s: f64) -> Mat;
    /// Field/network evaluations one jump costs, for NFE accounting.
    fn evals_per_jump(&self) -> usize {
        1
    }
}

/// `G(x, t, s) = x + (s - t)·c`. Its jumps compose exactly, so any schedule
/// produces the identical endpoint — the reference object for
/// schedule-invariance tests.
pub struct ConstantVelocityMap {
    pub c: Vec<f64>,
}

impl ProjectionMap for ConstantVelocityMap {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn jump(&self, x: &Mat, t: f64, s: f64) -> Mat {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &cv) in out.row_mut(r).iter_mut().zip(&self.c) {
                *o += (s - t) * cv;
            }
        }
        out
    }
}

/// The teacher's ODE as a (many-evaluation) projection: each jump runs the
/// solver across the interval. With a one-interval schedule this is exactly
/// the classic full-solve baseline.
pub struct TeacherFlowMap<'a> {
    field: &'a dyn VelocityField,
    steps_per_jump: usize,
    kind: SolverKind,
}

impl<'a> TeacherFlowMap<'a> {
    pub fn new(field: &'a dyn VelocityField, steps_per_jump: usize, kind: SolverKind) -> Self {
        assert!(steps_per_jump > 0, "need at least one solver step per jump");
        TeacherFlowMap { field, steps_per_jump, kind }
    }
}

impl ProjectionMap for TeacherFlowMap<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn jump(&self, x: &Mat, t: f64, s: f64) -> Mat {
        integrate(self.field, x, t, s, self.steps_per_jump, self.kind)
            .expect("teacher flow diverged inside a jump")
    }

    fn evals_per_jump(&self) -> usize {
        match self.kind {
            SolverKind::Heun => 2 * self.steps_per_jump,
            SolverKind::Euler => self.steps_per_jump,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x0: Mat,
    pub nfe: usize,
}

/// Fold the map over the schedule, noise to data.
pub fn sample(
    map: &dyn ProjectionMap,
    x1: &Mat,
    schedule: &StepSchedule,
) -> Result<SampleOutput, CoreError> {
    assert_eq!(x1.cols(), map.dim(), "sample dim mismatch");
    let mut x = x1.clone();
    let mut nfe = 0;
    for (t, s) in schedule.intervals() {
        x = map.jump(&x, t, s);
        nfe += map.evals_per_jump();
        if !x.all_finite() {
            return Err(CoreError::non_finite(format!("sample state after jump {t:.4} -> {s:.4}")));
        }
    }
    Ok(SampleOutput { x0: x, nfe })
}

/// As [`sample`], but keep `(t, state)` at every schedule point (endpoints
/// included) for trajectory metrics and export.
pub fn trace(
    map: &dyn ProjectionMap,
    x1: &Mat,
    schedule: &StepSchedule,
) -> Result<Vec<(f64, Mat)>, CoreError> {
    assert_eq!(x1.cols(), map.dim(), "trace dim mismatch");
    let mut states = Vec::with_capacity(schedule.times().len());
    states.push((1.0, x1.clone()));
    let mut x = x1.clone();
    for (t, s) in schedule.intervals() {
        x = map.jump(&x, t, s);
        if !x.all_finite() {
            return Err(CoreError::non_finite(format!("trace state after jump {t:.4} -> {s:.4}")));
        }
        states.push((s, x.clone()));
    }
    Ok(states)
}

/// The map's *implied* trajectory from one fixed state: every listed `s` is
/// reached by a single jump from `(x, t_from)`, never by chaining. The first
/// returned entry is the anchor itself.
pub fn sweep(
    map: &dyn ProjectionMap,
    x: &Mat,
    t_from: f64,
    s_values: &[f64],
) -> Result<Vec<(f64, Mat)>, CoreError> {
    assert_eq!(x.cols(), map.dim(), "sweep dim mismatch");
    let mut states = Vec::with_capacity(s_values.len() + 1);
    states.push((t_from, x.clone()));
    for &s in s_values {
        assert!(s < t_from, "sweep targets must lie strictly below t_from");
        let y = map.jump(x, t_from, s);
        if !y.all_finite() {
            return Err(CoreError::non_finite(format!("sweep state at s = {s:.4}")));
        }
        states.push((s, y));
    }
    Ok(states)
}
