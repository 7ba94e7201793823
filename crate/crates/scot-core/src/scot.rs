//! Student distillation: a trajectory projection trained to jump along the
//! teacher's ODE paths in one call.
//!
//! The student is a blend anchored to its input,
//!
//! ```text
//! G(x_t, t, s) = (s/t)·x_t + (1 - s/t)·g(x_t, t, s)
//! ```
//!
//! so `G(x, t, t) = x` holds *identically* (the ratio is exactly 1 and the
//! network term is multiplied by exactly 0) and `G(x, t, 0) = g(x, t, 0)` is a
//! pure decode. Three losses shape `g`:
//!
//! * a velocity loss pinning `dG/ds` to the pair's chord direction, computed
//!   with a forward-mode tangent through the tape (or an optional central
//!   difference for cross-checking),
//! * a soft-consistency loss comparing a live jump + frozen decode against a
//!   short teacher hop pushed through the frozen student twice (gradients
//!   flow only through the single live application),
//! * a decode regression tying `g(x_tau, tau, 0)` to the teacher's endpoint
//!   under fresh re-noising.
//!
//! The consistency weight can rebalance itself from the ratio of final-layer
//! gradient norms. Time arguments ride on a uniform grid so the solver hop
//! between two drawn times always covers a whole number of intervals.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::linalg::Mat;
use crate::nets::{
    clip_global_norm, mlp_forward, AdamOutcome, AdamState, ArchSpec, BoundMlp, EmaShadow,
    ParamSet, TimeCol, TimeInput,
};
use crate::rng::StreamRng;
use crate::sampler::ProjectionMap;
use crate::tape::{NodeId, Tape};
use crate::teacher::{
    gen_pair, interpolate_rows, solver_between_spans, NeuralField, SolverKind,
};

// ---- projection -------------------------------------------------------------

/// Times below `t_min` are too close to the data endpoint for the `s/t` ratio
/// to be meaningful; the projection only accepts them in the identity case
/// `s == t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub t_min: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { t_min: 1e-3 }
    }
}

impl ProjectionConfig {
    fn check_pair(&self, t: f64, s: f64, row: usize) {
        assert!(
            (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&s),
            "row {row}: times must lie in [0, 1], got t = {t}, s = {s}"
        );
        assert!(s <= t, "row {row}: projection jumps backward in time, got s = {s} > t = {t}");
        assert!(
            t >= self.t_min || s == t,
            "row {row}: t = {t} below t_min = {} (and not the identity case)",
            self.t_min
        );
    }

    /// `s/t` with the identity case pinned to exactly 1 (also covers `t = 0`).
    fn ratio(&self, t: f64, s: f64, row: usize) -> f64 {
        self.check_pair(t, s, row);
        if s == t {
            1.0
        } else {
            s / t
        }
    }
}

/// Plain (tape-free) projection with per-row times.
pub fn project_rows(
    params: &ParamSet,
    cfg: &ProjectionConfig,
    x: &Mat,
    t: &[f64],
    s: &[f64],
) -> Mat {
    assert!(params.arch().embed_s, "the projection network must embed s");
    assert_eq!(t.len(), x.rows());
    assert_eq!(s.len(), x.rows());
    let g = mlp_forward(params, x, TimeCol::PerRow(t), Some(TimeCol::PerRow(s)));
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let ratio = cfg.ratio(t[r], s[r], r);
        for ((o, &xv), &gv) in out.row_mut(r).iter_mut().zip(x.row(r)).zip(g.row(r)) {
            *o = ratio * xv + (1.0 - ratio) * gv;
        }
    }
    out
}

/// Projection of a whole batch over one shared `(t, s)` pair.
pub fn project_uniform(
    params: &ParamSet,
    cfg: &ProjectionConfig,
    x: &Mat,
    t: f64,
    s: f64,
) -> Mat {
    project_rows(params, cfg, x, &vec![t; x.rows()], &vec![s; x.rows()])
}

/// The jump time for an on-tape projection: either constant per-row values or
/// a live `batch x 1` node (seed its tangent to differentiate in `s`).
pub enum STime {
    Rows(Vec<f64>),
    Live(NodeId),
}

/// On-tape projection. `t` is always constant; with [`STime::Live`] the ratio
/// is built as `s · (1/t)` from a precomputed reciprocal leaf so the tangent
/// in `s` is exact, and every `t` must clear `t_min`. With [`STime::Rows`]
/// the ratio is precomputed per row under the identity-pinning rule.
pub fn project_on_tape(
    tape: &mut Tape,
    net: &BoundMlp,
    cfg: &ProjectionConfig,
    x: NodeId,
    t: &[f64],
    s: &STime,
) -> NodeId {
    let arch = net.arch();
    assert!(arch.embed_s, "the projection network must embed s");
    let (batch, cols) = tape.shape(x);
    assert_eq!(cols, arch.data_dim);
    assert_eq!(t.len(), batch);

    let (ratio, g) = match s {
        STime::Live(s_node) => {
            assert_eq!(tape.shape(*s_node), (batch, 1), "live s must be batch x 1");
            for (r, &tv) in t.iter().enumerate() {
                assert!(
                    tv >= cfg.t_min,
                    "row {r}: live-s projection needs t >= t_min, got {tv}"
                );
                let sv = tape.value(*s_node).get(r, 0);
                cfg.check_pair(tv, sv, r);
            }
            let inv_t = tape.leaf(Mat::from_vec(batch, 1, t.iter().map(|&tv| 1.0 / tv).collect()));
            let ratio = tape.mul(*s_node, inv_t);
            let g = crate::nets::mlp_on_tape(
                tape,
                net,
                x,
                &TimeInput::Rows(t.to_vec()),
                Some(&TimeInput::Var(*s_node)),
            );
            (ratio, g)
        }
        STime::Rows(s_rows) => {
            assert_eq!(s_rows.len(), batch);
            let ratios: Vec<f64> =
                (0..batch).map(|r| cfg.ratio(t[r], s_rows[r], r)).collect();
            let ratio = tape.leaf(Mat::from_vec(batch, 1, ratios));
            let g = crate::nets::mlp_on_tape(
                tape,
                net,
                x,
                &TimeInput::Rows(t.to_vec()),
                Some(&TimeInput::Rows(s_rows.clone())),
            );
            (ratio, g)
        }
    };

    let rb = tape.broadcast_col(ratio, cols);
    let anchored = tape.mul(rb, x);
    let neg = tape.scale(rb, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let learned = tape.mul(one_minus, g);
    tape.add(anchored, learned)
}

/// The student as a sampler map (single network evaluation per jump).
pub struct StudentProjection<'a> {
    params: &'a ParamSet,
    cfg: ProjectionConfig,
}

impl<'a> StudentProjection<'a> {
    pub fn new(params: &'a ParamSet, cfg: ProjectionConfig) -> Self {
        assert!(params.arch().embed_s, "the projection network must embed s");
        StudentProjection { params, cfg }
    }
}

impl ProjectionMap for StudentProjection<'_> {
    fn dim(&self) -> usize {
        self.params.arch().data_dim
    }

    fn jump(&self, x: &Mat, t: f64, s: f64) -> Mat {
        project_uniform(self.params, &self.cfg, x, t, s)
    }
}

// ---- losses -----------------------------------------------------------------

/// Which way the velocity target points along the pair chord.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySign {
    /// Target `x1 - x0_hat` (increasing `s` moves toward noise).
    NoiseMinusData,
    /// Flipped target `x0_hat - x1`.
    DataMinusNoise,
}

/// How `dG/ds` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityProbe {
    /// Forward-mode tangent through the tape (exact, one pass).
    Exact,
    /// `(G(s+h) - G(s-h)) / 2h` from two constant-time projections.
    CentralDiff { h: f64 },
}

/// Mean squared error between `dG/ds` at `(x_t, t, s)` and the pair chord.
pub fn velocity_loss_on_tape(
    tape: &mut Tape,
    net: &BoundMlp,
    cfg: &ProjectionConfig,
    x_t: &Mat,
    t: &[f64],
    s: &[f64],
    x1: &Mat,
    x0_hat: &Mat,
    sign: VelocitySign,
    probe: VelocityProbe,
) -> NodeId {
    let batch = x_t.rows();
    assert!(batch > 0);
    assert_eq!(x1.shape(), x_t.shape());
    assert_eq!(x0_hat.shape(), x_t.shape());
    assert_eq!(t.len(), batch);
    assert_eq!(s.len(), batch);

    let mut target = match sign {
        VelocitySign::NoiseMinusData => x1.clone(),
        VelocitySign::DataMinusNoise => x0_hat.clone(),
    };
    match sign {
        VelocitySign::NoiseMinusData => target.add_scaled(x0_hat, -1.0),
        VelocitySign::DataMinusNoise => target.add_scaled(x1, -1.0),
    }

    let x_node = tape.leaf(x_t.clone());
    let dg_ds = match probe {
        VelocityProbe::Exact => {
            let s_node = tape.leaf(Mat::from_vec(batch, 1, s.to_vec()));
            tape.seed_tangent(s_node);
            let g = project_on_tape(tape, net, cfg, x_node, t, &STime::Live(s_node));
            tape.tangent(g).expect("a live-s projection always carries a tangent")
        }
        VelocityProbe::CentralDiff { h } => {
            assert!(h > 0.0, "central difference needs h > 0");
            for r in 0..batch {
                assert!(
                    s[r] - h >= 0.0 && s[r] + h <= t[r],
                    "row {r}: stencil [{} - {h}, {} + {h}] leaves [0, t = {}]",
                    s[r],
                    s[r],
                    t[r]
                );
            }
            let s_hi: Vec<f64> = s.iter().map(|v| v + h).collect();
            let s_lo: Vec<f64> = s.iter().map(|v| v - h).collect();
            let g_hi = project_on_tape(tape, net, cfg, x_node, t, &STime::Rows(s_hi));
            let g_lo = project_on_tape(tape, net, cfg, x_node, t, &STime::Rows(s_lo));
            let diff = tape.sub(g_hi, g_lo);
            tape.scale(diff, 1.0 / (2.0 * h))
        }
    };
    let target = tape.leaf(target);
    let sq = tape.sq_diff_sum(dg_ds, target);
    tape.scale(sq, 1.0 / batch as f64)
}

/// Soft-consistency loss.
///
/// Estimate branch (gradient path): jump the batch with the live student,
/// then decode to 0 with the frozen shadow — the gradient reaches the live
/// parameters only through that first jump. Target branch (fully constant):
/// the caller has already moved `x_t2` to `x_t1` with a short teacher hop;
/// push it through the frozen student twice (`t1 -> s`, then `s -> 0`).
pub fn consistency_loss_on_tape(
    tape: &mut Tape,
    net: &BoundMlp,
    shadow: &ParamSet,
    cfg: &ProjectionConfig,
    x_t2: &Mat,
    t2: &[f64],
    x_t1: &Mat,
    t1: &[f64],
    s: &[f64],
) -> NodeId {
    let batch = x_t2.rows();
    assert!(batch > 0);
    assert_eq!(x_t1.shape(), x_t2.shape());
    assert_eq!(t2.len(), batch);
    assert_eq!(t1.len(), batch);
    assert_eq!(s.len(), batch);
    for r in 0..batch {
        assert!(s[r] <= t1[r] && t1[r] <= t2[r], "row {r}: need s <= t1 <= t2");
    }

    let zeros = vec![0.0; batch];
    let x_node = tape.leaf(x_t2.clone());
    let inner = project_on_tape(tape, net, cfg, x_node, t2, &STime::Rows(s.to_vec()));
    let shadow_net = BoundMlp::bind(tape, shadow);
    let est = project_on_tape(tape, &shadow_net, cfg, inner, s, &STime::Rows(zeros.clone()));

    let hop_proj = project_rows(shadow, cfg, x_t1, t1, s);
    let target = project_rows(shadow, cfg, &hop_proj, s, &zeros);

    let target = tape.leaf(target);
    let sq = tape.sq_diff_sum(est, target);
    tape.scale(sq, 1.0 / batch as f64)
}

/// Decode regression: `g(x_tau, tau, 0)` (expressed through `G`, which equals
/// `g` at `s = 0`) against the pair's data endpoint.
pub fn dsm_loss_on_tape(
    tape: &mut Tape,
    net: &BoundMlp,
    cfg: &ProjectionConfig,
    x_tau: &Mat,
    tau: &[f64],
    x0_hat: &Mat,
) -> NodeId {
    let batch = x_tau.rows();
    assert!(batch > 0);
    assert_eq!(x0_hat.shape(), x_tau.shape());
    assert_eq!(tau.len(), batch);
    let x_node = tape.leaf(x_tau.clone());
    let decoded = project_on_tape(tape, net, cfg, x_node, tau, &STime::Rows(vec![0.0; batch]));
    let target = tape.leaf(x0_hat.clone());
    let sq = tape.sq_diff_sum(decoded, target);
    tape.scale(sq, 1.0 / batch as f64)
}

// ---- consistency weight -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStrategy {
    /// Keep the configured weight.
    Fixed,
    /// Ratio of final-layer gradient norms, `gv / (gc + 1e-8)`.
    Adaptive,
    /// Adaptive, clamped into `[0.01, 10]`.
    Normalized,
}

impl LambdaStrategy {
    pub fn name(self) -> &'static str {
        match self {
            LambdaStrategy::Fixed => "fixed",
            LambdaStrategy::Adaptive => "adaptive",
            LambdaStrategy::Normalized => "normalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(LambdaStrategy::Fixed),
            "adaptive" => Some(LambdaStrategy::Adaptive),
            "normalized" => Some(LambdaStrategy::Normalized),
            _ => None,
        }
    }
}

pub const LAMBDA_CLAMP: (f64, f64) = (0.01, 10.0);

/// New consistency weight given the final-layer gradient norms of the
/// velocity (`gv`) and consistency (`gc`) losses.
pub fn lambda_update(strategy: LambdaStrategy, gv: f64, gc: f64, current: f64) -> f64 {
    match strategy {
        LambdaStrategy::Fixed => current,
        LambdaStrategy::Adaptive => gv / (gc + 1e-8),
        LambdaStrategy::Normalized => (gv / (gc + 1e-8)).clamp(LAMBDA_CLAMP.0, LAMBDA_CLAMP.1),
    }
}

// ---- distillation loop ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the configured rate to zero across the budget.
    Cosine,
}

impl LrSchedule {
    /// Effective learning rate at `step` (0-based) of a `total`-step run.
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        assert!(total > 0 && step < total);
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lambda_vel: f64,
    pub lambda_con_init: f64,
    pub lambda_dsm: f64,
    pub lambda_strategy: LambdaStrategy,
    /// Recompute the consistency weight every this many steps (step 0 counts).
    pub lambda_refresh_every: usize,
    pub ema_mu: f64,
    pub grad_clip: f64,
    /// Number of intervals in the uniform time grid the losses draw from.
    pub time_grid: usize,
    /// Solver steps when decoding teacher pairs from `t = 1` to `0`.
    pub pair_solver_steps: usize,
    /// Solver steps per grid interval for the consistency hop `t2 -> t1`.
    pub solver_substeps: usize,
    pub sign: VelocitySign,
    pub probe: VelocityProbe,
    pub t_min: f64,
    /// Upper end of the decode-regression time draw. In low dimensions the
    /// fresh-noise corruption at large `tau` carries almost no information
    /// about the paired endpoint, so the regression target degenerates toward
    /// the population mean and fights the consistency bootstrap; capping the
    /// draw keeps the decode anchor where the corruption is informative.
    pub dsm_tau_max: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 4000,
            batch: 256,
            lr: 2e-3,
            lr_schedule: LrSchedule::Cosine,
            lambda_vel: 1.0,
            lambda_con_init: 1.0,
            lambda_dsm: 1.0,
            lambda_strategy: LambdaStrategy::Normalized,
            lambda_refresh_every: 25,
            ema_mu: 0.995,
            grad_clip: 10.0,
            time_grid: 18,
            pair_solver_steps: 50,
            solver_substeps: 1,
            sign: VelocitySign::NoiseMinusData,
            probe: VelocityProbe::Exact,
            t_min: 1e-3,
            dsm_tau_max: 0.35,
        }
    }
}

impl DistillConfig {
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig { t_min: self.t_min }
    }

    fn validate(&self) {
        assert!(self.steps > 0 && self.batch > 0);
        assert!(self.lr > 0.0 && self.lr.is_finite());
        assert!(self.lambda_refresh_every > 0);
        assert!((0.0..=1.0).contains(&self.ema_mu));
        assert!(self.grad_clip > 0.0);
        assert!(self.time_grid >= 2, "the loss draws need at least two grid intervals");
        assert!(self.pair_solver_steps > 0 && self.solver_substeps > 0);
        assert!(self.t_min > 0.0 && self.t_min < 1.0 / self.time_grid as f64);
        assert!(
            self.dsm_tau_max > self.t_min && self.dsm_tau_max <= 1.0,
            "dsm_tau_max must lie in (t_min, 1]"
        );
    }
}

/// Everything that evolves during distillation.
pub struct DistillState {
    pub params: ParamSet,
    pub shadow: EmaShadow,
    pub opt: AdamState,
    pub step: usize,
    pub lambda_con: f64,
    pub cfg: DistillConfig,
    pub seed: u64,
}

impl DistillState {
    pub fn new(arch: ArchSpec, cfg: DistillConfig, seed: u64) -> Self {
        assert!(arch.embed_s, "distillation trains a two-time network");
        cfg.validate();
        let params = ParamSet::init(arch, seed);
        let shadow = EmaShadow::new(&params, cfg.ema_mu);
        let opt = AdamState::new(&params, cfg.lr);
        let lambda_con = cfg.lambda_con_init;
        DistillState { params, shadow, opt, step: 0, lambda_con, cfg, seed }
    }
}

/// Per-step log line. Loss components are pre-weighting values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_vel: f64,
    pub loss_con: f64,
    pub loss_dsm: f64,
    pub lambda_con: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

fn normal_rows(stream: &StreamRng, step: usize, rows: usize, cols: usize) -> Mat {
    let pairs = cols.div_ceil(2);
    let base = (step * rows * pairs) as u64;
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for p in 0..pairs {
            let (a, b) = stream.normal_pair_at(base + (r * pairs + p) as u64);
            let row = m.row_mut(r);
            row[2 * p] = a;
            if 2 * p + 1 < cols {
                row[2 * p + 1] = b;
            }
        }
    }
    m
}

fn final_layer_grad_norm(tape: &Tape, net: &BoundMlp, root: NodeId, params: &ParamSet) -> f64 {
    let grads = tape.gradients(root);
    let named = net.grads(&grads);
    let (wn, bn) = params.final_layer_names();
    let sq: f64 = named
        .iter()
        .filter(|(name, _)| *name == wn || *name == bn)
        .map(|(_, g)| g.sq_norm())
        .sum();
    sq.sqrt()
}

/// One distillation step: draw noise, decode teacher pairs, build the three
/// losses on one tape, optionally rebalance the consistency weight, and apply
/// a clipped Adam update plus the EMA shadow update. Steps whose gradients go
/// non-finite leave the parameters untouched but still advance the step
/// counter (and thus the random streams).
pub fn distill_step(state: &mut DistillState, teacher: &ParamSet) -> Result<StepRecord, CoreError> {
    let cfg = state.cfg.clone();
    let step = state.step;
    let batch = cfg.batch;
    let dim = state.params.arch().data_dim;
    assert_eq!(teacher.arch().data_dim, dim, "teacher/student dimension mismatch");
    let pcfg = cfg.projection();
    let n = cfg.time_grid;

    // Teacher pairs.
    let noise = StreamRng::new(state.seed, "noise.train");
    let x1 = normal_rows(&noise, step, batch, dim);
    let field = NeuralField::new(teacher);
    let pair = gen_pair(&field, &x1, cfg.pair_solver_steps, SolverKind::Heun)?;

    // Velocity draws: t on {2..n}/n, s strictly inside (0, t).
    let tv_stream = StreamRng::new(state.seed, "times.vel");
    let mut t_v = Vec::with_capacity(batch);
    let mut s_v = Vec::with_capacity(batch);
    for r in 0..batch {
        let c = ((step * batch + r) * 2) as u64;
        let it = 2 + tv_stream.index_at(c, n - 1);
        let is = 1 + tv_stream.index_at(c + 1, it - 1);
        t_v.push(it as f64 / n as f64);
        s_v.push(is as f64 / n as f64);
    }
    let x_tv = interpolate_rows(&pair.x0_hat, &x1, &t_v);

    // Consistency draws: s <= t1 < t2 on the grid, teacher hop spans whole
    // intervals.
    let tc_stream = StreamRng::new(state.seed, "times.con");
    let mut t2 = Vec::with_capacity(batch);
    let mut t1 = Vec::with_capacity(batch);
    let mut s_c = Vec::with_capacity(batch);
    let mut spans = Vec::with_capacity(batch);
    for r in 0..batch {
        let c = ((step * batch + r) * 3) as u64;
        let i2 = 2 + tc_stream.index_at(c, n - 1);
        let i1 = tc_stream.index_at(c + 1, i2);
        let is = tc_stream.index_at(c + 2, i1 + 1);
        t2.push(i2 as f64 / n as f64);
        t1.push(i1 as f64 / n as f64);
        s_c.push(is as f64 / n as f64);
        spans.push(i2 - i1);
    }
    let x_t2 = interpolate_rows(&pair.x0_hat, &x1, &t2);
    let x_t1 =
        solver_between_spans(&field, &x_t2, &t2, &t1, &spans, cfg.solver_substeps, SolverKind::Heun)?;

    // Decode draws: fresh noise, continuous tau in [t_min, dsm_tau_max).
    let td_stream = StreamRng::new(state.seed, "times.dsm");
    let tau: Vec<f64> = (0..batch)
        .map(|r| {
            let u = td_stream.uniform_at((step * batch + r) as u64);
            cfg.t_min + u * (cfg.dsm_tau_max - cfg.t_min)
        })
        .collect();
    let dsm_noise = StreamRng::new(state.seed, "noise.dsm");
    let eps = normal_rows(&dsm_noise, step, batch, dim);
    let x_tau = interpolate_rows(&pair.x0_hat, &eps, &tau);

    // One tape, three losses.
    let mut tape = Tape::new();
    let bound = BoundMlp::bind(&mut tape, &state.params);
    let l_vel = velocity_loss_on_tape(
        &mut tape, &bound, &pcfg, &x_tv, &t_v, &s_v, &x1, &pair.x0_hat, cfg.sign, cfg.probe,
    );
    let l_con = consistency_loss_on_tape(
        &mut tape,
        &bound,
        state.shadow.params(),
        &pcfg,
        &x_t2,
        &t2,
        &x_t1,
        &t1,
        &s_c,
    );
    let l_dsm = dsm_loss_on_tape(&mut tape, &bound, &pcfg, &x_tau, &tau, &pair.x0_hat);

    let v_vel = tape.value(l_vel).get(0, 0);
    let v_con = tape.value(l_con).get(0, 0);
    let v_dsm = tape.value(l_dsm).get(0, 0);

    if cfg.lambda_strategy != LambdaStrategy::Fixed && step % cfg.lambda_refresh_every == 0 {
        let gv = final_layer_grad_norm(&tape, &bound, l_vel, &state.params);
        let gc = final_layer_grad_norm(&tape, &bound, l_con, &state.params);
        if gv.is_finite() && gc.is_finite() {
            state.lambda_con = lambda_update(cfg.lambda_strategy, gv, gc, state.lambda_con);
        }
    }

    let wv = tape.scale(l_vel, cfg.lambda_vel);
    let wc = tape.scale(l_con, state.lambda_con);
    let wd = tape.scale(l_dsm, cfg.lambda_dsm);
    let partial = tape.add(wv, wc);
    let total = tape.add(partial, wd);
    let v_total = tape.value(total).get(0, 0);

    let grads = tape.gradients(total);
    let mut named = bound.grads(&grads);
    let grad_norm = clip_global_norm(&mut named, cfg.grad_clip);
    state.opt.set_lr(cfg.lr_schedule.at(cfg.lr, step, cfg.steps));
    let outcome = state.opt.step(&mut state.params, &named);
    let applied = outcome == AdamOutcome::Applied;
    if applied {
        state.shadow.update(&state.params);
    }
    state.step += 1;

    Ok(StepRecord {
        step,
        loss_total: v_total,
        loss_vel: v_vel,
        loss_con: v_con,
        loss_dsm: v_dsm,
        lambda_con: state.lambda_con,
        grad_norm,
        applied,
    })
}
