//! The five experiment commands. Each consumes one loaded config plus an
//! output directory, writes its artifacts and a `manifest.json`, and leaves
//! byte-identical files when re-run with the same config and seed.

use std::path::Path;

use scot_core::data;
use scot_core::metrics::{consistency_gap, gaussian_frechet, mean_straightness, sliced_w2};
use scot_core::nets::{load_checkpoint, save_checkpoint, ArchSpec, LoadedCheckpoint, StudentMeta};
use scot_core::sampler::{sample, sweep, ProjectionMap, StepSchedule, TeacherFlowMap};
use scot_core::scot::{distill_step, DistillState, StepRecord, StudentProjection};
use scot_core::teacher::{gen_pair_traced, teacher_step, NeuralField, SolverKind, TeacherState};
use scot_core::{CoreError, Mat};

use crate::config::{CompareMetric, LoadedConfig};
use crate::csv::CsvDoc;
use crate::error::{CliError, Result};
use crate::manifest::write_manifest;

// Stream names: every random draw in a run hangs off the root seed through
// one of these labels, so artifacts are reproducible by name.
const STREAM_HELDOUT: &str = "data.heldout";
const STREAM_EVAL_NOISE: &str = "noise.eval";
const STREAM_TRACE_NOISE: &str = "noise.trace";
const STREAM_SW2_DIRS: &str = "eval.sw2.dirs";
const STREAM_DATA_DUMP: &str = "data.sample";

/// The jump-disagreement probe advances the trace batch with the map under
/// test from `t = 1` to `GAP_T1`, then jumps both snapshots to `GAP_S`. A map
/// whose jumps compose exactly scores zero regardless of how its trajectories
/// are shaped.
const GAP_T1: f64 = 0.5;
const GAP_S: f64 = 0.25;
const DATASET_DUMP_ROWS: usize = 512;

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Output { path: out.to_path_buf(), source: e })
}

fn load_params(
    loaded: &LoadedConfig,
    configured: &Option<String>,
    out: &Path,
    default_name: &str,
    arch: &ArchSpec,
    role: &'static str,
) -> Result<LoadedCheckpoint> {
    let path = loaded.resolve_input(configured, out, default_name);
    if !path.exists() {
        return Err(CliError::MissingInput { path, role });
    }
    load_checkpoint(&path, arch).map_err(|source| CliError::Checkpoint { path, source })
}

fn load_teacher(loaded: &LoadedConfig, out: &Path) -> Result<LoadedCheckpoint> {
    load_params(
        loaded,
        &loaded.cfg.paths.teacher_checkpoint,
        out,
        "teacher.json",
        &loaded.cfg.teacher_arch(),
        "teacher checkpoint",
    )
}

fn load_student(loaded: &LoadedConfig, out: &Path) -> Result<LoadedCheckpoint> {
    load_params(
        loaded,
        &loaded.cfg.paths.student_checkpoint,
        out,
        "student.json",
        &loaded.cfg.student_arch(),
        "student checkpoint",
    )
}

/// Fixed evaluation inputs shared by `distill`, `eval` and `compare`, so
/// metric columns are directly comparable across commands.
struct EvalContext {
    heldout: Mat,
    noise: Mat,
    /// Anchor batch for trajectory sweeps and the `t = 1` snapshot of the
    /// jump-disagreement probe.
    trace_noise: Mat,
    n_dirs: usize,
    time_grid: usize,
    seed: u64,
}

fn build_eval_context(loaded: &LoadedConfig) -> EvalContext {
    let cfg = &loaded.cfg;
    let e = &cfg.eval;
    EvalContext {
        heldout: data::sample(cfg.dataset, cfg.seed, STREAM_HELDOUT, 0, e.n_samples),
        noise: data::sample_noise(cfg.seed, STREAM_EVAL_NOISE, 0, e.n_samples, 2),
        trace_noise: data::sample_noise(cfg.seed, STREAM_TRACE_NOISE, 0, e.n_traces, 2),
        n_dirs: e.n_dirs,
        time_grid: cfg.distill.time_grid,
        seed: cfg.seed,
    }
}

struct MetricsRow {
    nfe: usize,
    sw2: f64,
    gfd: f64,
    straightness: f64,
    gap: f64,
}

/// Score one projection map: distribution metrics per sampling budget, plus
/// budget-independent trajectory metrics (implied-trajectory straightness on
/// the training grid, jump disagreement between two snapshots).
fn eval_map(ctx: &EvalContext, map: &dyn ProjectionMap, budgets: &[usize]) -> Result<Vec<MetricsRow>> {
    let n = ctx.time_grid;
    let s_vals: Vec<f64> = (1..=n).map(|j| (n - j) as f64 / n as f64).collect();
    let swept = sweep(map, &ctx.trace_noise, 1.0, &s_vals).map_err(CliError::Run)?;
    let straightness = mean_straightness(&swept);
    let mid = map.jump(&ctx.trace_noise, 1.0, GAP_T1);
    let gap = consistency_gap(map, &mid, GAP_T1, &ctx.trace_noise, 1.0, GAP_S);
    let mut rows = Vec::with_capacity(budgets.len());
    for &steps in budgets {
        let out = sample(map, &ctx.noise, &StepSchedule::uniform(steps)).map_err(CliError::Run)?;
        let sw2 = sliced_w2(&out.x0, &ctx.heldout, ctx.n_dirs, ctx.seed, STREAM_SW2_DIRS);
        let gfd = gaussian_frechet(&out.x0, &ctx.heldout);
        rows.push(MetricsRow { nfe: out.nfe, sw2, gfd, straightness, gap });
    }
    Ok(rows)
}

pub fn run_train_teacher(loaded: &LoadedConfig, out: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    ensure_out(out)?;
    let mut state = TeacherState::new(cfg.teacher_arch(), cfg.teacher_config(), cfg.seed);
    let mut loss_csv = CsvDoc::new(&["step", "loss", "grad_norm"]);
    for _ in 0..cfg.teacher.steps {
        let rec = teacher_step(&mut state);
        if !rec.loss.is_finite() {
            return Err(CliError::Run(CoreError::non_finite(format!(
                "teacher loss at step {}",
                rec.step
            ))));
        }
        loss_csv.row(&[rec.step.into(), rec.loss.into(), rec.grad_norm.into()]);
        if rec.step % 500 == 0 || rec.step + 1 == cfg.teacher.steps {
            println!("[teacher] step {:>6}  loss {:.5}  grad {:.3}", rec.step, rec.loss, rec.grad_norm);
        }
    }
    save_checkpoint(
        &out.join("teacher.json"),
        &state.params,
        cfg.teacher.steps as u64,
        None,
        Some(&loaded.hash),
    )
    .map_err(CliError::Run)?;
    loss_csv.save(&out.join("teacher_loss.csv"))?;

    let dump = data::sample(cfg.dataset, cfg.seed, STREAM_DATA_DUMP, 0, DATASET_DUMP_ROWS);
    let mut dump_csv = CsvDoc::new(&["x0", "x1"]);
    for r in 0..dump.rows() {
        dump_csv.row(&[dump.get(r, 0).into(), dump.get(r, 1).into()]);
    }
    dump_csv.save(&out.join("dataset_sample.csv"))?;

    write_manifest(
        out,
        "train-teacher",
        &loaded.hash,
        cfg.seed,
        &["teacher.json", "teacher_loss.csv", "dataset_sample.csv"],
    )
}

pub fn run_distill(loaded: &LoadedConfig, out: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    ensure_out(out)?;
    let teacher = load_teacher(loaded, out)?;
    let ctx = build_eval_context(loaded);
    let mut state = DistillState::new(cfg.student_arch(), cfg.distill.to_config(), cfg.seed);

    let mut loss_csv = CsvDoc::new(&[
        "step", "loss_total", "loss_vel", "loss_con", "loss_dsm", "lambda_con", "grad_norm",
    ]);
    let mut metrics_csv = CsvDoc::new(&[
        "step", "nfe", "loss_vel", "loss_con", "loss_dsm", "lambda_con", "sw2", "gfd",
        "straightness", "consistency_gap",
    ]);

    let total = cfg.distill.steps;
    let mut last: Option<StepRecord> = None;
    for step in 0..=total {
        // A metrics row at `step` describes the parameters after `step`
        // completed updates; loss columns echo the most recent update (NaN
        // before the first one).
        if step == total || step % cfg.distill.eval_every == 0 {
            let map = StudentProjection::new(&state.params, state.cfg.projection());
            let rows = eval_map(&ctx, &map, &cfg.eval.nfe)?;
            let (lv, lc, ld) = match &last {
                Some(r) => (r.loss_vel, r.loss_con, r.loss_dsm),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            for row in rows {
                metrics_csv.row(&[
                    step.into(),
                    row.nfe.into(),
                    lv.into(),
                    lc.into(),
                    ld.into(),
                    state.lambda_con.into(),
                    row.sw2.into(),
                    row.gfd.into(),
                    row.straightness.into(),
                    row.gap.into(),
                ]);
            }
            if let Some(r) = rows_summary(&metrics_csv) {
                println!("[distill] step {:>6}  {}", step, r);
            }
        }
        if step == total {
            break;
        }
        let rec = distill_step(&mut state, &teacher.params).map_err(CliError::Run)?;
        if !rec.loss_total.is_finite() {
            return Err(CliError::Run(CoreError::non_finite(format!(
                "distillation loss at step {}",
                rec.step
            ))));
        }
        loss_csv.row(&[
            rec.step.into(),
            rec.loss_total.into(),
            rec.loss_vel.into(),
            rec.loss_con.into(),
            rec.loss_dsm.into(),
            rec.lambda_con.into(),
            rec.grad_norm.into(),
        ]);
        last = Some(rec);
    }

    let meta = StudentMeta {
        lambda_con: state.lambda_con,
        strategy: cfg.distill.lambda_strategy.name().to_string(),
    };
    save_checkpoint(&out.join("student.json"), &state.params, total as u64, Some(&meta), Some(&loaded.hash))
        .map_err(CliError::Run)?;
    save_checkpoint(
        &out.join("student_ema.json"),
        state.shadow.params(),
        total as u64,
        Some(&meta),
        Some(&loaded.hash),
    )
    .map_err(CliError::Run)?;
    loss_csv.save(&out.join("distill_loss.csv"))?;
    metrics_csv.save(&out.join("metrics.csv"))?;

    write_manifest(
        out,
        "distill",
        &loaded.hash,
        cfg.seed,
        &["student.json", "student_ema.json", "distill_loss.csv", "metrics.csv"],
    )
}

/// Last data line of a CSV under construction, for progress logging.
fn rows_summary(doc: &CsvDoc) -> Option<String> {
    doc.contents().lines().filter(|l| !l.is_empty()).next_back().map(|l| l.to_string())
}

pub fn run_eval(loaded: &LoadedConfig, out: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    ensure_out(out)?;
    let teacher = load_teacher(loaded, out)?;
    let student = load_student(loaded, out)?;
    let ctx = build_eval_context(loaded);

    let header = ["nfe", "sw2", "gfd", "straightness", "consistency_gap"];
    let map = StudentProjection::new(&student.params, cfg.distill.to_config().projection());
    let mut eval_csv = CsvDoc::new(&header);
    for row in eval_map(&ctx, &map, &cfg.eval.nfe)? {
        eval_csv.row(&[
            row.nfe.into(),
            row.sw2.into(),
            row.gfd.into(),
            row.straightness.into(),
            row.gap.into(),
        ]);
    }
    eval_csv.save(&out.join("eval.csv"))?;

    // Many-step teacher decode as the reference arm, scored identically.
    let field = NeuralField::new(&teacher.params);
    let teacher_map = TeacherFlowMap::new(&field, cfg.eval.teacher_solver_steps, SolverKind::Heun);
    let mut ref_csv = CsvDoc::new(&header);
    for row in eval_map(&ctx, &teacher_map, &[1])? {
        ref_csv.row(&[
            row.nfe.into(),
            row.sw2.into(),
            row.gfd.into(),
            row.straightness.into(),
            row.gap.into(),
        ]);
    }
    ref_csv.save(&out.join("teacher_ref.csv"))?;

    write_manifest(out, "eval", &loaded.hash, cfg.seed, &["eval.csv", "teacher_ref.csv"])
}

pub fn run_compare(loaded: &LoadedConfig, out: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    ensure_out(out)?;
    let teacher = load_teacher(loaded, out)?;
    let ctx = build_eval_context(loaded);

    let steps_list = &cfg.compare.checkpoint_steps;
    let header: Vec<String> = std::iter::once("strategy".to_string())
        .chain(steps_list.iter().map(|s| s.to_string()))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = CsvDoc::new(&header_refs);

    let last_step = *steps_list.last().expect("validated non-empty");
    for &strategy in &cfg.compare.strategies {
        let mut dcfg = cfg.distill.to_config();
        dcfg.lambda_strategy = strategy;
        let mut state = DistillState::new(cfg.student_arch(), dcfg, cfg.seed);
        let mut cells = vec![strategy.name().into()];
        for step in 1..=last_step {
            let rec = distill_step(&mut state, &teacher.params).map_err(CliError::Run)?;
            if !rec.loss_total.is_finite() {
                return Err(CliError::Run(CoreError::non_finite(format!(
                    "distillation loss at step {} ({} strategy)",
                    rec.step,
                    strategy.name()
                ))));
            }
            if steps_list.contains(&step) {
                let map = StudentProjection::new(&state.params, state.cfg.projection());
                let one_step = sample(&map, &ctx.noise, &StepSchedule::uniform(1))
                    .map_err(CliError::Run)?;
                let value = match cfg.compare.metric {
                    CompareMetric::Sw2 => {
                        sliced_w2(&one_step.x0, &ctx.heldout, ctx.n_dirs, ctx.seed, STREAM_SW2_DIRS)
                    }
                    CompareMetric::Gfd => gaussian_frechet(&one_step.x0, &ctx.heldout),
                };
                println!("[compare] {} @ {step}: {value:.5}", strategy.name());
                cells.push(value.into());
            }
        }
        table.row(&cells);
    }
    table.save(&out.join("compare.csv"))?;
    write_manifest(out, "compare", &loaded.hash, cfg.seed, &["compare.csv"])
}

pub fn run_export_traj(loaded: &LoadedConfig, out: &Path) -> Result<()> {
    let cfg = &loaded.cfg;
    ensure_out(out)?;
    let teacher = load_teacher(loaded, out)?;
    let student = load_student(loaded, out)?;

    let n = cfg.eval.n_traces;
    let grid = cfg.distill.time_grid;
    let noise = data::sample_noise(cfg.seed, STREAM_TRACE_NOISE, 0, n, 2);

    // Both subjects are discretized on the same grid so rows line up: the
    // teacher by integrating its field, the student by one-jump sweeps from
    // the shared anchor.
    let field = NeuralField::new(&teacher.params);
    let traced = gen_pair_traced(&field, &noise, grid, SolverKind::Heun).map_err(CliError::Run)?;
    let teacher_states = traced.intermediates.expect("traced decode records states");

    let map = StudentProjection::new(&student.params, cfg.distill.to_config().projection());
    let s_vals: Vec<f64> = (1..=grid).map(|j| (grid - j) as f64 / grid as f64).collect();
    let student_states = sweep(&map, &noise, 1.0, &s_vals).map_err(CliError::Run)?;

    let mut csv = CsvDoc::new(&["traj_id", "t", "x0", "x1"]);
    for (tag, states) in [("teacher", &teacher_states), ("student", &student_states)] {
        for i in 0..n {
            for (t, m) in states.iter() {
                csv.row(&[format!("{tag}-{i}").into(), (*t).into(), m.get(i, 0).into(), m.get(i, 1).into()]);
            }
        }
    }
    csv.save(&out.join("traj.csv"))?;
    write_manifest(out, "export-traj", &loaded.hash, cfg.seed, &["traj.csv"])
}
