//! Run configuration: one JSON document drives every subcommand, so a whole
//! experiment (teacher, distillation, evaluation, comparisons) is pinned by a
//! single file plus `--out`. Unknown keys are rejected, every section has
//! defaults, and `version` + `seed` are the only mandatory fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scot_core::data::Dataset;
use scot_core::nets::{Activation, ArchSpec, ArchTag, TimeEmbeddingSpec};
use scot_core::scot::{DistillConfig, LambdaStrategy, LrSchedule, VelocityProbe, VelocitySign};
use scot_core::teacher::TeacherConfig;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default = "d_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "d_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "d_activation")]
    pub activation: Activation,
    #[serde(default = "d_num_frequencies")]
    pub num_frequencies: usize,
    #[serde(default = "d_freq_base")]
    pub freq_base: f64,
}

fn d_hidden_width() -> usize {
    128
}
fn d_hidden_layers() -> usize {
    3
}
fn d_activation() -> Activation {
    Activation::Silu
}
fn d_num_frequencies() -> usize {
    8
}
fn d_freq_base() -> f64 {
    2.0
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            hidden_width: d_hidden_width(),
            hidden_layers: d_hidden_layers(),
            activation: d_activation(),
            num_frequencies: d_num_frequencies(),
            freq_base: d_freq_base(),
        }
    }
}

impl ArchSection {
    pub fn to_arch(&self, tag: ArchTag) -> ArchSpec {
        ArchSpec {
            tag,
            data_dim: 2,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: self.activation,
            time_embed: TimeEmbeddingSpec {
                num_frequencies: self.num_frequencies,
                base: self.freq_base,
            },
            embed_s: tag == ArchTag::Student,
        }
    }

    fn validate(&self, role: &str) -> std::result::Result<(), String> {
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(format!("{role}.arch: width and depth must be positive"));
        }
        if self.num_frequencies == 0 {
            return Err(format!("{role}.arch: need at least one time-embedding frequency"));
        }
        if !(self.freq_base > 0.0 && self.freq_base.is_finite()) {
            return Err(format!("{role}.arch: freq_base must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub arch: ArchSection,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let d = TeacherConfig::default();
        TeacherSection {
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            grad_clip: d.grad_clip,
            arch: ArchSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub arch: ArchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lambda_vel: f64,
    pub lambda_con_init: f64,
    pub lambda_dsm: f64,
    pub lambda_strategy: LambdaStrategy,
    pub lambda_refresh_every: usize,
    pub ema_mu: f64,
    pub grad_clip: f64,
    pub time_grid: usize,
    pub pair_solver_steps: usize,
    pub solver_substeps: usize,
    pub sign: VelocitySign,
    pub probe: VelocityProbe,
    pub t_min: f64,
    pub dsm_tau_max: f64,
    /// Metric rows are written every this many steps (step 0 and the final
    /// step always included).
    pub eval_every: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            lr_schedule: d.lr_schedule,
            lambda_vel: d.lambda_vel,
            lambda_con_init: d.lambda_con_init,
            lambda_dsm: d.lambda_dsm,
            lambda_strategy: d.lambda_strategy,
            lambda_refresh_every: d.lambda_refresh_every,
            ema_mu: d.ema_mu,
            grad_clip: d.grad_clip,
            time_grid: d.time_grid,
            pair_solver_steps: d.pair_solver_steps,
            solver_substeps: d.solver_substeps,
            sign: d.sign,
            probe: d.probe,
            t_min: d.t_min,
            dsm_tau_max: d.dsm_tau_max,
            eval_every: 500,
        }
    }
}

impl DistillSection {
    pub fn to_config(&self) -> DistillConfig {
        DistillConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            lambda_vel: self.lambda_vel,
            lambda_con_init: self.lambda_con_init,
            lambda_dsm: self.lambda_dsm,
            lambda_strategy: self.lambda_strategy,
            lambda_refresh_every: self.lambda_refresh_every,
            ema_mu: self.ema_mu,
            grad_clip: self.grad_clip,
            time_grid: self.time_grid,
            pair_solver_steps: self.pair_solver_steps,
            solver_substeps: self.solver_substeps,
            sign: self.sign,
            probe: self.probe,
            t_min: self.t_min,
            dsm_tau_max: self.dsm_tau_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub n_dirs: usize,
    /// Student sampling budgets (uniform schedules with this many intervals).
    pub nfe: Vec<usize>,
    /// Solver steps for the teacher reference decode.
    pub teacher_solver_steps: usize,
    /// Trajectories traced for straightness and export.
    pub n_traces: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_samples: 2048,
            n_dirs: 64,
            nfe: vec![1, 2, 4],
            teacher_solver_steps: 50,
            n_traces: 64,
        }
    }
}

/// Which scalar fills the ablation table cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMetric {
    Sw2,
    Gfd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub strategies: Vec<LambdaStrategy>,
    pub checkpoint_steps: Vec<usize>,
    pub metric: CompareMetric,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            strategies: vec![
                LambdaStrategy::Fixed,
                LambdaStrategy::Adaptive,
                LambdaStrategy::Normalized,
            ],
            checkpoint_steps: vec![1000, 2000, 3000, 4000],
            metric: CompareMetric::Sw2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Defaults to `<out>/teacher.json` when absent. Relative paths resolve
    /// against the config file's directory.
    pub teacher_checkpoint: Option<String>,
    /// Defaults to `<out>/student.json` when absent.
    pub student_checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Free-form documentation block; every command ignores it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
    #[serde(default = "d_dataset")]
    pub dataset: Dataset,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub paths: PathsSection,
}

fn d_dataset() -> Dataset {
    Dataset::Ring8
}

/// A parsed config plus its provenance (directory for path resolution, hash
/// of the raw bytes for manifests and checkpoints).
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
}

impl RunConfig {
    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            steps: self.teacher.steps,
            batch: self.teacher.batch,
            lr: self.teacher.lr,
            grad_clip: self.teacher.grad_clip,
            dataset: self.dataset,
        }
    }

    pub fn teacher_arch(&self) -> ArchSpec {
        self.teacher.arch.to_arch(ArchTag::Teacher)
    }

    pub fn student_arch(&self) -> ArchSpec {
        self.student.arch.to_arch(ArchTag::Student)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {} (this build reads {CONFIG_VERSION})",
                self.version
            ));
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();

        let t = &self.teacher;
        if t.steps == 0 || t.batch == 0 {
            return Err("teacher: steps and batch must be positive".into());
        }
        if !pos(t.lr) || !pos(t.grad_clip) {
            return Err("teacher: lr and grad_clip must be positive".into());
        }
        t.arch.validate("teacher")?;
        self.student.arch.validate("student")?;

        let d = &self.distill;
        if d.steps == 0 || d.batch == 0 {
            return Err("distill: steps and batch must be positive".into());
        }
        if !pos(d.lr) || !pos(d.grad_clip) {
            return Err("distill: lr and grad_clip must be positive".into());
        }
        if d.lambda_vel < 0.0 || d.lambda_con_init < 0.0 || d.lambda_dsm < 0.0 {
            return Err("distill: loss weights must be non-negative".into());
        }
        if d.lambda_refresh_every == 0 || d.eval_every == 0 {
            return Err("distill: lambda_refresh_every and eval_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.ema_mu) {
            return Err(format!("distill: ema_mu {} outside [0, 1]", d.ema_mu));
        }
        if d.time_grid < 2 {
            return Err("distill: time_grid needs at least two intervals".into());
        }
        if !pos(d.t_min) || d.t_min >= 1.0 / d.time_grid as f64 {
            return Err(format!(
                "distill: t_min {} must lie in (0, 1/time_grid = {})",
                d.t_min,
                1.0 / d.time_grid as f64
            ));
        }
        if d.dsm_tau_max <= d.t_min || d.dsm_tau_max > 1.0 {
            return Err(format!(
                "distill: dsm_tau_max {} must lie in (t_min = {}, 1]",
                d.dsm_tau_max, d.t_min
            ));
        }
        if d.pair_solver_steps == 0 || d.solver_substeps == 0 {
            return Err("distill: solver step counts must be positive".into());
        }
        if let VelocityProbe::CentralDiff { h } = d.probe {
            if !pos(h) {
                return Err("distill: central-difference h must be positive".into());
            }
        }

        let e = &self.eval;
        if e.n_samples < 2 {
            return Err("eval: n_samples must be at least 2".into());
        }
        if e.n_dirs == 0 || e.n_traces == 0 {
            return Err("eval: n_dirs and n_traces must be positive".into());
        }
        if e.teacher_solver_steps < 2 {
            return Err("eval: teacher_solver_steps must be at least 2 for a usable reference decode".into());
        }
        if e.nfe.is_empty() || e.nfe.iter().any(|&n| n == 0) {
            return Err("eval: nfe list must be non-empty with positive entries".into());
        }

        let c = &self.compare;
        if c.strategies.is_empty() {
            return Err("compare: strategies must be non-empty".into());
        }
        if c.checkpoint_steps.is_empty() {
            return Err("compare: checkpoint_steps must be non-empty".into());
        }
        if c.checkpoint_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err("compare: checkpoint_steps must be strictly increasing".into());
        }
        if *c.checkpoint_steps.last().unwrap() > d.steps {
            return Err(format!(
                "compare: checkpoint step {} exceeds distill.steps {}",
                c.checkpoint_steps.last().unwrap(),
                d.steps
            ));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: format!("cannot read: {e}"),
    })?;
    let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.validate().map_err(|message| CliError::Config { path: path.to_path_buf(), message })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash = format!("{:x}", hasher.finalize());
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(LoadedConfig { cfg, dir, hash })
}

impl LoadedConfig {
    /// Resolve a configured input path (relative paths are taken against the
    /// config file's directory), falling back to `<out>/<default_name>`.
    pub fn resolve_input(
        &self,
        configured: &Option<String>,
        out: &Path,
        default_name: &str,
    ) -> PathBuf {
        match configured {
            Some(p) => {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    self.dir.join(p)
                }
            }
            None => out.join(default_name),
        }
    }
}
