//! MLP velocity/projection networks and their training plumbing.
//!
//! Both the teacher `v(x, t)` and the student `g(x, t, s)` are small MLPs over
//! `concat(x, embed(t)[, embed(s)])` where `embed` is a sinusoidal Fourier
//! feature map. Parameters live in a [`ParamSet`] with a stable, named entry
//! order; that order is the serialization order of checkpoints and the
//! iteration order of the optimizer, which is what keeps runs reproducible.
//!
//! Checkpoints are JSON `{format_version, arch, seed, step, arrays}` with
//! arrays as nested row lists. `f64` values survive the round trip bit for
//! bit (shortest-representation printing), and loading into a mismatched
//! architecture is rejected rather than coerced.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::Path;

use crate::error::CoreError;
use crate::linalg::{gemm_nt, Mat};
use crate::rng::StreamRng;
use crate::tape::{Gradients, NodeId, Tape};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

/// Fourier time features: `[sin(2π f_k τ), cos(2π f_k τ)]` for
/// `f_k = base^(k-1)`, `k = 1..=num_frequencies`. Width is `2 * num_frequencies`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbeddingSpec {
    pub num_frequencies: usize,
    pub base: f64,
}

impl TimeEmbeddingSpec {
    pub fn width(&self) -> usize {
        2 * self.num_frequencies
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchTag {
    Teacher,
    Student,
}

impl ArchTag {
    fn as_str(self) -> &'static str {
        match self {
            ArchTag::Teacher => "teacher",
            ArchTag::Student => "student",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub tag: ArchTag,
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub time_embed: TimeEmbeddingSpec,
    /// Student networks additionally embed the jump target time `s`.
    pub embed_s: bool,
}

impl ArchSpec {
    /// Desk-scale teacher: 2 -> 3x128 SiLU -> 2 over `concat(x, embed(t))`.
    pub fn teacher_default() -> Self {
        ArchSpec {
            tag: ArchTag::Teacher,
            data_dim: 2,
            hidden_width: 128,
            hidden_layers: 3,
            activation: Activation::Silu,
            time_embed: TimeEmbeddingSpec { num_frequencies: 8, base: 2.0 },
            embed_s: false,
        }
    }

    /// Desk-scale student: same trunk, input also carries `embed(s)`.
    pub fn student_default() -> Self {
        ArchSpec { tag: ArchTag::Student, embed_s: true, ..ArchSpec::teacher_default() }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim
            + self.time_embed.width()
            + if self.embed_s { self.time_embed.width() } else { 0 }
    }

    /// `(out_dim, in_dim)` of each affine layer, in forward order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        assert!(self.hidden_layers >= 1, "need at least one hidden layer");
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        dims.push((self.hidden_width, self.input_dim()));
        for _ in 1..self.hidden_layers {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.data_dim, self.hidden_width));
        dims
    }
}

// ---- time embedding --------------------------------------------------------

const TIME_SLACK: f64 = 1e-9;

/// Sinusoidal features of a time in `[0, 1]`.
pub fn embed_time(tau: f64, spec: &TimeEmbeddingSpec) -> Vec<f64> {
    assert!(
        (-TIME_SLACK..=1.0 + TIME_SLACK).contains(&tau),
        "time {tau} outside [0, 1]"
    );
    let mut out = Vec::with_capacity(spec.width());
    let mut f = 1.0;
    for _ in 0..spec.num_frequencies {
        let angle = 2.0 * std::f64::consts::PI * f * tau;
        out.push(angle.sin());
        out.push(angle.cos());
        f *= spec.base;
    }
    out
}

/// Embeddings of one time per row, as a `batch x width` matrix.
pub fn embed_time_rows(taus: &[f64], spec: &TimeEmbeddingSpec) -> Mat {
    let width = spec.width();
    let mut out = Mat::zeros(taus.len(), width);
    for (r, &tau) in taus.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&embed_time(tau, spec));
    }
    out
}

/// On-tape embedding of a `batch x 1` time node; tangents flow through the
/// trig ops, so a seeded time yields the embedding's `d/dτ` for free.
pub fn embed_time_on_tape(tape: &mut Tape, tau: NodeId, spec: &TimeEmbeddingSpec) -> NodeId {
    assert_eq!(tape.shape(tau).1, 1, "time node must be batch x 1");
    for &v in tape.value(tau).iter() {
        assert!((-TIME_SLACK..=1.0 + TIME_SLACK).contains(&v), "time {v} outside [0, 1]");
    }
    let mut parts = Vec::with_capacity(spec.width());
    let mut f = 1.0;
    for _ in 0..spec.num_frequencies {
        let angle = tape.scale(tau, 2.0 * std::f64::consts::PI * f);
        parts.push(tape.sin(angle));
        parts.push(tape.cos(angle));
        f *= spec.base;
    }
    tape.concat(&parts)
}

// ---- parameters ------------------------------------------------------------

/// Named, ordered parameter arrays plus the metadata needed to rebuild the
/// network: architecture and creation seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    arch: ArchSpec,
    seed: u64,
    entries: Vec<(String, Mat)>,
}

impl ParamSet {
    /// He-style uniform init (`U(±sqrt(6/fan_in))`) for every weight matrix,
    /// including the output layer, with zero biases. The output layer is *not*
    /// zeroed: downstream probes rely on the freshly initialised network being a
    /// generic state-dependent map rather than a constant one.
    pub fn init(arch: ArchSpec, seed: u64) -> Self {
        let stream = StreamRng::new(seed, match arch.tag {
            ArchTag::Teacher => "init.teacher",
            ArchTag::Student => "init.student",
        });
        let dims = arch.layer_dims();
        let mut entries = Vec::with_capacity(2 * dims.len());
        let mut counter = 0u64;
        for (l, &(out_dim, in_dim)) in dims.iter().enumerate() {
            let bound = (6.0 / in_dim as f64).sqrt();
            let mut w = Mat::zeros(out_dim, in_dim);
            for v in w.as_mut_slice() {
                *v = (2.0 * stream.uniform_at(counter) - 1.0) * bound;
                counter += 1;
            }
            entries.push((format!("layer{l}.weight"), w));
            entries.push((format!("layer{l}.bias"), Mat::zeros(1, out_dim)));
        }
        ParamSet { arch, seed, entries }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[(String, Mat)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Mat)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .1
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.all_finite())
    }

    /// Names of the last affine layer's weight and bias.
    pub fn final_layer_names(&self) -> (String, String) {
        let l = self.arch.layer_dims().len() - 1;
        (format!("layer{l}.weight"), format!("layer{l}.bias"))
    }
}

// ---- forward passes --------------------------------------------------------

/// A time argument for a batched forward pass: one shared value or one per row.
#[derive(Clone, Copy, Debug)]
pub enum TimeCol<'a> {
    Uniform(f64),
    PerRow(&'a [f64]),
}

impl TimeCol<'_> {
    fn embed(&self, batch: usize, spec: &TimeEmbeddingSpec) -> Mat {
        match self {
            TimeCol::Uniform(tau) => {
                let row = embed_time(*tau, spec);
                let mut out = Mat::zeros(batch, spec.width());
                for r in 0..batch {
                    out.row_mut(r).copy_from_slice(&row);
                }
                out
            }
            TimeCol::PerRow(taus) => {
                assert_eq!(taus.len(), batch, "per-row time length mismatch");
                embed_time_rows(taus, spec)
            }
        }
    }
}

fn activate(m: &mut Mat, act: Activation) {
    match act {
        Activation::Tanh => {
            for v in m.as_mut_slice() {
                *v = v.tanh();
            }
        }
        Activation::Silu => {
            for v in m.as_mut_slice() {
                let s = 0.5 * (0.5 * *v).tanh() + 0.5;
                *v *= s;
            }
        }
    }
}

/// Plain (tape-free) batched forward pass.
///
/// `s` must be supplied exactly when the architecture embeds it; a mismatch is
/// a construction bug and panics.
pub fn mlp_forward(params: &ParamSet, x: &Mat, t: TimeCol, s: Option<TimeCol>) -> Mat {
    let arch = &params.arch;
    assert_eq!(x.cols(), arch.data_dim, "input dim mismatch");
    assert_eq!(
        s.is_some(),
        arch.embed_s,
        "s must be supplied iff the architecture embeds it (embed_s = {})",
        arch.embed_s
    );
    let batch = x.rows();
    let spec = &arch.time_embed;

    let mut input = Mat::zeros(batch, arch.input_dim());
    let t_emb = t.embed(batch, spec);
    let s_emb = s.map(|s| s.embed(batch, spec));
    for r in 0..batch {
        let row = input.row_mut(r);
        row[..arch.data_dim].copy_from_slice(x.row(r));
        let mut at = arch.data_dim;
        row[at..at + spec.width()].copy_from_slice(t_emb.row(r));
        at += spec.width();
        if let Some(se) = &s_emb {
            row[at..at + spec.width()].copy_from_slice(se.row(r));
        }
    }

    let dims = arch.layer_dims();
    let mut h = input;
    for (l, &(out_dim, _)) in dims.iter().enumerate() {
        let w = &params.entries[2 * l].1;
        let b = &params.entries[2 * l + 1].1;
        let mut out = Mat::zeros(batch, out_dim);
        gemm_nt(&h, w, &mut out, 0.0);
        for r in 0..batch {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
        if l + 1 < dims.len() {
            activate(&mut out, arch.activation);
        }
        h = out;
    }
    h
}

/// A network's parameters bound onto a tape as leaves.
pub struct BoundMlp {
    arch: ArchSpec,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    nodes: Vec<NodeId>,
}

impl BoundMlp {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut nodes = Vec::new();
        for (name, m) in &params.entries {
            names.push(name.clone());
            shapes.push(m.shape());
            nodes.push(tape.leaf(m.clone()));
        }
        BoundMlp { arch: params.arch.clone(), names, shapes, nodes }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Parameter gradients in entry order; zeros for parameters the loss never
    /// reached.
    pub fn grads(&self, grads: &Gradients) -> Vec<(String, Mat)> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.nodes)
            .map(|((name, &(r, c)), &id)| (name.clone(), grads.get_or_zeros(id, r, c)))
            .collect()
    }
}

/// A time argument for the on-tape forward pass. `Var` is a `batch x 1` node
/// (possibly tangent-seeded); `Rows` is constant data embedded off-tape.
pub enum TimeInput {
    Rows(Vec<f64>),
    Var(NodeId),
}

/// On-tape batched forward pass through bound parameters.
pub fn mlp_on_tape(
    tape: &mut Tape,
    net: &BoundMlp,
    x: NodeId,
    t: &TimeInput,
    s: Option<&TimeInput>,
) -> NodeId {
    let arch = &net.arch;
    let batch = tape.shape(x).0;
    assert_eq!(tape.shape(x).1, arch.data_dim, "input dim mismatch");
    assert_eq!(s.is_some(), arch.embed_s, "s must be supplied iff embed_s");
    let spec = arch.time_embed;

    let embed_input = |tape: &mut Tape, input: &TimeInput| -> NodeId {
        match input {
            TimeInput::Rows(taus) => {
                assert_eq!(taus.len(), batch, "per-row time length mismatch");
                tape.leaf(embed_time_rows(taus, &spec))
            }
            TimeInput::Var(node) => embed_time_on_tape(tape, *node, &spec),
        }
    };

    let t_emb = embed_input(tape, t);
    let mut parts = vec![x, t_emb];
    if let Some(s) = s {
        let s_emb = embed_input(tape, s);
        parts.push(s_emb);
    }
    let mut h = tape.concat(&parts);
    let n_layers = arch.layer_dims().len();
    for l in 0..n_layers {
        let w = net.nodes[2 * l];
        let b = net.nodes[2 * l + 1];
        h = tape.affine(h, w, b);
        if l + 1 < n_layers {
            h = match arch.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Silu => tape.silu(h),
            };
        }
    }
    h
}

// ---- optimizer -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Number of applied steps (skipped steps do not advance bias correction).
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// Gradients contained non-finite entries; parameters were left untouched.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.entries.iter().map(|(_, p)| Mat::zeros(p.rows(), p.cols())).collect(),
            v: params.entries.iter().map(|(_, p)| Mat::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Override the learning rate for subsequent steps (lr schedules live in
    /// the training loops, not in the optimizer).
    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr >= 0.0 && lr.is_finite(), "lr must be finite and non-negative");
        self.lr = lr;
    }

    /// One bias-corrected step. Gradients must align with the entry order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Mat)]) -> AdamOutcome {
        assert_eq!(grads.len(), params.entries.len(), "gradient/parameter count mismatch");
        for ((name, g), (pname, p)) in grads.iter().zip(&params.entries) {
            assert_eq!(name, pname, "gradient order must match parameter order");
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for {name}");
        }
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return AdamOutcome::SkippedNonFinite;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, g)) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params.entries[i].1;
            for ((mi, vi), (pi, gi)) in m
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(p.as_mut_slice().iter_mut().zip(g.iter()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        AdamOutcome::Applied
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Mat)], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|(_, g)| g.sq_norm()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

// ---- EMA shadow ------------------------------------------------------------

/// Exponential moving average of a parameter set (the distillation target's
/// slow weights). After `update`, each entry is exactly
/// `mu * old + (1 - mu) * current`.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    mu: f64,
    shadow: ParamSet,
}

impl EmaShadow {
    pub fn new(params: &ParamSet, mu: f64) -> Self {
        assert!((0.0..=1.0).contains(&mu), "mu must lie in [0, 1], got {mu}");
        EmaShadow { mu, shadow: params.clone() }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn params(&self) -> &ParamSet {
        &self.shadow
    }

    pub fn update(&mut self, current: &ParamSet) {
        assert_eq!(self.shadow.entries.len(), current.entries.len(), "param count changed");
        for ((_, s), (_, c)) in self.shadow.entries.iter_mut().zip(&current.entries) {
            assert_eq!(s.shape(), c.shape(), "param shape changed");
            for (sv, cv) in s.as_mut_slice().iter_mut().zip(c.iter()) {
                *sv = self.mu * *sv + (1.0 - self.mu) * cv;
            }
        }
    }
}

// ---- checkpoints ------------------------------------------------------------

/// Student-only bookkeeping carried in the checkpoint next to the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentMeta {
    pub lambda_con: f64,
    pub strategy: String,
}

fn mat_to_json(m: &Mat) -> Value {
    Value::Array(
        (0..m.rows())
            .map(|r| Value::Array(m.row(r).iter().map(|&v| json!(v)).collect()))
            .collect(),
    )
}

fn mat_from_json(v: &Value, rows: usize, cols: usize, name: &str) -> Result<Mat, CoreError> {
    let outer = v
        .as_array()
        .ok_or_else(|| CoreError::BadCheckpoint(format!("array {name} is not a list")))?;
    if outer.len() != rows {
        return Err(CoreError::BadCheckpoint(format!(
            "array {name}: expected {rows} rows, found {}",
            outer.len()
        )));
    }
    let mut m = Mat::zeros(rows, cols);
    for (r, row) in outer.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| CoreError::BadCheckpoint(format!("array {name} row {r} not a list")))?;
        if row.len() != cols {
            return Err(CoreError::BadCheckpoint(format!(
                "array {name} row {r}: expected {cols} cols, found {}",
                row.len()
            )));
        }
        for (c, cell) in row.iter().enumerate() {
            let f = cell.as_f64().ok_or_else(|| {
                CoreError::BadCheckpoint(format!("array {name}[{r}][{c}] not a number"))
            })?;
            m.set(r, c, f);
        }
    }
    Ok(m)
}

/// Serialize a checkpoint document. Array entries appear in `ParamSet` order.
pub fn checkpoint_to_json(
    params: &ParamSet,
    step: u64,
    student: Option<&StudentMeta>,
    config_hash: Option<&str>,
) -> Value {
    let mut doc = serde_json::Map::new();
    doc.insert("format_version".into(), json!(CHECKPOINT_FORMAT_VERSION));
    doc.insert("arch".into(), serde_json::to_value(&params.arch).expect("arch serializes"));
    doc.insert("seed".into(), json!(params.seed));
    doc.insert("step".into(), json!(step));
    if let Some(hash) = config_hash {
        doc.insert("config_hash".into(), json!(hash));
    }
    if let Some(meta) = student {
        doc.insert("student".into(), serde_json::to_value(meta).expect("meta serializes"));
    }
    let mut arrays = serde_json::Map::new();
    for (name, m) in &params.entries {
        arrays.insert(name.clone(), mat_to_json(m));
    }
    doc.insert("arrays".into(), Value::Object(arrays));
    Value::Object(doc)
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub params: ParamSet,
    pub step: u64,
    pub student: Option<StudentMeta>,
    pub config_hash: Option<String>,
}

/// Parse and validate a checkpoint document against an expected architecture.
pub fn checkpoint_from_json(doc: &Value, expected: &ArchSpec) -> Result<LoadedCheckpoint, CoreError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| CoreError::BadCheckpoint("top level is not an object".into()))?;
    let version = obj
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| CoreError::BadCheckpoint("missing format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CoreError::BadCheckpoint(format!(
            "unsupported format_version {version} (wanted {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let arch: ArchSpec = serde_json::from_value(
        obj.get("arch").cloned().ok_or_else(|| CoreError::BadCheckpoint("missing arch".into()))?,
    )
    .map_err(|e| CoreError::BadCheckpoint(format!("bad arch: {e}")))?;
    if &arch != expected {
        return Err(CoreError::ArchMismatch {
            found: format!("{} ({:?})", arch.tag.as_str(), arch.layer_dims()),
            wanted: format!("{} ({:?})", expected.tag.as_str(), expected.layer_dims()),
        });
    }
    let seed = obj
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| CoreError::BadCheckpoint("missing seed".into()))?;
    let step = obj
        .get("step")
        .and_then(Value::as_u64)
        .ok_or_else(|| CoreError::BadCheckpoint("missing step".into()))?;
    let student = match obj.get("student") {
        Some(v) => Some(
            serde_json::from_value::<StudentMeta>(v.clone())
                .map_err(|e| CoreError::BadCheckpoint(format!("bad student meta: {e}")))?,
        ),
        None => None,
    };
    let config_hash = obj.get("config_hash").and_then(Value::as_str).map(str::to_owned);
    let arrays = obj
        .get("arrays")
        .and_then(Value::as_object)
        .ok_or_else(|| CoreError::BadCheckpoint("missing arrays".into()))?;

    let template = ParamSet::init(arch.clone(), seed);
    let mut entries = Vec::with_capacity(template.entries.len());
    for (name, m) in &template.entries {
        let v = arrays
            .get(name)
            .ok_or_else(|| CoreError::BadCheckpoint(format!("missing array {name}")))?;
        entries.push((name.clone(), mat_from_json(v, m.rows(), m.cols(), name)?));
    }
    if arrays.len() != entries.len() {
        return Err(CoreError::BadCheckpoint(format!(
            "unexpected extra arrays: found {}, wanted {}",
            arrays.len(),
            entries.len()
        )));
    }
    Ok(LoadedCheckpoint { params: ParamSet { arch, seed, entries }, step, student, config_hash })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    step: u64,
    student: Option<&StudentMeta>,
    config_hash: Option<&str>,
) -> Result<(), CoreError> {
    let doc = checkpoint_to_json(params, step, student, config_hash);
    let text = serde_json::to_string(&doc)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: &ArchSpec) -> Result<LoadedCheckpoint, CoreError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)?;
    checkpoint_from_json(&doc, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::fd_derivative;

    #[test]
    fn embedding_at_zero_is_alternating_zero_one() {
        let spec = TimeEmbeddingSpec { num_frequencies: 4, base: 2.0 };
        let e = embed_time(0.0, &spec);
        assert_eq!(e.len(), 8);
        for k in 0..4 {
            assert_eq!(e[2 * k], 0.0, "sin at 0");
            assert_eq!(e[2 * k + 1], 1.0, "cos at 0");
        }
    }

    #[test]
    fn embedding_single_frequency_quarter_period() {
        let spec = TimeEmbeddingSpec { num_frequencies: 1, base: 2.0 };
        let e = embed_time(0.25, &spec);
        assert!((e[0] - 1.0).abs() < 1e-15, "sin(π/2) = 1, got {}", e[0]);
        assert!(e[1].abs() < 1e-15, "cos(π/2) = 0, got {}", e[1]);
    }

    #[test]
    fn embedding_frequencies_are_geometric() {
        let spec = TimeEmbeddingSpec { num_frequencies: 3, base: 3.0 };
        let tau = 0.11;
        let e = embed_time(tau, &spec);
        for (k, f) in [1.0, 3.0, 9.0].iter().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * f * tau;
            assert_eq!(e[2 * k], angle.sin());
            assert_eq!(e[2 * k + 1], angle.cos());
        }
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn embedding_rejects_out_of_range_time() {
        embed_time(1.5, &TimeEmbeddingSpec { num_frequencies: 2, base: 2.0 });
    }

    #[test]
    fn on_tape_embedding_tangent_matches_fd() {
        let spec = TimeEmbeddingSpec { num_frequencies: 3, base: 2.0 };
        let tau = 0.37;
        let mut tape = Tape::new();
        let t_node = tape.leaf(Mat::col(&[tau]));
        tape.seed_tangent(t_node);
        let emb = embed_time_on_tape(&mut tape, t_node, &spec);
        let tan = tape.tangent(emb).expect("tangent flows through trig");
        let got = tape.value(tan).as_slice().to_vec();
        let want = fd_derivative(|s| embed_time(s, &spec), tau, 1e-6);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "tangent {g} vs fd {w}");
        }
    }

    #[test]
    fn init_is_deterministic_and_he_bounded() {
        let arch = ArchSpec::teacher_default();
        let a = ParamSet::init(arch.clone(), 11);
        let b = ParamSet::init(arch.clone(), 11);
        assert_eq!(a, b, "same (arch, seed) must give identical parameters");
        let c = ParamSet::init(arch.clone(), 12);
        assert_ne!(a, c, "different seed must move the init");

        let dims = arch.layer_dims();
        for (l, &(_, in_dim)) in dims.iter().enumerate() {
            let bound = (6.0 / in_dim as f64).sqrt();
            let w = a.get(&format!("layer{l}.weight"));
            assert!(
                w.iter().all(|&v| v.abs() <= bound),
                "layer {l} weight exceeds He bound {bound}"
            );
            assert!(w.iter().any(|&v| v != 0.0), "layer {l} should not start at zero");
            assert!(a.get(&format!("layer{l}.bias")).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_network_output_depends_on_input() {
        // The probes that compare a map against its own compositions need the
        // untrained network to be a genuinely state-dependent map; a constant
        // (input-independent) init would make those comparisons vacuous.
        let p = ParamSet::init(ArchSpec::student_default(), 5);
        let x = Mat::from_rows(&[vec![0.3, -0.7], vec![1.2, 0.4]]);
        let y = mlp_forward(&p, &x, TimeCol::Uniform(0.5), Some(TimeCol::Uniform(0.25)));
        assert!(y.iter().any(|&v| v != 0.0), "init output must not be the zero map");
        let (r0, r1) = (y.as_slice()[..2].to_vec(), y.as_slice()[2..].to_vec());
        assert_ne!(r0, r1, "distinct inputs must map to distinct outputs");
    }

    #[test]
    fn on_and_off_tape_forward_agree() {
        let mut p = ParamSet::init(ArchSpec::student_default(), 9);
        // Give the final layer real values so the comparison is non-trivial.
        let (wname, bname) = p.final_layer_names();
        for (name, m) in p.entries_mut() {
            if *name == wname || *name == bname {
                for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
                    *v = ((i as f64) * 0.37).sin() * 0.2;
                }
            }
        }
        let x = Mat::from_rows(&[vec![0.1, -0.2], vec![-1.0, 0.8], vec![0.5, 0.5]]);
        let ts = [0.8, 0.5, 1.0];
        let ss = [0.2, 0.5, 0.0];
        let off = mlp_forward(&p, &x, TimeCol::PerRow(&ts), Some(TimeCol::PerRow(&ss)));

        let mut tape = Tape::new();
        let bound = BoundMlp::bind(&mut tape, &p);
        let x_node = tape.leaf(x.clone());
        let out = mlp_on_tape(
            &mut tape,
            &bound,
            x_node,
            &TimeInput::Rows(ts.to_vec()),
            Some(&TimeInput::Rows(ss.to_vec())),
        );
        assert_eq!(tape.value(out), &off, "tape and plain forward must agree bitwise");
    }

    #[test]
    #[should_panic(expected = "embed_s")]
    fn supplying_s_to_a_teacher_net_is_rejected() {
        let p = ParamSet::init(ArchSpec::teacher_default(), 1);
        let x = Mat::zeros(1, 2);
        mlp_forward(&p, &x, TimeCol::Uniform(0.5), Some(TimeCol::Uniform(0.1)));
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let arch = ArchSpec {
            hidden_width: 1,
            hidden_layers: 1,
            time_embed: TimeEmbeddingSpec { num_frequencies: 1, base: 2.0 },
            ..ArchSpec::teacher_default()
        };
        let mut p = ParamSet::init(arch, 0);
        // Zero all parameters, then push a unit gradient through one entry.
        for (_, m) in p.entries_mut() {
            m.as_mut_slice().fill(0.0);
        }
        let mut opt = AdamState::new(&p, 0.1);
        let grads: Vec<(String, Mat)> = p
            .entries()
            .iter()
            .map(|(n, m)| {
                let mut g = Mat::zeros(m.rows(), m.cols());
                g.as_mut_slice().fill(1.0);
                (n.clone(), g)
            })
            .collect();
        assert_eq!(opt.step(&mut p, &grads), AdamOutcome::Applied);
        for (_, m) in p.entries() {
            for &v in m.iter() {
                assert!((v + 0.1).abs() < 1e-8, "first Adam step should be -lr, got {v}");
            }
        }
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let arch = ArchSpec::teacher_default();
        let mut p = ParamSet::init(arch, 2);
        let before = p.clone();
        let mut opt = AdamState::new(&p, 0.01);
        let mut grads: Vec<(String, Mat)> = p
            .entries()
            .iter()
            .map(|(n, m)| (n.clone(), Mat::zeros(m.rows(), m.cols())))
            .collect();
        grads[0].1.set(0, 0, f64::NAN);
        assert_eq!(opt.step(&mut p, &grads), AdamOutcome::SkippedNonFinite);
        assert_eq!(p, before, "skipped step must not touch parameters");
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![("g".to_string(), Mat::from_vec(1, 2, vec![3.0, 4.0]))];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].1.as_slice(), &[3.0, 4.0], "below threshold: untouched");
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        let n2 = grads[0].1.sq_norm().sqrt();
        assert!((n2 - 1.0).abs() < 1e-12, "clipped norm should be 1, got {n2}");
    }

    #[test]
    fn ema_update_is_the_exact_convex_combination() {
        let arch = ArchSpec::teacher_default();
        let mut a = ParamSet::init(arch.clone(), 3);
        for (_, m) in a.entries_mut() {
            m.as_mut_slice().fill(1.0);
        }
        let mut b = a.clone();
        for (_, m) in b.entries_mut() {
            m.as_mut_slice().fill(0.0);
        }
        let mut ema = EmaShadow::new(&a, 0.9);
        ema.update(&b);
        for (_, m) in ema.params().entries() {
            for &v in m.iter() {
                assert!((v - 0.9).abs() < 1e-15, "0.9*1 + 0.1*0 = 0.9, got {v}");
            }
        }
        // mu = 1 freezes; mu = 0 copies.
        let mut frozen = EmaShadow::new(&a, 1.0);
        frozen.update(&b);
        assert_eq!(frozen.params(), &a);
        let mut copier = EmaShadow::new(&a, 0.0);
        copier.update(&b);
        assert_eq!(copier.params(), &b);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        let mut p = ParamSet::init(ArchSpec::teacher_default(), 77);
        // Scramble values so the round trip exercises real mantissas.
        for (i, (_, m)) in p.entries_mut().iter_mut().enumerate() {
            for (j, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v = ((i * 131 + j) as f64 * 0.7310000001).sin() / 3.0;
            }
        }
        save_checkpoint(&path, &p, 123, None, Some("abc123")).unwrap();
        let loaded = load_checkpoint(&path, p.arch()).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.config_hash.as_deref(), Some("abc123"));
        assert_eq!(&loaded.params, &p, "round trip must preserve every bit");

        // Saving the loaded copy reproduces the file byte for byte.
        let path2 = dir.path().join("teacher2.json");
        save_checkpoint(&path2, &loaded.params, 123, None, Some("abc123")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let p = ParamSet::init(ArchSpec::teacher_default(), 1);
        save_checkpoint(&path, &p, 0, None, None).unwrap();
        let err = load_checkpoint(&path, &ArchSpec::student_default()).unwrap_err();
        assert!(matches!(err, CoreError::ArchMismatch { .. }), "got {err:?}");
    }

    #[test]
    fn checkpoint_rejects_future_format_version() {
        let p = ParamSet::init(ArchSpec::teacher_default(), 1);
        let mut doc = checkpoint_to_json(&p, 0, None, None);
        doc["format_version"] = json!(999);
        let err = checkpoint_from_json(&doc, p.arch()).unwrap_err();
        assert!(matches!(err, CoreError::BadCheckpoint(_)), "got {err:?}");
    }

    #[test]
    fn student_checkpoint_carries_lambda_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.json");
        let p = ParamSet::init(ArchSpec::student_default(), 4);
        let meta = StudentMeta { lambda_con: 0.37, strategy: "normalized".into() };
        save_checkpoint(&path, &p, 400, Some(&meta), None).unwrap();
        let loaded = load_checkpoint(&path, p.arch()).unwrap();
        assert_eq!(loaded.student.as_ref(), Some(&meta));
    }
}
