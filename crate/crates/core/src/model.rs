//! Fully connected denoiser `eps_theta(x_t, t, c)` with manual backprop.
//!
//! The input layer consumes `[x_t | time features | label embedding]`; hidden
//! layers use `x * sigmoid(x)`; the output layer is linear. Discrete labels
//! index an embedding table whose last row is the null class. Coordinate
//! labels go through an affine encoder, with a separate learned vector for
//! the null label.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::scorefield::{check_t, ConceptLabel, ScoreField};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_embed")]
    pub time_embed_dim: usize,
    #[serde(default = "default_embed")]
    pub label_embed_dim: usize,
    #[serde(default)]
    pub num_discrete_concepts: usize,
    #[serde(default)]
    pub coord_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_embed() -> usize {
    64
}

impl DenoiserConfig {
    /// Default widths, conditioned on `num_discrete` attribute ids.
    pub fn discrete(data_dim: usize, num_discrete: usize) -> Self {
        Self {
            data_dim,
            hidden_widths: default_hidden(),
            time_embed_dim: default_embed(),
            label_embed_dim: default_embed(),
            num_discrete_concepts: num_discrete,
            coord_dim: 0,
        }
    }

    /// Default widths, conditioned on `coord_dim`-dimensional coordinates.
    pub fn coords(data_dim: usize, coord_dim: usize) -> Self {
        Self { num_discrete_concepts: 0, coord_dim, ..Self::discrete(data_dim, 0) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.label_embed_dim == 0 || self.hidden_widths.is_empty() {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and positive".into()));
        }
        if (self.num_discrete_concepts > 0) == (self.coord_dim > 0) {
            return Err(Error::Config(
                "exactly one of num_discrete_concepts / coord_dim must be nonzero".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.label_embed_dim
    }

    /// Total scalar parameter count implied by the config.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut fan_in = self.input_dim();
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.data_dim)) {
            n += fan_in * w + w;
            fan_in = w;
        }
        if self.num_discrete_concepts > 0 {
            n += (self.num_discrete_concepts + 1) * self.label_embed_dim;
        } else {
            n += self.coord_dim * self.label_embed_dim + 2 * self.label_embed_dim;
        }
        n
    }
}

/// Sinusoidal time features `(sin(t w_k), cos(t w_k))` with `w_k` spaced
/// geometrically from 1 down to 1e-4.
pub fn embed_time(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("time embedding dimension must be even, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    fill_time_embedding(t, &mut out);
    Ok(out)
}

fn fill_time_embedding(t: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    for k in 0..half {
        let omega = if half == 1 { 1.0 } else { 1e-4f64.powf(k as f64 / (half - 1) as f64) };
        let (s, c) = (t as f64 * omega).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelEncoder {
    /// `(n + 1) x embed`; the last row is the null class.
    Table(Array2<f64>),
    Affine {
        /// `coord_dim x embed`
        weight: Array2<f64>,
        bias: Array1<f64>,
        null: Array1<f64>,
    },
}

/// Every trainable tensor. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
    pub label: LabelEncoder,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let mut p = other.clone();
        for s in p.slices_mut() {
            s.fill(0.0);
        }
        p
    }

    /// `(name, shape)` of every tensor, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight.shape().to_vec()));
            out.push((format!("layers.{i}.bias"), l.bias.shape().to_vec()));
        }
        match &self.label {
            LabelEncoder::Table(t) => out.push(("label.table".into(), t.shape().to_vec())),
            LabelEncoder::Affine { weight, bias, null } => {
                out.push(("label.coord_weight".into(), weight.shape().to_vec()));
                out.push(("label.coord_bias".into(), bias.shape().to_vec()));
                out.push(("label.null".into(), null.shape().to_vec()));
            }
        }
        out
    }

    /// Row-major views of every tensor, in [`Params::layout`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        match &self.label {
            LabelEncoder::Table(t) => out.push(t.as_slice().expect("standard layout")),
            LabelEncoder::Affine { weight, bias, null } => {
                out.push(weight.as_slice().expect("standard layout"));
                out.push(bias.as_slice().expect("standard layout"));
                out.push(null.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        match &mut self.label {
            LabelEncoder::Table(t) => out.push(t.as_slice_mut().expect("standard layout")),
            LabelEncoder::Affine { weight, bias, null } => {
                out.push(weight.as_slice_mut().expect("standard layout"));
                out.push(bias.as_slice_mut().expect("standard layout"));
                out.push(null.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.slices()
            .iter()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: Params,
}

/// Per-row inputs for a batched forward/backward pass.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub t: &'a [usize],
    pub labels: &'a [ConceptLabel],
}

/// Activations kept for backprop.
struct Trace {
    /// inputs to each layer; `inputs[0]` is the concatenated network input
    inputs: Vec<Array2<f64>>,
    /// pre-activations of the hidden layers
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl DenoiserNet {
    /// Seeded initialization: uniform +-sqrt(6 / (fan_in + fan_out)) for
    /// dense and coordinate-encoder weights, zero biases, N(0, 0.02^2) for
    /// embedding rows and the null vector.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::domain::INIT);
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn((fan_in, fan_out), || (2.0 * rng::uniform(&mut r) - 1.0) * a)
        };
        let mut layers = Vec::new();
        let mut fan_in = config.input_dim();
        for &w in config.hidden_widths.iter().chain(std::iter::once(&config.data_dim)) {
            layers.push(Dense { weight: glorot(fan_in, w), bias: Array1::zeros(w) });
            fan_in = w;
        }
        let e = config.label_embed_dim;
        let label = if config.num_discrete_concepts > 0 {
            LabelEncoder::Table(Array2::zeros((config.num_discrete_concepts + 1, e)))
        } else {
            LabelEncoder::Affine {
                weight: glorot(config.coord_dim, e),
                bias: Array1::zeros(e),
                null: Array1::zeros(e),
            }
        };
        let mut params = Params { layers, label };
        let mut r = rng::stream(seed, rng::domain::INIT + 1);
        match &mut params.label {
            LabelEncoder::Table(t) => t.mapv_inplace(|_| 0.02 * rng::normal(&mut r)),
            LabelEncoder::Affine { null, .. } => null.mapv_inplace(|_| 0.02 * rng::normal(&mut r)),
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.layout() != params.layout() {
            return Err(Error::invalid("parameter shapes do not match the config"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn check_label(&self, label: &ConceptLabel) -> Result<()> {
        match (label, &self.params.label) {
            (ConceptLabel::Null, _) => Ok(()),
            (ConceptLabel::Discrete(id), LabelEncoder::Table(t)) => {
                if (*id as usize) < t.nrows() - 1 {
                    Ok(())
                } else {
                    Err(Error::UnknownLabel(label.to_string()))
                }
            }
            (ConceptLabel::Coord(v), LabelEncoder::Affine { weight, .. }) => {
                if v.len() != weight.nrows() {
                    Err(Error::DimensionMismatch { expected: weight.nrows(), got: v.len() })
                } else if v.iter().any(|c| !c.is_finite()) {
                    Err(Error::NonFinite("coordinate label".into()))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::UnknownLabel(format!("{label} (wrong label kind for this network)"))),
        }
    }

    /// Label embedding vector.
    pub fn embed_label(&self, label: &ConceptLabel) -> Result<Array1<f64>> {
        self.check_label(label)?;
        Ok(match (&self.params.label, label) {
            (LabelEncoder::Table(t), ConceptLabel::Discrete(id)) => t.row(*id as usize).to_owned(),
            (LabelEncoder::Table(t), _) => t.row(t.nrows() - 1).to_owned(),
            (LabelEncoder::Affine { weight, bias, .. }, ConceptLabel::Coord(v)) => {
                Array1::from(v.clone()).dot(weight) + bias
            }
            (LabelEncoder::Affine { null, .. }, _) => null.clone(),
        })
    }

    fn assemble_input(&self, batch: &Batch<'_>) -> Result<Array2<f64>> {
        let n = batch.x.nrows();
        if batch.t.len() != n || batch.labels.len() != n {
            return Err(Error::invalid("batch inputs have inconsistent row counts"));
        }
        let d = self.config.data_dim;
        if batch.x.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: batch.x.ncols() });
        }
        if batch.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let te = self.config.time_embed_dim;
        let mut input = Array2::zeros((n, self.config.input_dim()));
        input.slice_mut(s![.., ..d]).assign(&batch.x);
        for (i, (t, label)) in batch.t.iter().zip(batch.labels).enumerate() {
            let mut row = input.row_mut(i);
            fill_time_embedding(*t, row.slice_mut(s![d..d + te]).as_slice_mut().expect("contiguous row"));
            row.slice_mut(s![d + te..]).assign(&self.embed_label(label)?);
        }
        Ok(input)
    }

    fn run(&self, input: Array2<f64>, keep: bool) -> Trace {
        let last = self.params.layers.len() - 1;
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut a = input;
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if keep {
                inputs.push(a);
            }
            if i == last {
                return Trace { inputs, pre, output: z };
            }
            let act = z.mapv(silu);
            if keep {
                pre.push(z);
            }
            a = act;
        }
        unreachable!("network has at least one layer")
    }

    /// Batched forward pass with per-row timesteps and labels.
    pub fn forward(&self, batch: &Batch<'_>) -> Result<Array2<f64>> {
        let input = self.assemble_input(batch)?;
        Ok(self.run(input, false).output)
    }

    /// Single-input forward pass.
    pub fn forward_one(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
        let out = self.forward(&Batch { x: xs, t: &[t], labels: std::slice::from_ref(label) })?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Forward pass for a batch sharing `t` and `label`: the conditioning
    /// part of the first layer is computed once and broadcast.
    pub fn forward_shared(&self, x: ArrayView2<'_, f64>, t: usize, label: &ConceptLabel) -> Result<Array2<f64>> {
        let d = self.config.data_dim;
        if x.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.ncols() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut cond = Array1::zeros(self.config.time_embed_dim + self.config.label_embed_dim);
        let te = self.config.time_embed_dim;
        fill_time_embedding(t, cond.slice_mut(s![..te]).as_slice_mut().expect("contiguous"));
        cond.slice_mut(s![te..]).assign(&self.embed_label(label)?);

        let first = &self.params.layers[0];
        let cond_bias = cond.dot(&first.weight.slice(s![d.., ..])) + &first.bias;
        let mut z = x.dot(&first.weight.slice(s![..d, ..]));
        z += &cond_bias;
        let last = self.params.layers.len() - 1;
        if last == 0 {
            return Ok(z);
        }
        let mut a = z.mapv(silu);
        for (i, layer) in self.params.layers.iter().enumerate().skip(1) {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if i == last {
                return Ok(z);
            }
            a = z.mapv(silu);
        }
        unreachable!()
    }

    /// Mean over rows of `||net(x) - target||^2` and its gradient with
    /// respect to every parameter.
    pub fn backward(&self, batch: &Batch<'_>, target: ArrayView2<'_, f64>) -> Result<(f64, Params)> {
        let n = batch.x.nrows();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if target.dim() != (n, self.config.data_dim) {
            return Err(Error::DimensionMismatch { expected: self.config.data_dim, got: target.ncols() });
        }
        let input = self.assemble_input(batch)?;
        let trace = self.run(input, true);
        let diff = &trace.output - &target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;

        let mut grads = Params::zeros_like(&self.params);
        let mut delta = diff * (2.0 / n as f64);
        for i in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[i];
            let a_in = &trace.inputs[i];
            grads.layers[i].weight = a_in.t().dot(&delta);
            grads.layers[i].bias = delta.sum_axis(Axis(0));
            let mut d_in = delta.dot(&layer.weight.t());
            if i > 0 {
                d_in.zip_mut_with(&trace.pre[i - 1], |g, &z| *g *= silu_grad(z));
            }
            delta = d_in;
        }

        // `delta` is now d loss / d input; route the label columns back
        let offset = self.config.data_dim + self.config.time_embed_dim;
        let d_embed = delta.slice(s![.., offset..]);
        match &mut grads.label {
            LabelEncoder::Table(table) => {
                let null_row = table.nrows() - 1;
                for (row, label) in d_embed.rows().into_iter().zip(batch.labels) {
                    let idx = match label {
                        ConceptLabel::Discrete(id) => *id as usize,
                        _ => null_row,
                    };
                    let mut dst = table.row_mut(idx);
                    dst += &row;
                }
            }
            LabelEncoder::Affine { weight, bias, null } => {
                for (row, label) in d_embed.rows().into_iter().zip(batch.labels) {
                    match label {
                        ConceptLabel::Coord(v) => {
                            for (k, c) in v.iter().enumerate() {
                                weight.row_mut(k).scaled_add(*c, &row);
                            }
                            *bias += &row;
                        }
                        _ => *null += &row,
                    }
                }
            }
        }
        Ok((loss, grads))
    }
}

/// A trained network bound to its schedule, usable as a score field.
#[derive(Debug, Clone)]
pub struct DenoiserField {
    net: DenoiserNet,
    sched: NoiseSchedule,
}

impl DenoiserField {
    pub fn new(net: DenoiserNet, sched: NoiseSchedule) -> Self {
        Self { net, sched }
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }
}

impl ScoreField for DenoiserField {
    fn dim(&self) -> usize {
        self.net.config.data_dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn id(&self) -> String {
        let c = &self.net.config;
        format!("denoiser[d={} hidden={:?} params={}]", c.data_dim, c.hidden_widths, c.param_count())
    }

    fn epsilon(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
        check_t(&self.sched, t)?;
        self.net.forward_one(x, t, label)
    }

    fn epsilon_batch(&self, xs: ArrayView2<'_, f64>, t: usize, label: &ConceptLabel) -> Result<Array2<f64>> {
        check_t(&self.sched, t)?;
        self.net.forward_shared(xs, t, label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRef {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
}

impl ScheduleRef {
    pub fn of(sched: &NoiseSchedule) -> Self {
        Self { kind: sched.kind(), steps: sched.steps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub loss: f64,
    pub seed: u64,
}

/// On-disk checkpoint: versioned JSON with explicit shapes and row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule: ScheduleRef,
    pub params: Vec<TensorRecord>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(net: &DenoiserNet, schedule: ScheduleRef, meta: TrainingMeta) -> Self {
        let params = net
            .params
            .layout()
            .into_iter()
            .zip(net.params.slices())
            .map(|((name, shape), data)| TensorRecord { name, shape, data: data.to_vec() })
            .collect();
        Self { version: CHECKPOINT_VERSION, config: net.config.clone(), schedule, params, meta }
    }

    /// Rebuild the network, validating version, names and shapes.
    pub fn to_net(&self) -> Result<DenoiserNet> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: self.version, expected: CHECKPOINT_VERSION });
        }
        let mut net = DenoiserNet::init(self.config.clone(), 0)
            .map_err(|e| Error::CorruptCheckpoint(format!("invalid config: {e}")))?;
        let layout = net.params.layout();
        if layout.len() != self.params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, shape), rec) in layout.iter().zip(&self.params) {
            if *name != rec.name || *shape != rec.shape {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {} has shape {:?}, expected {name} with shape {shape:?}",
                    rec.name, rec.shape
                )));
            }
            if rec.data.len() != shape.iter().product::<usize>() {
                return Err(Error::CorruptCheckpoint(format!("tensor {name} has wrong element count")));
            }
        }
        for (dst, rec) in net.params.slices_mut().into_iter().zip(&self.params) {
            dst.copy_from_slice(&rec.data);
        }
        if !net.params.all_finite() {
            return Err(Error::CorruptCheckpoint("non-finite parameter".into()));
        }
        Ok(net)
    }
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(ckpt)?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path, &checkpoint_bytes(ckpt)?)
}

/// Load a checkpoint; when `expected` is given the stored schedule must match.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ScheduleRef>) -> Result<(DenoiserNet, Checkpoint)> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| {
        // version is checked before the body so a newer format reports as such
        match serde_json::from_slice::<serde_json::Value>(&bytes) {
            Ok(v) => match v.get("version").and_then(|v| v.as_u64()) {
                Some(found) if found as u32 != CHECKPOINT_VERSION => {
                    Error::CheckpointVersion { found: found as u32, expected: CHECKPOINT_VERSION }
                }
                _ => Error::CorruptCheckpoint(e.to_string()),
            },
            Err(_) => Error::CorruptCheckpoint(e.to_string()),
        }
    })?;
    if let Some(exp) = expected {
        if *exp != ckpt.schedule {
            return Err(Error::ScheduleMismatch {
                found: format!("{}:{}", ckpt.schedule.kind, ckpt.schedule.steps),
                expected: format!("{}:{}", exp.kind, exp.steps),
            });
        }
    }
    Ok((ckpt.to_net()?, ckpt))
}
