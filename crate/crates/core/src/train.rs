//! Denoising-objective training with null-label dropout and AdamW.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Example};
use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, DenoiserConfig, DenoiserNet, Params, ScheduleRef, TrainingMeta};
use crate::rng;
use crate::scorefield::ConceptLabel;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub label_dropout_prob: f64,
    pub seed: u64,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_dropout() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            label_dropout_prob: default_dropout(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_dropout_prob) {
            return Err(Error::Config("label_dropout_prob must lie in [0, 1]".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("adam_eps must be positive and weight_decay nonnegative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Params,
    /// Rows whose label was replaced by `Null` (including rows already null).
    pub null_rows: usize,
}

/// Noised inputs for one batch: per-row `t`, `eps` and dropped-out labels.
pub struct NoisedBatch {
    pub xt: Array2<f64>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
    pub labels: Vec<ConceptLabel>,
}

pub fn noise_batch(
    x0: ArrayView2<'_, f64>,
    labels: &[ConceptLabel],
    sched: &NoiseSchedule,
    dropout: f64,
    r: &mut rng::StreamRng,
) -> Result<NoisedBatch> {
    let (n, d) = x0.dim();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
    }
    let mut xt = Array2::zeros((n, d));
    let mut eps = Array2::zeros((n, d));
    let mut ts = Vec::with_capacity(n);
    let mut out_labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng::int_inclusive(r, 1, sched.steps());
        let (a, b) = sched.marginal_coeffs(t)?;
        for k in 0..d {
            let e = rng::normal(r);
            eps[[i, k]] = e;
            xt[[i, k]] = a * x0[[i, k]] + b * e;
        }
        // always draw, so the stream layout does not depend on the labels
        let drop = rng::uniform(r) < dropout;
        ts.push(t);
        out_labels.push(if drop { ConceptLabel::Null } else { labels[i].clone() });
    }
    Ok(NoisedBatch { xt, t: ts, eps, labels: out_labels })
}

/// Simple denoising loss `mean ||net(x_t, t, label) - eps||^2` with its
/// parameter gradient.
pub fn denoising_loss(
    net: &DenoiserNet,
    x0: ArrayView2<'_, f64>,
    labels: &[ConceptLabel],
    sched: &NoiseSchedule,
    dropout: f64,
    r: &mut rng::StreamRng,
) -> Result<LossOutput> {
    let nb = noise_batch(x0, labels, sched, dropout, r)?;
    let batch = Batch { x: nb.xt.view(), t: &nb.t, labels: &nb.labels };
    let (loss, grads) = net.backward(&batch, nb.eps.view())?;
    let null_rows = nb.labels.iter().filter(|l| l.is_null()).count();
    Ok(LossOutput { loss, grads, null_rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self { m: Params::zeros_like(params), v: Params::zeros_like(params), step: 0 }
    }
}

/// AdamW with bias correction and decoupled weight decay.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let layout = params.layout();
    if grads.layout() != layout || state.m.layout() != layout || state.v.layout() != layout {
        return Err(Error::invalid("optimizer state does not match parameter shapes"));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let tensors = params.slices_mut().into_iter().zip(grads.slices()).zip(state.m.slices_mut()).zip(state.v.slices_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            p[i] -= cfg.lr * (update + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DenoiserNet,
    pub checkpoint: Checkpoint,
    /// `(step, loss)` for steps `1..=steps`.
    pub curve: Vec<(usize, f64)>,
    pub null_fraction: f64,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.curve {
            out.push_str(&format!("{s},{l}\n"));
        }
        out
    }

    /// Mean loss over the first 1% and the final 10% of steps.
    pub fn smoothed_ends(&self) -> Option<(f64, f64)> {
        let n = self.curve.len();
        if n == 0 {
            return None;
        }
        let mean = |s: &[(usize, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        let head = (n / 100).max(1);
        let tail = (n / 10).max(1);
        Some((mean(&self.curve[..head]), mean(&self.curve[n - tail..])))
    }

    /// Training-signal sanity: the tail average must be below the head average.
    pub fn improved(&self) -> bool {
        self.smoothed_ends().is_some_and(|(a, b)| b < a)
    }
}

const FINITE_CHECK_EVERY: usize = 100;

pub fn train_loop(
    config: &TrainConfig,
    net_config: DenoiserConfig,
    data: &[Example],
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    train_loop_with(config, net_config, data, sched, |_, _| {})
}

/// Training loop with a per-step `(step, loss)` callback.
pub fn train_loop_with(
    config: &TrainConfig,
    net_config: DenoiserConfig,
    data: &[Example],
    sched: &NoiseSchedule,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let d = net_config.data_dim;
    if let Some(bad) = data.iter().find(|e| e.x0.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.x0.len() });
    }
    let mut net = DenoiserNet::init(net_config, config.seed)?;
    for e in data {
        net.check_label(&e.label)?;
    }
    let mut state = AdamState::new(net.params());
    let adam = config.adam();
    let batch_size = config.batch_size.min(data.len());
    let mut batches = BatchStream::new(data.len(), batch_size, config.seed)?;
    let mut curve = Vec::with_capacity(config.steps);
    let (mut nulls, mut rows) = (0usize, 0usize);

    for step in 1..=config.steps {
        let idx = batches.next().expect("batch stream is endless");
        let mut x0 = Array2::zeros((idx.len(), d));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x0.row_mut(row).assign(&ndarray::aview1(&data[i].x0));
            labels.push(data[i].label.clone());
        }
        let mut r = rng::stream(config.seed, rng::domain::TRAIN_STEP + step as u64);
        let out = denoising_loss(&net, x0.view(), &labels, sched, config.label_dropout_prob, &mut r)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        adam_step(net.params_mut(), &out.grads, &mut state, &adam)?;
        if step % FINITE_CHECK_EVERY == 0 && !net.params().all_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        nulls += out.null_rows;
        rows += idx.len();
        curve.push((step, out.loss));
        progress(step, out.loss);
    }
    if !net.params().all_finite() {
        return Err(Error::Diverged { step: config.steps, loss: curve.last().map_or(f64::NAN, |p| p.1) });
    }

    let meta = TrainingMeta { steps: config.steps, loss: curve.last().map_or(f64::NAN, |p| p.1), seed: config.seed };
    let checkpoint = Checkpoint::new(&net, ScheduleRef::of(sched), meta);
    let null_fraction = if rows == 0 { 0.0 } else { nulls as f64 / rows as f64 };
    Ok(TrainOutcome { net, checkpoint, curve, null_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_points2d, PointConcept};
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap()
    }

    fn zero_net(d: usize) -> DenoiserNet {
        let cfg = DenoiserConfig { hidden_widths: vec![8], ..DenoiserConfig::discrete(d, 2) };
        let mut net = DenoiserNet::init(cfg, 0).unwrap();
        let last = net.params_mut().layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        net
    }

    #[test]
    fn zero_output_loss_is_dimension() {
        let d = 3;
        let n = 20_000;
        let x0 = Array2::from_elem((n, d), 0.3);
        let labels = vec![ConceptLabel::Discrete(1); n];
        let out = denoising_loss(&zero_net(d), x0.view(), &labels, &sched(), 0.1, &mut rng::stream(1, 0)).unwrap();
        // E||eps||^2 = 3, sd of the mean = sqrt(2 * 3 / n)
        assert!((out.loss - 3.0).abs() < 0.06, "{}", out.loss);
    }

    #[test]
    fn dropout_fraction_in_binomial_band() {
        let n = 10_000;
        let x0 = Array2::zeros((n, 2));
        let labels = vec![ConceptLabel::Discrete(0); n];
        let out = denoising_loss(&zero_net(2), x0.view(), &labels, &sched(), 0.1, &mut rng::stream(4, 0)).unwrap();
        let frac = out.null_rows as f64 / n as f64;
        assert!((0.09..=0.11).contains(&frac), "{frac}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let x0 = Array2::<f64>::zeros((0, 2));
        assert!(denoising_loss(&zero_net(2), x0.view(), &[], &sched(), 0.1, &mut rng::stream(0, 0)).is_err());
    }

    fn adam_cfg() -> AdamConfig {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let net = zero_net(2);
        let mut p = net.params().clone();
        let g = Params::zeros_like(&p);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, &adam_cfg()).unwrap();
        }
        assert_eq!(&p, net.params());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let net = zero_net(2);
        for scale in [1e-3, 1.0, 250.0] {
            let mut p = net.params().clone();
            let mut g = Params::zeros_like(&p);
            for s in g.slices_mut() {
                s.fill(scale);
            }
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &g, &mut st, &adam_cfg()).unwrap();
            // m_hat / sqrt(v_hat) = g / |g| = 1, so the step is lr * g / (|g| + eps)
            let expected = 1e-3 * scale / (scale + 1e-8);
            for (a, b) in p.slices().iter().zip(net.params().slices()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!(((y - x) - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let net = zero_net(2);
        let mut p = net.params().clone();
        let g = Params::zeros_like(&p);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { weight_decay: 0.5, ..adam_cfg() };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let w0 = net.params().layers[0].weight[[0, 0]];
        assert!((p.layers[0].weight[[0, 0]] - w0 * (1.0 - 1e-3 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let a = zero_net(2);
        let b = zero_net(3);
        let mut p = a.params().clone();
        let mut st = AdamState::new(b.params());
        assert!(adam_step(&mut p, &Params::zeros_like(a.params()), &mut st, &adam_cfg()).is_err());
    }

    fn toy_data() -> (Vec<Example>, DenoiserConfig) {
        let c = [
            PointConcept { id: 0, name: None, mean: vec![1.0, 0.0], var: vec![0.1, 0.1] },
            PointConcept { id: 1, name: None, mean: vec![-1.0, 0.0], var: vec![0.1, 0.1] },
        ];
        let cfg = DenoiserConfig {
            hidden_widths: vec![32, 32],
            time_embed_dim: 16,
            label_embed_dim: 8,
            ..DenoiserConfig::discrete(2, 2)
        };
        (gen_points2d(&c, 500, 3).unwrap(), cfg)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (data, cfg) = toy_data();
        let out = train_loop(&TrainConfig::new(0, 9), cfg.clone(), &data, &sched()).unwrap();
        assert_eq!(out.net, DenoiserNet::init(cfg, 9).unwrap());
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (data, cfg) = toy_data();
        let tc = TrainConfig { batch_size: 64, ..TrainConfig::new(600, 2) };
        let a = train_loop(&tc, cfg.clone(), &data, &sched()).unwrap();
        let b = train_loop(&tc, cfg, &data, &sched()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.net, b.net);
        assert!(a.improved(), "{:?}", a.smoothed_ends());
        assert!(a.curve_csv().starts_with("step,loss\n1,"));
    }

    #[test]
    fn unknown_label_in_data_is_rejected() {
        let (mut data, cfg) = toy_data();
        data[0].label = ConceptLabel::Discrete(7);
        assert!(train_loop(&TrainConfig::new(1, 0), cfg, &data, &sched()).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges_with_diagnostic() {
        let (data, cfg) = toy_data();
        let tc = TrainConfig { learning_rate: 1e300, ..TrainConfig::new(300, 1) };
        match train_loop(&tc, cfg, &data, &sched()) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.curve.last().copied())),
        }
    }
}
