//! Ancestral DDPM and Langevin sampling from (composed) score fields.
//!
//! Each output row owns its own random stream, so a row's sample depends
//! only on `(seed, row)` and never on the batch it was generated in.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, ArrayViewMut1, Zip};
use serde::{Deserialize, Serialize};

use crate::compose::{composed_epsilon_batch, CompositionSpec};
use crate::error::{Error, Result};
use crate::model::ScheduleRef;
use crate::rng;
use crate::schedule::{NoiseSchedule, SigmaVariant};
use crate::scorefield::ScoreField;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerRule {
    /// DDPM posterior-mean update with the `1/sqrt(alpha_t)` scaling.
    #[default]
    Standard,
    /// Literal `x - eps_hat + sigma z`.
    Schematic,
}

impl fmt::Display for SamplerRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerRule::Standard => "standard",
            SamplerRule::Schematic => "schematic",
        })
    }
}

impl FromStr for SamplerRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SamplerRule::Standard),
            "schematic" => Ok(SamplerRule::Schematic),
            other => Err(Error::invalid(format!("unknown sampler rule `{other}`"))),
        }
    }
}

/// Noise scale used at step `t`; the final step is noiseless.
pub fn step_sigma(sched: &NoiseSchedule, t: usize, variant: SigmaVariant) -> Result<f64> {
    if t == 1 {
        sched.beta(1)?;
        return Ok(0.0);
    }
    sched.posterior_sigma(t, variant)
}

/// Per-step update coefficients: `x' = a * (x - b * eps_hat) + sigma * z`.
#[derive(Debug, Clone, Copy)]
struct StepCoeffs {
    a: f64,
    b: f64,
    sigma: f64,
}

fn coeffs(sched: &NoiseSchedule, t: usize, rule: SamplerRule, variant: SigmaVariant) -> Result<StepCoeffs> {
    let sigma = step_sigma(sched, t, variant)?;
    Ok(match rule {
        SamplerRule::Standard => {
            let beta = sched.beta(t)?;
            let ab = sched.alpha_bar(t)?;
            StepCoeffs { a: 1.0 / sched.alpha(t)?.sqrt(), b: beta / (1.0 - ab).sqrt(), sigma }
        }
        SamplerRule::Schematic => StepCoeffs { a: 1.0, b: 1.0, sigma },
    })
}

fn apply(mut x: ArrayViewMut1<'_, f64>, eps: impl IntoIterator<Item = f64>, c: StepCoeffs, r: &mut rng::StreamRng) {
    for (xi, e) in x.iter_mut().zip(eps) {
        let z = if c.sigma > 0.0 { rng::normal(r) } else { 0.0 };
        *xi = c.a * (*xi - c.b * e) + c.sigma * z;
    }
}

/// One reverse step `x_t -> x_{t-1}`.
pub fn ddpm_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    rule: SamplerRule,
    variant: SigmaVariant,
    r: &mut rng::StreamRng,
) -> Result<Vec<f64>> {
    if x_t.len() != eps_hat.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: eps_hat.len() });
    }
    let c = coeffs(sched, t, rule, variant)?;
    let mut x = ndarray::Array1::from(x_t.to_vec());
    apply(x.view_mut(), eps_hat.iter().copied(), c, r);
    Ok(x.to_vec())
}

/// Standard-rule step through the predicted clean sample, with `x0_hat`
/// clipped to `[-1, 1]`: `x' = c0 * clip(x0_hat) + ct * x + sigma z`.
/// Without clipping this equals the standard update exactly in real
/// arithmetic.
fn apply_clipped(
    mut x: ArrayViewMut1<'_, f64>,
    eps: impl IntoIterator<Item = f64>,
    sched: &NoiseSchedule,
    t: usize,
    sigma: f64,
    r: &mut rng::StreamRng,
) -> Result<()> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let beta = sched.beta(t)?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = sched.alpha(t)?.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    for (xi, e) in x.iter_mut().zip(eps) {
        let x0 = ((*xi - sb * e) / sa).clamp(-1.0, 1.0);
        let z = if sigma > 0.0 { rng::normal(r) } else { 0.0 };
        *xi = c0 * x0 + ct * *xi + sigma * z;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "lowercase")]
pub enum SamplerParams {
    Ddpm {
        rule: SamplerRule,
        sigma_variant: SigmaVariant,
        #[serde(default)]
        clip_denoised: bool,
    },
    Langevin { t_eval: usize, steps: usize, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub seed: u64,
    pub spec: String,
    pub schedule: ScheduleRef,
    #[serde(flatten)]
    pub sampler: SamplerParams,
    pub field: String,
    pub n: usize,
}

/// Stored intermediates; `t[0] = T` and the last entry is `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<usize>,
    pub states: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub samples: Array2<f64>,
    pub provenance: SampleProvenance,
    pub trajectory: Option<Trajectory>,
}

impl SampleBatch {
    /// CSV with columns `x1..xd`.
    pub fn to_csv(&self) -> String {
        samples_to_csv(self.samples.view())
    }
}

pub fn samples_to_csv(samples: ArrayView2<'_, f64>) -> String {
    let d = samples.ncols();
    let header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in samples.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::invalid("empty sample file"))?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("sample row {}: {e}", i + 1)))?;
        if row.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: row.len() });
        }
        data.extend(row);
        n += 1;
    }
    Array2::from_shape_vec((n, d), data).map_err(|e| Error::invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpmOptions {
    pub n: usize,
    pub seed: u64,
    pub rule: SamplerRule,
    pub sigma_variant: SigmaVariant,
    /// Store every `stride`-th intermediate (plus `x_0`) when set.
    pub trajectory_stride: Option<usize>,
    /// Clip the predicted clean sample to `[-1, 1]` at every step (standard
    /// rule only); meant for bounded data such as blob rasters.
    pub clip_denoised: bool,
}

impl DdpmOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, rule: SamplerRule::Standard, sigma_variant: SigmaVariant::BetaTilde, trajectory_stride: None, clip_denoised: false }
    }
}

fn row_streams(seed: u64, domain: u64, n: usize) -> Vec<rng::StreamRng> {
    (0..n).map(|i| rng::stream(seed, domain + i as u64)).collect()
}

fn initial_noise(streams: &mut [rng::StreamRng], d: usize) -> Array2<f64> {
    let mut x = Array2::zeros((streams.len(), d));
    for (mut row, r) in x.rows_mut().into_iter().zip(streams.iter_mut()) {
        row.iter_mut().for_each(|v| *v = rng::normal(r));
    }
    x
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Ancestral sampling of the composed field from `x_T ~ N(0, I)`.
pub fn ddpm_sample(field: &dyn ScoreField, spec: &CompositionSpec, opts: &DdpmOptions) -> Result<SampleBatch> {
    if opts.n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if opts.clip_denoised && opts.rule != SamplerRule::Standard {
        return Err(Error::invalid("clipping is only defined for the standard rule"));
    }
    if opts.trajectory_stride == Some(0) {
        return Err(Error::invalid("trajectory stride must be at least 1"));
    }
    let sched = field.schedule();
    let big_t = sched.steps();
    let mut streams = row_streams(opts.seed, rng::domain::SAMPLE_ROW, opts.n);
    let mut x = initial_noise(&mut streams, field.dim());
    let mut trajectory = opts.trajectory_stride.map(|_| Trajectory { t: vec![big_t], states: vec![x.clone()] });

    for t in (1..=big_t).rev() {
        let eps = composed_epsilon_batch(field, x.view(), t, spec)?;
        let c = coeffs(sched, t, opts.rule, opts.sigma_variant)?;
        for ((row, e), r) in x.rows_mut().into_iter().zip(eps.rows()).zip(streams.iter_mut()) {
            if opts.clip_denoised {
                apply_clipped(row, e.iter().copied(), sched, t, c.sigma, r)?;
            } else {
                apply(row, e.iter().copied(), c, r);
            }
        }
        if let (Some(tr), Some(stride)) = (trajectory.as_mut(), opts.trajectory_stride) {
            let s = t - 1;
            if s == 0 || (big_t - s) % stride == 0 {
                tr.t.push(s);
                tr.states.push(x.clone());
            }
        }
    }
    check_finite(&x, "sample")?;
    let provenance = SampleProvenance {
        seed: opts.seed,
        spec: spec.to_string(),
        schedule: ScheduleRef::of(sched),
        sampler: SamplerParams::Ddpm {
            rule: opts.rule,
            sigma_variant: opts.sigma_variant,
            clip_denoised: opts.clip_denoised,
        },
        field: field.id(),
        n: opts.n,
    };
    Ok(SampleBatch { samples: x, provenance, trajectory })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinOptions {
    pub n: usize,
    pub seed: u64,
    pub t_eval: usize,
    pub steps: usize,
    pub lambda: f64,
}

/// Unadjusted Langevin dynamics on the composed score at a fixed noise level:
/// `x <- x - (lambda/2) eps_hat / sqrt(1 - alpha_bar) + sqrt(lambda) z`.
pub fn langevin_sample(field: &dyn ScoreField, spec: &CompositionSpec, opts: &LangevinOptions) -> Result<SampleBatch> {
    if !(opts.lambda.is_finite() && opts.lambda > 0.0) {
        return Err(Error::invalid("langevin step size must be positive"));
    }
    if opts.steps == 0 || opts.n == 0 {
        return Err(Error::invalid("langevin needs at least one step and one sample"));
    }
    let sched = field.schedule();
    let ab = sched.alpha_bar(opts.t_eval)?;
    let scale = 0.5 * opts.lambda / (1.0 - ab).sqrt();
    let noise = opts.lambda.sqrt();
    let mut streams = row_streams(opts.seed, rng::domain::LANGEVIN_ROW, opts.n);
    let mut x = initial_noise(&mut streams, field.dim());
    for _ in 0..opts.steps {
        let eps = composed_epsilon_batch(field, x.view(), opts.t_eval, spec)?;
        Zip::from(&mut x).and(&eps).for_each(|xi, &e| *xi -= scale * e);
        for (mut row, r) in x.rows_mut().into_iter().zip(streams.iter_mut()) {
            row.iter_mut().for_each(|v| *v += noise * rng::normal(r));
        }
    }
    check_finite(&x, "langevin sample")?;
    let provenance = SampleProvenance {
        seed: opts.seed,
        spec: spec.to_string(),
        schedule: ScheduleRef::of(sched),
        sampler: SamplerParams::Langevin { t_eval: opts.t_eval, steps: opts.steps, lambda: opts.lambda },
        field: field.id(),
        n: opts.n,
    };
    Ok(SampleBatch { samples: x, provenance, trajectory: None })
}

/// Per-column mean and unbiased variance.
pub fn column_moments(x: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
    let var = x
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use crate::scorefield::{AnalyticGaussianField, ConceptLabel, GaussianSpec};

    fn cosine() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap()
    }

    #[test]
    fn noiseless_step_algebra() {
        let s = cosine();
        let x = [0.3, -1.2];
        let out = ddpm_step(&x, 1, &[0.0, 0.0], &s, SamplerRule::Standard, SigmaVariant::BetaTilde, &mut rng::stream(0, 0))
            .unwrap();
        let a1 = s.alpha(1).unwrap().sqrt();
        assert!((out[0] - 0.3 / a1).abs() < 1e-15 && (out[1] + 1.2 / a1).abs() < 1e-15);
        let out = ddpm_step(&x, 1, &[0.0, 0.0], &s, SamplerRule::Schematic, SigmaVariant::Beta, &mut rng::stream(0, 0))
            .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn step_is_deterministic_and_checks_range() {
        let s = cosine();
        let run = || {
            ddpm_step(&[0.1, 0.2], 500, &[0.5, -0.5], &s, SamplerRule::Standard, SigmaVariant::BetaTilde, &mut rng::stream(3, 1))
                .unwrap()
        };
        assert_eq!(run(), run());
        let mut r = rng::stream(0, 0);
        for t in [0, 1001] {
            assert!(ddpm_step(&[0.0], t, &[0.0], &s, SamplerRule::Standard, SigmaVariant::Beta, &mut r).is_err());
        }
    }

    fn unit_field(s: NoiseSchedule) -> AnalyticGaussianField {
        AnalyticGaussianField::new(GaussianSpec::isotropic(vec![0.0, 0.0], 1.0).unwrap(), s).unwrap()
    }

    #[test]
    fn rows_do_not_depend_on_batch_size() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let f = unit_field(s).with_concept(ConceptLabel::Discrete(0), GaussianSpec::isotropic(vec![1.0, 0.0], 0.2).unwrap()).unwrap();
        let spec = CompositionSpec::conjunction([(ConceptLabel::Discrete(0), 1.0)]).unwrap();
        let small = ddpm_sample(&f, &spec, &DdpmOptions::new(3, 9)).unwrap();
        let large = ddpm_sample(&f, &spec, &DdpmOptions::new(10, 9)).unwrap();
        assert_eq!(small.samples, large.samples.slice(ndarray::s![..3, ..]));
        let one = ddpm_sample(&f, &spec, &DdpmOptions::new(1, 9)).unwrap();
        assert_eq!(one.samples, ddpm_sample(&f, &spec, &DdpmOptions::new(1, 9)).unwrap().samples);
    }

    #[test]
    fn trajectory_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 40).unwrap();
        let f = unit_field(s);
        let spec = CompositionSpec::conjunction([(ConceptLabel::Null, 1.0)]);
        // `Null` is not a valid term, so use a concept equal to the prior
        assert!(spec.is_err());
        let f = f.with_concept(ConceptLabel::Discrete(0), GaussianSpec::isotropic(vec![0.0, 0.0], 1.0).unwrap()).unwrap();
        let spec = CompositionSpec::conjunction([(ConceptLabel::Discrete(0), 1.0)]).unwrap();
        let opts = DdpmOptions { trajectory_stride: Some(7), ..DdpmOptions::new(4, 1) };
        let b = ddpm_sample(&f, &spec, &opts).unwrap();
        let tr = b.trajectory.unwrap();
        assert_eq!(tr.t.first(), Some(&40));
        assert_eq!(tr.t.last(), Some(&0));
        assert_eq!(tr.states.last().unwrap(), &b.samples);
        let mut r = rng::stream(1, rng::domain::SAMPLE_ROW);
        assert_eq!(tr.states[0][[0, 0]], rng::normal(&mut r));
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        struct Zero(NoiseSchedule);
        impl ScoreField for Zero {
            fn dim(&self) -> usize {
                1
            }
            fn schedule(&self) -> &NoiseSchedule {
                &self.0
            }
            fn id(&self) -> String {
                "zero".into()
            }
            fn epsilon(&self, _: &[f64], _: usize, _: &ConceptLabel) -> Result<Vec<f64>> {
                Ok(vec![0.0])
            }
        }
        let f = Zero(cosine());
        let spec = CompositionSpec::conjunction([(ConceptLabel::Discrete(0), 1.0)]).unwrap();
        let opts = LangevinOptions { n: 20_000, seed: 2, t_eval: 1, steps: 50, lambda: 0.01 };
        let b = langevin_sample(&f, &spec, &opts).unwrap();
        let (_, var) = column_moments(b.samples.view());
        // start N(0,1) plus 50 * 0.01; sd of the estimate ~ 1.5 * sqrt(2 / n)
        assert!((var[0] - 1.5).abs() < 0.05, "{}", var[0]);
    }

    #[test]
    fn langevin_rejects_bad_step() {
        let f = unit_field(cosine());
        let spec = CompositionSpec::conjunction([(ConceptLabel::Discrete(0), 1.0)]).unwrap();
        let opts = LangevinOptions { n: 1, seed: 0, t_eval: 1, steps: 1, lambda: 0.0 };
        assert!(langevin_sample(&f, &spec, &opts).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let x = ndarray::array![[0.1, 2.0], [-3.5, 1e-9]];
        let text = samples_to_csv(x.view());
        assert!(text.starts_with("x1,x2\n"));
        assert_eq!(samples_from_csv(&text).unwrap(), x);
    }

    #[test]
    fn clipped_update_matches_standard_inside_range() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap();
        let spec = GaussianSpec::isotropic(vec![0.2, -0.1], 0.01).unwrap();
        let f = AnalyticGaussianField::new(spec.clone(), s.clone()).unwrap().with_concept(ConceptLabel::Discrete(0), spec).unwrap();
        for t in [2, 30, 60] {
            let x = ndarray::array![0.1, -0.05];
            let eps = f.epsilon(x.as_slice().unwrap(), t, &ConceptLabel::Null).unwrap();
            let c = coeffs(&s, t, SamplerRule::Standard, SigmaVariant::BetaTilde).unwrap();
            let mut a = x.clone();
            apply(a.view_mut(), eps.iter().copied(), c, &mut rng::stream(1, 1));
            let mut b = x.clone();
            apply_clipped(b.view_mut(), eps.iter().copied(), &s, t, c.sigma, &mut rng::stream(1, 1)).unwrap();
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
        }
        let opts = DdpmOptions { clip_denoised: true, ..DdpmOptions::new(50, 3) };
        let spec = CompositionSpec::conjunction([(ConceptLabel::Discrete(0), 1.0)]).unwrap();
        let out = ddpm_sample(&f, &spec, &opts).unwrap();
        assert!(out.samples.iter().all(|v| v.abs() <= 1.0));
        let bad = DdpmOptions { rule: SamplerRule::Schematic, ..opts };
        assert!(ddpm_sample(&f, &spec, &bad).is_err());
    }

    #[test]
    fn rule_parses() {
        assert_eq!("schematic".parse::<SamplerRule>().unwrap(), SamplerRule::Schematic);
        assert!("fast".parse::<SamplerRule>().is_err());
        assert_eq!(SamplerRule::default().to_string(), "standard");
    }
}
