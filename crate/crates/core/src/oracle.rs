//! The fast oracle suite: analytic-vs-grid agreement, composition
//! reduction identities, analytic closure and the evaluation-count contract.
//! Backs the `oracle-check` command and parts of the acceptance suite.

use std::cell::Cell;
use std::fmt::Write as _;

use crate::compose::{analytic_closure, composed_epsilon, negation_epsilon, CompositionSpec, Polarity, Term};
use crate::error::{Error, Result};
use crate::eval::{field_rmse, probe_grid};
use crate::rng::{self, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::scorefield::{AnalyticGaussianField, ConceptLabel, GridOracleField, ScoreField};

pub const ORACLE_RMS_TOL: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const CLOSURE_TOL: f64 = 1e-9;
pub const PROBE_LO: f64 = -1.5;
pub const PROBE_HI: f64 = 1.5;
pub const PROBE_SIDE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or count, for counting checks).
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn max_err(name: impl Into<String>, measured: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: measured <= threshold, measured, threshold, detail }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:<6}  {:>12}  {:>10}  detail\n", "check", "result", "measured", "limit");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<width$}  {:<6}  {:>12.3e}  {:>10.1e}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.measured,
                c.threshold,
                c.detail
            );
        }
        s
    }
}

/// `{1, T/4, T/2, 3T/4, T}`, deduplicated and clamped to valid steps.
pub fn spot_check_times(sched: &NoiseSchedule) -> Vec<usize> {
    let big_t = sched.steps();
    let mut ts: Vec<usize> = [1, big_t / 4, big_t / 2, 3 * big_t / 4, big_t].iter().map(|&t| t.max(1)).collect();
    ts.dedup();
    ts
}

/// Analytic epsilon against the grid oracle, for the unconditional spec and
/// every concept, over the 5x5 probe grid at the spot-check times.
pub fn oracle_agreement(field: &AnalyticGaussianField) -> Result<CheckResult> {
    if field.dim() > 2 {
        return Err(Error::invalid("the grid oracle supports at most 2 dimensions"));
    }
    let oracle = GridOracleField::from_analytic(field)?;
    let probes: Vec<Vec<f64>> = if field.dim() == 2 {
        probe_grid(PROBE_LO, PROBE_HI, PROBE_SIDE)
    } else {
        probe_grid(PROBE_LO, PROBE_HI, PROBE_SIDE).into_iter().take(PROBE_SIDE).map(|p| vec![p[0]]).collect()
    };
    let mut labels = vec![ConceptLabel::Null];
    labels.extend(field.concepts().iter().map(|(l, _)| l.clone()));
    let mut worst = 0.0f64;
    let mut at = String::new();
    for label in &labels {
        for t in spot_check_times(field.schedule()) {
            let rms = field_rmse(field, &oracle, &probes, t, label)?;
            if rms >= worst {
                worst = rms;
                at = format!("worst at label {label}, t={t}");
            }
        }
    }
    Ok(CheckResult::max_err("analytic vs grid oracle (rms)", worst, ORACLE_RMS_TOL, at))
}

fn random_x(r: &mut StreamRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| 2.0 * rng::normal(r)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Wraps a field and counts `epsilon` calls.
struct Counting<'a> {
    inner: &'a dyn ScoreField,
    calls: Cell<usize>,
}

impl ScoreField for Counting<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
    fn id(&self) -> String {
        self.inner.id()
    }
    fn epsilon(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.epsilon(x, t, label)
    }
}

/// Reduction identities of `composed_epsilon` over `inputs` random
/// `(x, t, labels, weights)` draws: single term at w=1, all weights zero,
/// negation form, permutation invariance (bitwise), linearity in one weight,
/// and the evaluation-count contract.
pub fn reduction_identities(
    field: &dyn ScoreField,
    labels: &[ConceptLabel],
    inputs: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<CheckResult>> {
    if labels.is_empty() {
        return Err(Error::invalid("reduction identities need at least one concept"));
    }
    let mut r = rng::stream(seed, rng::domain::ORACLE);
    let big_t = field.schedule().steps();
    let (mut single, mut zero, mut negation, mut linear) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut perm_mismatch = 0usize;
    let mut count_mismatch = 0usize;
    let counting = Counting { inner: field, calls: Cell::new(0) };

    for _ in 0..inputs {
        let x = random_x(&mut r, field.dim());
        let t = rng::int_inclusive(&mut r, 1, big_t);
        let a = labels[rng::int_inclusive(&mut r, 0, labels.len() - 1)].clone();
        let mut b = labels[rng::int_inclusive(&mut r, 0, labels.len() - 1)].clone();
        if b == a && labels.len() > 1 {
            b = labels[(labels.iter().position(|l| *l == a).unwrap() + 1) % labels.len()].clone();
        }
        let w = 3.0 * rng::uniform(&mut r);

        let cond = field.epsilon(&x, t, &a)?;
        let uncond = field.epsilon(&x, t, &ConceptLabel::Null)?;

        let one = CompositionSpec::new(vec![Term::positive(a.clone(), 1.0)?])?;
        single = single.max(max_abs_diff(&composed_epsilon(field, &x, t, &one)?, &cond));

        let zeros = CompositionSpec::new(vec![Term::positive(a.clone(), 0.0)?, Term::positive(b.clone(), 0.0)?])?;
        zero = zero.max(max_abs_diff(&composed_epsilon(field, &x, t, &zeros)?, &uncond));

        let neg = CompositionSpec::negation(a.clone(), b.clone(), w)?;
        let signed = composed_epsilon(field, &x, t, &neg)?;
        negation = negation.max(max_abs_diff(&signed, &negation_epsilon(field, &x, t, &a, &b, w)?));

        // three terms in two orders must agree bit for bit
        let c = labels[rng::int_inclusive(&mut r, 0, labels.len() - 1)].clone();
        let terms = vec![
            Term::positive(a.clone(), w)?,
            Term::negative(b.clone(), 0.5 * w)?,
            Term::new(c.clone(), Polarity::Positive, 1.0 + w)?,
        ];
        let mut shuffled = terms.clone();
        rng::shuffle(&mut r, &mut shuffled);
        shuffled.reverse();
        let e1 = composed_epsilon(field, &x, t, &CompositionSpec::new(terms.clone())?)?;
        let e2 = composed_epsilon(field, &x, t, &CompositionSpec::new(shuffled)?)?;
        if e1.iter().zip(&e2).any(|(p, q)| p.to_bits() != q.to_bits()) {
            perm_mismatch += 1;
        }

        // doubling w on the single term doubles its contribution
        let twice = CompositionSpec::new(vec![Term::positive(a.clone(), 2.0 * w)?])?;
        let once = CompositionSpec::new(vec![Term::positive(a.clone(), w)?])?;
        let (e_once, e_twice) = (composed_epsilon(field, &x, t, &once)?, composed_epsilon(field, &x, t, &twice)?);
        for k in 0..x.len() {
            let scale = 1.0 + (cond[k] - uncond[k]).abs() * 2.0 * w;
            linear = linear.max(((e_twice[k] - uncond[k]) - 2.0 * (e_once[k] - uncond[k])).abs() / scale);
        }

        let spec = CompositionSpec::new(terms)?;
        counting.calls.set(0);
        composed_epsilon(&counting, &x, t, &spec)?;
        if counting.calls.get() != spec.distinct_labels().len() + 1 {
            count_mismatch += 1;
        }
    }

    let n = format!("{inputs} random inputs");
    Ok(vec![
        CheckResult::max_err(format!("{tag}: single term w=1 = conditional"), single, IDENTITY_TOL, n.clone()),
        CheckResult::max_err(format!("{tag}: zero weights = unconditional"), zero, IDENTITY_TOL, n.clone()),
        CheckResult::max_err(format!("{tag}: negation = signed sum"), negation, IDENTITY_TOL, n.clone()),
        CheckResult::max_err(format!("{tag}: permutation invariance (bitwise)"), perm_mismatch as f64, 0.0, n.clone()),
        CheckResult::max_err(format!("{tag}: linear in each weight"), linear, IDENTITY_TOL, n.clone()),
        CheckResult::max_err(format!("{tag}: evaluations = distinct labels + 1"), count_mismatch as f64, 0.0, n),
    ])
}

/// Composed analytic epsilon against the natural-parameter-combined Gaussian
/// for `specs` random specs with proper combined precision at every probed
/// time. Improper draws are skipped and counted in the detail.
pub fn analytic_closure_check(field: &AnalyticGaussianField, specs: usize, seed: u64) -> Result<CheckResult> {
    let labels: Vec<ConceptLabel> = field.concepts().iter().map(|(l, _)| l.clone()).collect();
    if labels.is_empty() {
        return Err(Error::invalid("analytic closure needs at least one concept"));
    }
    let mut r = rng::stream(seed, rng::domain::ORACLE + 1);
    let times = spot_check_times(field.schedule());
    let (mut accepted, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    while accepted < specs {
        if skipped > 100 * specs {
            return Err(Error::invalid("too few random specs have positive combined precision"));
        }
        let k = rng::int_inclusive(&mut r, 1, 4);
        let mut terms = Vec::with_capacity(k);
        for i in 0..k {
            let label = labels[rng::int_inclusive(&mut r, 0, labels.len() - 1)].clone();
            let polarity = if i > 0 && rng::uniform(&mut r) < 0.4 { Polarity::Negative } else { Polarity::Positive };
            terms.push(Term::new(label, polarity, 2.0 * rng::uniform(&mut r))?);
        }
        let spec = CompositionSpec::new(terms)?;
        let closures = times.iter().map(|&t| analytic_closure(field, &spec, t)).collect::<Result<Vec<_>>>()?;
        if closures.iter().any(|c| c.improper) {
            skipped += 1;
            continue;
        }
        accepted += 1;
        for (&t, closure) in times.iter().zip(&closures) {
            let ab = field.schedule().alpha_bar(t)?;
            for _ in 0..4 {
                let x = random_x(&mut r, field.dim());
                let got = composed_epsilon(field, &x, t, &spec)?;
                let want = closure.gaussian.epsilon(&x, ab);
                let scale = 1.0 + want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                worst = worst.max(max_abs_diff(&got, &want) / scale);
            }
        }
    }
    Ok(CheckResult::max_err(
        "analytic closure of composition",
        worst,
        CLOSURE_TOL,
        format!("{accepted} specs, {skipped} improper draws skipped"),
    ))
}

/// Analytic epsilon inverts to x exactly, and Null equals the
/// unconditional spec.
pub fn analytic_field_laws(field: &AnalyticGaussianField, inputs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, rng::domain::ORACLE + 2);
    let big_t = field.schedule().steps();
    let (mut inversion, mut null) = (0.0f64, 0.0f64);
    let mut labels = vec![ConceptLabel::Null];
    labels.extend(field.concepts().iter().map(|(l, _)| l.clone()));
    for _ in 0..inputs {
        let x = random_x(&mut r, field.dim());
        let t = rng::int_inclusive(&mut r, 1, big_t);
        let ab = field.schedule().alpha_bar(t)?;
        for label in &labels {
            let spec = field.spec_for(label)?;
            let e = field.epsilon(&x, t, label)?;
            for k in 0..x.len() {
                let back = e[k] * (ab * spec.var[k] + 1.0 - ab) / (1.0 - ab).sqrt() + ab.sqrt() * spec.mean[k];
                inversion = inversion.max((back - x[k]).abs() / (1.0 + x[k].abs()));
            }
        }
        let uncond = crate::scorefield::epsilon_of_gaussian(field.uncond(), field.schedule(), &x, t)?;
        null = null.max(max_abs_diff(&field.epsilon(&x, t, &ConceptLabel::Null)?, &uncond));
    }
    let n = format!("{inputs} random inputs");
    Ok(vec![
        CheckResult::max_err("analytic epsilon inverts to x", inversion, IDENTITY_TOL, n.clone()),
        CheckResult::max_err("null label = unconditional spec", null, 0.0, n),
    ])
}

/// Every check, on an analytic field and on a second field of any kind
/// (typically a network) sharing its concept labels.
pub fn run_oracle_checks(
    analytic: &AnalyticGaussianField,
    other: Option<(&dyn ScoreField, &str)>,
    seed: u64,
) -> Result<OracleReport> {
    let labels: Vec<ConceptLabel> = analytic.concepts().iter().map(|(l, _)| l.clone()).collect();
    let mut checks = vec![oracle_agreement(analytic)?];
    checks.extend(analytic_field_laws(analytic, 200, seed)?);
    checks.extend(reduction_identities(analytic, &labels, 1000, seed, "analytic")?);
    if let Some((field, tag)) = other {
        checks.extend(reduction_identities(field, &labels, 1000, seed + 1, tag)?);
    }
    checks.push(analytic_closure_check(analytic, 500, seed)?);
    Ok(OracleReport { checks })
}
