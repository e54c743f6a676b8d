//! Conjunction and negation of score fields.
//!
//! A composition is a signed, weighted sum of guidance directions around the
//! unconditional prediction:
//!
//! ```text
//! eps_hat = eps(x, t) + sum_k s_k w_k (eps(x, t | c_k) - eps(x, t))
//! ```
//!
//! with `s_k = +1` for conjunction terms and `-1` for negated terms. With
//! only positive terms this is the conjunction operator; one positive and one
//! negative term with a shared weight gives the negation operator
//! `eps + w (eps_i - eps_j)`. A single positive term is classifier-free
//! guidance.

use std::fmt;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorefield::{AnalyticGaussianField, ConceptLabel, ScoreField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub label: ConceptLabel,
    pub polarity: Polarity,
    pub weight: f64,
}

impl Term {
    pub fn new(label: ConceptLabel, polarity: Polarity, weight: f64) -> Result<Self> {
        if label.is_null() {
            return Err(Error::InvalidComposition("the null label cannot be a composition term".into()));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidComposition(format!("weight must be finite and >= 0, got {weight}")));
        }
        Ok(Self { label, polarity, weight })
    }

    pub fn positive(label: ConceptLabel, weight: f64) -> Result<Self> {
        Self::new(label, Polarity::Positive, weight)
    }

    pub fn negative(label: ConceptLabel, weight: f64) -> Result<Self> {
        Self::new(label, Polarity::Negative, weight)
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.label.clone(), self.polarity, self.weight).map(|_| ())
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.polarity == Polarity::Negative {
            f.write_str("~")?;
        }
        write!(f, "{}:{}", self.label, self.weight)
    }
}

/// Validated, ordered list of composition terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct CompositionSpec {
    terms: Vec<Term>,
}

impl TryFrom<Vec<Term>> for CompositionSpec {
    type Error = Error;

    fn try_from(terms: Vec<Term>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<CompositionSpec> for Vec<Term> {
    fn from(spec: CompositionSpec) -> Self {
        spec.terms
    }
}

impl CompositionSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidComposition("a composition needs at least one term".into()));
        }
        for term in &terms {
            term.validate()?;
        }
        if !terms.iter().any(|t| t.polarity == Polarity::Positive) {
            return Err(Error::InvalidComposition(
                "negation is only defined alongside at least one positive concept".into(),
            ));
        }
        Ok(Self { terms })
    }

    /// Conjunction of the given `(label, weight)` pairs.
    pub fn conjunction(terms: impl IntoIterator<Item = (ConceptLabel, f64)>) -> Result<Self> {
        Self::new(terms.into_iter().map(|(l, w)| Term::positive(l, w)).collect::<Result<_>>()?)
    }

    /// `c_i AND NOT c_j` with a shared weight.
    pub fn negation(positive: ConceptLabel, negated: ConceptLabel, weight: f64) -> Result<Self> {
        Self::new(vec![Term::positive(positive, weight)?, Term::negative(negated, weight)?])
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_conjunction(&self) -> bool {
        self.terms.iter().all(|t| t.polarity == Polarity::Positive)
    }

    /// Terms sorted by (label, polarity, weight), the order in which guidance
    /// is accumulated. The order is total, so any permutation of the terms
    /// sums identically.
    pub fn canonical(&self) -> Vec<&Term> {
        let mut v: Vec<&Term> = self.terms.iter().collect();
        v.sort_by(|a, b| {
            (&a.label, a.polarity).cmp(&(&b.label, b.polarity)).then(a.weight.total_cmp(&b.weight))
        });
        v
    }

    /// Distinct conditioning labels, in canonical order.
    pub fn distinct_labels(&self) -> Vec<ConceptLabel> {
        let mut labels: Vec<ConceptLabel> = self.terms.iter().map(|t| t.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

impl fmt::Display for CompositionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// `eps(Null) + sum_k s_k w_k (eps(c_k) - eps(Null))`, evaluating the field
/// once for `Null` and once per distinct label.
pub fn composed_epsilon(field: &dyn ScoreField, x: &[f64], t: usize, spec: &CompositionSpec) -> Result<Vec<f64>> {
    let uncond = field.epsilon(x, t, &ConceptLabel::Null)?;
    let mut acc = uncond.clone();
    let mut cache: Option<(&ConceptLabel, Vec<f64>)> = None;
    for term in spec.canonical() {
        let cond = match &cache {
            Some((label, v)) if *label == &term.label => v,
            _ => {
                let v = field.epsilon(x, t, &term.label)?;
                &cache.insert((&term.label, v)).1
            }
        };
        let coef = term.polarity.sign() * term.weight;
        for ((a, c), u) in acc.iter_mut().zip(cond).zip(&uncond) {
            *a += coef * (c - u);
        }
    }
    Ok(acc)
}

/// Batched form of [`composed_epsilon`]; same accumulation order per row.
pub fn composed_epsilon_batch(
    field: &dyn ScoreField,
    xs: ArrayView2<'_, f64>,
    t: usize,
    spec: &CompositionSpec,
) -> Result<Array2<f64>> {
    let uncond = field.epsilon_batch(xs, t, &ConceptLabel::Null)?;
    let mut acc = uncond.clone();
    let mut cache: Option<(&ConceptLabel, Array2<f64>)> = None;
    for term in spec.canonical() {
        let cond = match &cache {
            Some((label, v)) if *label == &term.label => v,
            _ => {
                let v = field.epsilon_batch(xs, t, &term.label)?;
                &cache.insert((&term.label, v)).1
            }
        };
        let coef = term.polarity.sign() * term.weight;
        Zip::from(&mut acc).and(cond).and(&uncond).for_each(|a, &c, &u| *a += coef * (c - u));
    }
    Ok(acc)
}

/// Conjunction operator: `eps + sum_i w_i (eps_i - eps)`.
pub fn conjunction_epsilon(field: &dyn ScoreField, x: &[f64], t: usize, terms: &[Term]) -> Result<Vec<f64>> {
    if terms.iter().any(|term| term.polarity == Polarity::Negative) {
        return Err(Error::InvalidComposition("conjunction takes positive terms only".into()));
    }
    composed_epsilon(field, x, t, &CompositionSpec::new(terms.to_vec())?)
}

/// Negation operator: `eps + w (eps_i - eps_j)` where `c_j` is the negated
/// concept. Always three field evaluations.
pub fn negation_epsilon(
    field: &dyn ScoreField,
    x: &[f64],
    t: usize,
    positive: &ConceptLabel,
    negated: &ConceptLabel,
    weight: f64,
) -> Result<Vec<f64>> {
    Term::positive(positive.clone(), weight)?;
    Term::negative(negated.clone(), weight)?;
    let eps_neg = field.epsilon(x, t, negated)?;
    let eps_pos = field.epsilon(x, t, positive)?;
    let eps = field.epsilon(x, t, &ConceptLabel::Null)?;
    Ok(eps
        .iter()
        .zip(eps_pos.iter().zip(&eps_neg))
        .map(|(e, (p, n))| e + weight * (p - n))
        .collect())
}

/// Diagonal Gaussian in natural parameters: precision `L` and natural mean
/// `eta = L mu`, per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGaussian {
    pub precision: Vec<f64>,
    pub natural_mean: Vec<f64>,
}

impl NaturalGaussian {
    pub fn from_moments(mean: &[f64], var: &[f64]) -> Self {
        Self {
            precision: var.iter().map(|v| 1.0 / v).collect(),
            natural_mean: mean.iter().zip(var).map(|(m, v)| m / v).collect(),
        }
    }

    /// False when some axis has nonpositive precision (improper density).
    pub fn is_proper(&self) -> bool {
        self.precision.iter().all(|&p| p > 0.0)
    }

    pub fn mean(&self) -> Vec<f64> {
        self.natural_mean.iter().zip(&self.precision).map(|(e, p)| e / p).collect()
    }

    pub fn var(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    /// `eps = sqrt(1 - ab) (L x - eta)`: the noise prediction whose score is
    /// `-(L x - eta)`, the gradient of this log-density.
    pub fn epsilon(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let noise = (1.0 - alpha_bar).sqrt();
        x.iter()
            .zip(self.precision.iter().zip(&self.natural_mean))
            .map(|(xi, (p, e))| noise * (p * xi - e))
            .collect()
    }
}

/// Result of combining analytic concepts log-linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticClosure {
    pub gaussian: NaturalGaussian,
    /// Set when the combined precision is nonpositive on some axis; the
    /// composed field is still well defined but has no normalizable density.
    pub improper: bool,
}

/// Log-linear combination `L* = L0 + sum s_k w_k (L_k - L0)` (same for the
/// natural mean) of the analytic field's marginals diffused to `alpha_bar`.
///
/// Because the score is linear in log-density, the composed score of the
/// analytic field at time `t` equals the score of this Gaussian exactly,
/// for every `t`. With `alpha_bar = 1` it is the composed data density.
pub fn analytic_closure_at(field: &AnalyticGaussianField, spec: &CompositionSpec, alpha_bar: f64) -> Result<AnalyticClosure> {
    let natural = |label: &ConceptLabel| -> Result<NaturalGaussian> {
        let (m, v) = field.spec_for(label)?.diffused(alpha_bar);
        Ok(NaturalGaussian::from_moments(&m, &v))
    };
    let base = natural(&ConceptLabel::Null)?;
    let mut out = base.clone();
    for term in spec.canonical() {
        let g = natural(&term.label)?;
        let coef = term.polarity.sign() * term.weight;
        for k in 0..out.precision.len() {
            out.precision[k] += coef * (g.precision[k] - base.precision[k]);
            out.natural_mean[k] += coef * (g.natural_mean[k] - base.natural_mean[k]);
        }
    }
    let improper = !out.is_proper();
    Ok(AnalyticClosure { gaussian: out, improper })
}

pub fn analytic_closure(field: &AnalyticGaussianField, spec: &CompositionSpec, t: usize) -> Result<AnalyticClosure> {
    let ab = field.schedule().alpha_bar(t)?;
    analytic_closure_at(field, spec, ab)
}

/// Name-to-label lookup used when parsing compositions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptTable {
    names: Vec<(String, ConceptLabel)>,
    coord_dim: Option<usize>,
}

impl ConceptTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Table accepting `@x,y,...` coordinates of the given dimension.
    pub fn with_coords(dim: usize) -> Self {
        Self { names: Vec::new(), coord_dim: Some(dim) }
    }

    pub fn insert(&mut self, name: impl Into<String>, label: ConceptLabel) {
        self.names.push((name.into(), label));
    }

    /// Discrete ids named `c<id>`.
    pub fn discrete(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut t = Self::new();
        for id in ids {
            t.insert(format!("c{id}"), ConceptLabel::Discrete(id));
        }
        t
    }

    pub fn resolve(&self, name: &str) -> Option<&ConceptLabel> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn name_of(&self, label: &ConceptLabel) -> Option<&str> {
        self.names.iter().find(|(_, l)| l == label).map(|(n, _)| n.as_str())
    }

    pub fn coord_dim(&self) -> Option<usize> {
        self.coord_dim
    }
}

/// Parse `term ("," term)*` where `term := ["~"] label [":" weight]`.
/// Labels are table names or `@x,y` coordinates.
pub fn parse_compose_spec(text: &str, table: &ConceptTable) -> Result<CompositionSpec> {
    Parser { src: text, pos: 0, table }.spec()
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    table: &'a ConceptTable,
}

impl Parser<'_> {
    fn err<T>(&self, position: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { position, message: message.into() })
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn spec(mut self) -> Result<CompositionSpec> {
        self.skip_ws();
        if self.pos == self.src.len() {
            return self.err(0, "empty composition");
        }
        let mut terms = Vec::new();
        loop {
            terms.push(self.term()?);
            self.skip_ws();
            if self.pos == self.src.len() {
                break;
            }
            if !self.eat(',') {
                return self.err(self.pos, "expected `,` between terms");
            }
        }
        CompositionSpec::new(terms)
    }

    fn term(&mut self) -> Result<Term> {
        let polarity = if self.eat('~') { Polarity::Negative } else { Polarity::Positive };
        self.skip_ws();
        let start = self.pos;
        let label = if self.eat('@') { self.coord(start)? } else { self.name()? };
        let weight = if self.eat(':') {
            self.skip_ws();
            let at = self.pos;
            let w = self.number().ok_or(()).or_else(|_| self.err(at, "expected a weight"))?;
            if w < 0.0 {
                return self.err(at, format!("negative weight {w}"));
            }
            w
        } else {
            1.0
        };
        Term::new(label, polarity, weight).map_err(|e| Error::Parse { position: start, message: e.to_string() })
    }

    fn name(&mut self) -> Result<ConceptLabel> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' || c == '-' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        let name = &self.src[start..self.pos];
        if name.is_empty() {
            return self.err(start, "expected a concept label");
        }
        match self.table.resolve(name) {
            Some(l) => Ok(l.clone()),
            None => Err(Error::UnknownLabel(name.to_string())),
        }
    }

    /// `@x,y,...`: components keep being consumed while the text after a
    /// comma is numeric, since names cannot start with a digit or sign.
    fn coord(&mut self, start: usize) -> Result<ConceptLabel> {
        let Some(dim) = self.table.coord_dim() else {
            return self.err(start, "coordinate labels are not available for this dataset");
        };
        let mut v = Vec::new();
        loop {
            self.skip_ws();
            let at = self.pos;
            match self.number() {
                Some(x) => v.push(x),
                None => return self.err(at, "expected a coordinate component"),
            }
            let save = self.pos;
            if v.len() < dim && self.eat(',') {
                continue;
            }
            self.pos = save;
            break;
        }
        if v.len() != dim {
            return self.err(start, format!("coordinate needs {dim} components, got {}", v.len()));
        }
        if v.iter().any(|x| x.abs() > 1.0) {
            return self.err(start, "coordinate components must lie in [-1, 1]");
        }
        Ok(ConceptLabel::Coord(v))
    }

    fn number(&mut self) -> Option<f64> {
        let rest = &self.src[self.pos..];
        let len = rest
            .char_indices()
            .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || ((c == '-' || c == '+') && (i == 0 || rest[..i].ends_with(['e', 'E'])))))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let v: f64 = rest[..len].parse().ok()?;
        self.pos += len;
        Some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{NoiseSchedule, ScheduleKind};
    use crate::scorefield::GaussianSpec;
    use std::cell::Cell;

    fn table() -> ConceptTable {
        ConceptTable::discrete([1, 2, 3])
    }

    fn d(id: u32) -> ConceptLabel {
        ConceptLabel::Discrete(id)
    }

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
            "counting".into()
        }
        fn epsilon(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
            self.calls.set(self.calls.get() + 1);
            self.inner.epsilon(x, t, label)
        }
    }

    fn field() -> AnalyticGaussianField {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        AnalyticGaussianField::new(GaussianSpec::isotropic(vec![0.0, 0.0], 4.0).unwrap(), sched)
            .unwrap()
            .with_concept(d(1), GaussianSpec::isotropic(vec![-1.0, 0.0], 1.0).unwrap())
            .unwrap()
            .with_concept(d(2), GaussianSpec::isotropic(vec![1.0, 0.0], 1.0).unwrap())
            .unwrap()
            .with_concept(d(3), GaussianSpec::new(vec![0.0, 1.0], vec![0.5, 2.0]).unwrap())
            .unwrap()
    }

    #[test]
    fn parse_defaults_and_grammar() {
        let s = parse_compose_spec("c1", &table()).unwrap();
        assert_eq!(s.terms(), &[Term::positive(d(1), 1.0).unwrap()]);
        let s = parse_compose_spec("c2:2.0,~c1:2.0", &table()).unwrap();
        assert_eq!(s.terms(), &[Term::positive(d(2), 2.0).unwrap(), Term::negative(d(1), 2.0).unwrap()]);
        let s = parse_compose_spec(" c1 : 0.5 , c3 ", &table()).unwrap();
        assert_eq!(s.terms().len(), 2);
        assert_eq!(s.to_string(), "c1:0.5,c3:1");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_compose_spec("~c1", &table()), Err(Error::InvalidComposition(_))));
        assert!(matches!(parse_compose_spec("c9", &table()), Err(Error::UnknownLabel(_))));
        assert!(matches!(parse_compose_spec("c1:-1", &table()), Err(Error::Parse { position: 3, .. })));
        assert!(matches!(parse_compose_spec("c1,,c2", &table()), Err(Error::Parse { position: 3, .. })));
        assert!(matches!(parse_compose_spec("c1 c2", &table()), Err(Error::Parse { position: 3, .. })));
        assert!(matches!(parse_compose_spec("", &table()), Err(Error::Parse { .. })));
        assert!(matches!(parse_compose_spec("@0.1,0.2", &table()), Err(Error::Parse { .. })));
    }

    #[test]
    fn parse_coordinates() {
        let t = ConceptTable::with_coords(2);
        let s = parse_compose_spec("@0.5,-0.25:2,~@-0.5,0.5", &t).unwrap();
        assert_eq!(s.terms()[0], Term::positive(ConceptLabel::Coord(vec![0.5, -0.25]), 2.0).unwrap());
        assert_eq!(s.terms()[1], Term::negative(ConceptLabel::Coord(vec![-0.5, 0.5]), 1.0).unwrap());
        // display round-trips through the parser
        assert_eq!(parse_compose_spec(&s.to_string(), &t).unwrap(), s);
        assert!(parse_compose_spec("@0.5", &t).is_err());
        assert!(parse_compose_spec("@1.5,0", &t).is_err());
    }

    #[test]
    fn single_unit_term_is_conditional() {
        let f = field();
        let x = [0.3, -0.7];
        let spec = CompositionSpec::conjunction([(d(3), 1.0)]).unwrap();
        for t in [1, 50, 100] {
            let c = composed_epsilon(&f, &x, t, &spec).unwrap();
            let e = f.epsilon(&x, t, &d(3)).unwrap();
            for (a, b) in c.iter().zip(&e) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_uncond() {
        let f = field();
        let x = [0.3, -0.7];
        let spec = CompositionSpec::conjunction([(d(1), 0.0), (d(2), 0.0)]).unwrap();
        let c = composed_epsilon(&f, &x, 40, &spec).unwrap();
        assert_eq!(c, f.epsilon(&x, 40, &ConceptLabel::Null).unwrap());
        let n = negation_epsilon(&f, &x, 40, &d(1), &d(2), 0.0).unwrap();
        assert_eq!(n, f.epsilon(&x, 40, &ConceptLabel::Null).unwrap());
    }

    #[test]
    fn negating_same_concept_cancels() {
        let f = field();
        let x = [1.3, 0.2];
        for w in [0.5, 1.0, 7.0] {
            let n = negation_epsilon(&f, &x, 10, &d(2), &d(2), w).unwrap();
            assert_eq!(n, f.epsilon(&x, 10, &ConceptLabel::Null).unwrap());
        }
    }

    #[test]
    fn conjunction_rejects_negative_terms() {
        let f = field();
        let terms = [Term::positive(d(1), 1.0).unwrap(), Term::negative(d(2), 1.0).unwrap()];
        assert!(conjunction_epsilon(&f, &[0.0, 0.0], 3, &terms).is_err());
        assert!(negation_epsilon(&f, &[0.0, 0.0], 3, &ConceptLabel::Null, &d(1), 1.0).is_err());
    }

    #[test]
    fn evaluation_count_is_distinct_labels_plus_one() {
        let f = field();
        let counting = Counting { inner: &f, calls: Cell::new(0) };
        let spec = CompositionSpec::new(vec![
            Term::positive(d(2), 1.0).unwrap(),
            Term::positive(d(1), 0.5).unwrap(),
            Term::negative(d(2), 0.25).unwrap(),
        ])
        .unwrap();
        composed_epsilon(&counting, &[0.1, 0.1], 5, &spec).unwrap();
        assert_eq!(counting.calls.get(), spec.distinct_labels().len() + 1);

        counting.calls.set(0);
        negation_epsilon(&counting, &[0.1, 0.1], 5, &d(1), &d(2), 1.0).unwrap();
        assert_eq!(counting.calls.get(), 3);
    }

    #[test]
    fn conjunction_closure_time_zero_precision() {
        // N(0,4I) with N((-1,0),I) and N((1,0),I) at unit weights: precision
        // 1/4 + 2 (1 - 1/4) = 1.75, mean 0
        let f = field();
        let spec = CompositionSpec::conjunction([(d(1), 1.0), (d(2), 1.0)]).unwrap();
        let c = analytic_closure_at(&f, &spec, 1.0).unwrap();
        assert!(!c.improper);
        for k in 0..2 {
            assert!((c.gaussian.precision[k] - 1.75).abs() < 1e-15);
            assert!(c.gaussian.natural_mean[k].abs() < 1e-15);
        }
    }

    #[test]
    fn conjunction_matches_time_t_closure() {
        let f = field();
        let spec = CompositionSpec::conjunction([(d(1), 1.0), (d(2), 1.0)]).unwrap();
        for t in [1, 13, 50, 99, 100] {
            let ab = f.schedule().alpha_bar(t).unwrap();
            let c = analytic_closure(&f, &spec, t).unwrap();
            // per axis precision 2 - 1/(1 + 3 ab) by hand
            let p = 2.0 - 1.0 / (1.0 + 3.0 * ab);
            assert!((c.gaussian.precision[0] - p).abs() < 1e-12);
            for x in [[0.3, -0.7], [2.0, 1.0], [-1.5, 0.0]] {
                let a = composed_epsilon(&f, &x, t, &spec).unwrap();
                let b = c.gaussian.epsilon(&x, ab);
                for k in 0..2 {
                    assert!((a[k] - b[k]).abs() < 1e-12, "t={t} {a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn negation_unit_variance_is_shifted_gaussian() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let f = AnalyticGaussianField::new(GaussianSpec::isotropic(vec![0.0, 0.0], 1.0).unwrap(), sched.clone())
            .unwrap()
            .with_concept(d(1), GaussianSpec::isotropic(vec![0.5, 0.0], 1.0).unwrap())
            .unwrap()
            .with_concept(d(2), GaussianSpec::isotropic(vec![-0.5, 0.0], 1.0).unwrap())
            .unwrap();
        let target = GaussianSpec::isotropic(vec![1.0, 0.0], 1.0).unwrap();
        for t in [1, 250, 500, 750, 1000] {
            for x in [[0.0, 0.0], [1.2, -0.4], [-2.0, 2.0]] {
                let n = negation_epsilon(&f, &x, t, &d(1), &d(2), 1.0).unwrap();
                let e = crate::scorefield::epsilon_of_gaussian(&target, &sched, &x, t).unwrap();
                for k in 0..2 {
                    assert!((n[k] - e[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn improper_closure_is_flagged() {
        let f = field();
        let spec = CompositionSpec::negation(d(2), d(1), 3.0).unwrap();
        // uncond var 4; difference of two unit-variance concepts cancels
        // their precision, leaving 1/4 > 0
        assert!(!analytic_closure_at(&f, &spec, 1.0).unwrap().improper);
        let spec = CompositionSpec::new(vec![
            Term::positive(d(1), 1.0).unwrap(),
            Term::negative(d(3), 5.0).unwrap(),
        ])
        .unwrap();
        let c = analytic_closure_at(&f, &spec, 1.0).unwrap();
        assert!(c.improper);
        // the composed field itself is still finite
        assert!(composed_epsilon(&f, &[0.1, 0.1], 1, &spec).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spec_invariants() {
        assert!(CompositionSpec::new(vec![]).is_err());
        assert!(Term::positive(ConceptLabel::Null, 1.0).is_err());
        assert!(Term::positive(d(1), -0.1).is_err());
        assert!(Term::positive(d(1), f64::NAN).is_err());
        let json = serde_json::to_string(&CompositionSpec::negation(d(1), d(2), 2.0).unwrap()).unwrap();
        let back: CompositionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, CompositionSpec::negation(d(1), d(2), 2.0).unwrap());
        let only_neg = r#"[{"label":{"discrete":1},"polarity":"negative","weight":1.0}]"#;
        assert!(serde_json::from_str::<CompositionSpec>(only_neg).is_err());
    }
}
