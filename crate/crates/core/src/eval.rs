//! Sample-quality metrics: concept-satisfaction accuracy, energy distance and
//! field fidelity.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::compose::{CompositionSpec, Polarity};
use crate::data::{BlobConfig, DatasetConfig, DatasetKind, Example};
use crate::error::{Error, Result};
use crate::rng;
use crate::scorefield::{ConceptLabel, GaussianSpec, ScoreField};

/// Analytic blob detector: some cell within `radius` cells of the concept
/// coordinate has intensity (in `[0, 1]`) of at least `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobDetector {
    pub grid: BlobConfig,
    pub radius: f64,
    pub tau: f64,
}

/// Binary logistic regression on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub held_out_accuracy: f64,
}

impl LogisticModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.logit(x) >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConceptVerifier {
    /// Equal-prior posterior responsibility over the listed concepts.
    Points(Vec<(ConceptLabel, GaussianSpec)>),
    Blobs(BlobDetector),
    /// One classifier per concept.
    Learned(Vec<(ConceptLabel, LogisticModel)>),
}

pub const DEFAULT_BLOB_RADIUS: f64 = 1.5;
pub const DEFAULT_BLOB_TAU: f64 = 0.5;

impl ConceptVerifier {
    pub fn kind(&self) -> &'static str {
        match self {
            ConceptVerifier::Learned(_) => "learned",
            _ => "analytic",
        }
    }

    /// Analytic verifier matching a dataset configuration.
    pub fn analytic(config: &DatasetConfig, radius: f64, tau: f64) -> Result<Self> {
        match &config.kind {
            DatasetKind::Points2d { concepts } => Ok(ConceptVerifier::Points(
                concepts
                    .iter()
                    .map(|c| Ok((ConceptLabel::Discrete(c.id), c.spec()?)))
                    .collect::<Result<_>>()?,
            )),
            DatasetKind::Blobs(grid) => {
                if !(radius.is_finite() && radius >= 0.0 && tau.is_finite()) {
                    return Err(Error::Config("verifier radius and tau must be finite, radius >= 0".into()));
                }
                Ok(ConceptVerifier::Blobs(BlobDetector { grid: grid.clone(), radius, tau }))
            }
        }
    }

    pub fn satisfied(&self, x: &[f64], concept: &ConceptLabel) -> Result<bool> {
        match self {
            ConceptVerifier::Points(concepts) => {
                let ConceptLabel::Discrete(_) = concept else {
                    return Err(Error::invalid(format!("point verifier cannot check `{concept}`")));
                };
                let logs: Vec<f64> = concepts
                    .iter()
                    .map(|(_, s)| if s.dim() == x.len() { Ok(s.log_density(x)) } else { Err(Error::DimensionMismatch { expected: s.dim(), got: x.len() }) })
                    .collect::<Result<_>>()?;
                let i = concepts
                    .iter()
                    .position(|(l, _)| l == concept)
                    .ok_or_else(|| Error::UnknownLabel(concept.to_string()))?;
                let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
                Ok((logs[i] - max).exp() / total > 0.5)
            }
            ConceptVerifier::Blobs(det) => {
                let ConceptLabel::Coord(c) = concept else {
                    return Err(Error::invalid(format!("blob verifier cannot check `{concept}`")));
                };
                let g = &det.grid;
                if x.len() != g.dim() || c.len() != 2 {
                    return Err(Error::DimensionMismatch { expected: g.dim(), got: x.len() });
                }
                let p = [c[0], c[1]];
                let r2 = det.radius * det.radius;
                for i in 0..g.height {
                    for j in 0..g.width {
                        if g.cell_dist2(g.cell_center(i, j), p) <= r2 && (x[i * g.width + j] + 1.0) / 2.0 >= det.tau {
                            return Ok(true);
                        }
                    }
                }
                Ok(false)
            }
            ConceptVerifier::Learned(models) => {
                let (_, m) = models
                    .iter()
                    .find(|(l, _)| l == concept)
                    .ok_or_else(|| Error::UnknownLabel(concept.to_string()))?;
                if m.weights.len() != x.len() {
                    return Err(Error::DimensionMismatch { expected: m.weights.len(), got: x.len() });
                }
                Ok(m.predict(x))
            }
        }
    }
}

pub fn concept_satisfied(x: &[f64], concept: &ConceptLabel, verifier: &ConceptVerifier) -> Result<bool> {
    verifier.satisfied(x, concept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRate {
    pub concept: String,
    pub negated: bool,
    /// Fraction of samples where the concept is satisfied (before negation).
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_distance: Option<f64>,
    pub n: usize,
    pub verifier_kind: String,
    pub per_concept_satisfaction: Vec<ConceptRate>,
}

/// Fraction of rows satisfying every positive concept and no negated one.
pub fn accuracy(samples: ArrayView2<'_, f64>, concepts: &[(ConceptLabel, Polarity)], verifier: &ConceptVerifier) -> Result<Metrics> {
    if concepts.is_empty() {
        return Err(Error::invalid("accuracy needs at least one concept"));
    }
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::invalid("empty sample batch"));
    }
    let mut hits = vec![0usize; concepts.len()];
    let mut all = 0usize;
    for row in samples.rows() {
        let x = row.to_vec();
        let mut ok = true;
        for (k, (label, pol)) in concepts.iter().enumerate() {
            let sat = verifier.satisfied(&x, label)?;
            hits[k] += sat as usize;
            ok &= sat == (*pol == Polarity::Positive);
        }
        all += ok as usize;
    }
    Ok(Metrics {
        accuracy: all as f64 / n as f64,
        energy_distance: None,
        n,
        verifier_kind: verifier.kind().into(),
        per_concept_satisfaction: concepts
            .iter()
            .zip(hits)
            .map(|((l, p), h)| ConceptRate { concept: l.to_string(), negated: *p == Polarity::Negative, rate: h as f64 / n as f64 })
            .collect(),
    })
}

/// Concepts (with polarity) named by a composition.
pub fn spec_concepts(spec: &CompositionSpec) -> Vec<(ConceptLabel, Polarity)> {
    spec.canonical().into_iter().map(|t| (t.label.clone(), t.polarity)).collect()
}

fn check_sets(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("energy distance needs at least two samples per set"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    Ok(())
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pair_sum(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        for rb in b.rows() {
            total += dist(ra, rb);
        }
    }
    total
}

/// Pairwise Euclidean distance matrix.
pub fn distance_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = dist(ra, rb);
        }
    }
    out
}

/// `2 E|a-b| - E|a-a'| - E|b-b'|` with unbiased within-set means (pairs
/// `i != j` only). Symmetric in its arguments.
pub fn energy_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_sets(a, b)?;
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    let cross = pair_sum(a, b) / (n * m);
    let within_a = pair_sum(a, a) / (n * (n - 1.0));
    let within_b = pair_sum(b, b) / (m * (m - 1.0));
    Ok(2.0 * cross - within_a - within_b)
}

/// V-statistic form (all pairs, including `i == j`); exactly zero for
/// identical sets.
pub fn energy_distance_plugin(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_sets(a, b)?;
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    Ok(2.0 * pair_sum(a, b) / (n * m) - pair_sum(a, a) / (n * n) - pair_sum(b, b) / (m * m))
}

/// `sqrt(mean_p ||field(p) - oracle(p)||^2)` at timestep `t`.
pub fn field_rmse(
    field: &dyn ScoreField,
    oracle: &dyn ScoreField,
    probes: &[Vec<f64>],
    t: usize,
    label: &ConceptLabel,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::invalid("no probe points"));
    }
    if field.dim() != oracle.dim() {
        return Err(Error::DimensionMismatch { expected: oracle.dim(), got: field.dim() });
    }
    let mut total = 0.0;
    for p in probes {
        let a = field.epsilon(p, t, label)?;
        let b = oracle.epsilon(p, t, label)?;
        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok((total / probes.len() as f64).sqrt())
}

/// `k x k` grid of 2-D probe points spanning `[lo, hi]^2` inclusive.
pub fn probe_grid(lo: f64, hi: f64, k: usize) -> Vec<Vec<f64>> {
    let step = if k > 1 { (hi - lo) / (k - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            out.push(vec![lo + j as f64 * step, lo + i as f64 * step]);
        }
    }
    out
}

pub const MIN_CLASSIFIER_ACCURACY: f64 = 0.95;
const LOGISTIC_ITERS: usize = 3000;
const LOGISTIC_L2: f64 = 1e-4;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression on `features` with an 80/20 split shuffled by `seed`.
/// Full-batch Adam on the L2-regularized log loss; fails when held-out
/// accuracy is below 0.95.
pub fn train_binary_classifier(features: ArrayView2<'_, f64>, targets: &[bool], seed: u64) -> Result<LogisticModel> {
    let n = features.nrows();
    if targets.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: targets.len() });
    }
    let positives = targets.iter().filter(|&&t| t).count();
    if n < 10 || positives == 0 || positives == n {
        return Err(Error::Dataset("classifier needs at least 10 rows of both classes".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, rng::domain::CLASSIFIER), &mut idx);
    let split = n * 4 / 5;
    let (train, test) = idx.split_at(split);
    let x = features.select(Axis(0), train);
    let y: Array1<f64> = train.iter().map(|&i| if targets[i] { 1.0 } else { 0.0 }).collect();

    let d = features.ncols();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let (mut mw, mut vw) = (Array1::<f64>::zeros(d), Array1::<f64>::zeros(d));
    let (mut mb, mut vb) = (0.0, 0.0);
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let m = train.len() as f64;
    for step in 1..=LOGISTIC_ITERS {
        let z = x.dot(&w) + b;
        let r = z.mapv(sigmoid) - &y;
        let gw = x.t().dot(&r) / m + &(&w * LOGISTIC_L2);
        let gb = r.sum() / m;
        if gw.iter().map(|g| g * g).sum::<f64>().sqrt() + gb.abs() < 1e-7 {
            break;
        }
        let c1 = 1.0 - f64::powi(b1, step as i32);
        let c2 = 1.0 - f64::powi(b2, step as i32);
        mw = mw * b1 + &(&gw * (1.0 - b1));
        vw = vw * b2 + &(gw.mapv(|g| g * g) * (1.0 - b2));
        ndarray::Zip::from(&mut w).and(&mw).and(&vw).for_each(|w, &m, &v| *w -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        mb = b1 * mb + (1.0 - b1) * gb;
        vb = b2 * vb + (1.0 - b2) * gb * gb;
        b -= lr * (mb / c1) / ((vb / c2).sqrt() + eps);
    }

    let mut model = LogisticModel { weights: w.to_vec(), bias: b, held_out_accuracy: 0.0 };
    let correct = test.iter().filter(|&&i| model.predict(&features.row(i).to_vec()) == targets[i]).count();
    model.held_out_accuracy = correct as f64 / test.len() as f64;
    if model.held_out_accuracy < MIN_CLASSIFIER_ACCURACY {
        return Err(Error::UnderpoweredClassifier { accuracy: model.held_out_accuracy, required: MIN_CLASSIFIER_ACCURACY });
    }
    Ok(model)
}

/// Whether a training example exhibits `concept`: label equality for point
/// concepts, an object within `radius` cells for coordinates.
pub fn example_has_concept(example: &Example, concept: &ConceptLabel, grid: Option<&BlobConfig>, radius: f64) -> bool {
    match (concept, grid) {
        (ConceptLabel::Coord(c), Some(g)) if c.len() == 2 => {
            let p = [c[0], c[1]];
            example.objects.iter().any(|&o| g.cell_dist2(o, p) <= radius * radius)
        }
        _ => &example.label == concept,
    }
}

/// Class-balanced classifier for one concept: all positives plus an equal
/// number of negatives picked by `seed`.
pub fn train_concept_classifier(
    examples: &[Example],
    concept: &ConceptLabel,
    grid: Option<&BlobConfig>,
    radius: f64,
    seed: u64,
) -> Result<LogisticModel> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..examples.len()).partition(|&i| example_has_concept(&examples[i], concept, grid, radius));
    let mut r = rng::stream(seed, rng::domain::CLASSIFIER + 1);
    rng::shuffle(&mut r, &mut neg);
    rng::shuffle(&mut r, &mut pos);
    let k = pos.len().min(neg.len());
    let rows: Vec<usize> = pos[..k].iter().chain(&neg[..k]).copied().collect();
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no examples on one side of concept `{concept}`")));
    }
    let d = examples[0].x0.len();
    let mut x = Array2::zeros((rows.len(), d));
    for (r, &i) in rows.iter().enumerate() {
        x.row_mut(r).assign(&ndarray::aview1(&examples[i].x0));
    }
    let y: Vec<bool> = (0..rows.len()).map(|r| r < k).collect();
    train_binary_classifier(x.view(), &y, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, gen_points2d, PointConcept};

    fn points_verifier() -> ConceptVerifier {
        ConceptVerifier::Points(vec![
            (ConceptLabel::Discrete(0), GaussianSpec::isotropic(vec![-3.0, 0.0], 0.1).unwrap()),
            (ConceptLabel::Discrete(1), GaussianSpec::isotropic(vec![3.0, 0.0], 0.1).unwrap()),
        ])
    }

    fn detector(tau: f64) -> ConceptVerifier {
        ConceptVerifier::Blobs(BlobDetector { grid: BlobConfig::default(), radius: DEFAULT_BLOB_RADIUS, tau })
    }

    #[test]
    fn blob_at_target_cell_is_detected() {
        let g = BlobConfig::default();
        let c = g.cell_center(4, 11);
        let img: Vec<f64> = g.render(&[c]).into_iter().map(|v| 2.0 * v - 1.0).collect();
        let label = ConceptLabel::Coord(c.to_vec());
        assert!(concept_satisfied(&img, &label, &detector(0.5)).unwrap());
        assert!(!concept_satisfied(&img, &ConceptLabel::Coord(vec![-c[0], -c[1]]), &detector(0.5)).unwrap());
        assert!(!concept_satisfied(&img, &label, &detector(1.01)).unwrap());
        assert!(concept_satisfied(&img, &ConceptLabel::Discrete(0), &detector(0.5)).is_err());
    }

    #[test]
    fn point_responsibility() {
        let v = points_verifier();
        assert!(v.satisfied(&[-3.0, 0.0], &ConceptLabel::Discrete(0)).unwrap());
        assert!(!v.satisfied(&[-3.0, 0.0], &ConceptLabel::Discrete(1)).unwrap());
        assert!(v.satisfied(&[0.0, 0.0], &ConceptLabel::Discrete(9)).is_err());
    }

    #[test]
    fn accuracy_properties() {
        let v = points_verifier();
        let x = ndarray::array![[-3.0, 0.0], [3.0, 0.1], [-2.9, 0.0], [0.5, 0.0]];
        let c0 = [(ConceptLabel::Discrete(0), Polarity::Positive)];
        let m = accuracy(x.view(), &c0, &v).unwrap();
        assert_eq!(m.accuracy, 0.5);
        let doubled = ndarray::concatenate![Axis(0), x, x];
        assert_eq!(accuracy(doubled.view(), &c0, &v).unwrap().accuracy, 0.5);
        let reversed = x.slice(ndarray::s![..;-1, ..]);
        assert_eq!(accuracy(reversed, &c0, &v).unwrap().accuracy, 0.5);

        // disjoint concepts are never jointly satisfied
        let both = [(ConceptLabel::Discrete(0), Polarity::Positive), (ConceptLabel::Discrete(1), Polarity::Positive)];
        assert_eq!(accuracy(x.view(), &both, &v).unwrap().accuracy, 0.0);
        // negation requires NOT satisfied
        let neg = [(ConceptLabel::Discrete(0), Polarity::Positive), (ConceptLabel::Discrete(1), Polarity::Negative)];
        let m = accuracy(x.view(), &neg, &v).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!(m.per_concept_satisfaction[1].negated);
        assert!(accuracy(x.view(), &[], &v).is_err());
    }

    #[test]
    fn real_scenes_satisfy_their_labels() {
        let ex = gen_blobs(&BlobConfig::default(), 2000, 13).unwrap();
        let v = detector(DEFAULT_BLOB_TAU);
        let ok = ex.iter().filter(|e| v.satisfied(&e.x0, &e.label).unwrap()).count();
        assert!(ok as f64 / 2000.0 >= 0.99, "{ok}");
    }

    #[test]
    fn energy_distance_basics() {
        let mut r = rng::stream(1, 0);
        let a = Array2::from_shape_simple_fn((300, 2), || rng::normal(&mut r));
        let b = Array2::from_shape_simple_fn((200, 2), || rng::normal(&mut r) + 1.0);
        assert_eq!(energy_distance_plugin(a.view(), a.view()).unwrap(), 0.0);
        let ab = energy_distance(a.view(), b.view()).unwrap();
        let ba = energy_distance(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
        assert!(energy_distance(a.slice(ndarray::s![..1, ..]), b.view()).is_err());
    }

    #[test]
    fn rmse_against_self_is_zero() {
        use crate::scorefield::AnalyticGaussianField;
        let s = crate::schedule::NoiseSchedule::new(crate::schedule::ScheduleKind::Cosine, 100).unwrap();
        let f = AnalyticGaussianField::new(GaussianSpec::isotropic(vec![0.0, 0.0], 1.0).unwrap(), s).unwrap();
        let probes = probe_grid(-1.5, 1.5, 5);
        assert_eq!(probes.len(), 25);
        assert_eq!(probes[24], vec![1.5, 1.5]);
        assert_eq!(field_rmse(&f, &f, &probes, 10, &ConceptLabel::Null).unwrap(), 0.0);
    }

    #[test]
    fn separable_points_classifier() {
        let c = [
            PointConcept { id: 0, name: None, mean: vec![-2.0, 0.0], var: vec![0.2, 0.2] },
            PointConcept { id: 1, name: None, mean: vec![2.0, 0.0], var: vec![0.2, 0.2] },
        ];
        let ex = gen_points2d(&c, 1000, 2).unwrap();
        let m = train_concept_classifier(&ex, &ConceptLabel::Discrete(1), None, 0.0, 7).unwrap();
        assert!(m.held_out_accuracy >= 0.99, "{}", m.held_out_accuracy);
        assert_eq!(m, train_concept_classifier(&ex, &ConceptLabel::Discrete(1), None, 0.0, 7).unwrap());
    }

    #[test]
    fn permuted_labels_are_refused() {
        let mut r = rng::stream(3, 0);
        let x = Array2::from_shape_simple_fn((1000, 2), || rng::normal(&mut r));
        let y: Vec<bool> = (0..1000).map(|_| rng::uniform(&mut r) < 0.5).collect();
        match train_binary_classifier(x.view(), &y, 1) {
            Err(Error::UnderpoweredClassifier { accuracy, .. }) => assert!((accuracy - 0.5).abs() < 0.1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metrics_json_shape() {
        let m = Metrics {
            accuracy: 0.5,
            energy_distance: Some(0.1),
            n: 4,
            verifier_kind: "analytic".into(),
            per_concept_satisfaction: vec![ConceptRate { concept: "c0".into(), negated: false, rate: 0.5 }],
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for key in ["accuracy", "energy_distance", "n", "verifier_kind", "per_concept_satisfaction"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
