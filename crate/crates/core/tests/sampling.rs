use compdiff::compose::{analytic_closure, CompositionSpec};
use compdiff::sample::{column_moments, ddpm_sample, langevin_sample, DdpmOptions, LangevinOptions, SamplerRule};
use compdiff::schedule::{NoiseSchedule, ScheduleKind, SigmaVariant};
use compdiff::scorefield::{AnalyticGaussianField, ConceptLabel, GaussianSpec};

const C0: ConceptLabel = ConceptLabel::Discrete(0);
const C1: ConceptLabel = ConceptLabel::Discrete(1);

fn cosine(t: usize) -> NoiseSchedule {
    NoiseSchedule::new(ScheduleKind::Cosine, t).unwrap()
}

fn iso(mean: [f64; 2], var: f64) -> GaussianSpec {
    GaussianSpec::isotropic(mean.to_vec(), var).unwrap()
}

/// Exact per-axis mean/variance of the standard-rule sampler for an analytic
/// field, whose composed eps is affine in x: `eps = sqrt(1-ab) (L x - eta)`.
fn exact_recursion(field: &AnalyticGaussianField, spec: &CompositionSpec, variant: SigmaVariant) -> (Vec<f64>, Vec<f64>) {
    let s = field_schedule(field);
    let d = field.uncond().dim();
    let (mut m, mut v) = (vec![0.0; d], vec![1.0; d]);
    for t in (1..=s.steps()).rev() {
        let g = analytic_closure(field, spec, t).unwrap().gaussian;
        let ab = s.alpha_bar(t).unwrap();
        let beta = s.beta(t).unwrap();
        let a = 1.0 / s.alpha(t).unwrap().sqrt();
        let b = beta / (1.0 - ab).sqrt() * (1.0 - ab).sqrt();
        let sigma = if t == 1 { 0.0 } else { s.posterior_sigma(t, variant).unwrap() };
        for k in 0..d {
            let gain = a * (1.0 - b * g.precision[k]);
            m[k] = gain * m[k] + a * b * g.natural_mean[k];
            v[k] = gain * gain * v[k] + sigma * sigma;
        }
    }
    (m, v)
}

fn field_schedule(f: &AnalyticGaussianField) -> NoiseSchedule {
    use compdiff::scorefield::ScoreField;
    f.schedule().clone()
}

#[test]
fn prior_matching_concept_reproduces_prior() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 1.0), cosine(1000)).unwrap().with_concept(C0, iso([0.0, 0.0], 1.0)).unwrap();
    let spec = CompositionSpec::conjunction([(C0, 1.0)]).unwrap();
    let b = ddpm_sample(&f, &spec, &DdpmOptions::new(10_000, 11)).unwrap();
    let (m, v) = column_moments(b.samples.view());
    for k in 0..2 {
        assert!(m[k].abs() < 0.05, "{m:?}");
        assert!((v[k] - 1.0).abs() < 0.05, "{v:?}");
    }
}

#[test]
fn sampler_matches_exact_recursion() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 4.0), cosine(1000))
        .unwrap()
        .with_concept(C0, iso([-1.0, 0.0], 1.0))
        .unwrap()
        .with_concept(C1, iso([1.0, 0.0], 1.0))
        .unwrap();
    let spec = CompositionSpec::conjunction([(C0, 1.0), (C1, 1.0)]).unwrap();
    for variant in [SigmaVariant::BetaTilde, SigmaVariant::Beta] {
        let (em, ev) = exact_recursion(&f, &spec, variant);
        let opts = DdpmOptions { sigma_variant: variant, ..DdpmOptions::new(10_000, 5) };
        let b = ddpm_sample(&f, &spec, &opts).unwrap();
        let (m, v) = column_moments(b.samples.view());
        for k in 0..2 {
            // 5 standard errors of the mean and of the variance estimate
            assert!((m[k] - em[k]).abs() < 5.0 * (ev[k] / 1e4).sqrt(), "{m:?} vs {em:?}");
            assert!((v[k] - ev[k]).abs() < 5.0 * ev[k] * (2.0f64 / 1e4).sqrt(), "{v:?} vs {ev:?}");
        }
    }
}

#[test]
fn reverse_marginal_at_half_time() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 1.0), cosine(1000)).unwrap().with_concept(C0, iso([1.0, -0.5], 0.25)).unwrap();
    let spec = CompositionSpec::conjunction([(C0, 1.0)]).unwrap();
    let opts = DdpmOptions { trajectory_stride: Some(100), ..DdpmOptions::new(10_000, 21) };
    let b = ddpm_sample(&f, &spec, &opts).unwrap();
    let tr = b.trajectory.unwrap();
    let i = tr.t.iter().position(|&t| t == 500).unwrap();
    let (m, v) = column_moments(tr.states[i].view());
    let ab = f_ab(&f, 500);
    let (dm, dv) = iso([1.0, -0.5], 0.25).diffused(ab);
    for k in 0..2 {
        assert!((m[k] - dm[k]).abs() < 0.05, "{m:?} vs {dm:?}");
        assert!((v[k] - dv[k]).abs() / dv[k] < 0.10, "{v:?} vs {dv:?}");
    }
}

fn f_ab(f: &AnalyticGaussianField, t: usize) -> f64 {
    field_schedule(f).alpha_bar(t).unwrap()
}

#[test]
fn trajectory_norms_shrink() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 1.0), cosine(1000)).unwrap().with_concept(C0, iso([0.0, 0.0], 0.1)).unwrap();
    let spec = CompositionSpec::conjunction([(C0, 1.0)]).unwrap();
    let opts = DdpmOptions { trajectory_stride: Some(1), ..DdpmOptions::new(500, 2) };
    let tr = ddpm_sample(&f, &spec, &opts).unwrap().trajectory.unwrap();
    let norms: Vec<f64> = tr
        .states
        .iter()
        .map(|s| s.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / s.nrows() as f64)
        .collect();
    let bucket = norms.len() / 10;
    let avgs: Vec<f64> = norms.chunks(bucket).take(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(avgs.windows(2).all(|w| w[1] <= w[0]), "{avgs:?}");
    assert!((norms[0] - (std::f64::consts::PI / 2.0).sqrt()).abs() < 0.1);
}

#[test]
fn guidance_sharpens_monotonically() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 1.0), cosine(1000)).unwrap().with_concept(C0, iso([0.5, 0.5], 0.25)).unwrap();
    let mut prev = f64::INFINITY;
    for w in [0.0, 1.0, 2.0, 4.0] {
        let spec = CompositionSpec::conjunction([(C0, w)]).unwrap();
        let b = ddpm_sample(&f, &spec, &DdpmOptions::new(4000, 8)).unwrap();
        let (_, v) = column_moments(b.samples.view());
        let var = (v[0] + v[1]) / 2.0;
        assert!(var < prev, "w={w}: {var} !< {prev}");
        prev = var;
    }
}

#[test]
fn schematic_rule_runs_and_is_reported() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 1.0), cosine(200)).unwrap().with_concept(C0, iso([0.0, 0.0], 1.0)).unwrap();
    let spec = CompositionSpec::conjunction([(C0, 1.0)]).unwrap();
    let opts = DdpmOptions { rule: SamplerRule::Schematic, ..DdpmOptions::new(100, 1) };
    let b = ddpm_sample(&f, &spec, &opts).unwrap();
    let json = serde_json::to_string(&b.provenance).unwrap();
    assert!(json.contains("\"rule\":\"schematic\""), "{json}");
    assert!(json.contains("\"sampler\":\"ddpm\""));
}

#[test]
fn langevin_quadratic_potential() {
    let f = AnalyticGaussianField::new(iso([0.0, 0.0], 0.25), cosine(1000)).unwrap().with_concept(C0, iso([0.0, 0.0], 0.25)).unwrap();
    let spec = CompositionSpec::conjunction([(C0, 1.0)]).unwrap();
    let opts = LangevinOptions { n: 5000, seed: 4, t_eval: 1, steps: 2000, lambda: 0.005 };
    let b = langevin_sample(&f, &spec, &opts).unwrap();
    let (_, v) = column_moments(b.samples.view());
    for vk in v {
        assert!((vk - 0.25).abs() / 0.25 < 0.15, "{vk}");
    }
    let again = langevin_sample(&f, &spec, &LangevinOptions { n: 3, ..opts }).unwrap();
    assert_eq!(again.samples, b.samples.slice(ndarray::s![..3, ..]));
}
