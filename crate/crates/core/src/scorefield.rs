//! Score fields `eps(x_t, t | c)`.
//!
//! A score field predicts the noise component of a diffused sample. For a
//! diffused density `p_t` the ideal prediction is
//! `eps(x, t) = -sqrt(1 - alpha_bar_t) * grad log p_t(x)`.
//!
//! Two exactly checkable fields live here: [`AnalyticGaussianField`], the
//! closed form for diagonal Gaussians, and [`GridOracleField`], a brute-force
//! numerical diffusion of an arbitrary gridded density. The trained network is
//! wrapped as a field in [`crate::model::DenoiserField`].

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A conditioning concept.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLabel {
    Null,
    Discrete(u32),
    Coord(Vec<f64>),
}

impl ConceptLabel {
    pub fn is_null(&self) -> bool {
        matches!(self, ConceptLabel::Null)
    }

    fn rank(&self) -> u8 {
        match self {
            ConceptLabel::Null => 0,
            ConceptLabel::Discrete(_) => 1,
            ConceptLabel::Coord(_) => 2,
        }
    }
}

// Coordinates are compared bitwise (total order), so labels can be sorted and
// used as keys.
impl PartialEq for ConceptLabel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ConceptLabel {}

impl PartialOrd for ConceptLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ConceptLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (ConceptLabel::Discrete(a), ConceptLabel::Discrete(b)) => a.cmp(b),
            (ConceptLabel::Coord(a), ConceptLabel::Coord(b)) => {
                for (x, y) in a.iter().zip(b) {
                    match x.total_cmp(y) {
                        Ordering::Equal => {}
                        o => return o,
                    }
                }
                a.len().cmp(&b.len())
            }
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for ConceptLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            ConceptLabel::Null => {}
            ConceptLabel::Discrete(id) => id.hash(state),
            ConceptLabel::Coord(v) => {
                for x in v {
                    x.to_bits().hash(state);
                }
            }
        }
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptLabel::Null => f.write_str("null"),
            ConceptLabel::Discrete(id) => write!(f, "c{id}"),
            ConceptLabel::Coord(v) => {
                f.write_str("@")?;
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

/// Diagonal Gaussian concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let spec = Self { mean, var };
        spec.validate()?;
        Ok(spec)
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() {
            return Err(Error::invalid("gaussian concept needs at least one dimension"));
        }
        if self.mean.len() != self.var.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), got: self.var.len() });
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gaussian mean".into()));
        }
        if self.var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("gaussian variances must be positive and finite"));
        }
        Ok(())
    }

    /// Per-axis mean and variance of the diffused marginal at `alpha_bar`.
    pub fn diffused(&self, alpha_bar: f64) -> (Vec<f64>, Vec<f64>) {
        let s = alpha_bar.sqrt();
        let mean = self.mean.iter().map(|m| s * m).collect();
        let var = self.var.iter().map(|v| alpha_bar * v + 1.0 - alpha_bar).collect();
        (mean, var)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), v) in x.iter().zip(&self.mean).zip(&self.var) {
            acc += -0.5 * (xi - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        }
        acc
    }
}

/// Closed-form `eps` of a diffused diagonal Gaussian:
/// `sqrt(1 - ab) (x - sqrt(ab) mu) / (ab s^2 + 1 - ab)` per axis.
pub fn epsilon_of_gaussian(spec: &GaussianSpec, sched: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if t == 0 || t > sched.steps() {
        return Err(Error::TimestepOutOfRange { t, min: 1, max: sched.steps() });
    }
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), got: x.len() });
    }
    let ab = sched.alpha_bar(t)?;
    Ok(epsilon_at_alpha_bar(spec, ab, x))
}

pub(crate) fn epsilon_at_alpha_bar(spec: &GaussianSpec, ab: f64, x: &[f64]) -> Vec<f64> {
    let s = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    x.iter()
        .zip(&spec.mean)
        .zip(&spec.var)
        .map(|((xi, m), v)| noise * (xi - s * m) / (ab * v + 1.0 - ab))
        .collect()
}

/// Anything that can predict `eps(x_t, t | label)`.
pub trait ScoreField {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Human readable identifier recorded in provenance.
    fn id(&self) -> String;

    fn epsilon(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>>;

    /// Row-wise evaluation over a batch sharing `t` and `label`.
    fn epsilon_batch(&self, xs: ArrayView2<'_, f64>, t: usize, label: &ConceptLabel) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.raw_dim());
        for (row, mut dst) in xs.rows().into_iter().zip(out.rows_mut()) {
            let x: Vec<f64> = row.to_vec();
            let e = self.epsilon(&x, t, label)?;
            for (d, v) in dst.iter_mut().zip(e) {
                *d = v;
            }
        }
        Ok(out)
    }
}

/// Single-point dispatch through any field.
pub fn field_eval(field: &dyn ScoreField, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
    field.epsilon(x, t, label)
}

pub(crate) fn check_t(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::TimestepOutOfRange { t, min: 1, max: sched.steps() });
    }
    Ok(())
}

/// Diffused diagonal Gaussians, one per concept, with `Null` mapped to the
/// unconditional spec.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianField {
    uncond: GaussianSpec,
    cond: Vec<(ConceptLabel, GaussianSpec)>,
    sched: NoiseSchedule,
}

impl AnalyticGaussianField {
    pub fn new(uncond: GaussianSpec, sched: NoiseSchedule) -> Result<Self> {
        uncond.validate()?;
        Ok(Self { uncond, cond: Vec::new(), sched })
    }

    pub fn with_concept(mut self, label: ConceptLabel, spec: GaussianSpec) -> Result<Self> {
        self.add_concept(label, spec)?;
        Ok(self)
    }

    pub fn add_concept(&mut self, label: ConceptLabel, spec: GaussianSpec) -> Result<()> {
        if label.is_null() {
            return Err(Error::invalid("the null label is reserved for the unconditional spec"));
        }
        spec.validate()?;
        if spec.dim() != self.uncond.dim() {
            return Err(Error::DimensionMismatch { expected: self.uncond.dim(), got: spec.dim() });
        }
        if let Some(slot) = self.cond.iter_mut().find(|(l, _)| *l == label) {
            slot.1 = spec;
        } else {
            self.cond.push((label, spec));
        }
        Ok(())
    }

    pub fn uncond(&self) -> &GaussianSpec {
        &self.uncond
    }

    pub fn concepts(&self) -> &[(ConceptLabel, GaussianSpec)] {
        &self.cond
    }

    pub fn spec_for(&self, label: &ConceptLabel) -> Result<&GaussianSpec> {
        if label.is_null() {
            return Ok(&self.uncond);
        }
        self.cond
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

impl ScoreField for AnalyticGaussianField {
    fn dim(&self) -> usize {
        self.uncond.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn id(&self) -> String {
        format!("analytic-gaussian[{} concepts]", self.cond.len())
    }

    fn epsilon(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
        let spec = self.spec_for(label)?;
        epsilon_of_gaussian(spec, &self.sched, x, t)
    }

    fn epsilon_batch(&self, xs: ArrayView2<'_, f64>, t: usize, label: &ConceptLabel) -> Result<Array2<f64>> {
        let spec = self.spec_for(label)?;
        check_t(&self.sched, t)?;
        if xs.ncols() != spec.dim() {
            return Err(Error::DimensionMismatch { expected: spec.dim(), got: xs.ncols() });
        }
        let ab = self.sched.alpha_bar(t)?;
        let s = ab.sqrt();
        let noise = (1.0 - ab).sqrt();
        let mut out = xs.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = noise * (*v - s * spec.mean[k]) / (ab * spec.var[k] + 1.0 - ab);
            }
        }
        Ok(out)
    }
}

/// A density tabulated at the centers of a regular grid over `[lo, hi]^d`,
/// `d <= 2`, normalized so that its cell quadrature integrates to one.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    dim: usize,
    cells: usize,
    lo: f64,
    hi: f64,
    // row-major, axis 0 slowest
    values: Vec<f64>,
}

impl DensityGrid {
    pub const DEFAULT_CELLS: usize = 512;
    pub const DEFAULT_HALF_WIDTH: f64 = 4.0;

    /// Tabulate `density` (need not be normalized) at cell centers.
    pub fn from_fn(dim: usize, cells: usize, lo: f64, hi: f64, density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid("grid oracle supports one or two dimensions"));
        }
        if cells < 8 || !(hi > lo) {
            return Err(Error::invalid("grid needs at least 8 cells per axis and hi > lo"));
        }
        let h = (hi - lo) / cells as f64;
        let center = |i: usize| lo + (i as f64 + 0.5) * h;
        let mut values = Vec::with_capacity(cells.pow(dim as u32));
        if dim == 1 {
            for i in 0..cells {
                values.push(density(&[center(i)]));
            }
        } else {
            for i in 0..cells {
                for j in 0..cells {
                    values.push(density(&[center(i), center(j)]));
                }
            }
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("grid density must be finite and nonnegative"));
        }
        let mass: f64 = values.iter().sum::<f64>() * h.powi(dim as i32);
        if !(mass > 0.0) {
            return Err(Error::invalid("grid density has zero mass"));
        }
        for v in &mut values {
            *v /= mass;
        }
        Ok(Self { dim, cells, lo, hi, values })
    }

    /// 512^d grid over `[-4, 4]^d`, widened for broad or off-center specs
    /// to cover 7 standard deviations at the default cell size, so that
    /// truncation never biases the diffused score.
    pub fn from_gaussian(spec: &GaussianSpec) -> Result<Self> {
        let reach = spec
            .mean
            .iter()
            .zip(&spec.var)
            .map(|(m, v)| m.abs() + 7.0 * v.sqrt())
            .fold(Self::DEFAULT_HALF_WIDTH, f64::max);
        let h = 2.0 * Self::DEFAULT_HALF_WIDTH / Self::DEFAULT_CELLS as f64;
        let cells = (2.0 * reach / h).ceil() as usize;
        let half = cells as f64 * h / 2.0;
        Self::from_fn(spec.dim(), cells, -half, half, |x| spec.log_density(x).exp())
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Quadrature mass of the stored density.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spacing().powi(self.dim as i32)
    }

    fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.spacing()
    }

    /// Diffused density at `x`, up to a constant factor shared by all `x`
    /// at the same `alpha_bar`.
    ///
    /// The base density is treated as piecewise constant on cells and the
    /// Gaussian transition kernel is integrated exactly over every cell, so
    /// the result stays smooth even when the kernel is narrower than a cell.
    fn diffused_density(&self, x: &[f64], alpha_bar: f64) -> f64 {
        let kernels: Vec<(usize, Vec<f64>)> = x.iter().map(|&xi| self.axis_kernel(xi, alpha_bar)).collect();
        match self.dim {
            1 => {
                let (start, k) = &kernels[0];
                k.iter().enumerate().map(|(o, w)| w * self.values[start + o]).sum()
            }
            _ => {
                let (si, ki) = &kernels[0];
                let (sj, kj) = &kernels[1];
                let mut acc = 0.0;
                for (oi, wi) in ki.iter().enumerate() {
                    let row = &self.values[(si + oi) * self.cells + sj..][..kj.len()];
                    let inner: f64 = row.iter().zip(kj).map(|(p, w)| p * w).sum();
                    acc += wi * inner;
                }
                acc
            }
        }
    }

    /// Cell-integrated kernel `int_cell N(x; sqrt(ab) y, 1 - ab) dy` over the
    /// cells within 6 standard deviations, returned as (first cell, weights).
    fn axis_kernel(&self, x: f64, alpha_bar: f64) -> (usize, Vec<f64>) {
        let s = alpha_bar.sqrt();
        let sigma = (1.0 - alpha_bar).sqrt();
        let h = self.spacing();
        let (first, last) = if s > 0.0 {
            // support in y: |s y - x| <= 6 sigma
            let ylo = (x - 6.0 * sigma) / s;
            let yhi = (x + 6.0 * sigma) / s;
            let a = ((ylo - self.lo) / h).floor().max(0.0) as usize;
            let b = ((yhi - self.lo) / h).ceil().min(self.cells as f64 - 1.0).max(0.0) as usize;
            (a.min(self.cells - 1), b)
        } else {
            (0, self.cells - 1)
        };
        let narrow_cell = s * h < 1e-3 * sigma;
        let mut w = Vec::with_capacity(last + 1 - first);
        for i in first..=last {
            let c = self.center(i);
            let v = if narrow_cell {
                let z = (x - s * c) / sigma;
                (-0.5 * z * z).exp() * h
            } else {
                let zlo = (s * (c - 0.5 * h) - x) / sigma;
                let zhi = (s * (c + 0.5 * h) - x) / sigma;
                normal_cdf_diff(zlo, zhi) / s
            };
            w.push(v);
        }
        (first, w)
    }
}

/// `Phi(hi) - Phi(lo)` evaluated on the tail that avoids cancellation.
fn normal_cdf_diff(lo: f64, hi: f64) -> f64 {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    if lo >= 0.0 {
        0.5 * (libm::erfc(lo * r) - libm::erfc(hi * r))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi * r) - libm::erfc(-lo * r))
    } else {
        1.0 - 0.5 * libm::erfc(hi * r) - 0.5 * libm::erfc(-lo * r)
    }
}

/// Brute-force score field: each label owns a gridded base density that is
/// diffused numerically and differentiated by central differences with a
/// step of one grid cell.
#[derive(Debug, Clone)]
pub struct GridOracleField {
    grids: Vec<(ConceptLabel, DensityGrid)>,
    sched: NoiseSchedule,
}

impl GridOracleField {
    /// Field whose `Null` label is backed by `uncond`.
    pub fn new(uncond: DensityGrid, sched: NoiseSchedule) -> Self {
        Self { grids: vec![(ConceptLabel::Null, uncond)], sched }
    }

    pub fn with_concept(mut self, label: ConceptLabel, grid: DensityGrid) -> Result<Self> {
        if label.is_null() {
            return Err(Error::invalid("the null label is reserved for the unconditional grid"));
        }
        if grid.dim() != self.grids[0].1.dim() {
            return Err(Error::DimensionMismatch { expected: self.grids[0].1.dim(), got: grid.dim() });
        }
        self.grids.push((label, grid));
        Ok(self)
    }

    /// Oracle mirroring every concept of an analytic field on default grids.
    pub fn from_analytic(field: &AnalyticGaussianField) -> Result<Self> {
        let mut oracle = Self::new(DensityGrid::from_gaussian(field.uncond())?, field.sched.clone());
        for (label, spec) in field.concepts() {
            oracle = oracle.with_concept(label.clone(), DensityGrid::from_gaussian(spec)?)?;
        }
        Ok(oracle)
    }

    fn grid_for(&self, label: &ConceptLabel) -> Result<&DensityGrid> {
        self.grids
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// Finite-difference `eps` of a single gridded density.
pub fn grid_oracle_epsilon(grid: &DensityGrid, sched: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
    check_t(sched, t)?;
    if x.len() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: grid.dim(), got: x.len() });
    }
    let h = grid.spacing();
    let margin = 3.0 * h;
    if x.iter().any(|&xi| !(xi > grid.lo + margin && xi < grid.hi - margin)) {
        return Err(Error::OutsideGrid(x.to_vec()));
    }
    let ab = sched.alpha_bar(t)?;
    let noise = (1.0 - ab).sqrt();
    let mut eps = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = grid.diffused_density(&probe, ab);
        probe[k] = x[k] - h;
        let down = grid.diffused_density(&probe, ab);
        probe[k] = x[k];
        if !(up > 0.0 && down > 0.0) {
            return Err(Error::NonFinite(format!("diffused density underflow at {x:?}")));
        }
        let grad = (up.ln() - down.ln()) / (2.0 * h);
        eps.push(-noise * grad);
    }
    Ok(eps)
}

impl ScoreField for GridOracleField {
    fn dim(&self) -> usize {
        self.grids[0].1.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn id(&self) -> String {
        format!("grid-oracle[{} grids]", self.grids.len())
    }

    fn epsilon(&self, x: &[f64], t: usize, label: &ConceptLabel) -> Result<Vec<f64>> {
        grid_oracle_epsilon(self.grid_for(label)?, &self.sched, x, t)
    }
}
