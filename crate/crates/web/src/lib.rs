//! Browser demo over an analytic 2-D field: the composed epsilon on a grid,
//! composed DDPM samples and the noise schedule curve.
//!
//! `Demo` is plain Rust so it can be tested natively; `WebDemo` wraps it for
//! JavaScript.

use compdiff::compose::{composed_epsilon_batch, CompositionSpec};
use compdiff::config::ExperimentConfig;
use compdiff::eval::probe_grid;
use compdiff::sample::{ddpm_sample, DdpmOptions};
use compdiff::scorefield::{AnalyticGaussianField, ScoreField};
use ndarray::Array2;
use wasm_bindgen::prelude::*;

/// Two concepts under a broad prior, the conjunction experiment.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/conjunction.toml");

/// Sample count ceiling; the page runs on the main thread.
pub const MAX_SAMPLES: usize = 20_000;
pub const MAX_GRID: usize = 64;

pub struct Demo {
    config: ExperimentConfig,
    field: AnalyticGaussianField,
}

impl Demo {
    pub fn from_config(text: &str) -> Result<Self, String> {
        let config = ExperimentConfig::from_toml(text).map_err(|e| e.to_string())?;
        let field = config.analytic_field().map_err(|e| e.to_string())?;
        if field.dim() != 2 {
            return Err("the demo draws 2-D fields only".into());
        }
        Ok(Self { config, field })
    }

    pub fn steps(&self) -> usize {
        self.field.schedule().steps()
    }

    /// Concept names usable in specs.
    pub fn concept_names(&self) -> Vec<String> {
        let table = self.config.dataset.concept_table();
        self.field
            .concepts()
            .iter()
            .filter_map(|(l, _)| table.name_of(l).map(str::to_string))
            .collect()
    }

    pub fn parse(&self, spec: &str) -> Result<CompositionSpec, String> {
        self.config.parse_spec(spec).map_err(|e| e.to_string())
    }

    /// Composed epsilon at the `n x n` grid over `[lo, hi]^2`, row-major with
    /// y increasing by row, flattened as `(ex, ey)` pairs.
    pub fn field_grid(&self, spec: &str, t: usize, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>, String> {
        if !(2..=MAX_GRID).contains(&n) || !(hi > lo) {
            return Err(format!("grid needs 2..={MAX_GRID} points per side and hi > lo"));
        }
        let spec = self.parse(spec)?;
        let xs = grid_points(n, lo, hi);
        let eps = composed_epsilon_batch(&self.field, xs.view(), t, &spec).map_err(|e| e.to_string())?;
        Ok(eps.into_raw_vec_and_offset().0)
    }

    /// `n` composed samples flattened as `(x, y)` pairs.
    pub fn sample(&self, spec: &str, n: usize, seed: u64) -> Result<Vec<f64>, String> {
        if n == 0 || n > MAX_SAMPLES {
            return Err(format!("sample count must lie in 1..={MAX_SAMPLES}"));
        }
        let spec = self.parse(spec)?;
        let batch = ddpm_sample(&self.field, &spec, &DdpmOptions::new(n, seed)).map_err(|e| e.to_string())?;
        Ok(batch.samples.into_raw_vec_and_offset().0)
    }

    /// `alpha_bar_t` for `t = 0..=T`.
    pub fn alpha_bar_curve(&self) -> Vec<f64> {
        let sched = self.field.schedule();
        (0..=sched.steps()).map(|t| sched.alpha_bar(t).expect("t within schedule")).collect()
    }
}

fn grid_points(n: usize, lo: f64, hi: f64) -> Array2<f64> {
    let pts = probe_grid(lo, hi, n);
    Array2::from_shape_fn((pts.len(), 2), |(i, k)| pts[i][k])
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

#[wasm_bindgen]
impl WebDemo {
    /// Builds from a TOML experiment config, or the built-in one when empty.
    #[wasm_bindgen(constructor)]
    pub fn new(config: Option<String>) -> Result<WebDemo, JsError> {
        let text = config.filter(|c| !c.trim().is_empty());
        Demo::from_config(text.as_deref().unwrap_or(DEFAULT_CONFIG)).map(WebDemo).map_err(|e| JsError::new(&e))
    }

    pub fn steps(&self) -> usize {
        self.0.steps()
    }

    #[wasm_bindgen(js_name = conceptNames)]
    pub fn concept_names(&self) -> Vec<String> {
        self.0.concept_names()
    }

    #[wasm_bindgen(js_name = fieldGrid)]
    pub fn field_grid(&self, spec: &str, t: usize, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>, JsError> {
        self.0.field_grid(spec, t, n, lo, hi).map_err(|e| JsError::new(&e))
    }

    pub fn sample(&self, spec: &str, n: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.0.sample(spec, n, seed as u64).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = alphaBarCurve)]
    pub fn alpha_bar_curve(&self) -> Vec<f64> {
        self.0.alpha_bar_curve()
    }
}
