//! Experiment configuration: one TOML file with a section per subsystem.
//!
//! ```toml
//! [schedule]
//! kind = "cosine"            # or "linear"
//! T = 1000
//!
//! [dataset]
//! kind = "points2d"          # or "blobs" (height, width, blob_std, min/max_objects)
//! count = 10000
//! seed = 1
//! [[dataset.concepts]]
//! id = 0
//! mean = [-1.0, 0.0]
//! var = [1.0, 1.0]
//!
//! [field]                    # which score field `sample` uses
//! kind = "trained"           # or "analytic" (points2d only; needs uncond_*)
//!
//! [model]                    # hidden_widths, time_embed_dim, label_embed_dim
//! [train]                    # steps, batch_size, learning_rate, ... , seed
//! [sample]                   # n, seed, rule, sigma_variant, clip_denoised, sampler, ...
//! [compose]                  # spec = "c0:1.0,~c1:1.0"
//! [eval]                     # verifier, radius, tau, classifier_seed
//! ```
//!
//! Every section except `schedule` and `dataset` has defaults. The full key
//! reference lives in `docs/config.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::{parse_compose_spec, CompositionSpec};
use crate::data::{DatasetConfig, DatasetKind};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_BLOB_RADIUS, DEFAULT_BLOB_TAU};
use crate::model::{DenoiserConfig, ScheduleRef};
use crate::sample::{DdpmOptions, LangevinOptions, SamplerRule};
use crate::schedule::{NoiseSchedule, SigmaVariant};
use crate::scorefield::{AnalyticGaussianField, ConceptLabel, GaussianSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleRef,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default, skip_serializing_if = "ComposeSection::is_empty")]
    pub compose: ComposeSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    #[default]
    Trained,
    Analytic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    #[serde(default)]
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncond_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncond_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_embed")]
    pub time_embed_dim: usize,
    #[serde(default = "default_embed")]
    pub label_embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_embed() -> usize {
    64
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_widths: default_hidden(), time_embed_dim: default_embed(), label_embed_dim: default_embed() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Langevin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub rule: SamplerRule,
    #[serde(default)]
    pub sigma_variant: SigmaVariant,
    #[serde(default)]
    pub clip_denoised: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_stride: Option<usize>,
    #[serde(default = "default_t_eval")]
    pub langevin_t_eval: usize,
    #[serde(default = "default_langevin_steps")]
    pub langevin_steps: usize,
    #[serde(default = "default_langevin_lambda")]
    pub langevin_lambda: f64,
}

fn default_n() -> usize {
    5000
}
fn default_t_eval() -> usize {
    1
}
fn default_langevin_steps() -> usize {
    2000
}
fn default_langevin_lambda() -> f64 {
    0.005
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n: default_n(),
            seed: 0,
            sampler: SamplerKind::Ddpm,
            rule: SamplerRule::Standard,
            sigma_variant: SigmaVariant::BetaTilde,
            clip_denoised: false,
            trajectory_stride: None,
            langevin_t_eval: default_t_eval(),
            langevin_steps: default_langevin_steps(),
            langevin_lambda: default_langevin_lambda(),
        }
    }
}

impl SampleSection {
    pub fn ddpm_options(&self) -> DdpmOptions {
        DdpmOptions {
            n: self.n,
            seed: self.seed,
            rule: self.rule,
            sigma_variant: self.sigma_variant,
            trajectory_stride: self.trajectory_stride,
            clip_denoised: self.clip_denoised,
        }
    }

    pub fn langevin_options(&self) -> LangevinOptions {
        LangevinOptions {
            n: self.n,
            seed: self.seed,
            t_eval: self.langevin_t_eval,
            steps: self.langevin_steps,
            lambda: self.langevin_lambda,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<String>,
}

impl ComposeSection {
    fn is_empty(&self) -> bool {
        self.spec.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifierKind {
    #[default]
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub verifier: VerifierKind,
    /// Blob detection radius in cells.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Blob intensity threshold in `[0, 1]` units.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub classifier_seed: u64,
}

fn default_radius() -> f64 {
    DEFAULT_BLOB_RADIUS
}
fn default_tau() -> f64 {
    DEFAULT_BLOB_TAU
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { verifier: VerifierKind::Analytic, radius: default_radius(), tau: default_tau(), classifier_seed: 0 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.kind, self.schedule.steps)
    }

    /// Network shape implied by the dataset and the model section.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        let (num_discrete_concepts, coord_dim) = match &self.dataset.kind {
            DatasetKind::Points2d { .. } => (self.dataset.num_discrete(), 0),
            DatasetKind::Blobs(_) => (0, 2),
        };
        DenoiserConfig {
            data_dim: self.dataset.dim(),
            hidden_widths: self.model.hidden_widths.clone(),
            time_embed_dim: self.model.time_embed_dim,
            label_embed_dim: self.model.label_embed_dim,
            num_discrete_concepts,
            coord_dim,
        }
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::Config("missing [train] section".into()))
    }

    /// Parse a composition against this config's concept vocabulary.
    pub fn parse_spec(&self, text: &str) -> Result<CompositionSpec> {
        parse_compose_spec(text, &self.dataset.concept_table())
    }

    /// The configured composition, if any.
    pub fn compose_spec(&self) -> Result<Option<CompositionSpec>> {
        self.compose.spec.as_deref().map(|s| self.parse_spec(s)).transpose()
    }

    /// Closed-form field over the points2d concepts with the configured
    /// unconditional Gaussian.
    pub fn analytic_field(&self) -> Result<AnalyticGaussianField> {
        let DatasetKind::Points2d { concepts } = &self.dataset.kind else {
            return Err(Error::Config("analytic fields need a points2d dataset".into()));
        };
        let (Some(mean), Some(var)) = (&self.field.uncond_mean, &self.field.uncond_var) else {
            return Err(Error::Config("analytic field needs field.uncond_mean and field.uncond_var".into()));
        };
        let mut field = AnalyticGaussianField::new(GaussianSpec::new(mean.clone(), var.clone())?, self.noise_schedule()?)?;
        for c in concepts {
            field.add_concept(ConceptLabel::Discrete(c.id), c.spec()?)?;
        }
        Ok(field)
    }

    /// Cross-section consistency checks, run before any command.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.noise_schedule().map_err(cfg)?;
        self.dataset.validate()?;
        self.denoiser_config().validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if self.field.kind == FieldKind::Analytic {
            self.analytic_field().map_err(cfg)?;
        }
        let s = &self.sample;
        if s.n == 0 {
            return Err(Error::Config("sample.n must be at least 1".into()));
        }
        if s.trajectory_stride == Some(0) {
            return Err(Error::Config("sample.trajectory_stride must be at least 1".into()));
        }
        if s.clip_denoised && s.rule != SamplerRule::Standard {
            return Err(Error::Config("sample.clip_denoised requires the standard rule".into()));
        }
        if s.langevin_t_eval == 0 || s.langevin_t_eval > self.schedule.steps {
            return Err(Error::Config(format!("sample.langevin_t_eval must lie in [1, {}]", self.schedule.steps)));
        }
        if !(s.langevin_lambda.is_finite() && s.langevin_lambda > 0.0) || s.langevin_steps == 0 {
            return Err(Error::Config("langevin step size and step count must be positive".into()));
        }
        self.compose_spec().map_err(cfg)?;
        let e = &self.eval;
        if !(e.radius.is_finite() && e.radius >= 0.0 && e.tau.is_finite()) {
            return Err(Error::Config("eval.radius must be >= 0 and eval.tau finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const POINTS: &str = r#"
[schedule]
kind = "cosine"
T = 1000

[dataset]
kind = "points2d"
count = 2000
seed = 4

[[dataset.concepts]]
id = 0
mean = [-1.0, 0.0]
var = [1.0, 1.0]

[[dataset.concepts]]
id = 1
name = "right"
mean = [1.0, 0.0]
var = [1.0, 1.0]

[field]
kind = "analytic"
uncond_mean = [0.0, 0.0]
uncond_var = [4.0, 4.0]

[train]
steps = 100
seed = 2

[sample]
n = 10
seed = 3

[compose]
spec = "c0,right:2"
"#;

    #[test]
    fn round_trip_is_identity() {
        let a = ExperimentConfig::from_toml(POINTS).unwrap();
        let text = a.to_toml().unwrap();
        let b = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_toml().unwrap());
    }

    #[test]
    fn derived_pieces() {
        let c = ExperimentConfig::from_toml(POINTS).unwrap();
        assert_eq!(c.denoiser_config().num_discrete_concepts, 2);
        assert_eq!(c.train_config().unwrap().label_dropout_prob, 0.1);
        let spec = c.compose_spec().unwrap().unwrap();
        assert_eq!(spec.to_string(), "c0:1,c1:2");
        assert_eq!(c.analytic_field().unwrap().concepts().len(), 2);
    }

    #[test]
    fn cross_section_errors() {
        let bad_label = POINTS.replace("spec = \"c0,right:2\"", "spec = \"c7\"");
        assert!(matches!(ExperimentConfig::from_toml(&bad_label), Err(Error::Config(_))));
        let bad_key = POINTS.replace("[sample]", "[sample]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&bad_key).is_err());
        let bad_t = POINTS.replace("T = 1000", "T = 0");
        assert!(ExperimentConfig::from_toml(&bad_t).is_err());
        let no_uncond = POINTS.replace("uncond_var = [4.0, 4.0]", "");
        assert!(ExperimentConfig::from_toml(&no_uncond).is_err());
        let t_eval = POINTS.replace("seed = 3", "seed = 3\nlangevin_t_eval = 5000");
        assert!(ExperimentConfig::from_toml(&t_eval).is_err());
    }

    #[test]
    fn blobs_defaults() {
        let text = "[schedule]\nkind = \"cosine\"\nT = 100\n[dataset]\nkind = \"blobs\"\ncount = 10\nseed = 1\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        let d = c.denoiser_config();
        assert_eq!((d.data_dim, d.coord_dim), (256, 2));
        assert!(c.parse_spec("@0.5,-0.5,@-0.25,0").is_ok());
        assert!(c.analytic_field().is_err());
    }
}
