//! Fitting and prediction on top of the partition, sampler and inference modules.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Transform};
use crate::error::{Result, SagpError};
use crate::inference::{predict, PredictionResult};
use crate::linalg::Points;
use crate::partition::{build_full_rp, RpScheme};
use crate::rng::seeded;
use crate::sampler::{McmcConfig, PosteriorSamples, PriorPreset, Priors, Sampler};

/// Everything that determines a fit apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub m: usize,
    pub n_layers: usize,
    /// One entry for every dimension, or a single entry applied to all.
    pub branching: Vec<usize>,
    pub preset: PriorPreset,
    /// Inverse-gamma shape of the `eta` priors; the preset's default when unset.
    pub eta_shape: Option<f64>,
    pub alpha_eps: f64,
    pub beta_eps: f64,
    pub mcmc: McmcConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            m: 10,
            n_layers: 3,
            branching: vec![2],
            preset: PriorPreset::default(),
            eta_shape: None,
            alpha_eps: 1.0,
            beta_eps: 1.0,
            mcmc: McmcConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn priors(&self) -> Result<Priors> {
        let mut p = Priors::preset_with_shape(
            self.preset,
            self.n_layers,
            self.eta_shape.unwrap_or(self.preset.default_eta_shape()),
        )?;
        p.alpha_eps = self.alpha_eps;
        p.beta_eps = self.beta_eps;
        p.validate()?;
        Ok(p)
    }

    pub fn scheme(&self, x: &Points) -> Result<RpScheme> {
        build_full_rp(x.dim(), &self.branching, self.n_layers, self.m)?.prune(x)
    }
}

/// Posterior samples together with the standardized training inputs and the
/// pruned scheme they refer to.
#[derive(Debug, Clone)]
pub struct Fit {
    pub scheme: RpScheme,
    pub x: Points,
    pub samples: PosteriorSamples,
}

impl Fit {
    pub fn new(x: &Points, y: &DVector<f64>, spec: &ModelSpec) -> Result<Self> {
        Self::with_rng(x, y, spec, seeded(spec.mcmc.seed, 0))
    }

    pub fn with_rng(x: &Points, y: &DVector<f64>, spec: &ModelSpec, rng: ChaCha8Rng) -> Result<Self> {
        let scheme = spec.scheme(x)?;
        let samples = Sampler::with_rng(
            x.clone(),
            y.clone(),
            scheme.clone(),
            spec.priors()?,
            spec.mcmc.clone(),
            rng,
        )?
        .run()?;
        Ok(Fit {
            scheme,
            x: x.clone(),
            samples,
        })
    }

    /// Predict at standardized locations; results are on the standardized scale.
    pub fn predict(&self, x_star: &Points, alpha: f64, seed: u64) -> Result<PredictionResult> {
        predict(&self.samples, &self.scheme, &self.x, x_star, alpha, seed)
    }
}

/// A fit on a standardized dataset that predicts in original units.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub fit: Fit,
    pub transform: Transform,
}

impl FittedModel {
    pub fn fit(data: &Dataset, spec: &ModelSpec) -> Result<Self> {
        Ok(FittedModel {
            fit: Fit::new(&data.x, &data.y, spec)?,
            transform: data.transform.clone(),
        })
    }

    /// `x_star` in original units.
    pub fn predict(&self, x_star: &Points, alpha: f64, seed: u64) -> Result<PredictionResult> {
        if x_star.is_empty() {
            return Err(SagpError::Empty("prediction locations"));
        }
        let u = self.transform.apply_x(x_star)?;
        let mut out = self.fit.predict(&u, alpha, seed)?;
        out.locations = x_star.clone();
        Ok(out.back_transform(&self.transform))
    }
}
