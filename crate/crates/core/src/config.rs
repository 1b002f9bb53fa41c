//! Flat run configuration covering data generation, model, objective and
//! optimization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{AlignConfig, InferenceConfig, LossWeights, Objective};
use crate::error::{Error, Result};
use crate::memory::KMeansOptions;
use crate::model::ModelDims;
use crate::optim::AdamWConfig;
use crate::synthdata::{ShiftConfig, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub k_neighbors: usize,
    pub memory_size: usize,
    pub latent_dim: usize,
    pub sphere_dim: usize,
    pub omics_hidden: usize,
    pub leaky_slope: f64,

    pub tau_agg: f64,
    pub beta: f64,
    pub margin: f64,
    pub tau_attn: f64,

    pub lambda_ce: f64,
    pub lambda_mse: f64,
    pub alpha_wsi: f64,
    pub alpha_omics: f64,
    pub lambda_mem: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub accum_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub threshold: f64,

    pub kmeans_sample: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,

    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub d_in: usize,
    pub g_dim: usize,
    pub pos_fraction: f64,
    pub signal_patch_fraction: f64,
    pub noise_sigma: f64,
    pub prototype_scale: f64,
    pub background_components: usize,

    pub shift_rotation: f64,
    pub shift_background: f64,
    pub shift_signal_delta: f64,
    pub shift_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let shift = ShiftConfig::default();
        let adam = AdamWConfig::default();
        let kmeans = KMeansOptions::default();
        Self {
            seed: 0,
            k_neighbors: 8,
            memory_size: 16,
            latent_dim: 256,
            sphere_dim: 128,
            omics_hidden: 256,
            leaky_slope: crate::graphnet::DEFAULT_SLOPE,
            tau_agg: 5.0,
            beta: 20.0,
            margin: 0.3,
            tau_attn: 0.2,
            lambda_ce: 0.5,
            lambda_mse: 0.01,
            alpha_wsi: 0.2,
            alpha_omics: 0.05,
            lambda_mem: 0.1,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            accum_steps: 16,
            max_epochs: 80,
            batch_size: 1,
            patience: crate::evalkit::DEFAULT_PATIENCE,
            threshold: crate::evalkit::DEFAULT_THRESHOLD,
            kmeans_sample: 10_000,
            kmeans_max_iter: kmeans.max_iter,
            kmeans_tol: kmeans.tol,
            n_train: synth.n_train,
            n_val: synth.n_val,
            n_test: synth.n_test,
            patches_min: synth.patches_min,
            patches_max: synth.patches_max,
            d_in: synth.d_in,
            g_dim: synth.g_dim,
            pos_fraction: synth.pos_fraction,
            signal_patch_fraction: synth.signal_patch_fraction,
            noise_sigma: synth.noise_sigma,
            prototype_scale: synth.prototype_scale,
            background_components: synth.background_components,
            shift_rotation: shift.feature_rotation_angle,
            shift_background: shift.background_shift,
            shift_signal_delta: shift.signal_fraction_delta,
            shift_seed: shift.seed,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_neighbors", self.k_neighbors),
            ("latent_dim", self.latent_dim),
            ("sphere_dim", self.sphere_dim),
            ("omics_hidden", self.omics_hidden),
            ("accum_steps", self.accum_steps),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("kmeans_sample", self.kmeans_sample),
            ("kmeans_max_iter", self.kmeans_max_iter),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if !(self.kmeans_tol >= 0.0) {
            return Err(Error::Config(format!("kmeans_tol must be non-negative, got {}", self.kmeans_tol)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        self.objective().validate()?;
        self.adamw().validate()?;
        self.synth().validate()?;
        self.dims(self.d_in, self.g_dim).validate()
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            patches_min: self.patches_min,
            patches_max: self.patches_max,
            d_in: self.d_in,
            g_dim: self.g_dim,
            pos_fraction: self.pos_fraction,
            signal_patch_fraction: self.signal_patch_fraction,
            noise_sigma: self.noise_sigma,
            prototype_scale: self.prototype_scale,
            background_components: self.background_components,
            seed: self.seed,
        }
    }

    pub fn shift(&self) -> ShiftConfig {
        ShiftConfig {
            feature_rotation_angle: self.shift_rotation,
            background_shift: self.shift_background,
            signal_fraction_delta: self.shift_signal_delta,
            seed: self.shift_seed,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            align: AlignConfig {
                tau_agg: self.tau_agg,
                beta: self.beta,
                margin: self.margin,
            },
            weights: LossWeights {
                lambda_ce: self.lambda_ce,
                lambda_mse: self.lambda_mse,
                alpha_wsi: self.alpha_wsi,
                alpha_omics: self.alpha_omics,
                lambda_mem: self.lambda_mem,
            },
            inference: InferenceConfig { tau_attn: self.tau_attn },
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn kmeans(&self) -> KMeansOptions {
        KMeansOptions {
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
        }
    }

    /// Model widths for data with `d_in`-wide patches and `g_dim`-wide profiles.
    pub fn dims(&self, d_in: usize, g_dim: usize) -> ModelDims {
        ModelDims {
            d_in,
            g_dim,
            latent: self.latent_dim,
            sphere: self.sphere_dim,
            omics_hidden: self.omics_hidden,
            memory_size: self.memory_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.k_neighbors, c.memory_size, c.latent_dim, c.sphere_dim), (8, 16, 256, 128));
        assert_eq!((c.tau_agg, c.beta, c.margin, c.tau_attn), (5.0, 20.0, 0.3, 0.2));
        assert_eq!(
            (c.lambda_ce, c.lambda_mse, c.alpha_wsi, c.alpha_omics, c.lambda_mem),
            (0.5, 0.01, 0.2, 0.05, 0.1)
        );
        assert_eq!((c.lr, c.weight_decay, c.accum_steps, c.max_epochs), (2e-4, 1e-4, 16, 80));
        assert_eq!((c.batch_size, c.kmeans_sample, c.patience), (1, 10_000, 15));
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"memory_size": 8, "seed": 3}"#).unwrap();
        assert_eq!((partial.memory_size, partial.seed, partial.latent_dim), (8, 3, 256));
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        let err = RunConfig::from_json(r#"{"lamda_ce": 0.5}"#).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("lamda_ce")), "{err}");
        for bad in [r#"{"memory_size": 1}"#, r#"{"batch_size": 4}"#, r#"{"tau_attn": 0}"#, r#"{"margin": 2.5}"#] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
