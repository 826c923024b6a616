use serde::{Deserialize, Serialize};

use crate::data::SUPPORTED_RES;
use crate::engine::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::{GenObjective, LossWeights};
use crate::nets::NetConfig;

/// Every knob of a training run. Missing JSON fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_sets: usize,
    pub n_per_set: usize,
    pub res: usize,
    pub width: usize,
    pub patch: usize,
    pub pool_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iters: u64,
    pub seed: u64,
    pub min_patch: bool,
    /// Generator maximises the fake-pair identity term as literally written.
    pub literal_max: bool,
    /// Treat the inner generator call of the cycle terms as a constant.
    pub stop_inner: bool,
    pub use_s1: bool,
    pub use_s2a: bool,
    pub use_s2b: bool,
    /// Same-set updates run after each cross-set update.
    pub phase2_steps: usize,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// 0 disables evaluation during training.
    pub eval_every: u64,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let adam = AdamConfig::default();
        let w = LossWeights::default();
        Self {
            n_sets: 3,
            n_per_set: 200,
            res: net.res,
            width: net.width,
            patch: net.patch,
            pool_k: net.pool_k,
            alpha: w.alpha,
            beta: w.beta,
            lr_g: adam.lr,
            lr_d: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            iters: 3000,
            seed: 0,
            min_patch: true,
            literal_max: false,
            stop_inner: false,
            use_s1: true,
            use_s2a: true,
            use_s2b: true,
            phase2_steps: 1,
            log_every: 50,
            checkpoint_every: 0,
            eval_every: 0,
            eval_samples: 100,
        }
    }
}

impl TrainConfig {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            res: self.res,
            width: self.width,
            patch: self.patch,
            pool_k: self.pool_k,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn objective(&self) -> GenObjective {
        GenObjective {
            min_patch: self.min_patch,
            pool_k: self.pool_k,
            literal_max: self.literal_max,
        }
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            ..self.adam_g()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net().validate()?;
        self.weights().validate()?;
        if !SUPPORTED_RES.contains(&self.res) {
            return Err(Error::Config(format!("res {} not in {SUPPORTED_RES:?}", self.res)));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be positive".into()));
        }
        if self.n_sets < 2 {
            return Err(Error::Config(format!("need at least 2 sets, got {}", self.n_sets)));
        }
        if self.n_per_set < 2 {
            return Err(Error::Config("need at least 2 images per set".into()));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}
