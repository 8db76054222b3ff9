//! Training and run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer and loss settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// MSE weight α.
    pub alpha: f64,
    /// MSAD weight β.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Learn the spectra matrix E alongside the networks.
    pub adjust_e: bool,
    /// Fraction of pixels held out for evaluation.
    pub eval_fraction: f64,
    /// After the last epoch, replace batch-norm running statistics with the
    /// exact statistics of the training pixels.
    pub recalibrate_bn: bool,
    /// Before training, scale `Γφ₀` by the least-squares fit of the initial
    /// reconstruction to the training pixels (otherwise it starts at 1).
    pub fit_gamma_init: bool,
    /// Cosine-anneal the learning rate per epoch from `learning_rate` down to
    /// `final_lr_fraction · learning_rate` at the last epoch (1 = constant).
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 5.0,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 200,
            seed: 0,
            adjust_e: true,
            eval_fraction: 0.2,
            recalibrate_bn: true,
            fit_gamma_init: true,
            final_lr_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite value >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (batch normalization)");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Hidden-layer widths of the two encoders (input/output widths are L).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenWidths {
    pub mua: Vec<usize>,
    pub mus: Vec<usize>,
}

impl Default for HiddenWidths {
    fn default() -> Self {
        Self {
            mua: vec![256, 256],
            mus: vec![256, 256, 256],
        }
    }
}

impl HiddenWidths {
    /// Uniform width for every hidden layer.
    pub fn uniform(width: usize) -> Self {
        Self {
            mua: vec![width; 2],
            mus: vec![width; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mua.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "mua-net needs 2 hidden widths (g∘f∘f), got {}",
                self.mua.len()
            )));
        }
        if self.mus.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "mus-net needs 3 hidden widths (g∘f∘f∘f), got {}",
                self.mus.len()
            )));
        }
        if self.mua.iter().chain(&self.mus).any(|&w| w == 0) {
            return Err(Error::InvalidConfig("hidden widths must be > 0".into()));
        }
        Ok(())
    }
}

/// Architecture of the two encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: HiddenWidths,
    /// Unit of the μa-Net output in mm⁻¹ (`μa = mua_unit · μa-Net(P)`). Tissue
    /// absorption sits about two orders below scattering, so the default keeps
    /// both encoders' outputs at order one.
    pub mua_unit: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(HiddenWidths::default())
    }
}

impl ModelConfig {
    /// `hidden_widths` with the default μa unit.
    pub fn new(hidden_widths: HiddenWidths) -> Self {
        Self {
            hidden_widths,
            mua_unit: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hidden_widths.validate()?;
        if !(self.mua_unit > 0.0 && self.mua_unit.is_finite()) {
            return Err(Error::InvalidConfig("mua_unit must be a finite value > 0".into()));
        }
        Ok(())
    }
}

/// The `(adjust_E, β)` pair selecting one of the four model variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    #[serde(rename = "adjust_E", alias = "adjust_e")]
    pub adjust_e: bool,
    pub beta: f64,
}

/// `train` section of a run config; the variant supplies β and adjust_E.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    pub recalibrate_bn: bool,
    pub fit_gamma_init: bool,
    pub final_lr_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            alpha: d.alpha,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            seed: d.seed,
            eval_fraction: d.eval_fraction,
            recalibrate_bn: d.recalibrate_bn,
            fit_gamma_init: d.fit_gamma_init,
            final_lr_fraction: d.final_lr_fraction,
        }
    }
}

/// JSON document driving `spoi train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    pub variant: Variant,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.train_config().validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.train.alpha,
            beta: self.variant.beta,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.train.seed,
            adjust_e: self.variant.adjust_e,
            eval_fraction: self.train.eval_fraction,
            recalibrate_bn: self.train.recalibrate_bn,
            fit_gamma_init: self.train.fit_gamma_init,
            final_lr_fraction: self.train.final_lr_fraction,
        }
    }

    /// Warnings that do not prevent a run (β outside the paper's {0, 5}).
    pub fn warnings(&self) -> Vec<String> {
        let mut w = vec![];
        if self.variant.beta != 0.0 && self.variant.beta != 5.0 {
            w.push(format!(
                "beta = {} is not one of the standard variants (0 or 5)",
                self.variant.beta
            ));
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"dataset":"d.spad","variant":{"adjust_E":true,"beta":5},"output_dir":"out"}"#,
        )
        .unwrap();
        let t = cfg.train_config();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(cfg.model.hidden_widths, HiddenWidths::default());
        assert!(cfg.warnings().is_empty());
    }

    #[test]
    fn full_config() {
        let cfg = RunConfig::from_json(
            r#"{"dataset":"d.spad","mask":"m.txt","variant":{"adjust_E":false,"beta":2.5},
                "train":{"alpha":10,"learning_rate":0.01,"batch_size":64,"epochs":3,"seed":9,"eval_fraction":0.5},
                "model":{"hidden_widths":{"mua":[8,8],"mus":[8,8,8]}},"output_dir":"out"}"#,
        )
        .unwrap();
        let t = cfg.train_config();
        assert!(!t.adjust_e);
        assert_eq!((t.beta, t.batch_size, t.seed), (2.5, 64, 9));
        assert_eq!(cfg.warnings().len(), 1);
    }

    #[test]
    fn rejects_invalid() {
        let base = |train: &str| {
            RunConfig::from_json(&format!(
                r#"{{"dataset":"d","variant":{{"adjust_E":true,"beta":0}},"train":{train},"output_dir":"o"}}"#
            ))
        };
        assert!(matches!(base(r#"{"batch_size":1}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(base(r#"{"alpha":-1}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(base(r#"{"eval_fraction":1.0}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(base(r#"{"bogus":1}"#), Err(Error::Json(_))));
        let widths = RunConfig::from_json(
            r#"{"dataset":"d","variant":{"adjust_E":true,"beta":0},"model":{"hidden_widths":{"mua":[4],"mus":[4,4,4]}},"output_dir":"o"}"#,
        );
        assert!(matches!(widths, Err(Error::InvalidConfig(_))));
    }
}
