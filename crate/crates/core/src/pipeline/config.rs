use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biclstm::RefinerConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::unet::UNetConfig;
use crate::volume::ViewAxis;

/// Every knob of a training run. Field names double as CLI flags and config
/// file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub views: Vec<ViewAxis>,
    pub augment: bool,
    /// In-plane crop `[length, width]` per view; `None` keeps full slices.
    pub crop_axial: Option<[usize; 2]>,
    pub crop_coronal: Option<[usize; 2]>,
    pub crop_sagittal: Option<[usize; 2]>,
    pub refiner: bool,
    pub refiner_epochs: usize,
    pub refiner_lr: f64,
    pub refiner_momentum: f64,
    pub refiner_hidden: usize,
    pub thr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 7,
            lambda_v: 0.5,
            lambda_s: 0.5,
            lr: 1e-3,
            momentum: 0.99,
            batch: 1,
            epochs: 40,
            base_channels: 16,
            depth: 4,
            views: ViewAxis::ALL.to_vec(),
            augment: true,
            crop_axial: None,
            crop_coronal: None,
            crop_sagittal: None,
            refiner: true,
            refiner_epochs: 150,
            refiner_lr: 1e-3,
            refiner_momentum: 0.99,
            refiner_hidden: 8,
            thr: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights()?;
        let bad = |m: &str| Err(Error::Invalid(format!("config: {m}")));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.refiner_lr > 0.0 && self.refiner_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.refiner_momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.thr > 0.0 && self.thr < 1.0) {
            return bad("thr must lie in (0, 1)");
        }
        if self.views.is_empty() {
            return bad("at least one view is required");
        }
        let mut seen = self.views.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.views.len() {
            return bad("views must not repeat");
        }
        if self.base_channels == 0 || self.depth == 0 || self.refiner_hidden == 0 {
            return bad("base_channels, depth and refiner_hidden must be >= 1");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_v, self.lambda_s)
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig { hidden: self.refiner_hidden, ..Default::default() }
    }

    pub fn crop(&self, view: ViewAxis) -> Option<[usize; 2]> {
        match view {
            ViewAxis::Axial => self.crop_axial,
            ViewAxis::Coronal => self.crop_coronal,
            ViewAxis::Sagittal => self.crop_sagittal,
        }
    }

    /// Network geometry for a view whose slices are `length x width` after cropping.
    pub fn unet_config(&self, length: usize, width: usize) -> UNetConfig {
        UNetConfig { k: self.k, base_channels: self.base_channels, depth: self.depth, length, width }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Invalid(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Deterministically mixes a salt into a seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
