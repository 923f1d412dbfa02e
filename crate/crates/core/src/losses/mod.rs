//! Coarse and detail objectives, swap consistency terms and feature
//! extractors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::toy::default_landmark_weights;

pub mod features;
pub mod idmrf;
pub mod terms;

pub use features::{FeatureExtractor, FeatureGrid, ToyExtractor};
pub use idmrf::{idmrf_loss, idmrf_loss_with_grad, IdMrfParams};
pub use terms::*;

/// Loss weights of the coarse and detail objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lmk: f64,
    pub eye: f64,
    pub pho: f64,
    pub id: f64,
    pub sc: f64,
    pub beta: f64,
    pub psi: f64,
    pub alpha: f64,
    pub pho_d: f64,
    pub mrf: f64,
    pub sym: f64,
    pub dc: f64,
    pub reg_d: f64,
    /// Per-landmark multipliers of the landmark term.
    pub landmark_weights: Vec<f64>,
    pub idmrf: IdMrfParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lmk: 1.0,
            eye: 1.0,
            pho: 2.0,
            id: 0.2,
            sc: 1.0,
            beta: 1e-4,
            psi: 1e-4,
            alpha: 1e-4,
            pho_d: 2.0,
            mrf: 5e-2,
            sym: 5e-3,
            dc: 1.0,
            reg_d: 5e-3,
            landmark_weights: default_landmark_weights(),
            idmrf: IdMrfParams::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lmk", self.lmk),
            ("eye", self.eye),
            ("pho", self.pho),
            ("id", self.id),
            ("sc", self.sc),
            ("beta", self.beta),
            ("psi", self.psi),
            ("alpha", self.alpha),
            ("pho_d", self.pho_d),
            ("mrf", self.mrf),
            ("sym", self.sym),
            ("dc", self.dc),
            ("reg_d", self.reg_d),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.landmark_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("landmark weights must be >= 0".into()));
        }
        if !(self.idmrf.bandwidth > 0.0) || !(self.idmrf.epsilon > 0.0) {
            return Err(Error::Config(
                "ID-MRF bandwidth and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Named loss terms with their weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    /// Per-term values divided by a size normalizer (logging only).
    pub normalized: BTreeMap<String, f64>,
    pub weighted_total: f64,
}

impl LossReport {
    pub fn add(&mut self, name: &str, weight: f64, value: f64) {
        self.terms.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
        self.weighted_total = self.recompute_total();
    }

    pub fn add_normalized(&mut self, name: &str, weight: f64, value: f64, normalizer: f64) {
        self.add(name, weight, value);
        if normalizer > 0.0 {
            self.normalized.insert(name.to_string(), value / normalizer);
        }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }

    pub fn recompute_total(&self) -> f64 {
        self.terms
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weighted_total.is_finite()
    }
}
