//! Fitting and training schedules.

use serde::{Deserialize, Serialize};

use crate::code::Group;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

use super::optim::AdamParams;

/// Which objective a coarse stage minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    /// Landmark and eye-closure terms plus the code regularizers.
    Landmarks,
    /// The complete coarse objective.
    Full,
}

/// Relative step sizes per parameter group. Scale is optimized as `ln s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupRates {
    pub shape: f64,
    pub expression: f64,
    pub pose: f64,
    pub albedo: f64,
    pub light: f64,
    pub scale: f64,
    pub translation: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        Self {
            shape: 1.0,
            expression: 1.0,
            pose: 0.1,
            albedo: 1.0,
            light: 0.5,
            scale: 0.05,
            translation: 2.5,
        }
    }
}

impl GroupRates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Shape => self.shape,
            Group::Expression => self.expression,
            Group::Pose => self.pose,
            Group::Albedo => self.albedo,
            Group::Light => self.light,
            Group::Scale => self.scale,
            Group::Translation => self.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    pub iterations: usize,
    /// Base step size; each group moves by `lr * rates[group]`.
    pub lr: f64,
    /// The step size decays geometrically to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub rates: GroupRates,
    pub freeze: Vec<Group>,
    /// Replaces the run's loss weights for this stage.
    pub weights: Option<LossWeights>,
}

impl Default for Stage {
    fn default() -> Self {
        Self::full(1500)
    }
}

impl Stage {
    pub fn landmarks(iterations: usize) -> Self {
        Self {
            name: "landmarks".into(),
            kind: StageKind::Landmarks,
            iterations,
            lr: 0.02,
            final_lr_fraction: 0.05,
            rates: GroupRates::default(),
            freeze: vec![Group::Albedo, Group::Light],
            weights: None,
        }
    }

    pub fn full(iterations: usize) -> Self {
        Self {
            name: "full".into(),
            kind: StageKind::Full,
            iterations,
            lr: 0.02,
            final_lr_fraction: 0.01,
            rates: GroupRates::default(),
            freeze: Vec::new(),
            weights: None,
        }
    }

    /// Step size at iteration `it` of this stage.
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr;
        }
        let f = it as f64 / (self.iterations - 1) as f64;
        self.lr * self.final_lr_fraction.powf(f)
    }
}

/// Schedule of a detail-code fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetailStage {
    pub iterations: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
}

impl Default for DetailStage {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 0.05,
            final_lr_fraction: 0.05,
        }
    }
}

impl DetailStage {
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr;
        }
        let f = it as f64 / (self.iterations - 1) as f64;
        self.lr * self.final_lr_fraction.powf(f)
    }
}

/// Schedule of toy-scale decoder training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainStage {
    pub iterations: usize,
    /// Step size of the decoder weights.
    pub decoder_lr: f64,
    /// Step size of the per-image detail codes.
    pub code_lr: f64,
    pub final_lr_fraction: f64,
    /// One detail code per subject instead of one per image.
    pub tie_subject_codes: bool,
}

impl Default for TrainStage {
    fn default() -> Self {
        Self {
            iterations: 300,
            decoder_lr: 1e-4,
            code_lr: 1e-2,
            final_lr_fraction: 0.1,
            tie_subject_codes: false,
        }
    }
}

impl TrainStage {
    pub fn decay_at(&self, it: usize) -> f64 {
        if self.iterations <= 1 {
            return 1.0;
        }
        self.final_lr_fraction
            .powf(it as f64 / (self.iterations - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub stages: Vec<Stage>,
    pub detail: DetailStage,
    pub train: TrainStage,
    pub adam: AdamParams,
    pub weights: LossWeights,
    pub seed: u64,
    /// Joints whose rotations are optimized; `None` means root and jaw.
    pub free_joints: Option<Vec<usize>>,
    /// One shape vector for all images of a subject in multi-image fits.
    pub shared_shape: bool,
    /// Standard deviation of a seeded jitter added to the initial code.
    pub init_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stages: vec![Stage::landmarks(500), Stage::full(1500)],
            detail: DetailStage::default(),
            train: TrainStage::default(),
            adam: AdamParams::default(),
            weights: LossWeights::default(),
            seed: 0,
            free_joints: None,
            shared_shape: false,
            init_jitter: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for s in &self.stages {
            if let Some(w) = &s.weights {
                w.validate()?;
            }
            if !(s.lr >= 0.0) || !(s.final_lr_fraction > 0.0) {
                return Err(Error::Config(format!(
                    "stage `{}` has an invalid step size",
                    s.name
                )));
            }
        }
        let a = &self.adam;
        if !(a.lr >= 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::Config("init_jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}
