//! Per-image parameter bundle.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{ParametricHeadModel, PoseParams, Vec3};
use crate::render::albedo::AlbedoModel;
use crate::render::camera::Camera;
use crate::render::sh::Lighting;

/// Default width of the detail code.
pub const DETAIL_DIM: usize = 128;

/// Coarse code `(beta, psi, theta, alpha, l, s, t)` plus the detail code `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    /// Flattened axis-angle rotations, joint 0 first.
    pub pose: Vec<f64>,
    pub albedo: Vec<f64>,
    pub light: Lighting,
    pub camera: Camera,
    #[serde(default)]
    pub detail: Vec<f64>,
}

/// Parameter groups of the coarse code, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Shape,
    Expression,
    Pose,
    Albedo,
    Light,
    Scale,
    Translation,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Shape,
        Group::Expression,
        Group::Pose,
        Group::Albedo,
        Group::Light,
        Group::Scale,
        Group::Translation,
    ];
}

impl LatentCode {
    /// All-zero code with unit camera scale.
    pub fn zeros(model: &ParametricHeadModel, albedo_dim: usize, detail_dim: usize) -> Self {
        Self {
            shape: vec![0.0; model.shape_dim()],
            expression: vec![0.0; model.expression_dim()],
            pose: vec![0.0; model.pose_dim()],
            albedo: vec![0.0; albedo_dim],
            light: Lighting::zeros(),
            camera: Camera::default(),
            detail: vec![0.0; detail_dim],
        }
    }

    pub fn for_model(model: &ParametricHeadModel, albedo: &AlbedoModel) -> Self {
        Self::zeros(model, albedo.dim(), DETAIL_DIM)
    }

    pub fn pose_params(&self) -> PoseParams {
        PoseParams {
            rotations: self
                .pose
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        }
    }

    pub fn joint_rotation(&self, joint: usize) -> [f64; 3] {
        [
            self.pose[3 * joint],
            self.pose[3 * joint + 1],
            self.pose[3 * joint + 2],
        ]
    }

    pub fn set_joint_rotation(&mut self, joint: usize, r: [f64; 3]) {
        self.pose[3 * joint..3 * joint + 3].copy_from_slice(&r);
    }

    /// Number of coarse parameters, counting every joint rotation.
    pub fn coarse_dim(&self) -> usize {
        self.shape.len() + self.expression.len() + self.pose.len() + self.albedo.len() + 27 + 3
    }

    pub fn validate(&self, model: &ParametricHeadModel, albedo: &AlbedoModel) -> Result<()> {
        check_dim("shape parameters", model.shape_dim(), self.shape.len())?;
        check_dim(
            "expression parameters",
            model.expression_dim(),
            self.expression.len(),
        )?;
        check_dim("pose parameters", model.pose_dim(), self.pose.len())?;
        check_dim("albedo parameters", albedo.dim(), self.albedo.len())?;
        self.camera.validate()?;
        if !self.is_finite() {
            return Err(Error::Validation("latent code is not finite".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.shape
            .iter()
            .chain(&self.expression)
            .chain(&self.pose)
            .chain(&self.albedo)
            .chain(&self.detail)
            .all(|v| v.is_finite())
            && self.light.is_finite()
            && self.camera.scale.is_finite()
            && self.camera.translation.iter().all(|v| v.is_finite())
    }

    /// Slices of one parameter group (scale is a single entry).
    pub fn group(&self, g: Group) -> Vec<f64> {
        match g {
            Group::Shape => self.shape.clone(),
            Group::Expression => self.expression.clone(),
            Group::Pose => self.pose.clone(),
            Group::Albedo => self.albedo.clone(),
            Group::Light => self.light.to_flat(),
            Group::Scale => vec![self.camera.scale],
            Group::Translation => self.camera.translation.to_vec(),
        }
    }

    pub fn set_group(&mut self, g: Group, values: &[f64]) {
        match g {
            Group::Shape => self.shape.copy_from_slice(values),
            Group::Expression => self.expression.copy_from_slice(values),
            Group::Pose => self.pose.copy_from_slice(values),
            Group::Albedo => self.albedo.copy_from_slice(values),
            Group::Light => {
                for (k, c) in self.light.coeffs.iter_mut().enumerate() {
                    c.copy_from_slice(&values[3 * k..3 * k + 3]);
                }
            }
            Group::Scale => self.camera.scale = values[0],
            Group::Translation => self.camera.translation.copy_from_slice(values),
        }
    }
}
