use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::rotation::Vec3;

/// Scaled orthographic camera: `v = s * Π(p) + t` with `Π = [[1,0,0],[0,1,0]]`.
///
/// Projected coordinates are pixel coordinates: `x` to the right, `y` down,
/// origin at the top-left image corner, pixel centres at integer + 0.5.
/// Depth is the camera-space `z`; larger `z` is closer to the viewer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }
}

impl Camera {
    pub fn new(scale: f64, translation: [f64; 2]) -> Self {
        Self { scale, translation }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Validation(format!(
                "camera scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Validation("camera translation is not finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn project_point(&self, p: &Vec3) -> [f64; 2] {
        [
            self.scale * p.x + self.translation[0],
            self.scale * p.y + self.translation[1],
        ]
    }
}

pub fn project(points: &[Vec3], camera: &Camera) -> Vec<[f64; 2]> {
    points.iter().map(|p| camera.project_point(p)).collect()
}

/// Cotangents of a projection: per-point 3D cotangents plus camera terms.
pub fn project_backward(
    points: &[Vec3],
    camera: &Camera,
    grad: &[[f64; 2]],
) -> (Vec<Vec3>, f64, [f64; 2]) {
    let mut g_scale = 0.0;
    let mut g_t = [0.0; 2];
    let g_points = points
        .iter()
        .zip(grad)
        .map(|(p, g)| {
            g_scale += g[0] * p.x + g[1] * p.y;
            g_t[0] += g[0];
            g_t[1] += g[1];
            Vec3::new(camera.scale * g[0], camera.scale * g[1], 0.0)
        })
        .collect();
    (g_points, g_scale, g_t)
}
