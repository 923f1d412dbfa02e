use super::image::{Image, MapKind};
use crate::error::{check_dim, Error, Result};

/// Linear UV albedo model: `A(alpha) = mean + sum_i alpha_i * basis_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoModel {
    pub mean: Image,
    pub basis: Vec<Image>,
}

impl AlbedoModel {
    pub fn size(&self) -> usize {
        self.mean.width
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.width;
        if self.mean.height != d || self.mean.channels != 3 {
            return Err(Error::Invariant("mean albedo must be d x d x 3".into()));
        }
        for b in &self.basis {
            if !b.same_shape(&self.mean) {
                return Err(Error::Invariant(
                    "albedo basis maps must share the mean's shape".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Evaluates the albedo map; values are left unclamped.
pub fn albedo_map(model: &AlbedoModel, alpha: &[f64]) -> Result<Image> {
    check_dim("albedo parameters", model.dim(), alpha.len())?;
    let mut out = model.mean.clone();
    out.kind = MapKind::Albedo;
    for (b, &a) in model.basis.iter().zip(alpha) {
        if a == 0.0 {
            continue;
        }
        for (o, v) in out.data.iter_mut().zip(&b.data) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Cotangent of the albedo parameters given a cotangent on the albedo map.
pub fn albedo_map_backward(model: &AlbedoModel, grad_map: &Image) -> Vec<f64> {
    model
        .basis
        .iter()
        .map(|b| b.data.iter().zip(&grad_map.data).map(|(x, g)| x * g).sum())
        .collect()
}

/// Albedo clamped to `[0, 1]` for export.
pub fn clamp_for_export(map: &Image) -> Image {
    map.map(|v| v.clamp(0.0, 1.0))
}
