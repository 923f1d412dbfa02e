//! Second-order spherical-harmonics Lambertian shading in UV space.

use serde::{Deserialize, Serialize};

use super::image::{Image, MapKind};
use crate::error::{Error, Result};
use crate::model::rotation::Vec3;

pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C3: f64 = 0.315392;
pub const SH_C4: f64 = 0.546274;

/// Nine SH coefficients per colour channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Lighting {
    pub coeffs: [[f64; 3]; 9],
}

impl Lighting {
    pub fn zeros() -> Self {
        Self::default()
    }

    /// Ambient light of the given per-channel intensity on band 0.
    pub fn ambient(rgb: [f64; 3]) -> Self {
        let mut coeffs = [[0.0; 3]; 9];
        coeffs[0] = rgb;
        Self { coeffs }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coeffs.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 27 {
            return Err(Error::Dimension {
                what: "lighting coefficients",
                expected: 27,
                got: values.len(),
            });
        }
        let mut coeffs = [[0.0; 3]; 9];
        for (k, c) in coeffs.iter_mut().enumerate() {
            c.copy_from_slice(&values[3 * k..3 * k + 3]);
        }
        Ok(Self { coeffs })
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.is_finite())
    }
}

/// SH basis `H_1..H_9` of a unit normal.
pub fn sh_basis(normal: &Vec3) -> Result<[f64; 9]> {
    if (normal.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "SH basis needs a unit normal, got length {}",
            normal.norm()
        )));
    }
    Ok(sh_eval(normal))
}

#[inline]
pub(crate) fn sh_eval(n: &Vec3) -> [f64; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Gradients of each basis function with respect to the normal.
#[inline]
pub(crate) fn sh_gradient(n: &Vec3) -> [Vec3; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vec3::zeros(),
        Vec3::new(0.0, SH_C1, 0.0),
        Vec3::new(0.0, 0.0, SH_C1),
        Vec3::new(SH_C1, 0.0, 0.0),
        Vec3::new(SH_C2 * y, SH_C2 * x, 0.0),
        Vec3::new(0.0, SH_C2 * z, SH_C2 * y),
        Vec3::new(0.0, 0.0, 6.0 * SH_C3 * z),
        Vec3::new(SH_C2 * z, 0.0, SH_C2 * x),
        Vec3::new(2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0),
    ]
}

#[inline]
fn normal_at(normals: &Image, i: usize) -> Vec3 {
    let k = 3 * i;
    Vec3::new(normals.data[k], normals.data[k + 1], normals.data[k + 2])
}

fn check_shapes(albedo: &Image, normals: &Image, mask: &Image) -> Result<()> {
    if albedo.channels != 3 || normals.channels != 3 || mask.channels != 1 {
        return Err(Error::Validation(
            "shade expects 3-channel albedo and normals and a 1-channel mask".into(),
        ));
    }
    if albedo.width != normals.width
        || albedo.height != normals.height
        || albedo.width != mask.width
        || albedo.height != mask.height
    {
        return Err(Error::Validation("shade inputs differ in size".into()));
    }
    Ok(())
}

/// Shaded texture `B = A ⊙ sum_k l_k H_k(N)` inside the mask, zero outside.
pub fn shade(albedo: &Image, light: &Lighting, normals: &Image, mask: &Image) -> Result<Image> {
    check_shapes(albedo, normals, mask)?;
    let mut out = Image::new(albedo.width, albedo.height, 3, MapKind::Shaded);
    for i in 0..albedo.pixel_count() {
        if mask.data[i] == 0.0 {
            continue;
        }
        let h = sh_eval(&normal_at(normals, i));
        for c in 0..3 {
            let irradiance: f64 = (0..9).map(|k| light.coeffs[k][c] * h[k]).sum();
            out.data[3 * i + c] = albedo.data[3 * i + c] * irradiance;
        }
    }
    Ok(out)
}

/// Cotangents produced by [`shade_backward`].
#[derive(Debug, Clone)]
pub struct ShadeGrads {
    pub albedo: Image,
    pub light: Lighting,
    pub normals: Image,
}

pub fn shade_backward(
    albedo: &Image,
    light: &Lighting,
    normals: &Image,
    mask: &Image,
    grad: &Image,
) -> ShadeGrads {
    let mut g_albedo = Image::new(albedo.width, albedo.height, 3, MapKind::Albedo);
    let mut g_normals = Image::new(albedo.width, albedo.height, 3, MapKind::Normal);
    let mut g_light = Lighting::zeros();
    for i in 0..albedo.pixel_count() {
        if mask.data[i] == 0.0 {
            continue;
        }
        let g = &grad.data[3 * i..3 * i + 3];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let n = normal_at(normals, i);
        let h = sh_eval(&n);
        let dh = sh_gradient(&n);
        let mut gn = Vec3::zeros();
        for c in 0..3 {
            let a = albedo.data[3 * i + c];
            let irradiance: f64 = (0..9).map(|k| light.coeffs[k][c] * h[k]).sum();
            g_albedo.data[3 * i + c] = g[c] * irradiance;
            let ga = g[c] * a;
            for k in 0..9 {
                g_light.coeffs[k][c] += ga * h[k];
                gn += dh[k] * (ga * light.coeffs[k][c]);
            }
        }
        g_normals.data[3 * i..3 * i + 3].copy_from_slice(&[gn.x, gn.y, gn.z]);
    }
    ShadeGrads {
        albedo: g_albedo,
        light: g_light,
        normals: g_normals,
    }
}
