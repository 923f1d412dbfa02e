//! Mesh-to-UV attribute resampling.
//!
//! Texel `(x, y)` of a `d x d` map has its centre at
//! `u = (x + 0.5) / d`, `v = (y + 0.5) / d` (row 0 at `v = 0`).

use log::warn;

use super::image::{Image, MapKind};
use super::raster::Triangle2;
use crate::error::{Error, Result};
use crate::model::mesh::Mesh;
use crate::model::rotation::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelRef {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Precomputed texel-to-triangle table of a fixed UV layout.
#[derive(Debug, Clone, PartialEq)]
pub struct UvRaster {
    pub size: usize,
    pub texels: Vec<Option<TexelRef>>,
    /// Texels claimed by more than one UV triangle (first writer kept).
    pub overlaps: usize,
}

impl UvRaster {
    pub fn build(uv: &[[f64; 2]], triangles: &[[usize; 3]], size: usize) -> Self {
        let mut texels: Vec<Option<TexelRef>> = vec![None; size * size];
        let mut overlaps = 0;
        let d = size as f64;
        for (ti, tri) in triangles.iter().enumerate() {
            let corners = tri.map(|i| [uv[i][0] * d, uv[i][1] * d]);
            let Some(t2) = Triangle2::new(corners) else {
                continue;
            };
            let (lo, hi) = t2.bounds();
            let x0 = (lo[0] - 0.5).ceil().max(0.0) as usize;
            let y0 = (lo[1] - 0.5).ceil().max(0.0) as usize;
            let x1 = (hi[0] - 0.5).floor();
            let y1 = (hi[1] - 0.5).floor();
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let x1 = (x1 as usize).min(size - 1);
            let y1 = (y1 as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if let Some(bary) = t2.cover([x as f64 + 0.5, y as f64 + 0.5]) {
                        let slot = &mut texels[y * size + x];
                        if slot.is_some() {
                            overlaps += 1;
                        } else {
                            *slot = Some(TexelRef { triangle: ti, bary });
                        }
                    }
                }
            }
        }
        if overlaps > 0 {
            warn!("{overlaps} texels covered by overlapping UV triangles; kept the first");
        }
        Self {
            size,
            texels,
            overlaps,
        }
    }

    pub fn mask(&self) -> Image {
        let mut m = Image::square(self.size, 1, MapKind::Mask);
        for (o, t) in m.data.iter_mut().zip(&self.texels) {
            if t.is_some() {
                *o = 1.0;
            }
        }
        m
    }

    pub fn valid_count(&self) -> usize {
        self.texels.iter().filter(|t| t.is_some()).count()
    }

    /// Barycentric interpolation of a per-vertex 3-vector attribute.
    /// Normal-tagged output is renormalized per texel.
    pub fn interpolate(&self, triangles: &[[usize; 3]], values: &[Vec3], kind: MapKind) -> Image {
        let mut out = Image::square(self.size, 3, kind);
        for (i, t) in self.texels.iter().enumerate() {
            let Some(t) = t else { continue };
            let tri = triangles[t.triangle];
            let mut v = values[tri[0]] * t.bary[0]
                + values[tri[1]] * t.bary[1]
                + values[tri[2]] * t.bary[2];
            if kind == MapKind::Normal {
                let len = v.norm();
                if len > 0.0 {
                    v /= len;
                }
            }
            out.data[3 * i..3 * i + 3].copy_from_slice(&[v.x, v.y, v.z]);
        }
        out
    }

    /// Scalar variant of [`interpolate`](Self::interpolate).
    pub fn interpolate_scalar(
        &self,
        triangles: &[[usize; 3]],
        values: &[f64],
        kind: MapKind,
    ) -> Image {
        let mut out = Image::square(self.size, 1, kind);
        for (i, t) in self.texels.iter().enumerate() {
            let Some(t) = t else { continue };
            let tri = triangles[t.triangle];
            out.data[i] = values[tri[0]] * t.bary[0]
                + values[tri[1]] * t.bary[1]
                + values[tri[2]] * t.bary[2];
        }
        out
    }

    /// Reverse-mode derivative of [`interpolate`](Self::interpolate).
    pub fn interpolate_backward(
        &self,
        triangles: &[[usize; 3]],
        values: &[Vec3],
        kind: MapKind,
        grad: &Image,
    ) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); values.len()];
        for (i, t) in self.texels.iter().enumerate() {
            let Some(t) = t else { continue };
            let mut g = Vec3::new(grad.data[3 * i], grad.data[3 * i + 1], grad.data[3 * i + 2]);
            if g == Vec3::zeros() {
                continue;
            }
            let tri = triangles[t.triangle];
            if kind == MapKind::Normal {
                let v = values[tri[0]] * t.bary[0]
                    + values[tri[1]] * t.bary[1]
                    + values[tri[2]] * t.bary[2];
                let len = v.norm();
                if len == 0.0 {
                    continue;
                }
                let n = v / len;
                g = (g - n * n.dot(&g)) / len;
            }
            for k in 0..3 {
                out[tri[k]] += g * t.bary[k];
            }
        }
        out
    }
}

/// Resamples a per-vertex attribute into UV space; returns the map and its
/// valid-texel mask.
pub fn mesh_to_uv(
    mesh: &Mesh,
    attribute: &[Vec3],
    size: usize,
    kind: MapKind,
) -> Result<(Image, Image)> {
    if mesh.uv.len() != mesh.vertices.len() {
        return Err(Error::Validation("mesh has no per-vertex UVs".into()));
    }
    if attribute.len() != mesh.vertices.len() {
        return Err(Error::Dimension {
            what: "uv attribute",
            expected: mesh.vertices.len(),
            got: attribute.len(),
        });
    }
    let raster = UvRaster::build(&mesh.uv, &mesh.triangles, size);
    Ok((
        raster.interpolate(&mesh.triangles, attribute, kind),
        raster.mask(),
    ))
}

/// Bilinear sample of a map at continuous UV coordinates, clamped to the
/// border texels.
pub fn sample_bilinear(map: &Image, uv: [f64; 2], out: &mut [f64]) {
    let (x0, y0, fx, fy) = bilinear_setup(map, uv);
    let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
    let (xa, ya) = (x0.min(map.width - 1), y0.min(map.height - 1));
    for c in 0..map.channels {
        let t00 = map.get(xa, ya, c);
        let t10 = map.get(x1, ya, c);
        let t01 = map.get(xa, y1, c);
        let t11 = map.get(x1, y1, c);
        out[c] = (1.0 - fy) * ((1.0 - fx) * t00 + fx * t10) + fy * ((1.0 - fx) * t01 + fx * t11);
    }
}

/// Integer texel origin and fractional offsets of a bilinear lookup; the
/// fractions are zeroed where the lookup is clamped.
#[inline]
pub(crate) fn bilinear_setup(map: &Image, uv: [f64; 2]) -> (usize, usize, f64, f64) {
    let tx = uv[0] * map.width as f64 - 0.5;
    let ty = uv[1] * map.height as f64 - 0.5;
    let axis = |t: f64, len: usize| -> (usize, f64) {
        if t <= 0.0 {
            (0, 0.0)
        } else if t >= (len - 1) as f64 {
            (len - 1, 0.0)
        } else {
            let f = t.floor();
            (f as usize, t - f)
        }
    };
    let (x0, fx) = axis(tx, map.width);
    let (y0, fy) = axis(ty, map.height);
    (x0, y0, fx, fy)
}

/// Adjoint of [`sample_bilinear`]: scatters `grad_out` into `grad_map` and
/// returns the cotangent of the UV coordinates.
pub(crate) fn sample_bilinear_backward(
    map: &Image,
    uv: [f64; 2],
    grad_out: &[f64],
    grad_map: &mut Image,
) -> [f64; 2] {
    let (x0, y0, fx, fy) = bilinear_setup(map, uv);
    let tx = uv[0] * map.width as f64 - 0.5;
    let ty = uv[1] * map.height as f64 - 0.5;
    let interior_x = tx > 0.0 && tx < (map.width - 1) as f64;
    let interior_y = ty > 0.0 && ty < (map.height - 1) as f64;
    let (x1, y1) = ((x0 + 1).min(map.width - 1), (y0 + 1).min(map.height - 1));
    let mut g_uv = [0.0; 2];
    for c in 0..map.channels {
        let g = grad_out[c];
        if g == 0.0 {
            continue;
        }
        let t00 = map.get(x0, y0, c);
        let t10 = map.get(x1, y0, c);
        let t01 = map.get(x0, y1, c);
        let t11 = map.get(x1, y1, c);
        let i00 = map.index(x0, y0) + c;
        let i10 = map.index(x1, y0) + c;
        let i01 = map.index(x0, y1) + c;
        let i11 = map.index(x1, y1) + c;
        grad_map.data[i00] += g * (1.0 - fx) * (1.0 - fy);
        grad_map.data[i10] += g * fx * (1.0 - fy);
        grad_map.data[i01] += g * (1.0 - fx) * fy;
        grad_map.data[i11] += g * fx * fy;
        if interior_x {
            g_uv[0] += g * map.width as f64 * ((1.0 - fy) * (t10 - t00) + fy * (t11 - t01));
        }
        if interior_y {
            g_uv[1] += g * map.height as f64 * ((1.0 - fx) * (t01 - t00) + fx * (t11 - t10));
        }
    }
    g_uv
}
