//! Hard z-buffer rasterization over pixel centres.

use nalgebra::Matrix3;

use crate::model::rotation::Vec3;

use super::camera::{project, Camera};
use crate::model::mesh::Mesh;

pub const NO_TRIANGLE: u32 = u32::MAX;

/// 2D triangle setup with a consistent fill rule.
///
/// A sample exactly on an edge belongs to the triangle only if the edge is an
/// "owning" edge; the two triangles sharing an edge traverse it in opposite
/// directions, so exactly one of them owns it.
pub(crate) struct Triangle2 {
    p: [[f64; 2]; 3],
    area: f64,
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

impl Triangle2 {
    /// Returns `None` for triangles with (numerically) zero area.
    pub(crate) fn new(p: [[f64; 2]; 3]) -> Option<Self> {
        let area = edge(p[0], p[1], p[2]);
        if area.abs() < 1e-300 || !area.is_finite() {
            return None;
        }
        Some(Self { p, area })
    }

    pub(crate) fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.p {
            for a in 0..2 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    fn owns(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        // orientation-normalised edge direction
        let (dx, dy) = if self.area > 0.0 {
            (b[0] - a[0], b[1] - a[1])
        } else {
            (a[0] - b[0], a[1] - b[1])
        };
        dy > 0.0 || (dy == 0.0 && dx > 0.0)
    }

    /// Barycentric coordinates of `q` if it is covered.
    pub(crate) fn cover(&self, q: [f64; 2]) -> Option<[f64; 3]> {
        let [a, b, c] = self.p;
        let e = [edge(b, c, q), edge(c, a, q), edge(a, b, q)];
        let pairs = [(b, c), (c, a), (a, b)];
        for (k, &ek) in e.iter().enumerate() {
            let s = ek * self.area.signum();
            if s < 0.0 || (s == 0.0 && !self.owns(pairs[k].0, pairs[k].1)) {
                return None;
            }
        }
        Some([e[0] / self.area, e[1] / self.area, e[2] / self.area])
    }
}

/// Per-pixel fragment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub triangle: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Fragments {
    pub fn covered(&self, i: usize) -> bool {
        self.triangle[i] != NO_TRIANGLE
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.triangle.iter().map(|t| *t != NO_TRIANGLE).collect()
    }

    pub fn covered_count(&self) -> usize {
        self.triangle.iter().filter(|t| **t != NO_TRIANGLE).count()
    }
}

/// Rasterizes projected triangles. Larger depth wins; ties keep the lower
/// triangle id because triangles are visited in id order with a strict test.
pub fn rasterize_projected(
    projected: &[[f64; 2]],
    depth: &[f64],
    triangles: &[[usize; 3]],
    width: usize,
    height: usize,
) -> Fragments {
    let n = width * height;
    let mut frags = Fragments {
        width,
        height,
        triangle: vec![NO_TRIANGLE; n],
        bary: vec![[0.0; 3]; n],
        depth: vec![f64::NEG_INFINITY; n],
    };
    for (ti, tri) in triangles.iter().enumerate() {
        let Some(t2) = Triangle2::new(tri.map(|i| projected[i])) else {
            continue;
        };
        let (lo, hi) = t2.bounds();
        let x0 = ((lo[0] - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((lo[1] - 0.5).ceil().max(0.0)) as usize;
        let x1 = (hi[0] - 0.5).floor();
        let y1 = (hi[1] - 0.5).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(width.saturating_sub(1));
        let y1 = (y1 as usize).min(height.saturating_sub(1));
        if width == 0 || height == 0 || x0 > x1 || y0 > y1 {
            continue;
        }
        let z = tri.map(|i| depth[i]);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                if let Some(b) = t2.cover(q) {
                    let d = b[0] * z[0] + b[1] * z[1] + b[2] * z[2];
                    let i = y * width + x;
                    if d > frags.depth[i] {
                        frags.depth[i] = d;
                        frags.triangle[i] = ti as u32;
                        frags.bary[i] = b;
                    }
                }
            }
        }
    }
    frags
}

/// Rasterizes a mesh through an orthographic camera into a `size x size` buffer.
pub fn rasterize(mesh: &Mesh, camera: &Camera, size: usize) -> Fragments {
    let projected = project(&mesh.vertices, camera);
    let depth: Vec<f64> = mesh.vertices.iter().map(|v| v.z).collect();
    rasterize_projected(&projected, &depth, &mesh.triangles, size, size)
}

/// Cotangent of the projected triangle corners given a cotangent on the
/// barycentric coordinates of a fixed sample point.
///
/// With `M = [[x0,x1,x2],[y0,y1,y2],[1,1,1]]` and `b = M^-1 [q; 1]`, the
/// corner cotangents are `b_j * w` where `w = -M^-T g_b`.
pub(crate) fn bary_backward(
    corners: [[f64; 2]; 3],
    bary: [f64; 3],
    g_b: [f64; 3],
) -> [[f64; 2]; 3] {
    let m = Matrix3::new(
        corners[0][0],
        corners[1][0],
        corners[2][0],
        corners[0][1],
        corners[1][1],
        corners[2][1],
        1.0,
        1.0,
        1.0,
    );
    let Some(inv) = m.try_inverse() else {
        return [[0.0; 2]; 3];
    };
    let w = -(inv.transpose() * Vec3::new(g_b[0], g_b[1], g_b[2]));
    [
        [bary[0] * w.x, bary[0] * w.y],
        [bary[1] * w.x, bary[1] * w.y],
        [bary[2] * w.x, bary[2] * w.y],
    ]
}
