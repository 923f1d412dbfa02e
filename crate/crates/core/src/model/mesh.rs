use serde::{Deserialize, Serialize};

use super::rotation::Vec3;
use crate::error::{Error, Result};

/// Triangles with twice-area below this contribute nothing to normal averaging.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, uv: Vec<[f64; 2]>) -> Self {
        Self {
            vertices,
            triangles,
            uv,
            normals: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for tri in &self.triangles {
            for &i in tri {
                if i >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "mesh triangle",
                        index: i,
                        len: n,
                    });
                }
            }
        }
        if !self.uv.is_empty() && self.uv.len() != n {
            return Err(Error::Dimension {
                what: "mesh uv",
                expected: n,
                got: self.uv.len(),
            });
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::Dimension {
                    what: "mesh normals",
                    expected: n,
                    got: normals.len(),
                });
            }
            for (i, nrm) in normals.iter().enumerate() {
                if (nrm.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!("normal {i} is not unit length")));
                }
            }
        }
        Ok(())
    }

    /// Computes and stores per-vertex normals.
    pub fn with_normals(mut self) -> Result<Self> {
        self.normals = Some(vertex_normals(&self.vertices, &self.triangles)?);
        Ok(self)
    }
}

/// A landmark fixed to the surface by a triangle and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkBinding {
    pub triangle: usize,
    pub bary: [f64; 3],
}

fn face_cross(vertices: &[Vec3], tri: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
    let e1 = vertices[tri[1]] - vertices[tri[0]];
    let e2 = vertices[tri[2]] - vertices[tri[0]];
    (e1.cross(&e2), e1, e2)
}

fn accumulate_face_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for tri in triangles {
        let (c, _, _) = face_cross(vertices, tri);
        if c.norm() < DEGENERATE_AREA {
            continue;
        }
        for &i in tri {
            acc[i] += c;
        }
    }
    acc
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    let acc = accumulate_face_normals(vertices, triangles);
    acc.into_iter()
        .enumerate()
        .map(|(vertex, a)| {
            let len = a.norm();
            if len == 0.0 || !len.is_finite() {
                Err(Error::ZeroNormal { vertex })
            } else {
                Ok(a / len)
            }
        })
        .collect()
}

/// Reverse-mode derivative of [`vertex_normals`]: maps a cotangent on the
/// normals to a cotangent on the vertex positions.
pub fn vertex_normals_backward(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    grad_normals: &[Vec3],
) -> Vec<Vec3> {
    let acc = accumulate_face_normals(vertices, triangles);
    let grad_acc: Vec<Vec3> = acc
        .iter()
        .zip(grad_normals)
        .map(|(a, g)| {
            let len = a.norm();
            if len == 0.0 {
                return Vec3::zeros();
            }
            let n = a / len;
            (g - n * n.dot(g)) / len
        })
        .collect();

    let mut grad_v = vec![Vec3::zeros(); vertices.len()];
    for tri in triangles {
        let (c, e1, e2) = face_cross(vertices, tri);
        if c.norm() < DEGENERATE_AREA {
            continue;
        }
        let gc = grad_acc[tri[0]] + grad_acc[tri[1]] + grad_acc[tri[2]];
        let ge1 = e2.cross(&gc);
        let ge2 = gc.cross(&e1);
        grad_v[tri[1]] += ge1;
        grad_v[tri[2]] += ge2;
        grad_v[tri[0]] -= ge1 + ge2;
    }
    grad_v
}

pub fn validate_landmarks(bindings: &[LandmarkBinding], triangle_count: usize) -> Result<()> {
    for (i, b) in bindings.iter().enumerate() {
        if b.triangle >= triangle_count {
            return Err(Error::IndexOutOfRange {
                what: "landmark triangle",
                index: b.triangle,
                len: triangle_count,
            });
        }
        let sum: f64 = b.bary.iter().sum();
        if b.bary.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invariant(format!(
                "landmark {i} barycentric weights {:?} are not a convex combination",
                b.bary
            )));
        }
    }
    Ok(())
}

/// Barycentric interpolation of landmark points on the surface.
pub fn surface_landmarks(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    bindings: &[LandmarkBinding],
) -> Result<Vec<Vec3>> {
    validate_landmarks(bindings, triangles.len())?;
    bindings
        .iter()
        .map(|b| {
            let tri = triangles[b.triangle];
            let mut p = Vec3::zeros();
            for (k, &vi) in tri.iter().enumerate() {
                let v = vertices.get(vi).ok_or(Error::IndexOutOfRange {
                    what: "landmark vertex",
                    index: vi,
                    len: vertices.len(),
                })?;
                p += v * b.bary[k];
            }
            Ok(p)
        })
        .collect()
}

/// Scatters a cotangent on the landmark points back onto the vertices.
pub fn surface_landmarks_backward(
    vertex_count: usize,
    triangles: &[[usize; 3]],
    bindings: &[LandmarkBinding],
    grad_landmarks: &[Vec3],
) -> Vec<Vec3> {
    let mut grad = vec![Vec3::zeros(); vertex_count];
    for (b, g) in bindings.iter().zip(grad_landmarks) {
        let tri = triangles[b.triangle];
        for k in 0..3 {
            grad[tri[k]] += g * b.bary[k];
        }
    }
    grad
}
