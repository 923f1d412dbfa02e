//! Landmark-based rigid alignment with optional point-to-plane ICP.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{rodrigues, Mat3, Mesh, Vec3};

use super::distance::Bvh;

/// `x -> scale * R x + t`, mapping the mesh frame into the scan frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_all(&self, pts: &[Vec3]) -> Vec<Vec3> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    pub fn apply_mesh(&self, mesh: &Mesh) -> Mesh {
        let mut out = mesh.clone();
        out.vertices = self.apply_all(&mesh.vertices);
        out.normals = mesh
            .normals
            .as_ref()
            .map(|n| n.iter().map(|v| self.rotation * v).collect());
        out
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    /// `max |RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    /// Also fit an isotropic scale.
    pub with_scale: bool,
    pub icp: bool,
    pub icp_max_iterations: usize,
    /// Stop when the update moves no point by more than this (mm).
    pub icp_tolerance: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            with_scale: false,
            icp: false,
            icp_max_iterations: 50,
            icp_tolerance: 1e-6,
        }
    }
}

fn centroid(p: &[Vec3]) -> Vec3 {
    p.iter().fold(Vec3::zeros(), |a, b| a + b) / p.len() as f64
}

/// Fails when the points do not span a plane.
fn check_spread(p: &[Vec3], c: &Vec3, what: &str) -> Result<()> {
    let mut cov = Mat3::zeros();
    for q in p {
        let d = q - c;
        cov += d * d.transpose();
    }
    let sv = cov.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(Error::Degenerate(format!(
            "{what} landmarks are collinear or coincident"
        )));
    }
    Ok(())
}

/// Least-squares similarity (scale optional) mapping `src` onto `dst`
/// (orthogonal Procrustes with a reflection guard).
pub fn procrustes(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<RigidTransform> {
    check_dim("landmarks", src.len(), dst.len())?;
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 landmarks, got {}",
            src.len()
        )));
    }
    let cs = centroid(src);
    let cd = centroid(dst);
    check_spread(src, &cs, "mesh")?;
    check_spread(dst, &cd, "scan")?;
    let mut h = Mat3::zeros();
    let mut var = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let da = a - cs;
        h += da * (b - cd).transpose();
        var += da.norm_squared();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * fix * u.transpose();
    let scale = if with_scale {
        let s = svd.singular_values;
        (s[0] + s[1] + d * s[2]) / var
    } else {
        1.0
    };
    let translation = cd - rotation * cs * scale;
    Ok(RigidTransform {
        rotation,
        translation,
        scale,
    })
}

/// Aligns the mesh frame to the scan frame from landmark correspondences,
/// optionally refined by point-to-plane ICP between `scan` and `mesh`.
pub fn rigid_align(
    scan_landmarks: &[Vec3],
    mesh_landmarks: &[Vec3],
    options: &AlignOptions,
    scan: Option<&[Vec3]>,
    mesh: Option<&Mesh>,
) -> Result<RigidTransform> {
    let mut t = procrustes(mesh_landmarks, scan_landmarks, options.with_scale)?;
    if options.icp {
        let (Some(scan), Some(mesh)) = (scan, mesh) else {
            return Err(Error::Config(
                "ICP refinement needs the scan and the mesh".into(),
            ));
        };
        t = icp_point_to_plane(scan, mesh, t, options)?;
    }
    Ok(t)
}

/// Refines `init` so the transformed mesh surface meets the scan points.
pub fn icp_point_to_plane(
    scan: &[Vec3],
    mesh: &Mesh,
    init: RigidTransform,
    options: &AlignOptions,
) -> Result<RigidTransform> {
    let mut t = init;
    let extent = scan
        .iter()
        .map(|p| (p - centroid(scan)).norm())
        .fold(0.0, f64::max)
        .max(1e-12);
    for _ in 0..options.icp_max_iterations {
        let moved = t.apply_mesh(mesh);
        let bvh = Bvh::new(&moved)?;
        let mut ata = Matrix6::<f64>::zeros();
        let mut atb = Vector6::<f64>::zeros();
        for s in scan {
            let near = bvh.nearest(s);
            let [a, b, c] = bvh.triangle(near.triangle);
            let n = (b - a).cross(&(c - a));
            let len = n.norm();
            if len < 1e-15 {
                continue;
            }
            let n = n / len;
            let q = near.point;
            let row = Vector6::new(q.cross(&n).x, q.cross(&n).y, q.cross(&n).z, n.x, n.y, n.z);
            let r = (s - q).dot(&n);
            ata += row * row.transpose();
            atb += row * r;
        }
        let Some(x) = ata.lu().solve(&atb) else {
            break;
        };
        let omega = Vec3::new(x[0], x[1], x[2]);
        let dt = Vec3::new(x[3], x[4], x[5]);
        let step = RigidTransform {
            rotation: rodrigues(&omega),
            translation: dt,
            scale: 1.0,
        };
        t = step.compose(&t);
        if omega.norm() * extent + dt.norm() < options.icp_tolerance {
            break;
        }
    }
    Ok(t)
}
