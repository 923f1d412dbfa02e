//! The statistical head model: blendshapes, joint regression, pose
//! correctives and linear blend skinning.

use super::mesh::{validate_landmarks, LandmarkBinding, Mesh};
use super::rotation::{flatten_row_major, rodrigues, rodrigues_jacobian, Mat3, Vec3};
use crate::error::{check_dim, Error, Result};

/// A stack of per-vertex offset fields, stored component-major:
/// `data[c * 3n + 3v + axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blendshapes {
    pub count: usize,
    pub vertex_count: usize,
    pub data: Vec<f64>,
}

impl Blendshapes {
    pub fn zeros(count: usize, vertex_count: usize) -> Self {
        Self {
            count,
            vertex_count,
            data: vec![0.0; count * vertex_count * 3],
        }
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let stride = self.vertex_count * 3;
        &self.data[c * stride..(c + 1) * stride]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let stride = self.vertex_count * 3;
        &mut self.data[c * stride..(c + 1) * stride]
    }

    /// Adds `sum_c coeffs[c] * component(c)` into `out`.
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [Vec3]) {
        for (c, &w) in coeffs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, chunk) in out.iter_mut().zip(self.component(c).chunks_exact(3)) {
                o.x += w * chunk[0];
                o.y += w * chunk[1];
                o.z += w * chunk[2];
            }
        }
    }

    /// Transpose product: `out[c] = <component(c), grad>`.
    pub fn project(&self, grad: &[Vec3]) -> Vec<f64> {
        (0..self.count)
            .map(|c| {
                self.component(c)
                    .chunks_exact(3)
                    .zip(grad)
                    .map(|(b, g)| b[0] * g.x + b[1] * g.y + b[2] * g.z)
                    .sum()
            })
            .collect()
    }
}

/// Per-joint, per-vertex skinning weights stored joint-major (`data[j * n + v]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights {
    pub joint_count: usize,
    pub vertex_count: usize,
    pub data: Vec<f64>,
}

impl SkinningWeights {
    pub fn weight(&self, joint: usize, vertex: usize) -> f64 {
        self.data[joint * self.vertex_count + vertex]
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(
            "skinning weights",
            self.joint_count * self.vertex_count,
            self.data.len(),
        )?;
        for v in 0..self.vertex_count {
            let mut sum = 0.0;
            for j in 0..self.joint_count {
                let w = self.weight(j, v);
                if !(w >= 0.0) {
                    return Err(Error::Validation(format!(
                        "skinning weight ({j}, {v}) = {w} is negative or NaN"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "skinning weights of vertex {v} sum to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Sparse linear map from vertices to joint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl JointRegressor {
    pub fn from_dense(joints: usize, vertices: usize, dense: &[f64]) -> Self {
        let rows = (0..joints)
            .map(|j| {
                dense[j * vertices..(j + 1) * vertices]
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(v, w)| (v, *w))
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn to_dense(&self, vertices: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * vertices];
        for (j, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                out[j * vertices + v] = w;
            }
        }
        out
    }

    pub fn apply(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(v, w)| vertices[v] * w).sum())
            .collect()
    }

    pub fn apply_transpose(&self, grad_joints: &[Vec3], vertex_count: usize) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); vertex_count];
        for (row, g) in self.rows.iter().zip(grad_joints) {
            for &(v, w) in row {
                out[v] += g * w;
            }
        }
        out
    }
}

/// Axis-angle rotation per joint; index 0 is the root (global) rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub rotations: Vec<Vec3>,
}

impl PoseParams {
    pub fn zeros(joint_count: usize) -> Self {
        Self {
            rotations: vec![Vec3::zeros(); joint_count],
        }
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::Validation(format!(
                "pose vector length {} is not a multiple of 3",
                values.len()
            )));
        }
        Ok(Self {
            rotations: values
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.rotations
            .iter()
            .flat_map(|r| [r.x, r.y, r.z])
            .collect()
    }

    pub fn global(&self) -> Vec3 {
        self.rotations[0]
    }
}

/// The full parametric head model. Joint 0 is the root; joints `1..=k` are
/// articulated and drive the `9k` pose-corrective blendshapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricHeadModel {
    pub template: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub shape_basis: Blendshapes,
    pub expression_basis: Blendshapes,
    pub pose_basis: Blendshapes,
    pub skinning_weights: SkinningWeights,
    pub joint_regressor: JointRegressor,
    pub parents: Vec<Option<usize>>,
    pub joint_names: Vec<String>,
    pub jaw_joint: usize,
    pub landmarks: Vec<LandmarkBinding>,
    pub uv: Vec<[f64; 2]>,
    pub eyelid_pairs: Vec<(usize, usize)>,
}

impl ParametricHeadModel {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    /// Number of joints including the root.
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Number of articulated (non-root) joints.
    pub fn articulated_joints(&self) -> usize {
        self.parents.len().saturating_sub(1)
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.count
    }

    pub fn expression_dim(&self) -> usize {
        self.expression_basis.count
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.joint_count()
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let n = self.template.len();
        let joints = self.joint_count();
        if joints == 0 {
            return Err(Error::Invariant("model has no joints".into()));
        }
        for tri in &self.triangles {
            for &i in tri {
                if i >= n {
                    return Err(Error::Invariant(format!(
                        "triangle index {i} out of range for {n} vertices"
                    )));
                }
            }
        }
        for (name, basis) in [
            ("shape", &self.shape_basis),
            ("expression", &self.expression_basis),
            ("pose", &self.pose_basis),
        ] {
            if basis.vertex_count != n || basis.data.len() != basis.count * n * 3 {
                return Err(Error::Invariant(format!(
                    "{name} basis has inconsistent size"
                )));
            }
        }
        if self.pose_basis.count != 9 * self.articulated_joints() {
            return Err(Error::Invariant(format!(
                "pose basis has {} components, expected {}",
                self.pose_basis.count,
                9 * self.articulated_joints()
            )));
        }
        if self.skinning_weights.joint_count != joints || self.skinning_weights.vertex_count != n {
            return Err(Error::Invariant("skinning weight shape mismatch".into()));
        }
        self.skinning_weights
            .validate()
            .map_err(|e| Error::Invariant(e.to_string()))?;
        if self.joint_regressor.rows.len() != joints {
            return Err(Error::Invariant(
                "joint regressor row count mismatch".into(),
            ));
        }
        for row in &self.joint_regressor.rows {
            if row.iter().any(|&(v, _)| v >= n) {
                return Err(Error::Invariant(
                    "joint regressor index out of range".into(),
                ));
            }
        }
        validate_parents(&self.parents).map_err(|e| Error::Invariant(e.to_string()))?;
        if self.parents[0].is_some() {
            return Err(Error::Invariant("joint 0 must be the root".into()));
        }
        if self.jaw_joint == 0 || self.jaw_joint >= joints {
            return Err(Error::Invariant(format!(
                "jaw joint {} is not an articulated joint",
                self.jaw_joint
            )));
        }
        if !self.joint_names.is_empty() && self.joint_names.len() != joints {
            return Err(Error::Invariant("joint name count mismatch".into()));
        }
        validate_landmarks(&self.landmarks, self.triangles.len())
            .map_err(|e| Error::Invariant(e.to_string()))?;
        if self.uv.len() != n {
            return Err(Error::Invariant("uv count mismatch".into()));
        }
        if self
            .uv
            .iter()
            .any(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return Err(Error::Invariant("uv coordinates outside [0,1]^2".into()));
        }
        for &(a, b) in &self.eyelid_pairs {
            if a >= self.landmarks.len() || b >= self.landmarks.len() {
                return Err(Error::Invariant("eyelid pair index out of range".into()));
            }
        }
        Ok(())
    }

    pub fn check_params(&self, shape: &[f64], pose: &PoseParams, expression: &[f64]) -> Result<()> {
        check_dim("shape parameters", self.shape_dim(), shape.len())?;
        check_dim(
            "expression parameters",
            self.expression_dim(),
            expression.len(),
        )?;
        check_dim("pose joints", self.joint_count(), pose.rotations.len())?;
        if pose
            .rotations
            .iter()
            .any(|r| !r.iter().all(|x| x.is_finite()))
        {
            return Err(Error::Validation("pose rotation is not finite".into()));
        }
        Ok(())
    }

    pub fn template_mesh(&self) -> Mesh {
        Mesh::new(
            self.template.clone(),
            self.triangles.clone(),
            self.uv.clone(),
        )
    }
}

pub fn validate_parents(parents: &[Option<usize>]) -> Result<()> {
    for (j, p) in parents.iter().enumerate() {
        match p {
            None if j != 0 => {
                return Err(Error::Validation(format!("joint {j} has no parent")));
            }
            Some(p) if *p >= j => {
                return Err(Error::Validation(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Joint positions regressed from the shaped, unposed vertices `T + B_S(beta)`.
pub fn joint_locations(model: &ParametricHeadModel, shape: &[f64]) -> Result<Vec<Vec3>> {
    check_dim("shape parameters", model.shape_dim(), shape.len())?;
    let mut shaped = model.template.clone();
    model.shape_basis.accumulate(shape, &mut shaped);
    Ok(model.joint_regressor.apply(&shaped))
}

/// Rotation-feature vector `vec(R_j - I)` over the articulated joints.
fn pose_features(rotations: &[Mat3]) -> Vec<f64> {
    rotations
        .iter()
        .skip(1)
        .flat_map(|r| flatten_row_major(&(r - Mat3::identity())))
        .collect()
}

/// Pose-corrective offsets `P * vec(R(theta) - R(0))`.
pub fn pose_correctives(model: &ParametricHeadModel, pose: &PoseParams) -> Result<Vec<Vec3>> {
    check_dim("pose joints", model.joint_count(), pose.rotations.len())?;
    let rotations: Vec<Mat3> = pose.rotations.iter().map(rodrigues).collect();
    let mut out = vec![Vec3::zeros(); model.vertex_count()];
    model
        .pose_basis
        .accumulate(&pose_features(&rotations), &mut out);
    Ok(out)
}

/// World transforms `G_j` of the kinematic chain (rotation, translation).
fn chain(rotations: &[Mat3], joints: &[Vec3], parents: &[Option<usize>]) -> Vec<(Mat3, Vec3)> {
    let mut world: Vec<(Mat3, Vec3)> = Vec::with_capacity(rotations.len());
    for j in 0..rotations.len() {
        let g = match parents[j] {
            None => (rotations[j], joints[j]),
            Some(p) => {
                let (rp, tp) = world[p];
                (rp * rotations[j], rp * (joints[j] - joints[p]) + tp)
            }
        };
        world.push(g);
    }
    world
}

/// Tangent of the skinning transforms `(M_j, c_j)` for a perturbation of the
/// joint rotations and joint positions.
fn chain_tangent(
    rotations: &[Mat3],
    joints: &[Vec3],
    parents: &[Option<usize>],
    world: &[(Mat3, Vec3)],
    d_rot: &[Mat3],
    d_joint: &[Vec3],
) -> Vec<(Mat3, Vec3)> {
    let mut d_world: Vec<(Mat3, Vec3)> = Vec::with_capacity(rotations.len());
    for j in 0..rotations.len() {
        let dg = match parents[j] {
            None => (d_rot[j], d_joint[j]),
            Some(p) => {
                let (rp, _) = world[p];
                let (drp, dtp) = d_world[p];
                let rel = joints[j] - joints[p];
                (
                    drp * rotations[j] + rp * d_rot[j],
                    drp * rel + rp * (d_joint[j] - d_joint[p]) + dtp,
                )
            }
        };
        d_world.push(dg);
    }
    d_world
        .iter()
        .zip(world)
        .enumerate()
        .map(|(j, ((dm, dt), (m, _)))| (*dm, dt - dm * joints[j] - m * d_joint[j]))
        .collect()
}

/// Skinning transforms with the rest pose removed: `x -> M_j x + c_j`.
fn skinning_transforms(world: &[(Mat3, Vec3)], joints: &[Vec3]) -> Vec<(Mat3, Vec3)> {
    world
        .iter()
        .zip(joints)
        .map(|((m, t), j)| (*m, t - m * j))
        .collect()
}

/// Skinning transforms in offset form `x -> A_j x + d_j` with
/// `A_j = M_j - I`, built from `R_j - I` so that every entry is exactly zero
/// at the rest pose.
fn offset_transforms(
    rotations: &[Mat3],
    joints: &[Vec3],
    parents: &[Option<usize>],
) -> Vec<(Mat3, Vec3)> {
    let mut out: Vec<(Mat3, Vec3)> = Vec::with_capacity(rotations.len());
    for j in 0..rotations.len() {
        let b = rotations[j] - Mat3::identity();
        let bj = b * joints[j];
        let t = match parents[j] {
            None => (b, -bj),
            Some(p) => {
                let (ap, dp) = out[p];
                (ap + ap * b + b, dp - (ap * bj + bj))
            }
        };
        out.push(t);
    }
    out
}

/// Blends the joint offsets; zero offsets leave the input bits untouched,
/// so the rest pose reproduces its input exactly.
fn skin(vertices: &[Vec3], offsets: &[(Mat3, Vec3)], weights: &SkinningWeights) -> Vec<Vec3> {
    vertices
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let mut offset = Vec3::zeros();
            for (j, (a, d)) in offsets.iter().enumerate() {
                let w = weights.weight(j, v);
                if w != 0.0 {
                    offset += (a * p + d) * w;
                }
            }
            p.zip_map(&offset, |x, o| if o == 0.0 { x } else { x + o })
        })
        .collect()
}

/// Linear blend skinning over a kinematic chain; the root rotation acts as
/// the global rotation.
pub fn blend_skinning(
    vertices: &[Vec3],
    joints: &[Vec3],
    pose: &PoseParams,
    weights: &SkinningWeights,
    parents: &[Option<usize>],
) -> Result<Vec<Vec3>> {
    weights.validate()?;
    validate_parents(parents)?;
    check_dim("skinning vertices", weights.vertex_count, vertices.len())?;
    check_dim("skinning joints", weights.joint_count, joints.len())?;
    check_dim("pose joints", parents.len(), pose.rotations.len())?;
    check_dim("joint positions", parents.len(), joints.len())?;
    let rotations: Vec<Mat3> = pose.rotations.iter().map(rodrigues).collect();
    Ok(skin(
        vertices,
        &offset_transforms(&rotations, joints, parents),
        weights,
    ))
}

/// Intermediate state of a geometry evaluation, kept for reverse-mode
/// differentiation.
#[derive(Debug, Clone)]
pub struct GeometryEval {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
    posed_rest: Vec<Vec3>,
    rotations: Vec<Mat3>,
    world: Vec<(Mat3, Vec3)>,
    transforms: Vec<(Mat3, Vec3)>,
    pose: PoseParams,
}

/// Cotangents of the geometry parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryGrads {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
}

/// Evaluates `W(T_P(beta, theta, psi), J(beta), theta, W)`.
pub fn decode_geometry(
    model: &ParametricHeadModel,
    shape: &[f64],
    pose: &PoseParams,
    expression: &[f64],
) -> Result<Mesh> {
    let eval = evaluate_geometry(model, shape, pose, expression)?;
    Ok(Mesh::new(
        eval.vertices,
        model.triangles.clone(),
        model.uv.clone(),
    ))
}

pub fn evaluate_geometry(
    model: &ParametricHeadModel,
    shape: &[f64],
    pose: &PoseParams,
    expression: &[f64],
) -> Result<GeometryEval> {
    model.check_params(shape, pose, expression)?;
    let mut shaped = model.template.clone();
    model.shape_basis.accumulate(shape, &mut shaped);
    let joints = model.joint_regressor.apply(&shaped);

    let rotations: Vec<Mat3> = pose.rotations.iter().map(rodrigues).collect();
    let mut posed_rest = shaped;
    model
        .expression_basis
        .accumulate(expression, &mut posed_rest);
    model
        .pose_basis
        .accumulate(&pose_features(&rotations), &mut posed_rest);

    let world = chain(&rotations, &joints, &model.parents);
    let transforms = skinning_transforms(&world, &joints);
    let vertices = skin(
        &posed_rest,
        &offset_transforms(&rotations, &joints, &model.parents),
        &model.skinning_weights,
    );
    Ok(GeometryEval {
        vertices,
        joints,
        posed_rest,
        rotations,
        world,
        transforms,
        pose: pose.clone(),
    })
}

impl GeometryEval {
    /// Reverse-mode derivative: cotangent on output vertices to cotangents on
    /// shape, expression and (flattened) pose parameters.
    pub fn backward(&self, model: &ParametricHeadModel, grad_vertices: &[Vec3]) -> GeometryGrads {
        let n = model.vertex_count();
        let nj = model.joint_count();
        let weights = &model.skinning_weights;

        let mut grad_rest = vec![Vec3::zeros(); n];
        let mut grad_m = vec![Mat3::zeros(); nj];
        let mut grad_c = vec![Vec3::zeros(); nj];
        for v in 0..n {
            let g = grad_vertices[v];
            let p = self.posed_rest[v];
            grad_rest[v] = g;
            for (j, (m, _)) in self.transforms.iter().enumerate() {
                let w = weights.weight(j, v);
                if w == 0.0 {
                    continue;
                }
                grad_rest[v] += (m.transpose() * g - g) * w;
                grad_m[j] += g * p.transpose() * w;
                grad_c[j] += g * w;
            }
        }

        let contract = |tangent: &[(Mat3, Vec3)]| -> f64 {
            tangent
                .iter()
                .zip(grad_m.iter().zip(&grad_c))
                .map(|((dm, dc), (gm, gc))| dm.component_mul(gm).sum() + dc.dot(gc))
                .sum()
        };

        // pose: chain transforms plus pose correctives
        let grad_features = model.pose_basis.project(&grad_rest);
        let zero_rot = vec![Mat3::zeros(); nj];
        let zero_joint = vec![Vec3::zeros(); nj];
        let mut grad_pose = vec![0.0; 3 * nj];
        for a in 0..nj {
            let jac = rodrigues_jacobian(&self.pose.rotations[a]);
            for (i, d_r) in jac.iter().enumerate() {
                let mut d_rot = zero_rot.clone();
                d_rot[a] = *d_r;
                let tangent = chain_tangent(
                    &self.rotations,
                    &self.joints,
                    &model.parents,
                    &self.world,
                    &d_rot,
                    &zero_joint,
                );
                let mut g = contract(&tangent);
                if a > 0 {
                    let feats = &grad_features[9 * (a - 1)..9 * a];
                    g += flatten_row_major(d_r)
                        .iter()
                        .zip(feats)
                        .map(|(d, gf)| d * gf)
                        .sum::<f64>();
                }
                grad_pose[3 * a + i] = g;
            }
        }

        // joints depend on the shaped vertices through the regressor
        let mut grad_joints = vec![Vec3::zeros(); nj];
        for (a, gj) in grad_joints.iter_mut().enumerate() {
            for i in 0..3 {
                let mut d_joint = zero_joint.clone();
                d_joint[a][i] = 1.0;
                let tangent = chain_tangent(
                    &self.rotations,
                    &self.joints,
                    &model.parents,
                    &self.world,
                    &zero_rot,
                    &d_joint,
                );
                gj[i] = contract(&tangent);
            }
        }
        let mut grad_shaped = model.joint_regressor.apply_transpose(&grad_joints, n);
        for (gs, gr) in grad_shaped.iter_mut().zip(&grad_rest) {
            *gs += gr;
        }

        GeometryGrads {
            shape: model.shape_basis.project(&grad_shaped),
            expression: model.expression_basis.project(&grad_rest),
            pose: grad_pose,
        }
    }
}
