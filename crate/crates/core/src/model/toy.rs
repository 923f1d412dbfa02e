//! Synthetic stand-in for licensed head-model assets.
//!
//! The toy head is an icosphere with the back cap removed, deformed into a
//! rough head shape. Its frame is image-aligned: `x` right, `y` down, `z`
//! towards the camera, so an identity pose renders upright. UVs come from an
//! azimuthal-equidistant projection about the face direction (`+z`), which
//! gives a single seam-free chart with the face at the centre and maps the
//! left-right mirror `x -> -x` onto the horizontal flip `u -> 1 - u`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{Blendshapes, JointRegressor, ParametricHeadModel, SkinningWeights};
use super::mesh::LandmarkBinding;
use super::rotation::Vec3;
use crate::render::albedo::AlbedoModel;
use crate::render::image::{Image, MapKind};

/// Vertices with `z` below this (on the unit sphere) are cut away.
const BACK_CAP_Z: f64 = -0.8;
/// Scale of the 2D landmark layout on the unit sphere.
const FACE_SPAN: f64 = 0.62;

pub const MOUTH_CORNERS: [usize; 2] = [48, 54];
pub const NOSE_TIP: usize = 30;
pub const EYELID_PAIRS: [(usize, usize); 4] = [(37, 41), (38, 40), (43, 47), (44, 46)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelSpec {
    pub seed: u64,
    pub subdivisions: u32,
    pub shape_dim: usize,
    pub expression_dim: usize,
    /// Articulated joints (excluding the root).
    pub joints: usize,
    pub albedo_dim: usize,
    pub uv_size: usize,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            subdivisions: 3,
            shape_dim: 100,
            expression_dim: 50,
            joints: 4,
            albedo_dim: 50,
            uv_size: 256,
        }
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unit icosphere with outward (counter-clockwise) winding.
pub fn icosphere(subdivisions: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) / 2.0).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut vertices);
            let bc = midpoint(f[1], f[2], &mut vertices);
            let ca = midpoint(f[2], f[0], &mut vertices);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (vertices, faces)
}

/// Polar angle (from `+z`) that maps to the rim of the UV disk.
fn uv_rim_angle() -> f64 {
    BACK_CAP_Z.acos() + 0.05
}

/// Azimuthal-equidistant UV of a unit-sphere direction.
pub fn sphere_to_uv(q: &Vec3) -> [f64; 2] {
    let phi = q.z.clamp(-1.0, 1.0).acos();
    let rho = (q.x * q.x + q.y * q.y).sqrt();
    let r = phi / uv_rim_angle();
    if rho < 1e-15 {
        return [0.5, 0.5];
    }
    [0.5 + 0.5 * r * q.x / rho, 0.5 + 0.5 * r * q.y / rho]
}

/// Inverse of [`sphere_to_uv`]; `None` outside the unit disk.
pub fn uv_to_sphere(uv: [f64; 2]) -> Option<Vec3> {
    let du = 2.0 * (uv[0] - 0.5);
    let dv = 2.0 * (uv[1] - 0.5);
    let r = (du * du + dv * dv).sqrt();
    if r > 1.0 {
        return None;
    }
    let phi = r * uv_rim_angle();
    if r < 1e-15 {
        return Some(Vec3::z());
    }
    Some(Vec3::new(phi.sin() * du / r, phi.sin() * dv / r, phi.cos()))
}

/// 2D layout of the 68 landmarks in face coordinates (x right, y down).
pub fn landmark_layout() -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(68);
    // jawline 0..=16
    for i in 0..17 {
        let t = i as f64 / 16.0;
        pts.push([-0.95 * (PI * t).cos(), -0.1 + 0.95 * (PI * t).sin()]);
    }
    // brows 17..=26
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = if side < 0.0 {
                -0.75 + 0.6 * t
            } else {
                0.15 + 0.6 * t
            };
            pts.push([x, -0.47 - 0.08 * (PI * t).sin()]);
        }
    }
    // nose bridge 27..=30 and nostrils 31..=35
    for i in 0..4 {
        pts.push([0.0, -0.3 + 0.4 * i as f64 / 3.0]);
    }
    for i in 0..5 {
        let x = -0.2 + 0.1 * i as f64;
        pts.push([x, 0.22 + 0.03 * (1.0 - (x / 0.2).abs())]);
    }
    // eyes 36..=47
    let eye = |cx: f64, right_side: bool| -> Vec<[f64; 2]> {
        let (rx, ry, cy) = (0.16, 0.07, -0.22);
        let outer = if right_side { cx - rx } else { cx + rx };
        let inner = if right_side { cx + rx } else { cx - rx };
        let step = if right_side { rx / 3.0 } else { -rx / 3.0 };
        vec![
            [outer, cy],
            [cx - step, cy - ry],
            [cx + step, cy - ry],
            [inner, cy],
            [cx + step, cy + ry],
            [cx - step, cy + ry],
        ]
    };
    pts.extend(eye(-0.42, true));
    let mut left = eye(0.42, false);
    // reorder so 42 is the inner corner and the sequence runs clockwise in the image
    left = vec![left[3], left[2], left[1], left[0], left[5], left[4]];
    pts.extend(left);
    // outer lip 48..=59
    let (cx, cy, rx, ry) = (0.0, 0.5, 0.35, 0.13);
    for m in 0..7 {
        let a = PI - PI * m as f64 / 6.0;
        pts.push([cx + rx * a.cos(), cy - ry * a.sin()]);
    }
    for m in 1..6 {
        let a = -PI * m as f64 / 6.0;
        pts.push([cx + rx * a.cos(), cy - ry * a.sin()]);
    }
    // inner lip 60..=67
    let (rx, ry) = (0.22, 0.05);
    for a in [
        PI,
        0.75 * PI,
        0.5 * PI,
        0.25 * PI,
        0.0,
        -0.25 * PI,
        -0.5 * PI,
        -0.75 * PI,
    ] {
        pts.push([cx + rx * a.cos(), cy - ry * a.sin()]);
    }
    pts
}

/// Sphere direction of a point of the 2D landmark layout.
pub fn layout_to_sphere(p: [f64; 2]) -> Vec3 {
    let x = FACE_SPAN * p[0];
    let y = FACE_SPAN * p[1];
    Vec3::new(x, y, (1.0 - x * x - y * y).max(0.0).sqrt())
}

/// Default per-landmark weights: mouth corners and nose tip 3, other mouth
/// and nose landmarks 1.5, the rest 1.
pub fn default_landmark_weights() -> Vec<f64> {
    (0..68)
        .map(|i| {
            if MOUTH_CORNERS.contains(&i) || i == NOSE_TIP {
                3.0
            } else if (27..=35).contains(&i) || (48..=67).contains(&i) {
                1.5
            } else {
                1.0
            }
        })
        .collect()
}

/// Band-limited random scalar field on the unit sphere.
struct SmoothField {
    terms: Vec<(Vec3, f64, f64)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, max_freq: f64, terms: usize) -> Self {
        let norm = (terms as f64).sqrt();
        Self {
            terms: (0..terms)
                .map(|_| {
                    let w = Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ) * max_freq;
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let amp = rng.gen_range(-1.0..1.0) * 1.7 / norm;
                    (w, phase, amp)
                })
                .collect(),
        }
    }

    fn eval(&self, q: &Vec3) -> f64 {
        self.terms
            .iter()
            .map(|(w, phase, amp)| amp * (w.dot(q) + phase).cos())
            .sum()
    }
}

fn gaussian(q: &Vec3, center: &Vec3, sigma: f64) -> f64 {
    (-(q - center).norm_squared() / (2.0 * sigma * sigma)).exp()
}

/// Deforms a unit-sphere point into the toy head surface.
fn head_surface(q: &Vec3) -> Vec3 {
    let front = sigmoid((q.z - 0.4) / 0.08);
    let nose = 0.2
        * (-(q.x * q.x) / 0.006 - (q.y - 0.0).powi(2) / 0.03).exp()
        * sigmoid((q.y + 0.2) / 0.04)
        * front;
    let brow = 0.035
        * (-(q.y + 0.31).powi(2) / 0.004).exp()
        * (1.0 - (q.x / 0.6).powi(2)).max(0.0)
        * front;
    let eyes = -0.045
        * (gaussian(q, &layout_to_sphere([-0.42, -0.22]), 0.07)
            + gaussian(q, &layout_to_sphere([0.42, -0.22]), 0.07));
    let lips = 0.03 * gaussian(q, &layout_to_sphere([0.0, 0.5]), 0.09) * front;
    let chin = 0.04 * gaussian(q, &layout_to_sphere([0.0, 0.95]), 0.12);
    let base = Vec3::new(0.86 * q.x, 1.06 * q.y, 0.94 * q.z);
    base + Vec3::new(0.0, 0.0, nose + brow + lips) + q * (eyes + chin)
}

struct Surface {
    sphere: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

fn cut_sphere(subdivisions: u32) -> Surface {
    let (v, f) = icosphere(subdivisions);
    let kept: Vec<[usize; 3]> = f
        .into_iter()
        .filter(|t| t.iter().all(|&i| v[i].z >= BACK_CAP_Z))
        .collect();
    let mut used = vec![false; v.len()];
    for t in &kept {
        for &i in t {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; v.len()];
    let mut sphere = Vec::new();
    for (old, p) in v.iter().enumerate() {
        if used[old] {
            remap[old] = sphere.len();
            sphere.push(*p);
        }
    }
    let triangles = kept.iter().map(|t| t.map(|i| remap[i])).collect();
    Surface { sphere, triangles }
}

/// Locates a layout point on the front of the sphere by casting along `-z`.
fn bind_landmark(surface: &Surface, p: [f64; 2]) -> LandmarkBinding {
    let q = layout_to_sphere(p);
    let mut best: Option<(f64, LandmarkBinding)> = None;
    for (ti, t) in surface.triangles.iter().enumerate() {
        let [a, b, c] = t.map(|i| surface.sphere[i]);
        if a.z < 0.0 || b.z < 0.0 || c.z < 0.0 {
            continue;
        }
        let det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        if det.abs() < 1e-14 {
            continue;
        }
        let l1 = ((q.x - a.x) * (c.y - a.y) - (c.x - a.x) * (q.y - a.y)) / det;
        let l2 = ((b.x - a.x) * (q.y - a.y) - (q.x - a.x) * (b.y - a.y)) / det;
        let l0 = 1.0 - l1 - l2;
        let worst = l0.min(l1).min(l2);
        if best.as_ref().is_none_or(|(w, _)| worst > *w) {
            let bary = [l0.max(0.0), l1.max(0.0), l2.max(0.0)];
            let s: f64 = bary.iter().sum();
            let bary = bary.map(|w| f32_round(w / s));
            let fix = 1.0 - bary[1] - bary[2];
            best = Some((
                worst,
                LandmarkBinding {
                    triangle: ti,
                    bary: [fix.max(0.0), bary[1], bary[2]],
                },
            ));
        }
    }
    best.expect("front of the sphere has triangles").1
}

fn joint_setup(k: usize) -> (Vec<String>, Vec<Option<usize>>, usize) {
    let mut names = vec!["root".to_string()];
    let mut parents = vec![None];
    let jaw;
    if k == 1 {
        names.push("jaw".into());
        parents.push(Some(0));
        jaw = 1;
    } else {
        names.push("neck".into());
        parents.push(Some(0));
        names.push("jaw".into());
        parents.push(Some(1));
        jaw = 2;
        for (i, name) in ["eye_right", "eye_left"].iter().enumerate() {
            if 3 + i <= k {
                names.push((*name).into());
                parents.push(Some(1));
            }
        }
        for j in 5..=k {
            names.push(format!("joint{j}"));
            parents.push(Some(0));
        }
    }
    (names, parents, jaw)
}

/// Builds a deterministic toy head model from `spec`.
pub fn synthesize_toy_model(spec: &ToyModelSpec) -> ParametricHeadModel {
    assert!(spec.joints >= 1, "the toy model needs at least a jaw joint");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surface = cut_sphere(spec.subdivisions);
    let n = surface.sphere.len();
    let q = &surface.sphere;

    let template: Vec<Vec3> = q.iter().map(|p| head_surface(p).map(f32_round)).collect();
    let uv: Vec<[f64; 2]> = q.iter().map(|p| sphere_to_uv(p).map(f32_round)).collect();

    let landmarks: Vec<LandmarkBinding> = landmark_layout()
        .into_iter()
        .map(|p| bind_landmark(&surface, p))
        .collect();

    let (joint_names, parents, jaw_joint) = joint_setup(spec.joints);
    let nj = parents.len();

    // joint regressor: each joint is the mean of a vertex cluster
    let eye_centers = [
        layout_to_sphere([-0.42, -0.22]),
        layout_to_sphere([0.42, -0.22]),
    ];
    let extra_centers: Vec<Vec3> = (5..=spec.joints.max(4))
        .map(|_| {
            Vec3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(0.3..0.8),
            )
            .normalize()
        })
        .collect();
    let cluster = |name: &str, j: usize| -> Vec<usize> {
        let sel: Vec<usize> = (0..n)
            .filter(|&v| {
                let p = &q[v];
                match name {
                    "root" => true,
                    "neck" => p.y > 0.75,
                    "jaw" => p.x.abs() > 0.75 && (p.y - 0.1).abs() < 0.3,
                    "eye_right" => (p - eye_centers[0]).norm() < 0.2,
                    "eye_left" => (p - eye_centers[1]).norm() < 0.2,
                    _ => {
                        (p - extra_centers[j.saturating_sub(5).min(extra_centers.len() - 1)]).norm()
                            < 0.25
                    }
                }
            })
            .collect();
        if sel.is_empty() {
            // fall back to the nearest vertex of the region centre
            vec![0]
        } else {
            sel
        }
    };
    let mut regressor_dense = vec![0.0; nj * n];
    for (j, name) in joint_names.iter().enumerate() {
        let sel = cluster(name, j);
        let w = f32_round(1.0 / sel.len() as f64);
        for v in sel {
            regressor_dense[j * n + v] = w;
        }
    }
    let joint_regressor = JointRegressor::from_dense(nj, n, &regressor_dense);

    // skinning weights
    let mut weights = vec![0.0; nj * n];
    for v in 0..n {
        let p = &q[v];
        let mut raw = vec![0.0; nj];
        for (j, name) in joint_names.iter().enumerate().skip(1) {
            raw[j] = match name.as_str() {
                "jaw" => sigmoid((p.y - 0.28) / 0.07) * sigmoid((p.z + 0.1) / 0.1),
                "neck" => sigmoid((p.y - 0.85) / 0.04),
                "eye_right" => 0.9 * gaussian(p, &eye_centers[0], 0.06),
                "eye_left" => 0.9 * gaussian(p, &eye_centers[1], 0.06),
                _ => 0.5 * gaussian(p, &extra_centers[(j - 5).min(extra_centers.len() - 1)], 0.1),
            };
        }
        let total: f64 = raw.iter().sum();
        if total > 1.0 {
            for w in raw.iter_mut() {
                *w /= total;
            }
        }
        let mut sum = 0.0;
        for j in 1..nj {
            let w = f32_round(raw[j]);
            weights[j * n + v] = w;
            sum += w;
        }
        weights[v] = f32_round((1.0 - sum).max(0.0));
    }
    let skinning_weights = SkinningWeights {
        joint_count: nj,
        vertex_count: n,
        data: weights,
    };

    // blendshapes
    let mut shape_basis = Blendshapes::zeros(spec.shape_dim, n);
    for c in 0..spec.shape_dim {
        let amp = 0.04 / (1.0 + 0.15 * c as f64);
        let radial = SmoothField::random(&mut rng, 2.5, 6);
        let lateral = SmoothField::random(&mut rng, 2.0, 4);
        let comp = shape_basis.component_mut(c);
        for v in 0..n {
            let p = &q[v];
            let d = p * radial.eval(p) * amp + Vec3::new(lateral.eval(p), 0.0, 0.0) * (0.3 * amp);
            comp[3 * v..3 * v + 3].copy_from_slice(&[
                f32_round(d.x),
                f32_round(d.y),
                f32_round(d.z),
            ]);
        }
    }
    let mut expression_basis = Blendshapes::zeros(spec.expression_dim, n);
    for c in 0..spec.expression_dim {
        let amp = 0.035 / (1.0 + 0.1 * c as f64);
        let fx = SmoothField::random(&mut rng, 4.0, 6);
        let fy = SmoothField::random(&mut rng, 4.0, 6);
        let fz = SmoothField::random(&mut rng, 4.0, 6);
        let comp = expression_basis.component_mut(c);
        for v in 0..n {
            let p = &q[v];
            let window = sigmoid((p.z - 0.45) / 0.08);
            let d = Vec3::new(0.5 * fx.eval(p), 0.5 * fy.eval(p), fz.eval(p)) * (amp * window);
            comp[3 * v..3 * v + 3].copy_from_slice(&[
                f32_round(d.x),
                f32_round(d.y),
                f32_round(d.z),
            ]);
        }
    }
    let mut pose_basis = Blendshapes::zeros(9 * (nj - 1), n);
    for c in 0..pose_basis.count {
        let joint = 1 + c / 9;
        let f = SmoothField::random(&mut rng, 3.0, 4);
        let comp = pose_basis.component_mut(c);
        for v in 0..n {
            let p = &q[v];
            let w = skinning_weights.weight(joint, v);
            let d = p * (0.01 * w * f.eval(p));
            comp[3 * v..3 * v + 3].copy_from_slice(&[
                f32_round(d.x),
                f32_round(d.y),
                f32_round(d.z),
            ]);
        }
    }

    ParametricHeadModel {
        template,
        triangles: surface.triangles,
        shape_basis,
        expression_basis,
        pose_basis,
        skinning_weights,
        joint_regressor,
        parents,
        joint_names,
        jaw_joint,
        landmarks,
        uv,
        eyelid_pairs: EYELID_PAIRS.to_vec(),
    }
}

/// Builds the matching toy albedo model: a skin tone with facial features,
/// fine texture for photometric cues, and smooth random colour bases.
pub fn synthesize_toy_albedo(spec: &ToyModelSpec) -> AlbedoModel {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x00A1_BED0);
    let d = spec.uv_size;
    let variation = [
        SmoothField::random(&mut rng, 3.0, 8),
        SmoothField::random(&mut rng, 3.0, 8),
        SmoothField::random(&mut rng, 3.0, 8),
    ];
    let texture = SmoothField::random(&mut rng, 14.0, 24);
    let layout = landmark_layout();
    let brow_pts: Vec<Vec3> = layout[17..27]
        .iter()
        .map(|p| layout_to_sphere(*p))
        .collect();
    let lip = layout_to_sphere([0.0, 0.5]);
    let eyes = [
        layout_to_sphere([-0.42, -0.22]),
        layout_to_sphere([0.42, -0.22]),
    ];

    let texel_dir = |x: usize, y: usize| {
        uv_to_sphere([(x as f64 + 0.5) / d as f64, (y as f64 + 0.5) / d as f64])
    };
    let mut mean = Image::square(d, 3, MapKind::Albedo);
    for y in 0..d {
        for x in 0..d {
            let Some(q) = texel_dir(x, y) else { continue };
            let mut rgb = [0.78, 0.57, 0.47];
            let t = 0.05 * texture.eval(&q);
            for (c, v) in rgb.iter_mut().enumerate() {
                *v += 0.04 * variation[c].eval(&q) + t;
            }
            let brow = brow_pts
                .iter()
                .map(|b| gaussian(&q, b, 0.035))
                .fold(0.0, f64::max);
            let lips = gaussian(&q, &lip, 0.07);
            let eye = eyes
                .iter()
                .map(|e| gaussian(&q, e, 0.045))
                .fold(0.0, f64::max);
            rgb[0] += 0.12 * lips;
            rgb[1] -= 0.15 * lips;
            rgb[2] -= 0.08 * lips;
            for v in rgb.iter_mut() {
                *v *= 1.0 - 0.6 * brow;
                *v = *v * (1.0 - eye) + 0.25 * eye;
            }
            for c in 0..3 {
                mean.set(x, y, c, f32_round(rgb[c].clamp(0.0, 1.0)));
            }
        }
    }
    let basis = (0..spec.albedo_dim)
        .map(|c| {
            let amp = 0.05 / (1.0 + 0.1 * c as f64);
            let fields = [
                SmoothField::random(&mut rng, 3.0, 5),
                SmoothField::random(&mut rng, 3.0, 5),
                SmoothField::random(&mut rng, 3.0, 5),
            ];
            let mut img = Image::square(d, 3, MapKind::Albedo);
            for y in 0..d {
                for x in 0..d {
                    let Some(q) = texel_dir(x, y) else { continue };
                    for ch in 0..3 {
                        img.set(x, y, ch, f32_round(amp * fields[ch].eval(&q)));
                    }
                }
            }
            img
        })
        .collect();
    AlbedoModel { mean, basis }
}
