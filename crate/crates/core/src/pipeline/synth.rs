//! Seeded synthetic fixtures: random codes, their renders, and perturbed
//! initializations.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::code::LatentCode;
use crate::detail::{detail_normal_map, render_detail, DecoderArch, DetailDecoder};
use crate::error::Result;
use crate::render::{Camera, Image, Lighting, Renderer};

use super::detail::{DetailScene, SubjectImage, SubjectSet};

/// Spread of the random codes drawn by [`random_code`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub shape_sigma: f64,
    pub expression_sigma: f64,
    pub albedo_sigma: f64,
    /// Bound of each head rotation component (radians).
    pub head_rotation: f64,
    /// Upper bound of the jaw opening (radians).
    pub jaw_opening: f64,
    /// Scale as a fraction of the image size per model unit.
    pub scale_fraction: f64,
    pub translation_jitter: f64,
    pub ambient: f64,
    pub directional: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shape_sigma: 1.0,
            expression_sigma: 0.7,
            albedo_sigma: 1.0,
            head_rotation: 0.12,
            jaw_opening: 0.15,
            scale_fraction: 0.4,
            translation_jitter: 4.0,
            ambient: 3.3,
            directional: 0.5,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random lighting: a dominant ambient term with some directional shading.
pub fn random_lighting(rng: &mut impl Rng, ambient: f64, directional: f64) -> Lighting {
    let mut l = Lighting::zeros();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
    for c in 0..3 {
        l.coeffs[0][c] = ambient + tint[c];
    }
    let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * directional);
    for k in 1..4 {
        for c in 0..3 {
            l.coeffs[k][c] = dir[k - 1];
        }
    }
    for k in 4..9 {
        let v = rng.gen_range(-0.15..0.15) * directional;
        for c in 0..3 {
            l.coeffs[k][c] = v;
        }
    }
    l
}

/// Draws a code whose render is a plausibly framed face on `renderer`.
pub fn random_code(renderer: &Renderer, spec: &SynthSpec, rng: &mut impl Rng) -> LatentCode {
    let model = renderer.model;
    let mut code = LatentCode::for_model(model, renderer.albedo);
    for v in &mut code.shape {
        *v = spec.shape_sigma * normal(rng);
    }
    for v in &mut code.expression {
        *v = spec.expression_sigma * normal(rng);
    }
    for v in &mut code.albedo {
        *v = spec.albedo_sigma * normal(rng);
    }
    let h = spec.head_rotation;
    code.set_joint_rotation(
        0,
        [
            rng.gen_range(-h..h),
            rng.gen_range(-h..h),
            rng.gen_range(-h..h) * 0.5,
        ],
    );
    code.set_joint_rotation(
        model.jaw_joint,
        [rng.gen_range(0.0..spec.jaw_opening.max(1e-9)), 0.0, 0.0],
    );
    code.light = random_lighting(rng, spec.ambient, spec.directional);
    let size = renderer.width as f64;
    let j = spec.translation_jitter;
    code.camera = Camera::new(
        spec.scale_fraction * size * rng.gen_range(0.95..1.05),
        [
            0.5 * size + rng.gen_range(-j..j.max(1e-9)),
            0.5 * size + rng.gen_range(-j..j.max(1e-9)),
        ],
    );
    code
}

/// Size of the perturbation applied by [`perturb_code`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub shape: f64,
    pub expression: f64,
    pub pose: f64,
    pub albedo: f64,
    /// Relative change of every lighting coefficient.
    pub light: f64,
    /// Relative change of the camera scale.
    pub scale: f64,
    pub translation: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            shape: 0.3,
            expression: 0.3,
            pose: 0.03,
            albedo: 0.3,
            light: 0.1,
            scale: 0.03,
            translation: 3.0,
        }
    }
}

pub fn perturb_code(
    code: &LatentCode,
    jaw: usize,
    p: &Perturbation,
    rng: &mut impl Rng,
) -> LatentCode {
    let mut out = code.clone();
    for v in &mut out.shape {
        *v += p.shape * normal(rng);
    }
    for v in &mut out.expression {
        *v += p.expression * normal(rng);
    }
    for v in &mut out.albedo {
        *v += p.albedo * normal(rng);
    }
    // neck and eye joints keep their values
    for joint in [0, jaw] {
        let r = out.joint_rotation(joint);
        out.set_joint_rotation(joint, r.map(|v| v + p.pose * normal(rng)));
    }
    for c in out.light.coeffs.iter_mut().flatten() {
        *c *= 1.0 + p.light * normal(rng);
    }
    out.camera.scale *= 1.0 + p.scale * normal(rng);
    for t in &mut out.camera.translation {
        *t += p.translation * normal(rng);
    }
    out
}

/// A rendered synthetic observation with its generating code.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub code: LatentCode,
    pub image: Image,
    pub landmarks: Vec<[f64; 2]>,
    /// Coverage of the render, used as the skin mask.
    pub mask: Image,
}

pub fn render_synthetic(renderer: &Renderer, code: &LatentCode) -> Result<SyntheticImage> {
    let state = renderer.forward(code)?;
    Ok(SyntheticImage {
        code: code.clone(),
        mask: state.coverage(),
        landmarks: state.landmarks_2d.clone(),
        image: state.image,
    })
}

/// Layout of the separable detail fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetailFixtureSpec {
    pub seed: u64,
    pub subjects: usize,
    pub train_expressions: usize,
    pub heldout_expressions: usize,
    /// Detail-code entries carrying the subject field.
    pub subject_dims: usize,
    /// Expression entries carrying the expression field.
    pub expression_dims: usize,
    /// Peak pre-activation of each field.
    pub amplitude: f64,
    pub max_frequency: usize,
}

impl Default for DetailFixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 3,
            train_expressions: 3,
            heldout_expressions: 1,
            subject_dims: 4,
            expression_dims: 2,
            amplitude: 1.0,
            max_frequency: 5,
        }
    }
}

/// Images whose ground-truth displacement is `f(subject) + g(expression)`
/// before the output `tanh`, produced by a linear decoder.
#[derive(Debug, Clone)]
pub struct DetailFixture {
    pub truth: DetailDecoder,
    pub subject_codes: Vec<Vec<f64>>,
    pub train: Vec<SubjectSet>,
    pub heldout: Vec<SubjectSet>,
}

/// Left-right symmetric random field on the UV square.
fn symmetric_field(size: usize, max_freq: usize, rng: &mut impl Rng) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1..=max_freq) as f64,
                rng.gen_range(1..=max_freq) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let tau = std::f64::consts::TAU;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let v = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            out[y * size + x] = terms
                .iter()
                .map(|(fu, fv, ph, a)| a * (tau * fu * u).cos() * (tau * fv * v + ph).cos())
                .sum::<f64>()
                / 2.0;
        }
    }
    out
}

/// Builds the separable fixture on `renderer` (whose UV size sets the
/// displacement resolution).
pub fn separable_detail_fixture(
    renderer: &Renderer,
    spec: &DetailFixtureSpec,
) -> Result<DetailFixture> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let model = renderer.model;
    let d = renderer.uv_size();
    let ne = model.expression_dim();
    let input_dim = crate::code::DETAIL_DIM + ne + 3;
    let mut truth = DetailDecoder::zeros(DecoderArch::Linear, input_dim, d)?;
    let mut set_column = |col: usize, field: &[f64]| {
        for (t, v) in field.iter().enumerate() {
            truth.params[t * input_dim + col] = spec.amplitude * v;
        }
    };
    for k in 0..spec.subject_dims {
        set_column(k, &symmetric_field(d, spec.max_frequency, &mut rng));
    }
    for k in 0..spec.expression_dims {
        set_column(
            crate::code::DETAIL_DIM + k,
            &symmetric_field(d, spec.max_frequency, &mut rng),
        );
    }
    let n_expr = spec.train_expressions + spec.heldout_expressions;
    let expressions: Vec<Vec<f64>> = (0..n_expr)
        .map(|_| {
            let mut psi = vec![0.0; ne];
            for v in psi.iter_mut().take(spec.expression_dims) {
                *v = normal(&mut rng);
            }
            psi
        })
        .collect();
    let light = {
        let mut l = Lighting::ambient([2.6; 3]);
        for c in 0..3 {
            l.coeffs[1][c] = -0.9;
            l.coeffs[3][c] = 0.9;
            l.coeffs[2][c] = 0.6;
        }
        l
    };
    let size = renderer.width as f64;
    let mut subject_codes = Vec::new();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for s in 0..spec.subjects {
        let mut delta = vec![0.0; crate::code::DETAIL_DIM];
        for v in delta.iter_mut().take(spec.subject_dims) {
            *v = normal(&mut rng);
        }
        let mut base = LatentCode::for_model(model, renderer.albedo);
        for v in &mut base.shape {
            *v = 0.5 * normal(&mut rng);
        }
        base.light = light;
        base.camera = Camera::new(0.4 * size, [0.5 * size, 0.5 * size]);
        let mut images = Vec::new();
        for psi in &expressions {
            let mut code = base.clone();
            code.expression.clone_from(psi);
            let disp = truth.decode(
                &delta,
                &code.expression,
                &code.joint_rotation(model.jaw_joint),
            )?;
            let scene = DetailScene::new(renderer, &code)?;
            let nm = detail_normal_map(
                &scene.positions_uv,
                &scene.state.normals_uv,
                &disp,
                &renderer.mask_uv,
            );
            let image = render_detail(renderer, &scene.state, &nm.normals)?.image;
            images.push(SubjectImage {
                image,
                landmarks: scene.state.landmarks_2d.clone(),
                mask: scene.state.coverage(),
                code: Some(LatentCode {
                    detail: Vec::new(),
                    ..code
                }),
            });
        }
        let held = images.split_off(spec.train_expressions);
        train.push(SubjectSet {
            subject: format!("subject{s}"),
            images,
        });
        heldout.push(SubjectSet {
            subject: format!("subject{s}"),
            images: held,
        });
        subject_codes.push(delta);
    }
    Ok(DetailFixture {
        truth,
        subject_codes,
        train,
        heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::Toy;

    #[test]
    fn random_codes_are_valid_and_seeded() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let a = random_code(
            &r,
            &SynthSpec::default(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(4),
        );
        let b = random_code(
            &r,
            &SynthSpec::default(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(4),
        );
        assert_eq!(a, b);
        a.validate(&toy.model, &toy.albedo).unwrap();
        let obs = render_synthetic(&r, &a).unwrap();
        assert!(obs.mask.data.iter().sum::<f64>() > 100.0);
    }

    #[test]
    fn perturbation_leaves_frozen_joints() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = random_code(&r, &SynthSpec::default(), &mut rng);
        let jaw = toy.model.jaw_joint;
        let b = perturb_code(&a, jaw, &Perturbation::default(), &mut rng);
        for j in (1..toy.model.joint_count()).filter(|&j| j != jaw) {
            assert_eq!(a.joint_rotation(j), b.joint_rotation(j));
        }
        assert_ne!(a.joint_rotation(0), b.joint_rotation(0));
        assert_ne!(a.shape, b.shape);
    }

    #[test]
    fn fixture_layout() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let spec = DetailFixtureSpec {
            subjects: 2,
            train_expressions: 2,
            ..Default::default()
        };
        let fx = separable_detail_fixture(&r, &spec).unwrap();
        assert_eq!(fx.train.len(), 2);
        assert_eq!(fx.heldout[0].images.len(), 1);
        assert_eq!(fx.train[1].images.len(), 2);
        // subjects share expressions, expressions share the subject shape
        let c = |s: usize, k: usize| fx.train[s].images[k].code.clone().unwrap();
        assert_eq!(c(0, 0).expression, c(1, 0).expression);
        assert_eq!(c(0, 0).shape, c(0, 1).shape);
        assert_ne!(c(0, 0).shape, c(1, 0).shape);
        // truth fields are left-right symmetric
        let d = fx
            .truth
            .decode(&fx.subject_codes[0], &c(0, 0).expression, &[0.0; 3])
            .unwrap();
        let s = d.width;
        for y in 0..s {
            for x in 0..s {
                assert!((d.data[y * s + x] - d.data[y * s + s - 1 - x]).abs() < 1e-12);
            }
        }
    }
}
