//! Exact and oracle-based checks that run in well under a second each.

use std::time::Instant;

use facefit::detail::{detail_normal_map, render_detail, DecoderArch, DetailDecoder};
use facefit::eval::{
    cumulative_curve, error_stats, rigid_align, scan_to_mesh_distance, AlignOptions, RigidTransform,
};
use facefit::losses::{detail_regularizer, eye_closure_loss, landmark_loss, symmetry_loss};
use facefit::model::{
    decode_geometry, rodrigues, synthesize_toy_albedo, synthesize_toy_model, Mat3, Mesh,
    PoseParams, ToyModelSpec, Vec3,
};
use facefit::pipeline::synth::{random_code, SynthSpec};
use facefit::pipeline::{retarget, retarget_code, DetailScene};
use facefit::render::{Image, MapKind, Renderer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn model_zero_case() -> Outcome {
    let t = Instant::now();
    let model = synthesize_toy_model(&ToyModelSpec::default());
    let build = t.elapsed();
    let t = Instant::now();
    let mesh = decode_geometry(
        &model,
        &vec![0.0; model.shape_dim()],
        &PoseParams::zeros(model.joint_count()),
        &vec![0.0; model.expression_dim()],
    )
    .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let bit_equal = mesh.vertices.len() == model.template.len()
        && mesh
            .vertices
            .iter()
            .zip(&model.template)
            .all(|(a, b)| (0..3).all(|k| a[k].to_bits() == b[k].to_bits()));
    ensure(bit_equal, || {
        "decoded vertices differ from the template".into()
    })?;
    ensure(elapsed.as_secs_f64() < 1.0, || {
        format!("decode took {elapsed:?}")
    })?;
    Ok(format!(
        "{} vertices bit-equal, decode {elapsed:?} (model synthesis {build:?})",
        mesh.vertices.len()
    ))
}

pub fn detail_zero_case() -> Outcome {
    let spec = ToyModelSpec {
        uv_size: 64,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for _ in 0..3 {
        let code = random_code(&r, &SynthSpec::default(), &mut rng);
        let scene = DetailScene::new(&r, &code).map_err(|e| e.to_string())?;
        let st = &scene.state;
        let zero = Image::square(64, 1, MapKind::Displacement);
        let nm = detail_normal_map(&scene.positions_uv, &st.normals_uv, &zero, &r.mask_uv);
        let img = render_detail(&r, st, &nm.normals)
            .map_err(|e| e.to_string())?
            .image;
        ensure(bits(&img.data) == bits(&st.image.data), || {
            "D = 0 render differs from the coarse render".into()
        })?;

        let mut disp = zero.clone();
        for v in &mut disp.data {
            *v = rng.gen_range(-0.01..0.01);
        }
        let nm = detail_normal_map(&scene.positions_uv, &st.normals_uv, &disp, &r.mask_uv);
        let img = render_detail(&r, st, &nm.normals)
            .map_err(|e| e.to_string())?
            .image;
        let coverage = st.coverage();
        let mut changed = 0;
        for p in 0..coverage.data.len() {
            let differs =
                (0..3).any(|c| img.data[3 * p + c].to_bits() != st.image.data[3 * p + c].to_bits());
            if coverage.data[p] == 0.0 {
                ensure(!differs, || {
                    format!("background pixel {p} changed under random D")
                })?;
            } else if differs {
                changed += 1;
            }
        }
        ensure(changed > 0, || "random D left the render unchanged".into())?;
        checked += 1;
    }
    Ok(format!(
        "{checked} codes: D = 0 bit-equal, random D changes only covered pixels"
    ))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn retarget_algebra() -> Outcome {
    let spec = ToyModelSpec {
        uv_size: 32,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut code = || {
        let mut c = random_code(&r, &SynthSpec::default(), &mut rng);
        for v in &mut c.detail {
            *v = rng.gen_range(-1.0..1.0);
        }
        c
    };
    let (a, b, c) = (code(), code(), code());
    let input_dim = a.detail.len() + model.expression_dim() + 3;
    let dec =
        DetailDecoder::seeded(DecoderArch::Linear, input_dim, 32, 3).map_err(|e| e.to_string())?;
    let jaw = model.jaw_joint;
    let err = |e: facefit::Error| e.to_string();

    let (aa, d) = retarget(&model, &a, &a, &dec).map_err(err)?;
    ensure(aa == a, || "retarget(A, A) differs from A".into())?;
    let direct = dec
        .decode(&a.detail, &a.expression, &a.joint_rotation(jaw))
        .map_err(err)?;
    ensure(bits(&d.data) == bits(&direct.data), || {
        "retarget(A, A) displacement differs".into()
    })?;

    let ab = retarget_code(&model, &a, &b).map_err(err)?;
    ensure(ab.expression == b.expression, || {
        "expression not taken from the source".into()
    })?;
    ensure(ab.joint_rotation(jaw) == b.joint_rotation(jaw), || {
        "jaw not taken from the source".into()
    })?;
    ensure(
        ab.shape == a.shape
            && ab.albedo == a.albedo
            && ab.light == a.light
            && ab.camera == a.camera
            && ab.detail == a.detail,
        || "identity fields not kept".into(),
    )?;
    for j in (0..model.joint_count()).filter(|&j| j != jaw) {
        ensure(ab.joint_rotation(j) == a.joint_rotation(j), || {
            format!("joint {j} not kept")
        })?;
    }
    let (_, dab) = retarget(&model, &a, &b, &dec).map_err(err)?;
    let direct = dec
        .decode(&a.detail, &b.expression, &b.joint_rotation(jaw))
        .map_err(err)?;
    ensure(bits(&dab.data) == bits(&direct.data), || {
        "retargeted displacement differs".into()
    })?;

    let abc = retarget_code(&model, &ab, &c).map_err(err)?;
    ensure(abc == retarget_code(&model, &a, &c).map_err(err)?, || {
        "composition failed".into()
    })?;
    ensure(retarget_code(&model, &ab, &a).map_err(err)? == a, || {
        "restoring the own expression failed".into()
    })?;
    ensure(retarget_code(&model, &ab, &b).map_err(err)? == ab, || {
        "retargeting is not idempotent".into()
    })?;
    Ok("identity, field substitution, composition, restore and idempotence exact".into())
}

/// Closest distance by plane projection and edge clamping, independent of
/// the library's region-based closest-point routine.
fn oracle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let n = (b - a).cross(&(c - a));
    let nn = n.norm_squared();
    if nn > 0.0 {
        let q = p - n * ((p - a).dot(&n) / nn);
        let inside = [(a, b), (b, c), (c, a)]
            .iter()
            .all(|(u, v)| (*v - *u).cross(&(q - *u)).dot(&n) >= 0.0);
        if inside {
            return (p - q).norm();
        }
    }
    let seg = |u: &Vec3, v: &Vec3| {
        let e = v - u;
        let t = if e.norm_squared() > 0.0 {
            ((p - u).dot(&e) / e.norm_squared()).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (u + e * t)).norm()
    };
    seg(a, b).min(seg(b, c)).min(seg(c, a))
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let axis = Vec3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    )
    .normalize();
    rodrigues(&(axis * rng.gen_range(0.3..2.5)))
}

pub fn evaluation_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut rv = |s: f64| {
        Vec3::new(
            rng.gen_range(-s..s),
            rng.gen_range(-s..s),
            rng.gen_range(-s..s),
        )
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for t in 0..200 {
        let centre = rv(50.0);
        for _ in 0..3 {
            vertices.push(centre + rv(8.0));
        }
        triangles.push([3 * t, 3 * t + 1, 3 * t + 2]);
    }
    let uv = vec![[0.0, 0.0]; vertices.len()];
    let mesh = Mesh::new(vertices, triangles, uv);
    let points: Vec<Vec3> = (0..1000).map(|_| rv(70.0)).collect();
    let fast = scan_to_mesh_distance(&points, &mesh).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (p, d) in points.iter().zip(&fast) {
        let oracle = mesh
            .triangles
            .iter()
            .map(|t| {
                oracle_distance(
                    p,
                    &mesh.vertices[t[0]],
                    &mesh.vertices[t[1]],
                    &mesh.vertices[t[2]],
                )
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((d - oracle).abs());
    }
    ensure(worst <= 1e-9, || {
        format!("distance deviates from brute force by {worst:e}")
    })?;

    // constructed rigid motion on the mesh vertices
    let rotation = random_rotation(&mut rng);
    let translation = Vec3::new(12.0, -7.5, 30.0);
    let truth = RigidTransform {
        rotation,
        translation,
        scale: 1.0,
    };
    let mesh_lm: Vec<Vec3> = mesh.vertices.iter().step_by(37).copied().collect();
    let scan_lm = truth.apply_all(&mesh_lm);
    let got = rigid_align(&scan_lm, &mesh_lm, &AlignOptions::default(), None, None)
        .map_err(|e| e.to_string())?;
    let rot_err = (got.rotation - rotation).amax();
    let tr_err = (got.translation - translation).amax();
    ensure(rot_err <= 1e-6 && tr_err <= 1e-6, || {
        format!("recovered (R, t) off by {rot_err:e}, {tr_err:e}")
    })?;

    // hand-computed statistics
    let s = error_stats(&[4.0, 1.0, 10.0, 3.0, 2.0]).map_err(|e| e.to_string())?;
    ensure(
        s.median == 3.0 && s.mean == 4.0 && s.std == 10f64.sqrt(),
        || format!("stats {s:?}"),
    )?;
    let s = error_stats(&[1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    ensure(
        s.median == 2.5 && s.mean == 2.5 && s.std == 1.25f64.sqrt(),
        || format!("stats {s:?}"),
    )?;
    let curve = cumulative_curve(&[4.0, 1.0, 10.0, 3.0, 2.0], &[0.0, 2.0, 3.5, 10.0]);
    ensure(curve == [0.0, 0.4, 0.6, 1.0], || format!("curve {curve:?}"))?;

    let elapsed = t.elapsed();
    ensure(elapsed.as_secs_f64() < 60.0, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max distance gap {worst:.1e}, (R, t) error {rot_err:.1e}/{tr_err:.1e}, stats and curve exact, {elapsed:?}"
    ))
}

pub fn loss_definitions() -> Outcome {
    let lmk = landmark_loss(&[[0.0, 0.0]], &[[3.0, 4.0]], &[1.0]).map_err(|e| e.to_string())?;
    ensure(lmk == 7.0, || format!("landmark offset (3, 4) gives {lmk}"))?;

    let mut d = Image::square(8, 1, MapKind::Displacement);
    d.data[3 * 8 + 1] = 0.01;
    let full = Image::filled(8, 8, 1, MapKind::Mask, 1.0);
    let sym = symmetry_loss(&d, &full).map_err(|e| e.to_string())?;
    ensure(sym == 0.02, || format!("single texel symmetry gives {sym}"))?;

    let size = 256;
    let u = Image::filled(size, size, 1, MapKind::Displacement, 0.01);
    let reg = detail_regularizer(&u);
    let expected = 0.01 * (size * size) as f64;
    ensure(reg == expected, || {
        format!("uniform regularizer gives {reg}, expected {expected}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // coordinates on a 1/1024 grid so that translations are exact
    let mut grid = |lo: i32, hi: i32| rng.gen_range(lo..hi) as f64 / 1024.0;
    let gt: Vec<[f64; 2]> = (0..68)
        .map(|_| [grid(0, 200 << 10), grid(0, 200 << 10)])
        .collect();
    let proj: Vec<[f64; 2]> = gt
        .iter()
        .map(|p| [p[0] + grid(-2048, 2048), p[1] + grid(-2048, 2048)])
        .collect();
    let pairs = facefit::model::toy::EYELID_PAIRS;
    let base = eye_closure_loss(&gt, &proj, &pairs).map_err(|e| e.to_string())?;
    let shift = |v: &[[f64; 2]]| {
        v.iter()
            .map(|p| [p[0] + 32.0, p[1] - 16.0])
            .collect::<Vec<_>>()
    };
    let moved = eye_closure_loss(&shift(&gt), &shift(&proj), &pairs).map_err(|e| e.to_string())?;
    let proj_only = eye_closure_loss(&gt, &shift(&proj), &pairs).map_err(|e| e.to_string())?;
    ensure(moved == base, || {
        format!("eye loss {base} vs translated {moved}")
    })?;
    ensure(proj_only == base, || {
        format!("eye loss {base} vs projection-only translation {proj_only}")
    })?;
    Ok(format!("landmark 7, symmetry 0.02, regularizer {reg} = 0.01*{size}^2, eye loss translation invariant"))
}
