//! Analytic derivatives against central finite differences.

use facefit::code::{Group, DETAIL_DIM};
use facefit::detail::{DecoderArch, DetailDecoder};
use facefit::losses::*;
use facefit::model::{synthesize_toy_albedo, synthesize_toy_model, ToyModelSpec};
use facefit::pipeline::detail::detail_objective;
use facefit::pipeline::synth::{random_code, SynthSpec};
use facefit::pipeline::DetailScene;
use facefit::render::{Image, MapKind, RenderState, Renderer};
use facefit::LatentCode;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree (non-smooth in the step).
    pub skipped_kinks: usize,
    /// Render coordinates whose step changes pixel visibility.
    pub skipped_visibility: usize,
    pub failures: Vec<String>,
    pub worst: f64,
}

impl GradReport {
    /// Compares `analytic` with the central difference of `f` at step `h`;
    /// `f(±h)` returns `None` when the step crosses a visibility change.
    fn check(
        &mut self,
        what: &str,
        analytic: f64,
        h: f64,
        f0: f64,
        f: impl Fn(f64) -> Option<f64>,
    ) {
        let (Some(fp), Some(fm)) = (f(h), f(-h)) else {
            self.skipped_visibility += 1;
            return;
        };
        let numeric = (fp - fm) / (2.0 * h);
        let slope_gap = ((fp - f0) / h - (f0 - fm) / h).abs();
        if slope_gap > 1e-3 * numeric.abs().max(1e-6) {
            self.skipped_kinks += 1;
            return;
        }
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        self.checked += 1;
        self.worst = self.worst.max(err);
        if err >= TOLERANCE {
            self.failures.push(format!(
                "{what}: analytic {analytic:e} vs numeric {numeric:e} (rel {err:.2e})"
            ));
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Probe<'a> {
    renderer: &'a Renderer<'a>,
    base: RenderState,
    pixel_w: Image,
    lm_w: Vec<[f64; 2]>,
}

impl Probe<'_> {
    fn value(&self, st: &RenderState) -> f64 {
        let lm: f64 = st
            .landmarks_2d
            .iter()
            .zip(&self.lm_w)
            .map(|(p, w)| p[0] * w[0] + p[1] * w[1])
            .sum();
        dot(&st.image.data, &self.pixel_w.data) + lm
    }

    /// `None` when any weighted pixel changes triangle.
    fn eval(&self, code: &LatentCode) -> Option<f64> {
        let st = self.renderer.forward(code).ok()?;
        let c = self.pixel_w.channels;
        for i in 0..st.fragments.triangle.len() {
            if self.pixel_w.data[c * i] != 0.0
                && st.fragments.triangle[i] != self.base.fragments.triangle[i]
            {
                return None;
            }
        }
        Some(self.value(&st))
    }
}

fn render_path(report: &mut GradReport, rng: &mut ChaCha8Rng) {
    let spec = ToyModelSpec {
        uv_size: 64,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 96);
    let mut code = random_code(&r, &SynthSpec::default(), rng);
    for j in 0..model.joint_count() {
        code.set_joint_rotation(j, std::array::from_fn(|_| rng.gen_range(-0.08..0.08)));
    }
    let base = r.forward(&code).unwrap();
    // weights only on pixels well inside their triangle
    let mut pixel_w = Image::new(96, 96, 3, MapKind::Color);
    for i in 0..base.fragments.triangle.len() {
        if base.fragments.covered(i) && base.fragments.bary[i].iter().all(|b| *b > 0.1) {
            for c in 0..3 {
                pixel_w.data[3 * i + c] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let lm_w: Vec<[f64; 2]> = (0..base.landmarks_2d.len())
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let probe = Probe {
        renderer: &r,
        base,
        pixel_w,
        lm_w,
    };
    let f0 = probe.value(&probe.base);
    let g = r.backward(&probe.base, Some(&probe.pixel_w), Some(&probe.lm_w));

    let mut group = |name: &str, grp: Group, analytic: &[f64], picks: Vec<usize>, h: f64| {
        for k in picks {
            probe_coordinate(report, &probe, &code, name, grp, k, analytic[k], h, f0);
        }
    };
    group(
        "shape",
        Group::Shape,
        &g.shape,
        sample(rng, g.shape.len(), 25).into_vec(),
        1e-5,
    );
    group(
        "expression",
        Group::Expression,
        &g.expression,
        sample(rng, g.expression.len(), 25).into_vec(),
        1e-5,
    );
    group(
        "pose",
        Group::Pose,
        &g.pose,
        (0..g.pose.len()).collect(),
        1e-6,
    );
    group(
        "albedo",
        Group::Albedo,
        &g.albedo,
        sample(rng, g.albedo.len(), 25).into_vec(),
        1e-5,
    );
    group(
        "light",
        Group::Light,
        &g.light.to_flat(),
        (0..27).collect(),
        1e-5,
    );
    group(
        "scale",
        Group::Scale,
        &[g.scale],
        vec![0],
        1e-5 * code.camera.scale,
    );
    group(
        "translation",
        Group::Translation,
        &g.translation,
        vec![0, 1],
        1e-5,
    );
}

#[allow(clippy::too_many_arguments)]
fn probe_coordinate(
    report: &mut GradReport,
    probe: &Probe,
    code: &LatentCode,
    name: &str,
    grp: Group,
    k: usize,
    analytic: f64,
    h: f64,
    f0: f64,
) {
    let x = code.group(grp);
    report.check(&format!("render/{name}[{k}]"), analytic, h, f0, |d| {
        let mut c = code.clone();
        let mut v = x.clone();
        v[k] += d;
        c.set_group(grp, &v);
        probe.eval(&c)
    });
}

/// Checks `grad` of a scalar function of a flat vector at sampled coordinates.
fn vector_check(
    report: &mut GradReport,
    what: &str,
    x: &[f64],
    grad: &[f64],
    picks: &[usize],
    h: f64,
    f: impl Fn(&[f64]) -> f64,
) {
    let f0 = f(x);
    for &k in picks {
        report.check(&format!("{what}[{k}]"), grad[k], h, f0, |d| {
            let mut y = x.to_vec();
            y[k] += d;
            Some(f(&y))
        });
    }
}

fn with_data(like: &Image, data: &[f64]) -> Image {
    Image::from_data(
        like.width,
        like.height,
        like.channels,
        like.kind,
        data.to_vec(),
    )
    .unwrap()
}

fn losses(report: &mut GradReport, rng: &mut ChaCha8Rng) {
    // landmark and eye terms on 68 random points
    let gt: Vec<[f64; 2]> = (0..68)
        .map(|_| [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)])
        .collect();
    let proj: Vec<[f64; 2]> = gt
        .iter()
        .map(|p| {
            let o = |r: &mut ChaCha8Rng| {
                r.gen_range(0.5..3.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }
            };
            [p[0] + o(rng), p[1] + o(rng)]
        })
        .collect();
    let flat = |p: &[[f64; 2]]| p.iter().flatten().copied().collect::<Vec<_>>();
    let unflat = |x: &[f64]| x.chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<[f64; 2]>>();
    let weights: Vec<f64> = (0..68).map(|_| rng.gen_range(0.5..2.0)).collect();
    let g = flat(&landmark_loss_grad(&gt, &proj, &weights));
    let picks = sample(rng, 136, 16).into_vec();
    vector_check(report, "landmark", &flat(&proj), &g, &picks, 1e-6, |x| {
        landmark_loss(&gt, &unflat(x), &weights).unwrap()
    });
    let pairs = facefit::model::toy::EYELID_PAIRS;
    let g = flat(&eye_closure_loss_grad(&gt, &proj, &pairs));
    let picks: Vec<usize> = pairs
        .iter()
        .flat_map(|&(i, _)| [2 * i, 2 * i + 1])
        .collect();
    vector_check(report, "eye", &flat(&proj), &g, &picks, 1e-6, |x| {
        eye_closure_loss(&gt, &unflat(x), &pairs).unwrap()
    });

    // image terms on a smooth synthetic face-like image
    let spec = ToyModelSpec {
        uv_size: 64,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 64);
    let a = r
        .forward(&random_code(&r, &SynthSpec::default(), rng))
        .unwrap();
    let b = r
        .forward(&random_code(&r, &SynthSpec::default(), rng))
        .unwrap();
    let (target, render) = (&a.image, &b.image);
    let mask = a.coverage();
    let face: Vec<usize> = (0..render.data.len())
        .filter(|&i| mask.data[i / 3] > 0.0)
        .collect();
    let ex = ToyExtractor::default();

    let g = photometric_loss_grad(target, render, &mask);
    let smooth: Vec<usize> = face
        .iter()
        .copied()
        .filter(|&i| (target.data[i] - render.data[i]).abs() > 1e-3)
        .collect();
    let picks: Vec<usize> = sample(rng, smooth.len(), 16)
        .into_iter()
        .map(|i| smooth[i])
        .collect();
    vector_check(
        report,
        "photometric",
        &render.data,
        &g.data,
        &picks,
        1e-6,
        |x| photometric_loss(target, &with_data(render, x), &mask).unwrap(),
    );

    let emb = ex.embed(target).unwrap();
    let (_, g) = identity_loss_with_grad(&ex, &emb, render).unwrap();
    let picks: Vec<usize> = sample(rng, face.len(), 16)
        .into_iter()
        .map(|i| face[i])
        .collect();
    vector_check(
        report,
        "identity",
        &render.data,
        &g.data,
        &picks,
        1e-6,
        |x| identity_loss(&ex, target, &with_data(render, x)).unwrap(),
    );

    let params = IdMrfParams::default();
    let (_, g) = idmrf_loss_with_grad(&ex, target, render, &mask, &params).unwrap();
    let picks: Vec<usize> = sample(rng, face.len(), 16)
        .into_iter()
        .map(|i| face[i])
        .collect();
    vector_check(report, "idmrf", &render.data, &g.data, &picks, 1e-6, |x| {
        idmrf_loss(&ex, target, &with_data(render, x), &mask, &params).unwrap()
    });

    // displacement terms
    let d = r.uv_size();
    let mut disp = Image::new(d, d, 1, MapKind::Displacement);
    for v in &mut disp.data {
        *v = rng.gen_range(-0.008..0.008);
    }
    let g = symmetry_loss_grad(&disp, &r.mask_uv);
    let ok: Vec<usize> = (0..d * d)
        .filter(|&i| {
            let (y, x) = (i / d, i % d);
            let j = y * d + d - 1 - x;
            (r.mask_uv.data[i] > 0.0 || r.mask_uv.data[j] > 0.0)
                && (disp.data[i] - disp.data[j]).abs() > 1e-4
        })
        .collect();
    let picks: Vec<usize> = sample(rng, ok.len(), 10)
        .into_iter()
        .map(|i| ok[i])
        .collect();
    vector_check(report, "symmetry", &disp.data, &g.data, &picks, 1e-7, |x| {
        symmetry_loss(&with_data(&disp, x), &r.mask_uv).unwrap()
    });
    let g = detail_regularizer_grad(&disp);
    let picks = sample(rng, d * d, 10).into_vec();
    vector_check(
        report,
        "detail_regularizer",
        &disp.data,
        &g.data,
        &picks,
        1e-7,
        |x| detail_regularizer(&with_data(&disp, x)),
    );

    let beta: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let g: Vec<f64> = beta.iter().map(|v| 2.0 * v).collect();
    vector_check(
        report,
        "shape_prior",
        &beta,
        &g,
        &[0, 3, 7, 11, 19],
        1e-5,
        |x| coarse_regularizers(x, &[], &[]).0,
    );

    // full detail objective through normals, shading and every image term
    let code = random_code(&r, &SynthSpec::default(), rng);
    let scene = DetailScene::new(&r, &code).unwrap();
    let weights = LossWeights::default();
    let e = detail_objective(&r, &ex, &scene, &disp, target, &mask, &weights, true).unwrap();
    let gd = e.grad_disp.unwrap();
    let live: Vec<usize> = (0..d * d)
        .filter(|&i| r.mask_uv.data[i] > 0.0 && gd.data[i] != 0.0)
        .collect();
    let picks: Vec<usize> = sample(rng, live.len(), 16)
        .into_iter()
        .map(|i| live[i])
        .collect();
    vector_check(
        report,
        "detail_objective",
        &disp.data,
        &gd.data,
        &picks,
        1e-7,
        |x| {
            detail_objective(
                &r,
                &ex,
                &scene,
                &with_data(&disp, x),
                target,
                &mask,
                &weights,
                false,
            )
            .unwrap()
            .report
            .weighted_total
        },
    );

    // convolutional decoder
    let input_dim = DETAIL_DIM + model.expression_dim() + 3;
    let arch = DecoderArch::Conv {
        base: 8,
        channels: vec![8, 4],
    };
    let dec = DetailDecoder::seeded(arch, input_dim, 16, 5).unwrap();
    let xin: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gout: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = dec.forward(&xin).unwrap();
    let gimg = Image::from_data(16, 16, 1, MapKind::Displacement, gout.clone()).unwrap();
    let (gp, gx) = dec.backward(&tape, &gimg);
    let picks = sample(rng, input_dim, 10).into_vec();
    vector_check(report, "decoder_input", &xin, &gx, &picks, 1e-6, |x| {
        dot(&dec.forward(x).unwrap().output.data, &gout)
    });
    let picks = sample(rng, dec.params.len(), 10).into_vec();
    vector_check(
        report,
        "decoder_params",
        &dec.params,
        &gp,
        &picks,
        1e-6,
        |p| {
            let mut d2 = dec.clone();
            d2.params.copy_from_slice(p);
            dot(&d2.forward(&xin).unwrap().output.data, &gout)
        },
    );
}

pub fn gradient_suite(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    render_path(&mut report, &mut rng);
    losses(&mut report, &mut rng);
    report
}
