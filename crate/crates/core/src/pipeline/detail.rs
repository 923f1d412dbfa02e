//! Detail-code fitting, the detail consistency swap, and toy-scale decoder
//! training. The coarse code is held fixed throughout.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::code::LatentCode;
use crate::detail::{
    detail_normal_map, detail_normal_map_backward, render_detail, render_detail_backward,
    DetailDecoder,
};
use crate::error::{check_dim, Error, Result};
use crate::losses::{
    detail_regularizer, detail_regularizer_grad, idmrf_loss_with_grad, mask_area, photometric_loss,
    photometric_loss_grad, symmetry_loss, symmetry_loss_grad, FeatureExtractor, LossReport,
    LossWeights,
};
use crate::render::{Image, RenderState, Renderer};

use super::coarse::{FitStatus, FitTrace};
use super::config::FitConfig;
use super::optim::Adam;

/// Coarse render of one image, reused by every detail evaluation.
#[derive(Debug, Clone)]
pub struct DetailScene {
    pub code: LatentCode,
    pub state: RenderState,
    pub positions_uv: Image,
}

impl DetailScene {
    pub fn new(renderer: &Renderer, code: &LatentCode) -> Result<Self> {
        let state = renderer.forward(code)?;
        let positions_uv = renderer.positions_uv(&state);
        Ok(Self {
            code: code.clone(),
            state,
            positions_uv,
        })
    }

    pub fn jaw(&self, renderer: &Renderer) -> [f64; 3] {
        self.code.joint_rotation(renderer.model.jaw_joint)
    }

    /// Decoder input `[delta, psi, theta_jaw]` for a given detail code.
    pub fn decoder_input(
        &self,
        renderer: &Renderer,
        decoder: &DetailDecoder,
        delta: &[f64],
    ) -> Result<Vec<f64>> {
        decoder.input(delta, &self.code.expression, &self.jaw(renderer))
    }
}

/// Detail objective of one displacement map, with the cotangent of `D`.
#[derive(Debug, Clone)]
pub struct DetailEvaluation {
    pub report: LossReport,
    pub render: Image,
    pub grad_disp: Option<Image>,
}

/// `L_detail = pho_d + mrf + sym + reg_d` (weighted) of the detail render of
/// `scene` with displacement `disp`.
pub fn detail_objective(
    renderer: &Renderer,
    extractor: &dyn FeatureExtractor,
    scene: &DetailScene,
    disp: &Image,
    image: &Image,
    mask: &Image,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<DetailEvaluation> {
    let mask_uv = &renderer.mask_uv;
    let st = &scene.state;
    let nm = detail_normal_map(&scene.positions_uv, &st.normals_uv, disp, mask_uv);
    let dr = render_detail(renderer, st, &nm.normals)?;
    let mut report = LossReport::default();
    let pho = photometric_loss(image, &dr.image, mask)?;
    report.add_normalized("pho_d", weights.pho_d, pho, mask_area(mask));
    let (mrf, g_mrf) = if weights.mrf > 0.0 {
        let (v, g) = idmrf_loss_with_grad(extractor, image, &dr.image, mask, &weights.idmrf)?;
        (v, Some(g))
    } else {
        (0.0, None)
    };
    report.add("mrf", weights.mrf, mrf);
    report.add("sym", weights.sym, symmetry_loss(disp, mask_uv)?);
    report.add("reg_d", weights.reg_d, detail_regularizer(disp));
    let grad_disp = if with_grad {
        let mut gi = photometric_loss_grad(image, &dr.image, mask);
        for v in &mut gi.data {
            *v *= weights.pho_d;
        }
        if let Some(g) = g_mrf {
            for (a, b) in gi.data.iter_mut().zip(&g.data) {
                *a += weights.mrf * b;
            }
        }
        let g_n = render_detail_backward(renderer, st, &nm.normals, &dr, &gi);
        let mut g_d =
            detail_normal_map_backward(&scene.positions_uv, &st.normals_uv, disp, mask_uv, &g_n);
        let gs = symmetry_loss_grad(disp, mask_uv);
        let gr = detail_regularizer_grad(disp);
        for i in 0..g_d.data.len() {
            g_d.data[i] += weights.sym * gs.data[i] + weights.reg_d * gr.data[i];
        }
        Some(g_d)
    } else {
        None
    };
    Ok(DetailEvaluation {
        report,
        render: dr.image,
        grad_disp,
    })
}

/// `L_dc`: the detail objective of image `i` re-rendered with the detail
/// code `delta_j` of another image of the same subject.
pub fn detail_consistency_loss(
    renderer: &Renderer,
    extractor: &dyn FeatureExtractor,
    decoder: &DetailDecoder,
    scene_i: &DetailScene,
    delta_j: &[f64],
    image_i: &Image,
    mask_i: &Image,
    weights: &LossWeights,
) -> Result<f64> {
    let disp = decoder.decode(delta_j, &scene_i.code.expression, &scene_i.jaw(renderer))?;
    Ok(detail_objective(
        renderer, extractor, scene_i, &disp, image_i, mask_i, weights, false,
    )?
    .report
    .weighted_total)
}

#[derive(Debug, Clone)]
pub struct DetailFit {
    pub delta: Vec<f64>,
    pub displacement: Image,
    pub report: LossReport,
    pub trace: FitTrace,
    pub status: FitStatus,
}

/// Width of the detail code consumed by `decoder`.
pub fn detail_dim(renderer: &Renderer, decoder: &DetailDecoder) -> Result<usize> {
    let tail = renderer.model.expression_dim() + 3;
    if decoder.input_dim <= tail {
        return Err(Error::Config(format!(
            "decoder input width {} leaves no room for a detail code",
            decoder.input_dim
        )));
    }
    Ok(decoder.input_dim - tail)
}

/// Optimizes the detail code of one image with the coarse code and the
/// decoder fixed. Starts from `coarse.detail` when it has the right width,
/// otherwise from zeros.
pub fn fit_detail(
    renderer: &Renderer,
    extractor: &dyn FeatureExtractor,
    coarse: &LatentCode,
    decoder: &DetailDecoder,
    image: &Image,
    mask: &Image,
    config: &FitConfig,
) -> Result<DetailFit> {
    config.validate()?;
    let dim = detail_dim(renderer, decoder)?;
    if decoder.size != renderer.uv_size() {
        return Err(Error::Config(format!(
            "decoder output {}x{0} does not match the UV size {}",
            decoder.size,
            renderer.uv_size()
        )));
    }
    let scene = DetailScene::new(renderer, coarse)?;
    image.check_same_shape(&scene.state.image, "image")?;
    let mut delta = if coarse.detail.len() == dim {
        coarse.detail.clone()
    } else {
        vec![0.0; dim]
    };
    let weights = &config.weights;
    let stage = &config.detail;
    let mut adam = Adam::new(config.adam, dim);
    let mut trace = FitTrace::default();
    let mut best: Option<(LossReport, Vec<f64>)> = None;
    for it in 0..=stage.iterations {
        let last = it == stage.iterations;
        let x = scene.decoder_input(renderer, decoder, &delta)?;
        let tape = decoder.forward(&x)?;
        let eval = detail_objective(
            renderer,
            extractor,
            &scene,
            &tape.output,
            image,
            mask,
            weights,
            !last,
        )?;
        let total = eval.report.weighted_total;
        let lr = stage.lr_at(it.min(stage.iterations.saturating_sub(1)));
        if !total.is_finite() {
            warn!("non-finite detail loss at iteration {it}");
            let Some((report, d)) = best else {
                return Err(Error::NonFinite {
                    stage: "detail".into(),
                    iteration: it,
                });
            };
            let displacement = decoder.decode(&d, &coarse.expression, &scene.jaw(renderer))?;
            return Ok(DetailFit {
                delta: d,
                displacement,
                report,
                trace,
                status: FitStatus::Diverged {
                    stage: "detail".into(),
                    iteration: it,
                },
            });
        }
        if best.as_ref().is_none_or(|(b, _)| total < b.weighted_total) {
            best = Some((eval.report.clone(), delta.clone()));
        }
        let best_total = best.as_ref().map_or(total, |(b, _)| b.weighted_total);
        trace.push("detail", it, lr, &eval.report, best_total);
        if last {
            break;
        }
        let (_, g_x) =
            decoder.backward(&tape, eval.grad_disp.as_ref().expect("gradient requested"));
        adam.step(&mut delta, &g_x[..dim], lr);
    }
    let (report, delta) = best.expect("at least one evaluation");
    let displacement = decoder.decode(&delta, &coarse.expression, &scene.jaw(renderer))?;
    debug!("detail fit done: best total {:.6e}", report.weighted_total);
    Ok(DetailFit {
        delta,
        displacement,
        report,
        trace,
        status: FitStatus::Completed,
    })
}

/// One image of a subject.
#[derive(Debug, Clone)]
pub struct SubjectImage {
    pub image: Image,
    pub landmarks: Vec<[f64; 2]>,
    pub mask: Image,
    /// Coarse code of the image: ground truth or an earlier fit.
    pub code: Option<LatentCode>,
}

/// Images of one subject.
#[derive(Debug, Clone)]
pub struct SubjectSet {
    pub subject: String,
    pub images: Vec<SubjectImage>,
}

impl SubjectSet {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Config(format!(
                "subject `{}` has no images",
                self.subject
            )));
        }
        Ok(())
    }
}

/// Swap partner of image `i` among `n` images at step `step`: the offsets
/// `1..n` are visited in turn.
pub fn round_robin_partner(i: usize, n: usize, step: u64) -> usize {
    if n < 2 {
        return i;
    }
    let offset = 1 + (step % (n as u64 - 1)) as usize;
    (i + offset) % n
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: usize,
    pub detail: f64,
    pub dc: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct DecoderTraining {
    pub decoder: DetailDecoder,
    /// Detail codes per subject and image (tied codes are repeated).
    pub codes: Vec<Vec<Vec<f64>>>,
    pub trace: Vec<TrainRow>,
}

/// Jointly optimizes decoder weights and per-image detail codes on
/// `Σ L_detail + λ_dc · L_dc`, swapping detail codes within each subject at
/// every step.
pub fn train_detail_decoder(
    renderer: &Renderer,
    extractor: &dyn FeatureExtractor,
    subjects: &[SubjectSet],
    decoder_init: &DetailDecoder,
    config: &FitConfig,
) -> Result<DecoderTraining> {
    config.validate()?;
    if subjects.len() < 2 {
        return Err(Error::Config(
            "decoder training needs at least two subjects".into(),
        ));
    }
    for s in subjects {
        s.validate()?;
        if s.images.len() < 2 {
            return Err(Error::Config(format!(
                "subject `{}` has {} image(s); detail swaps need at least two",
                s.subject,
                s.images.len()
            )));
        }
    }
    check_dim("decoder output size", renderer.uv_size(), decoder_init.size)?;
    let dim = detail_dim(renderer, decoder_init)?;
    let train = &config.train;
    let weights = &config.weights;

    let mut scenes: Vec<Vec<DetailScene>> = Vec::new();
    for s in subjects {
        let mut v = Vec::new();
        for (k, im) in s.images.iter().enumerate() {
            let code = im.code.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "image {k} of subject `{}` has no coarse code",
                    s.subject
                ))
            })?;
            let scene = DetailScene::new(renderer, code)?;
            im.image
                .check_same_shape(&scene.state.image, "training image")?;
            v.push(scene);
        }
        scenes.push(v);
    }

    let slots = |s: usize| {
        if train.tie_subject_codes {
            1
        } else {
            subjects[s].images.len()
        }
    };
    let slot = |k: usize| if train.tie_subject_codes { 0 } else { k };
    let mut codes: Vec<Vec<Vec<f64>>> = (0..subjects.len())
        .map(|s| {
            (0..slots(s))
                .map(|k| {
                    let c = &subjects[s].images[k]
                        .code
                        .as_ref()
                        .expect("checked above")
                        .detail;
                    if c.len() == dim {
                        c.clone()
                    } else {
                        vec![0.0; dim]
                    }
                })
                .collect()
        })
        .collect();
    let mut decoder = decoder_init.clone();
    let mut dec_opt = Adam::new(config.adam, decoder.params.len());
    let mut code_opts: Vec<Vec<Adam>> = codes
        .iter()
        .map(|v| v.iter().map(|_| Adam::new(config.adam, dim)).collect())
        .collect();
    let mut trace = Vec::new();

    for it in 0..train.iterations {
        let decay = train.decay_at(it);
        let mut g_params = vec![0.0; decoder.params.len()];
        let mut g_codes: Vec<Vec<Vec<f64>>> = codes
            .iter()
            .map(|v| vec![vec![0.0; dim]; v.len()])
            .collect();
        let mut detail_sum = 0.0;
        let mut dc_sum = 0.0;
        for (s, subject) in subjects.iter().enumerate() {
            let n = subject.images.len();
            for (k, im) in subject.images.iter().enumerate() {
                let scene = &scenes[s][k];
                let mut run =
                    |src: usize, scale: f64, g_codes: &mut Vec<Vec<Vec<f64>>>| -> Result<f64> {
                        let x = scene.decoder_input(renderer, &decoder, &codes[s][slot(src)])?;
                        let tape = decoder.forward(&x)?;
                        let e = detail_objective(
                            renderer,
                            extractor,
                            scene,
                            &tape.output,
                            &im.image,
                            &im.mask,
                            weights,
                            true,
                        )?;
                        let (gp, gx) = decoder
                            .backward(&tape, e.grad_disp.as_ref().expect("gradient requested"));
                        for (a, b) in g_params.iter_mut().zip(&gp) {
                            *a += scale * b;
                        }
                        for (a, b) in g_codes[s][slot(src)].iter_mut().zip(&gx[..dim]) {
                            *a += scale * b;
                        }
                        Ok(e.report.weighted_total)
                    };
                detail_sum += run(k, 1.0, &mut g_codes)?;
                if weights.dc > 0.0 {
                    let j = round_robin_partner(k, n, it as u64 + config.seed);
                    dc_sum += run(j, weights.dc, &mut g_codes)?;
                }
            }
        }
        let total = detail_sum + weights.dc * dc_sum;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                stage: "train".into(),
                iteration: it,
            });
        }
        trace.push(TrainRow {
            iteration: it,
            detail: detail_sum,
            dc: dc_sum,
            total,
        });
        dec_opt.step(&mut decoder.params, &g_params, train.decoder_lr * decay);
        for s in 0..codes.len() {
            for k in 0..codes[s].len() {
                code_opts[s][k].step(&mut codes[s][k], &g_codes[s][k], train.code_lr * decay);
            }
        }
    }
    let codes = (0..subjects.len())
        .map(|s| {
            (0..subjects[s].images.len())
                .map(|k| codes[s][slot(k)].clone())
                .collect()
        })
        .collect();
    Ok(DecoderTraining {
        decoder,
        codes,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detail::DecoderArch;
    use crate::losses::ToyExtractor;
    use crate::pipeline::synth::{separable_detail_fixture, DetailFixture, DetailFixtureSpec};
    use crate::pipeline::testutil::Toy;

    fn fixture(r: &Renderer) -> DetailFixture {
        separable_detail_fixture(
            r,
            &DetailFixtureSpec {
                subjects: 2,
                train_expressions: 2,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn short(iterations: usize) -> FitConfig {
        let mut cfg = FitConfig::default();
        cfg.detail.iterations = iterations;
        cfg
    }

    #[test]
    fn round_robin_visits_every_partner() {
        for n in 2..6 {
            for i in 0..n {
                let mut seen: Vec<usize> = (0..n as u64 - 1)
                    .map(|s| round_robin_partner(i, n, s))
                    .collect();
                assert!(!seen.contains(&i));
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), n - 1);
            }
        }
        assert_eq!(round_robin_partner(0, 1, 3), 0);
    }

    #[test]
    fn fit_recovers_known_detail_code() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let fx = fixture(&r);
        let im = &fx.train[0].images[0];
        let code = im.code.clone().unwrap();
        let fit = fit_detail(&r, &ex, &code, &fx.truth, &im.image, &im.mask, &short(300)).unwrap();
        let scene = DetailScene::new(&r, &code).unwrap();
        let err = |disp: &Image| {
            let nm = detail_normal_map(
                &scene.positions_uv,
                &scene.state.normals_uv,
                disp,
                &r.mask_uv,
            );
            let img = render_detail(&r, &scene.state, &nm.normals).unwrap().image;
            photometric_loss(&im.image, &img, &im.mask).unwrap()
        };
        let zero = fx
            .truth
            .decode(
                &vec![0.0; fit.delta.len()],
                &code.expression,
                &scene.jaw(&r),
            )
            .unwrap();
        let (e0, e1) = (err(&zero), err(&fit.displacement));
        assert!(e1 < 0.05 * e0, "{e1} vs {e0}");
        for w in fit.trace.rows.windows(2) {
            assert!(w[1].best <= w[0].best);
        }
    }

    #[test]
    fn heavy_regularizer_flattens_displacement() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let fx = fixture(&r);
        let im = &fx.train[0].images[1];
        let mut code = im.code.clone().unwrap();
        code.detail = fx.subject_codes[0].clone();
        // with no expression input the reachable minimum is D = 0
        code.expression.iter_mut().for_each(|v| *v = 0.0);
        code.set_joint_rotation(toy.model.jaw_joint, [0.0; 3]);
        let mut cfg = short(200);
        cfg.weights.reg_d = 1e9;
        let start = fx
            .truth
            .decode(
                &code.detail,
                &code.expression,
                &code.joint_rotation(toy.model.jaw_joint),
            )
            .unwrap();
        let fit = fit_detail(&r, &ex, &code, &fx.truth, &im.image, &im.mask, &cfg).unwrap();
        let rms =
            |d: &Image| (d.data.iter().map(|v| v * v).sum::<f64>() / d.data.len() as f64).sqrt();
        assert!(rms(&fit.displacement) < 0.05 * rms(&start));
    }

    #[test]
    fn symmetry_term_makes_fits_more_symmetric() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let fx = fixture(&r);
        let im = &fx.train[1].images[0];
        let code = im.code.clone().unwrap();
        let dec = DetailDecoder::seeded(DecoderArch::Linear, fx.truth.input_dim, fx.truth.size, 3)
            .unwrap();
        let mut off = short(150);
        off.weights.sym = 0.0;
        let mut on = off.clone();
        on.weights.sym = 50.0;
        let a = fit_detail(&r, &ex, &code, &dec, &im.image, &im.mask, &off).unwrap();
        let b = fit_detail(&r, &ex, &code, &dec, &im.image, &im.mask, &on).unwrap();
        let sa = symmetry_loss(&a.displacement, &r.mask_uv).unwrap();
        let sb = symmetry_loss(&b.displacement, &r.mask_uv).unwrap();
        assert!(sb < sa, "{sb} vs {sa}");
    }

    #[test]
    fn zero_iterations_return_the_initial_decoder() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let fx = fixture(&r);
        let init =
            DetailDecoder::zeros(DecoderArch::Linear, fx.truth.input_dim, fx.truth.size).unwrap();
        let mut cfg = FitConfig::default();
        cfg.train.iterations = 0;
        let out = train_detail_decoder(&r, &ex, &fx.train, &init, &cfg).unwrap();
        assert_eq!(out.decoder.params, init.params);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_rejects_single_image_subjects() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let mut fx = fixture(&r);
        fx.train[1].images.truncate(1);
        let cfg = FitConfig::default();
        let err = train_detail_decoder(&r, &ex, &fx.train, &fx.truth, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(train_detail_decoder(&r, &ex, &fx.train[..1], &fx.truth, &cfg).is_err());
    }

    #[test]
    fn training_is_reproducible_and_tied_codes_agree() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let fx = fixture(&r);
        let init = DetailDecoder::seeded(DecoderArch::Linear, fx.truth.input_dim, fx.truth.size, 1)
            .unwrap();
        let mut cfg = FitConfig::default();
        cfg.train.iterations = 3;
        cfg.train.tie_subject_codes = true;
        let a = train_detail_decoder(&r, &ex, &fx.train, &init, &cfg).unwrap();
        let b = train_detail_decoder(&r, &ex, &fx.train, &init, &cfg).unwrap();
        assert_eq!(a.decoder.params, b.decoder.params);
        assert_eq!(a.codes, b.codes);
        for s in &a.codes {
            assert!(s.iter().all(|c| *c == s[0]));
        }
        assert_eq!(a.trace.len(), 3);
    }

    #[test]
    fn consistency_loss_with_own_code_is_the_detail_objective() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let fx = fixture(&r);
        let im = &fx.train[0].images[0];
        let scene = DetailScene::new(&r, im.code.as_ref().unwrap()).unwrap();
        let delta = &fx.subject_codes[0];
        let w = LossWeights::default();
        let dc =
            detail_consistency_loss(&r, &ex, &fx.truth, &scene, delta, &im.image, &im.mask, &w)
                .unwrap();
        let disp = fx
            .truth
            .decode(delta, &scene.code.expression, &scene.jaw(&r))
            .unwrap();
        let direct =
            detail_objective(&r, &ex, &scene, &disp, &im.image, &im.mask, &w, false).unwrap();
        assert_eq!(dc, direct.report.weighted_total);
    }
}
