//! Optimization criteria on synthetic data with known ground truth.

use std::time::Instant;

use facefit::detail::{DecoderArch, DetailDecoder};
use facefit::losses::{identity_loss, photometric_loss, LossWeights, ToyExtractor};
use facefit::model::{synthesize_toy_albedo, synthesize_toy_model, ToyModelSpec};
use facefit::pipeline::detail::detail_consistency_loss;
use facefit::pipeline::synth::{
    perturb_code, random_code, render_synthetic, separable_detail_fixture, DetailFixtureSpec,
    Perturbation, SynthSpec, SyntheticImage,
};
use facefit::pipeline::{
    mean_landmark_error, relative_l2, shape_consistency_loss, train_detail_decoder, CoarseFitter,
    DetailScene, FitConfig, FitTarget,
};
use facefit::render::Renderer;
use facefit::LatentCode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::Outcome;

fn target(o: &SyntheticImage) -> FitTarget<'_> {
    FitTarget {
        image: &o.image,
        landmarks: &o.landmarks,
        mask: &o.mask,
    }
}

pub fn round_trip_fitting() -> Outcome {
    let t = Instant::now();
    let spec = ToyModelSpec {
        subdivisions: 3,
        uv_size: 128,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 224);
    let ex = ToyExtractor::default();
    let cfg = FitConfig::default();
    let iterations = cfg.total_iterations();
    if iterations > 2000 {
        return Err(format!("schedule has {iterations} iterations"));
    }
    let fitter = CoarseFitter::new(&r, &ex, &cfg);
    let mut worst_lmk: f64 = 0.0;
    let mut worst_pho: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let truth = random_code(&r, &SynthSpec::default(), &mut rng);
        let obs = render_synthetic(&r, &truth).map_err(|e| e.to_string())?;
        let init = perturb_code(&truth, model.jaw_joint, &Perturbation::default(), &mut rng);
        let p0 = photometric_loss(
            &obs.image,
            &r.forward(&init).map_err(|e| e.to_string())?.image,
            &obs.mask,
        )
        .map_err(|e| e.to_string())?;
        let fit = fitter
            .fit_from(&target(&obs), &init)
            .map_err(|e| e.to_string())?;
        let st = r.forward(&fit.code).map_err(|e| e.to_string())?;
        let lmk = mean_landmark_error(&obs.landmarks, &st.landmarks_2d);
        let ratio =
            photometric_loss(&obs.image, &st.image, &obs.mask).map_err(|e| e.to_string())? / p0;
        worst_lmk = worst_lmk.max(lmk);
        worst_pho = worst_pho.max(ratio);
        if !(lmk < 1.0 && ratio < 0.02) {
            failures.push(format!(
                "seed {seed}: landmarks {lmk:.3} px, photometric {:.2}%",
                100.0 * ratio
            ));
        }
    }
    let elapsed = t.elapsed();
    let summary = format!(
        "10 fits x {iterations} iterations: worst landmark error {worst_lmk:.3} px, worst photometric {:.2}% of initial, {elapsed:.0?}",
        100.0 * worst_pho
    );
    if !failures.is_empty() {
        return Err(format!("{summary}; {}", failures.join("; ")));
    }
    if elapsed.as_secs_f64() >= 600.0 {
        return Err(format!("{summary}; over 10 minutes"));
    }
    Ok(summary)
}

/// Largest relative L2 gap between the two fitted shapes of each subject,
/// and between a fitted shape and the truth.
fn shape_agreement(
    r: &Renderer,
    sc: f64,
    subjects: &[[SyntheticImage; 2]],
    inits: &[Vec<LatentCode>],
) -> Result<(f64, f64), String> {
    let ex = ToyExtractor::default();
    let mut cfg = FitConfig::default();
    cfg.weights.sc = sc;
    let fitter = CoarseFitter::new(r, &ex, &cfg);
    let mut agree: f64 = 0.0;
    let mut truth: f64 = 0.0;
    for (obs, init) in subjects.iter().zip(inits) {
        let targets: Vec<FitTarget> = obs.iter().map(target).collect();
        let fit = fitter
            .fit_multi_from(&targets, init)
            .map_err(|e| e.to_string())?;
        let (b0, b1) = (&fit.fits[0].code.shape, &fit.fits[1].code.shape);
        agree = agree.max(relative_l2(b0, b1));
        truth = truth
            .max(relative_l2(b0, &obs[0].code.shape))
            .max(relative_l2(b1, &obs[0].code.shape));
    }
    Ok((agree, truth))
}

pub fn shape_consistency() -> Outcome {
    let t = Instant::now();
    // few enough shape components for two 128 px views to determine them
    let spec = ToyModelSpec {
        subdivisions: 3,
        shape_dim: 10,
        expression_dim: 10,
        uv_size: 64,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 128);
    let ex = ToyExtractor::default();
    let weights = LossWeights::default();

    let mut subjects = Vec::new();
    let mut inits = Vec::new();
    let mut worst_identity: f64 = 0.0;
    for subject in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + subject);
        let a = random_code(&r, &SynthSpec::default(), &mut rng);
        let mut b = random_code(&r, &SynthSpec::default(), &mut rng);
        b.shape.clone_from(&a.shape);
        let obs = [
            render_synthetic(&r, &a).map_err(|e| e.to_string())?,
            render_synthetic(&r, &b).map_err(|e| e.to_string())?,
        ];
        // the swap term with the own shape reduces to the unswapped terms
        for o in &obs {
            let sc = shape_consistency_loss(&r, &ex, &o.code, &o.code.shape, &target(o), &weights)
                .map_err(|e| e.to_string())?;
            let img = r.forward(&o.code).map_err(|e| e.to_string())?.image;
            let direct = weights.pho
                * photometric_loss(&o.image, &img, &o.mask).map_err(|e| e.to_string())?
                + weights.id * identity_loss(&ex, &o.image, &img).map_err(|e| e.to_string())?;
            worst_identity = worst_identity.max((sc - direct).abs());
        }
        inits.push(
            obs.iter()
                .map(|o| perturb_code(&o.code, model.jaw_joint, &Perturbation::default(), &mut rng))
                .collect::<Vec<_>>(),
        );
        subjects.push(obs);
    }
    let (agree, truth) = shape_agreement(&r, 1.0, &subjects, &inits)?;
    let (agree_off, _) = shape_agreement(&r, 0.0, &subjects, &inits)?;
    let elapsed = t.elapsed();
    let summary = format!(
        "2 subjects: fitted shapes agree within {:.2}% ({:.2}% from truth; {:.2}% without the swap term), swap-with-own-shape gap {worst_identity:.1e}, {elapsed:.0?}",
        100.0 * agree,
        100.0 * truth,
        100.0 * agree_off
    );
    if agree < 0.05 && worst_identity <= 1e-9 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

pub fn disentanglement() -> Outcome {
    let t = Instant::now();
    let spec = ToyModelSpec {
        subdivisions: 3,
        uv_size: 32,
        ..Default::default()
    };
    let model = synthesize_toy_model(&spec);
    let albedo = synthesize_toy_albedo(&spec);
    let r = Renderer::new(&model, &albedo, 64);
    let ex = ToyExtractor::default();
    let fx =
        separable_detail_fixture(&r, &DetailFixtureSpec::default()).map_err(|e| e.to_string())?;
    let mut init = DetailDecoder::seeded(DecoderArch::Linear, fx.truth.input_dim, 32, 1)
        .map_err(|e| e.to_string())?;
    for p in &mut init.params {
        *p *= 0.1;
    }
    let eval_weights = FitConfig::default().weights;
    let mut heldout = Vec::new();
    for dc in [1.0, 0.0] {
        let mut cfg = FitConfig::default();
        cfg.weights.dc = dc;
        cfg.train.iterations = 300;
        cfg.train.decoder_lr = 3e-3;
        cfg.train.code_lr = 3e-2;
        let tr =
            train_detail_decoder(&r, &ex, &fx.train, &init, &cfg).map_err(|e| e.to_string())?;
        // held-out images decoded with the detail codes learned for the
        // same subject on other images
        let mut total = 0.0;
        let mut n = 0.0;
        for (s, set) in fx.heldout.iter().enumerate() {
            for im in &set.images {
                let code = im.code.as_ref().ok_or("held-out image without a code")?;
                let scene = DetailScene::new(&r, code).map_err(|e| e.to_string())?;
                for delta in &tr.codes[s] {
                    total += detail_consistency_loss(
                        &r,
                        &ex,
                        &tr.decoder,
                        &scene,
                        delta,
                        &im.image,
                        &im.mask,
                        &eval_weights,
                    )
                    .map_err(|e| e.to_string())?;
                    n += 1.0;
                }
            }
        }
        heldout.push(total / n);
    }
    let elapsed = t.elapsed();
    let ratio = heldout[1] / heldout[0];
    let summary = format!(
        "held-out within-subject swap loss {:.3} with the consistency term vs {:.3} without ({ratio:.2}x), {elapsed:.0?}",
        heldout[0], heldout[1]
    );
    if ratio >= 1.5 && elapsed.as_secs_f64() < 900.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}
