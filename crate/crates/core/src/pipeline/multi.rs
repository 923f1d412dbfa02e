//! Joint fitting of several images of one subject with shape swaps.

use log::debug;

use crate::code::LatentCode;
use crate::error::{Error, Result};
use crate::losses::{
    identity_loss_with_grad, photometric_loss, photometric_loss_grad, FeatureExtractor, LossReport,
    LossWeights,
};
use crate::render::{RenderGrads, Renderer};

use super::coarse::{CoarseFit, CoarseFitter, FitStatus, FitTarget, FitTrace, Layout};
use super::config::StageKind;
use super::detail::round_robin_partner;
use super::optim::Adam;

/// Photometric and identity terms (weighted) of the render of `code_i` with
/// its shape replaced by `shape_j`, plus the cotangents when requested.
pub(crate) fn swapped_terms(
    renderer: &Renderer,
    extractor: &dyn FeatureExtractor,
    code_i: &LatentCode,
    shape_j: &[f64],
    target: &FitTarget,
    target_embedding: &[f64],
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(f64, Option<RenderGrads>)> {
    let mut code = code_i.clone();
    code.shape.copy_from_slice(shape_j);
    let state = renderer.forward(&code)?;
    let pho = photometric_loss(target.image, &state.image, target.mask)?;
    let mut value = weights.pho * pho;
    let mut g_id = None;
    if weights.id > 0.0 {
        let (v, g) = identity_loss_with_grad(extractor, target_embedding, &state.image)?;
        value += weights.id * v;
        g_id = Some(g);
    }
    if !with_grad {
        return Ok((value, None));
    }
    let mut gi = photometric_loss_grad(target.image, &state.image, target.mask);
    for v in &mut gi.data {
        *v *= weights.pho;
    }
    if let Some(g) = g_id {
        for (a, b) in gi.data.iter_mut().zip(&g.data) {
            *a += weights.id * b;
        }
    }
    Ok((value, Some(renderer.backward(&state, Some(&gi), None))))
}

/// `L_sc` of image `i` against the shape of image `j`: the weighted
/// photometric and identity terms of the swapped render.
pub fn shape_consistency_loss(
    renderer: &Renderer,
    extractor: &dyn FeatureExtractor,
    code_i: &LatentCode,
    shape_j: &[f64],
    target: &FitTarget,
    weights: &LossWeights,
) -> Result<f64> {
    let emb = extractor.embed(target.image)?;
    Ok(swapped_terms(
        renderer, extractor, code_i, shape_j, target, &emb, weights, false,
    )?
    .0)
}

/// Best objective so far with its packed codes and reports.
type Checkpoint = (f64, Vec<Vec<f64>>, Vec<LossReport>, LossReport);

#[derive(Debug, Clone)]
pub struct MultiFit {
    pub fits: Vec<CoarseFit>,
    /// Summed per-image terms plus `sc` at the returned codes.
    pub report: LossReport,
    pub trace: FitTrace,
    pub status: FitStatus,
}

impl CoarseFitter<'_> {
    /// Fits all `targets` of one subject from `inits`. With `λ_sc = 0` and
    /// no shared shape this is exactly one [`CoarseFitter::fit_from`] per
    /// image.
    pub fn fit_multi_from(&self, targets: &[FitTarget], inits: &[LatentCode]) -> Result<MultiFit> {
        if targets.len() < 2 {
            return Err(Error::Config(
                "multi-image fitting needs at least two images".into(),
            ));
        }
        if targets.len() != inits.len() {
            return Err(Error::Config(
                "one initial code per image is required".into(),
            ));
        }
        let cfg = self.config;
        if cfg.weights.sc == 0.0 && !cfg.shared_shape {
            let fits = targets
                .iter()
                .zip(inits)
                .map(|(t, c)| self.fit_from(t, c))
                .collect::<Result<Vec<_>>>()?;
            let mut report = LossReport::default();
            for (i, f) in fits.iter().enumerate() {
                for (k, v) in &f.report.terms {
                    report.add(&format!("{i}/{k}"), f.report.weights[k], *v);
                }
            }
            let status = fits
                .iter()
                .map(|f| f.status.clone())
                .find(|s| *s != FitStatus::Completed)
                .unwrap_or(FitStatus::Completed);
            return Ok(MultiFit {
                fits,
                report,
                trace: FitTrace::default(),
                status,
            });
        }
        self.joint_fit(targets, inits)
    }

    pub fn fit_multi(&self, targets: &[FitTarget]) -> Result<MultiFit> {
        let mut inits = targets
            .iter()
            .map(|t| self.initial_code(t))
            .collect::<Result<Vec<_>>>()?;
        if self.config.shared_shape {
            let s = inits[0].shape.clone();
            for c in &mut inits {
                c.shape.clone_from(&s);
            }
        }
        self.fit_multi_from(targets, &inits)
    }

    fn joint_fit(&self, targets: &[FitTarget], inits: &[LatentCode]) -> Result<MultiFit> {
        let cfg = self.config;
        cfg.validate()?;
        let n = targets.len();
        let mut inits = inits.to_vec();
        if cfg.shared_shape {
            let s = inits[0].shape.clone();
            for c in &mut inits {
                c.shape.clone_from(&s);
            }
        }
        for (t, c) in targets.iter().zip(&inits) {
            t.validate(self.renderer)?;
            c.validate(self.renderer.model, self.renderer.albedo)?;
        }
        let embeddings = targets
            .iter()
            .map(|t| self.extractor.embed(t.image))
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout::new(&inits[0]);
        let shape = layout.shape_range();
        let free = self
            .config
            .free_joints
            .clone()
            .unwrap_or_else(|| super::coarse::default_free_joints(self.renderer.model));
        let mut xs: Vec<Vec<f64>> = inits.iter().map(|c| layout.pack(c)).collect();
        let mut trace = FitTrace::default();
        let mut final_reports: Vec<LossReport> = vec![LossReport::default(); n];
        let mut final_joint = LossReport::default();

        for stage in &cfg.stages {
            let weights = stage.weights.as_ref().unwrap_or(&cfg.weights);
            let mut opts: Vec<Adam> = (0..n).map(|_| Adam::new(cfg.adam, layout.len)).collect();
            let mut best: Option<Checkpoint> = None;
            for it in 0..=stage.iterations {
                let last = it == stage.iterations;
                let codes: Vec<LatentCode> = xs
                    .iter()
                    .zip(&inits)
                    .map(|(x, c)| layout.unpack(x, c))
                    .collect();
                let mut reports = Vec::with_capacity(n);
                let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n);
                for i in 0..n {
                    let e = self.evaluate(
                        &codes[i],
                        &targets[i],
                        &embeddings[i],
                        weights,
                        stage.kind,
                        !last,
                    )?;
                    if let Some(g) = &e.grads {
                        grads.push(layout.flatten(g, codes[i].camera.scale));
                    }
                    reports.push(e.report);
                }
                let mut sc_total = 0.0;
                if stage.kind == StageKind::Full && weights.sc > 0.0 {
                    for i in 0..n {
                        let j = round_robin_partner(i, n, it as u64 + cfg.seed);
                        let (v, g) = swapped_terms(
                            self.renderer,
                            self.extractor,
                            &codes[i],
                            &codes[j].shape,
                            &targets[i],
                            &embeddings[i],
                            weights,
                            !last,
                        )?;
                        sc_total += v;
                        if let Some(g) = g {
                            let flat = layout.flatten(&g, codes[i].camera.scale);
                            for k in 0..layout.len {
                                let dst = if shape.contains(&k) { j } else { i };
                                grads[dst][k] += weights.sc * flat[k];
                            }
                        }
                    }
                }
                let mut joint = LossReport::default();
                for (i, r) in reports.iter().enumerate() {
                    for (k, v) in &r.terms {
                        joint.add(&format!("{i}/{k}"), r.weights[k], *v);
                    }
                }
                if stage.kind == StageKind::Full {
                    joint.add("sc", weights.sc, sc_total);
                }
                let total = joint.weighted_total;
                if !total.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
                    let Some((_, bx, brep, bj)) = best else {
                        return Err(Error::NonFinite {
                            stage: stage.name.clone(),
                            iteration: it,
                        });
                    };
                    return Ok(self.multi_result(
                        &layout,
                        &bx,
                        &inits,
                        brep,
                        bj,
                        trace,
                        FitStatus::Diverged {
                            stage: stage.name.clone(),
                            iteration: it,
                        },
                    ));
                }
                if best.as_ref().is_none_or(|b| total < b.0) {
                    best = Some((total, xs.clone(), reports.clone(), joint.clone()));
                }
                let lr = stage.lr_at(it.min(stage.iterations.saturating_sub(1)));
                trace.push(
                    &stage.name,
                    it,
                    lr,
                    &joint,
                    best.as_ref().map_or(total, |b| b.0),
                );
                if last {
                    break;
                }
                if cfg.shared_shape {
                    let mut sum = vec![0.0; shape.len()];
                    for g in &grads {
                        for (a, b) in sum.iter_mut().zip(&g[shape.clone()]) {
                            *a += b;
                        }
                    }
                    for g in &mut grads {
                        g[shape.clone()].copy_from_slice(&sum);
                    }
                }
                let rates = layout.rates(stage, lr, &free);
                for i in 0..n {
                    opts[i].step_with_rates(&mut xs[i], &grads[i], &rates);
                }
            }
            let (total, bx, brep, bj) = best.expect("at least one evaluation");
            debug!("joint stage {} done: best total {total:.6e}", stage.name);
            xs = bx;
            final_reports = brep;
            final_joint = bj;
        }
        Ok(self.multi_result(
            &layout,
            &xs,
            &inits,
            final_reports,
            final_joint,
            trace,
            FitStatus::Completed,
        ))
    }

    fn multi_result(
        &self,
        layout: &Layout,
        xs: &[Vec<f64>],
        inits: &[LatentCode],
        reports: Vec<LossReport>,
        joint: LossReport,
        trace: FitTrace,
        status: FitStatus,
    ) -> MultiFit {
        let fits = xs
            .iter()
            .zip(inits)
            .zip(reports)
            .map(|((x, c), report)| CoarseFit {
                code: layout.unpack(x, c),
                report,
                trace: FitTrace::default(),
                status: status.clone(),
            })
            .collect();
        MultiFit {
            fits,
            report: joint,
            trace,
            status,
        }
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` (0 when both are zero).
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let m = na.max(nb);
    if m == 0.0 {
        0.0
    } else {
        d / m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{identity_loss, ToyExtractor};
    use crate::pipeline::synth::{random_code, render_synthetic, SynthSpec, SyntheticImage};
    use crate::pipeline::testutil::Toy;
    use crate::pipeline::{FitConfig, Stage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subject(r: &Renderer) -> Vec<SyntheticImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_code(r, &SynthSpec::default(), &mut rng);
        let mut b = random_code(r, &SynthSpec::default(), &mut rng);
        b.shape.clone_from(&a.shape);
        vec![
            render_synthetic(r, &a).unwrap(),
            render_synthetic(r, &b).unwrap(),
        ]
    }

    fn targets(obs: &[SyntheticImage]) -> Vec<FitTarget<'_>> {
        obs.iter()
            .map(|o| FitTarget {
                image: &o.image,
                landmarks: &o.landmarks,
                mask: &o.mask,
            })
            .collect()
    }

    #[test]
    fn identical_shapes_give_unswapped_terms() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let obs = subject(&r);
        let t = targets(&obs);
        let w = LossWeights::default();
        let mut code = obs[0].code.clone();
        code.camera.translation[0] += 1.3;
        let sc = shape_consistency_loss(&r, &ex, &code, &code.shape, &t[0], &w).unwrap();
        let img = r.forward(&code).unwrap().image;
        let direct = w.pho * photometric_loss(&obs[0].image, &img, &obs[0].mask).unwrap()
            + w.id * identity_loss(&ex, &obs[0].image, &img).unwrap();
        assert!((sc - direct).abs() <= 1e-9);
    }

    #[test]
    fn zero_weight_matches_independent_fits() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let obs = subject(&r);
        let t = targets(&obs);
        let mut cfg = FitConfig {
            stages: vec![Stage::landmarks(5), Stage::full(5)],
            ..Default::default()
        };
        cfg.weights.sc = 0.0;
        let f = CoarseFitter::new(&r, &ex, &cfg);
        let multi = f.fit_multi(&t).unwrap();
        for (m, ti) in multi.fits.iter().zip(&t) {
            let single = f.fit(ti).unwrap();
            assert_eq!(m.code, single.code);
            assert_eq!(m.report, single.report);
        }
    }

    #[test]
    fn joint_fit_runs_and_shares_shape() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let obs = subject(&r);
        let t = targets(&obs);
        let cfg = FitConfig {
            stages: vec![Stage::landmarks(5), Stage::full(5)],
            shared_shape: true,
            ..Default::default()
        };
        let f = CoarseFitter::new(&r, &ex, &cfg);
        let m = f.fit_multi(&t).unwrap();
        assert_eq!(m.status, FitStatus::Completed);
        assert_eq!(m.fits[0].code.shape, m.fits[1].code.shape);
        assert!(m.report.terms.contains_key("sc"));
        assert!(m.report.terms.contains_key("1/pho"));
        assert_eq!(m.trace.rows.len(), 12);
        for w in m.trace.rows.windows(2).filter(|w| w[0].stage == w[1].stage) {
            assert!(w[1].best <= w[0].best);
        }
        let again = f.fit_multi(&t).unwrap();
        assert_eq!(again.fits[1].code, m.fits[1].code);
    }

    #[test]
    fn needs_two_images() {
        let toy = Toy::new();
        let r = toy.renderer(64);
        let ex = ToyExtractor::default();
        let obs = subject(&r);
        let t = targets(&obs);
        let cfg = FitConfig::default();
        assert!(CoarseFitter::new(&r, &ex, &cfg).fit_multi(&t[..1]).is_err());
    }

    #[test]
    fn relative_distance() {
        assert_eq!(relative_l2(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_l2(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert!((relative_l2(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((relative_l2(&[1.0, 0.0], &[0.0, 2.0]) - 5f64.sqrt() / 2.0).abs() < 1e-15);
    }
}
