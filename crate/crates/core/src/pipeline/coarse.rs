//! Analysis-by-synthesis fitting of the coarse code.

use std::collections::BTreeMap;
use std::ops::Range;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::code::{Group, LatentCode};
use crate::error::{check_dim, Error, Result};
use crate::losses::{
    coarse_regularizers, eye_closure_loss, eye_closure_loss_grad, identity_loss_with_grad,
    landmark_loss, landmark_loss_grad, mask_area, photometric_loss, photometric_loss_grad,
    FeatureExtractor, LossReport, LossWeights,
};
use crate::model::{ParametricHeadModel, Vec3};
use crate::render::sh::SH_C0;
use crate::render::{Camera, Image, Lighting, RenderGrads, Renderer};

use super::config::{FitConfig, Stage, StageKind};
use super::optim::Adam;

/// One observed image with its landmarks and skin mask.
#[derive(Debug, Clone, Copy)]
pub struct FitTarget<'a> {
    pub image: &'a Image,
    pub landmarks: &'a [[f64; 2]],
    pub mask: &'a Image,
}

impl FitTarget<'_> {
    pub fn validate(&self, renderer: &Renderer) -> Result<()> {
        let im = self.image;
        if im.width != renderer.width || im.height != renderer.height || im.channels != 3 {
            return Err(Error::Validation(format!(
                "image must be {}x{}x3, got {}x{}x{}",
                renderer.width, renderer.height, im.width, im.height, im.channels
            )));
        }
        if self.mask.width != im.width || self.mask.height != im.height || self.mask.channels != 1 {
            return Err(Error::Validation(
                "mask must be single-channel and match the image".into(),
            ));
        }
        check_dim(
            "landmarks",
            renderer.model.landmarks.len(),
            self.landmarks.len(),
        )?;
        if self.landmarks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("landmarks are not finite".into()));
        }
        Ok(())
    }
}

/// One row of the optimization trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    /// Best total of the stage so far (non-increasing within a stage).
    pub best: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
}

impl FitTrace {
    pub fn push(&mut self, stage: &str, iteration: usize, lr: f64, report: &LossReport, best: f64) {
        self.rows.push(TraceRow {
            stage: stage.to_string(),
            iteration,
            lr,
            total: report.weighted_total,
            best,
            terms: report.terms.clone(),
        });
    }

    /// Union of term names, in sorted order.
    pub fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.terms.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FitStatus {
    Completed,
    /// A non-finite loss stopped the run; the result is the last finite
    /// best checkpoint.
    Diverged {
        stage: String,
        iteration: usize,
    },
}

#[derive(Debug, Clone)]
pub struct CoarseFit {
    pub code: LatentCode,
    /// Loss terms of `code` under the last stage's objective.
    pub report: LossReport,
    pub trace: FitTrace,
    pub status: FitStatus,
}

/// Offsets of each group in the flat optimization vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    shape: Range<usize>,
    expression: Range<usize>,
    pose: Range<usize>,
    albedo: Range<usize>,
    light: Range<usize>,
    scale: usize,
    translation: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub(crate) fn new(code: &LatentCode) -> Self {
        let mut o = 0;
        let mut take = |n: usize| {
            let r = o..o + n;
            o += n;
            r
        };
        let shape = take(code.shape.len());
        let expression = take(code.expression.len());
        let pose = take(code.pose.len());
        let albedo = take(code.albedo.len());
        let light = take(27);
        let scale = take(1).start;
        let translation = take(2);
        Self {
            shape,
            expression,
            pose,
            albedo,
            light,
            scale,
            translation,
            len: o,
        }
    }

    fn range(&self, g: Group) -> Range<usize> {
        match g {
            Group::Shape => self.shape.clone(),
            Group::Expression => self.expression.clone(),
            Group::Pose => self.pose.clone(),
            Group::Albedo => self.albedo.clone(),
            Group::Light => self.light.clone(),
            Group::Scale => self.scale..self.scale + 1,
            Group::Translation => self.translation.clone(),
        }
    }

    pub(crate) fn shape_range(&self) -> Range<usize> {
        self.shape.clone()
    }

    /// Flat vector with the scale stored as `ln s`.
    pub(crate) fn pack(&self, code: &LatentCode) -> Vec<f64> {
        let mut x = vec![0.0; self.len];
        x[self.shape.clone()].copy_from_slice(&code.shape);
        x[self.expression.clone()].copy_from_slice(&code.expression);
        x[self.pose.clone()].copy_from_slice(&code.pose);
        x[self.albedo.clone()].copy_from_slice(&code.albedo);
        x[self.light.clone()].copy_from_slice(&code.light.to_flat());
        x[self.scale] = code.camera.scale.ln();
        x[self.translation.clone()].copy_from_slice(&code.camera.translation);
        x
    }

    /// Writes `x` into a copy of `like` (detail code is carried over).
    pub(crate) fn unpack(&self, x: &[f64], like: &LatentCode) -> LatentCode {
        let mut c = like.clone();
        c.shape.copy_from_slice(&x[self.shape.clone()]);
        c.expression.copy_from_slice(&x[self.expression.clone()]);
        c.pose.copy_from_slice(&x[self.pose.clone()]);
        c.albedo.copy_from_slice(&x[self.albedo.clone()]);
        c.light = Lighting::from_flat(&x[self.light.clone()]).expect("27 coefficients");
        c.camera = Camera::new(
            x[self.scale].exp(),
            [x[self.translation.start], x[self.translation.start + 1]],
        );
        c
    }

    /// Flattened gradient; the scale entry is `d/d ln s = s * d/ds`.
    pub(crate) fn flatten(&self, g: &RenderGrads, scale: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.len];
        x[self.shape.clone()].copy_from_slice(&g.shape);
        x[self.expression.clone()].copy_from_slice(&g.expression);
        x[self.pose.clone()].copy_from_slice(&g.pose);
        x[self.albedo.clone()].copy_from_slice(&g.albedo);
        x[self.light.clone()].copy_from_slice(&g.light.to_flat());
        x[self.scale] = g.scale * scale;
        x[self.translation.clone()].copy_from_slice(&g.translation);
        x
    }

    /// Per-coordinate step sizes of `stage` at base rate `lr`.
    pub(crate) fn rates(&self, stage: &Stage, lr: f64, free_joints: &[usize]) -> Vec<f64> {
        let mut r = vec![0.0; self.len];
        for g in Group::ALL {
            if stage.freeze.contains(&g) {
                continue;
            }
            let v = lr * stage.rates.get(g);
            for i in self.range(g) {
                r[i] = v;
            }
        }
        for (j, chunk) in r[self.pose.clone()].chunks_exact_mut(3).enumerate() {
            if !free_joints.contains(&j) {
                chunk.fill(0.0);
            }
        }
        r
    }
}

/// Joints optimized by default: the root and the jaw.
pub fn default_free_joints(model: &ParametricHeadModel) -> Vec<usize> {
    vec![0, model.jaw_joint]
}

/// Fits coarse codes to images with one renderer and one feature extractor.
pub struct CoarseFitter<'a> {
    pub renderer: &'a Renderer<'a>,
    pub extractor: &'a dyn FeatureExtractor,
    pub config: &'a FitConfig,
}

/// Loss terms and (optionally) their gradient for one image.
pub(crate) struct Evaluation {
    pub report: LossReport,
    pub grads: Option<RenderGrads>,
}

impl<'a> CoarseFitter<'a> {
    pub fn new(
        renderer: &'a Renderer<'a>,
        extractor: &'a dyn FeatureExtractor,
        config: &'a FitConfig,
    ) -> Self {
        Self {
            renderer,
            extractor,
            config,
        }
    }

    fn free_joints(&self) -> Vec<usize> {
        self.config
            .free_joints
            .clone()
            .unwrap_or_else(|| default_free_joints(self.renderer.model))
    }

    /// Initial code from the landmarks (scale and translation), the image
    /// (ambient light) and zeros elsewhere.
    pub fn initial_code(&self, target: &FitTarget) -> Result<LatentCode> {
        let r = self.renderer;
        let mut code = LatentCode::for_model(r.model, r.albedo);
        let (_, lm3, _) = r.landmarks_only(&code)?;
        code.camera = similarity_from_landmarks(&lm3, target.landmarks)?;
        let area = mask_area(target.mask);
        let mut rgb = [0.5; 3];
        if area > 0.0 {
            for (c, v) in rgb.iter_mut().enumerate() {
                let s: f64 = (0..target.mask.data.len())
                    .map(|i| target.mask.data[i] * target.image.data[3 * i + c])
                    .sum();
                *v = s / area;
            }
        }
        let albedo_mean = mean_albedo(r);
        code.light = Lighting::ambient(std::array::from_fn(|c| {
            rgb[c] / (albedo_mean[c].max(1e-3) * SH_C0)
        }));
        if self.config.init_jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            let n = Normal::new(0.0, self.config.init_jitter).expect("finite jitter");
            for v in code
                .shape
                .iter_mut()
                .chain(code.expression.iter_mut())
                .chain(code.albedo.iter_mut())
            {
                *v += n.sample(&mut rng);
            }
        }
        Ok(code)
    }

    /// Coarse objective of one image. `kind` selects the landmark-only or
    /// the complete objective.
    pub(crate) fn evaluate(
        &self,
        code: &LatentCode,
        target: &FitTarget,
        target_embedding: &[f64],
        weights: &LossWeights,
        kind: StageKind,
        with_grad: bool,
    ) -> Result<Evaluation> {
        let r = self.renderer;
        let pairs = &r.model.eyelid_pairs;
        let mut report = LossReport::default();
        let state = match kind {
            StageKind::Full => Some(r.forward(code)?),
            StageKind::Landmarks => None,
        };
        let lm2 = match &state {
            Some(st) => st.landmarks_2d.clone(),
            None => self.project_landmarks(code)?,
        };
        let lmk = landmark_loss(target.landmarks, &lm2, &weights.landmark_weights)?;
        let eye = eye_closure_loss(target.landmarks, &lm2, pairs)?;
        let mut g_lm = vec![[0.0; 2]; lm2.len()];
        if with_grad {
            let gl = landmark_loss_grad(target.landmarks, &lm2, &weights.landmark_weights);
            let ge = eye_closure_loss_grad(target.landmarks, &lm2, pairs);
            for i in 0..g_lm.len() {
                for k in 0..2 {
                    g_lm[i][k] = weights.lmk * gl[i][k] + weights.eye * ge[i][k];
                }
            }
        }
        report.add("lmk", weights.lmk, lmk);
        report.add("eye", weights.eye, eye);
        let (rb, rp, ra) = coarse_regularizers(&code.shape, &code.expression, &code.albedo);
        report.add("beta", weights.beta, rb);
        report.add("psi", weights.psi, rp);

        let mut grads = None;
        match state {
            None => {
                if with_grad {
                    let (geometry, lm3, _) = r.landmarks_only(code)?;
                    grads = Some(r.landmarks_backward(&geometry, &lm3, &code.camera, &g_lm));
                }
            }
            Some(state) => {
                report.add("alpha", weights.alpha, ra);
                let pho = photometric_loss(target.image, &state.image, target.mask)?;
                report.add_normalized("pho", weights.pho, pho, mask_area(target.mask));
                let (id, g_id) = if weights.id > 0.0 {
                    let (v, g) =
                        identity_loss_with_grad(self.extractor, target_embedding, &state.image)?;
                    (v, Some(g))
                } else {
                    (0.0, None)
                };
                report.add("id", weights.id, id);
                if with_grad {
                    let mut gi = photometric_loss_grad(target.image, &state.image, target.mask);
                    for v in &mut gi.data {
                        *v *= weights.pho;
                    }
                    if let Some(g) = g_id {
                        for (a, b) in gi.data.iter_mut().zip(&g.data) {
                            *a += weights.id * b;
                        }
                    }
                    grads = Some(r.backward(&state, Some(&gi), Some(&g_lm)));
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            for (gv, v) in g.shape.iter_mut().zip(&code.shape) {
                *gv += 2.0 * weights.beta * v;
            }
            for (gv, v) in g.expression.iter_mut().zip(&code.expression) {
                *gv += 2.0 * weights.psi * v;
            }
            if kind == StageKind::Full {
                for (gv, v) in g.albedo.iter_mut().zip(&code.albedo) {
                    *gv += 2.0 * weights.alpha * v;
                }
            }
        }
        Ok(Evaluation { report, grads })
    }

    fn project_landmarks(&self, code: &LatentCode) -> Result<Vec<[f64; 2]>> {
        Ok(self.renderer.landmarks_only(code)?.2)
    }

    /// Fits from [`Self::initial_code`].
    pub fn fit(&self, target: &FitTarget) -> Result<CoarseFit> {
        let init = self.initial_code(target)?;
        self.fit_from(target, &init)
    }

    /// Runs every configured stage starting at `init`.
    pub fn fit_from(&self, target: &FitTarget, init: &LatentCode) -> Result<CoarseFit> {
        self.config.validate()?;
        target.validate(self.renderer)?;
        init.validate(self.renderer.model, self.renderer.albedo)?;
        let embedding = self.extractor.embed(target.image)?;
        let layout = Layout::new(init);
        let free = self.free_joints();
        let mut x = layout.pack(init);
        let mut trace = FitTrace::default();
        let mut report = LossReport::default();

        for stage in &self.config.stages {
            let weights = stage.weights.as_ref().unwrap_or(&self.config.weights);
            let mut adam = Adam::new(self.config.adam, layout.len);
            let mut best_x = x.clone();
            let mut best: Option<LossReport> = None;
            for it in 0..=stage.iterations {
                let code = layout.unpack(&x, init);
                let last = it == stage.iterations;
                let eval =
                    match self.evaluate(&code, target, &embedding, weights, stage.kind, !last) {
                        Ok(e) => e,
                        Err(e) if code.is_finite() => return Err(e),
                        Err(_) => {
                            return self.diverged(stage, it, &layout, &best_x, init, best, trace);
                        }
                    };
                let total = eval.report.weighted_total;
                if !total.is_finite() {
                    return self.diverged(stage, it, &layout, &best_x, init, best, trace);
                }
                if best.as_ref().is_none_or(|b| total < b.weighted_total) {
                    best = Some(eval.report.clone());
                    best_x.copy_from_slice(&x);
                }
                let lr = stage.lr_at(it.min(stage.iterations.saturating_sub(1)));
                let best_total = best.as_ref().map_or(total, |b| b.weighted_total);
                trace.push(&stage.name, it, lr, &eval.report, best_total);
                if last {
                    break;
                }
                let g = eval.grads.expect("gradient requested");
                let flat = layout.flatten(&g, code.camera.scale);
                if flat.iter().any(|v| !v.is_finite()) {
                    return self.diverged(stage, it, &layout, &best_x, init, best, trace);
                }
                adam.step_with_rates(&mut x, &flat, &layout.rates(stage, lr, &free));
            }
            debug!(
                "stage {} done: best total {:.6e}",
                stage.name,
                best.as_ref().map_or(f64::NAN, |b| b.weighted_total)
            );
            x = best_x;
            if let Some(b) = best {
                report = b;
            }
        }
        Ok(CoarseFit {
            code: layout.unpack(&x, init),
            report,
            trace,
            status: FitStatus::Completed,
        })
    }

    fn diverged(
        &self,
        stage: &Stage,
        iteration: usize,
        layout: &Layout,
        best_x: &[f64],
        init: &LatentCode,
        best: Option<LossReport>,
        trace: FitTrace,
    ) -> Result<CoarseFit> {
        warn!(
            "non-finite loss in stage {} at iteration {iteration}",
            stage.name
        );
        let Some(report) = best else {
            return Err(Error::NonFinite {
                stage: stage.name.clone(),
                iteration,
            });
        };
        Ok(CoarseFit {
            code: layout.unpack(best_x, init),
            report,
            trace,
            status: FitStatus::Diverged {
                stage: stage.name.clone(),
                iteration,
            },
        })
    }
}

fn mean_albedo(r: &Renderer) -> [f64; 3] {
    let mask = &r.mask_uv;
    let n: f64 = mask.data.iter().sum();
    std::array::from_fn(|c| {
        let s: f64 = (0..mask.data.len())
            .map(|i| mask.data[i] * r.albedo.mean.data[3 * i + c])
            .sum();
        if n > 0.0 {
            s / n
        } else {
            0.5
        }
    })
}

/// Least-squares scale and translation mapping model landmarks to 2D
/// landmarks (no rotation).
pub fn similarity_from_landmarks(model_lm: &[Vec3], image_lm: &[[f64; 2]]) -> Result<Camera> {
    check_dim("landmarks", model_lm.len(), image_lm.len())?;
    let n = model_lm.len() as f64;
    let pm = model_lm
        .iter()
        .fold([0.0; 2], |a, p| [a[0] + p.x / n, a[1] + p.y / n]);
    let qm = image_lm
        .iter()
        .fold([0.0; 2], |a, q| [a[0] + q[0] / n, a[1] + q[1] / n]);
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, q) in model_lm.iter().zip(image_lm) {
        let dp = [p.x - pm[0], p.y - pm[1]];
        let dq = [q[0] - qm[0], q[1] - qm[1]];
        num += dp[0] * dq[0] + dp[1] * dq[1];
        den += dp[0] * dp[0] + dp[1] * dp[1];
    }
    if !(den > 0.0) || !(num > 0.0) {
        return Err(Error::Degenerate(
            "landmarks do not determine a positive scale".into(),
        ));
    }
    let s = num / den;
    Ok(Camera::new(s, [qm[0] - s * pm[0], qm[1] - s * pm[1]]))
}

/// Mean Euclidean distance between two landmark sets, in pixels.
pub fn mean_landmark_error(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n
}

/// Fits one image with a renderer sized to it and the built-in extractor.
pub fn fit_coarse(
    model: &ParametricHeadModel,
    albedo: &crate::render::AlbedoModel,
    image: &Image,
    landmarks: &[[f64; 2]],
    mask: &Image,
    config: &FitConfig,
) -> Result<CoarseFit> {
    if image.width != image.height {
        return Err(Error::Validation("images must be square".into()));
    }
    let renderer = Renderer::new(model, albedo, image.width);
    let extractor = crate::losses::ToyExtractor::default();
    let fitter = CoarseFitter::new(&renderer, &extractor, config);
    fitter.fit(&FitTarget {
        image,
        landmarks,
        mask,
    })
}
