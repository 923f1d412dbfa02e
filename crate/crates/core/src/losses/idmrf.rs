//! Implicit-diversity MRF loss on extractor feature patches.
//!
//! For generated patches `g_i` and target patches `t_j`:
//! `d_ij = (1 - cos(g_i, t_j)) / 2`, `r_ij = d_ij / (min_k d_ik + eps)`,
//! `w_ij = softmax_j((1 - r_ij) / h)`, and the term is
//! `-log(mean_j max_i w_ij)`. Scales are weighted 2 (coarsest) : 1 (next).

use log::warn;
use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, FeatureGrid};
use crate::error::{Error, Result};
use crate::render::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdMrfParams {
    pub bandwidth: f64,
    pub epsilon: f64,
    /// Weight of the coarsest scale; the next finer scale has weight 1.
    pub coarse_weight: f64,
    /// Minimum fraction of masked pixels for a cell to count as face region.
    pub cell_coverage: f64,
}

impl Default for IdMrfParams {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            epsilon: 1e-5,
            coarse_weight: 2.0,
            cell_coverage: 0.5,
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let r = 1.0 / (v.iter().map(|x| x * x).sum::<f64>() + NORM_FLOOR * NORM_FLOOR).sqrt();
    (v.iter().map(|x| x * r).collect(), r)
}

/// MRF term of one scale and its gradient with respect to each generated patch.
pub fn mrf_term(gen: &[&[f64]], tar: &[&[f64]], params: &IdMrfParams) -> (f64, Vec<Vec<f64>>) {
    let (ng, nt) = (gen.len(), tar.len());
    if ng == 0 || nt == 0 {
        return (0.0, vec![Vec::new(); ng]);
    }
    let gn: Vec<(Vec<f64>, f64)> = gen.iter().map(|g| normalized(g)).collect();
    let tn: Vec<Vec<f64>> = tar.iter().map(|t| normalized(t).0).collect();
    let h = params.bandwidth;
    let eps = params.epsilon;

    let mut dist = vec![0.0; ng * nt];
    let mut rmin = vec![(0usize, 0.0); ng];
    let mut cs = vec![0.0; ng * nt];
    for i in 0..ng {
        let row = &mut dist[i * nt..(i + 1) * nt];
        for j in 0..nt {
            let c: f64 = gn[i].0.iter().zip(&tn[j]).map(|(a, b)| a * b).sum();
            row[j] = (1.0 - c) / 2.0;
        }
        let (k, m) =
            row.iter().enumerate().fold(
                (0, f64::INFINITY),
                |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc },
            );
        rmin[i] = (k, m);
        let z: Vec<f64> = row.iter().map(|d| (1.0 - d / (m + eps)) / h).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..nt {
            cs[i * nt + j] = e[j] / s;
        }
    }
    let mut argmax = vec![0usize; nt];
    let mut mean = 0.0;
    for j in 0..nt {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..ng {
            if cs[i * nt + j] > best.1 {
                best = (i, cs[i * nt + j]);
            }
        }
        argmax[j] = best.0;
        mean += best.1;
    }
    mean /= nt as f64;
    let loss = -mean.ln();

    // reverse pass
    let mut g_cs = vec![0.0; ng * nt];
    for j in 0..nt {
        g_cs[argmax[j] * nt + j] += -1.0 / (nt as f64 * mean);
    }
    let mut grads = Vec::with_capacity(ng);
    for i in 0..ng {
        let row_cs = &cs[i * nt..(i + 1) * nt];
        let row_g = &g_cs[i * nt..(i + 1) * nt];
        let inner: f64 = row_cs.iter().zip(row_g).map(|(a, b)| a * b).sum();
        let (k, m) = rmin[i];
        let denom = m + eps;
        let mut g_d = vec![0.0; nt];
        let mut g_m = 0.0;
        for j in 0..nt {
            let g_z = row_cs[j] * (row_g[j] - inner);
            let g_r = -g_z / h;
            let d = dist[i * nt + j];
            g_d[j] += g_r / denom;
            g_m -= g_r * d / (denom * denom);
        }
        g_d[k] += g_m;
        let (ref ghat, r) = gn[i];
        let mut g_hat = vec![0.0; ghat.len()];
        for j in 0..nt {
            if g_d[j] == 0.0 {
                continue;
            }
            for (a, t) in g_hat.iter_mut().zip(&tn[j]) {
                *a -= 0.5 * g_d[j] * t;
            }
        }
        // through v / sqrt(|v|^2 + floor^2)
        let raw = gen[i];
        let dot: f64 = raw.iter().zip(&g_hat).map(|(a, b)| a * b).sum();
        grads.push(
            raw.iter()
                .zip(&g_hat)
                .map(|(v, g)| r * g - r * r * r * v * dot)
                .collect(),
        );
    }
    (loss, grads)
}

/// Indices of cells whose mask coverage reaches the threshold.
fn face_cells(grid: &FeatureGrid, mask: &Image, coverage: f64) -> Vec<usize> {
    let c = grid.cell;
    let mut out = Vec::new();
    for cy in 0..grid.height {
        for cx in 0..grid.width {
            let mut s = 0.0;
            for y in cy * c..((cy + 1) * c).min(mask.height) {
                for x in cx * c..((cx + 1) * c).min(mask.width) {
                    s += mask.data[y * mask.width + x];
                }
            }
            if s >= coverage * (c * c) as f64 {
                out.push(cy * grid.width + cx);
            }
        }
    }
    out
}

/// Scale weights, finest first: only the two coarsest scales contribute.
fn scale_weights(n: usize, params: &IdMrfParams) -> Vec<f64> {
    (0..n)
        .map(|s| {
            if s + 1 == n {
                params.coarse_weight
            } else if s + 2 == n {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// ID-MRF loss of `render` against `target` over the masked face region,
/// with its gradient with respect to `render`.
pub fn idmrf_loss_with_grad(
    extractor: &dyn FeatureExtractor,
    target: &Image,
    render: &Image,
    mask: &Image,
    params: &IdMrfParams,
) -> Result<(f64, Image)> {
    target.check_same_shape(render, "rendered image")?;
    let gf = extractor.patch_features(render);
    let tf = extractor.patch_features(target);
    if gf.len() < 2 {
        return Err(Error::Validation(
            "ID-MRF needs at least two feature scales".into(),
        ));
    }
    let weights = scale_weights(gf.len(), params);
    let mut total = 0.0;
    let mut grads: Vec<FeatureGrid> = gf.iter().map(FeatureGrid::zeros_like).collect();
    let mut any = false;
    for (s, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let cells = face_cells(&gf[s], mask, params.cell_coverage);
        if cells.is_empty() {
            continue;
        }
        any = true;
        let gen: Vec<&[f64]> = cells.iter().map(|&i| gf[s].vector(i)).collect();
        let tar: Vec<&[f64]> = cells.iter().map(|&i| tf[s].vector(i)).collect();
        let (l, g) = mrf_term(&gen, &tar, params);
        total += w * l;
        let ch = gf[s].channels;
        for (&cell, gv) in cells.iter().zip(&g) {
            for (k, v) in gv.iter().enumerate() {
                grads[s].data[cell * ch + k] += w * v;
            }
        }
    }
    if !any {
        warn!("ID-MRF face mask is empty; loss is 0");
        return Ok((
            0.0,
            Image::new(render.width, render.height, render.channels, render.kind),
        ));
    }
    Ok((total, extractor.patch_features_backward(render, &grads)))
}

pub fn idmrf_loss(
    extractor: &dyn FeatureExtractor,
    target: &Image,
    render: &Image,
    mask: &Image,
    params: &IdMrfParams,
) -> Result<f64> {
    target.check_same_shape(render, "rendered image")?;
    let gf = extractor.patch_features(render);
    let tf = extractor.patch_features(target);
    if gf.len() < 2 {
        return Err(Error::Validation(
            "ID-MRF needs at least two feature scales".into(),
        ));
    }
    let mut total = 0.0;
    for (s, w) in scale_weights(gf.len(), params).iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let cells = face_cells(&gf[s], mask, params.cell_coverage);
        let gen: Vec<&[f64]> = cells.iter().map(|&i| gf[s].vector(i)).collect();
        let tar: Vec<&[f64]> = cells.iter().map(|&i| tf[s].vector(i)).collect();
        total += w * mrf_term(&gen, &tar, params).0;
    }
    Ok(total)
}
