//! Individual loss terms and their gradients. L1 subgradients at 0 are 0.

use crate::error::{check_dim, Error, Result};
use crate::render::image::{Image, MapKind};

use super::features::FeatureExtractor;

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sum_i w_i * ||k_gt,i - k_proj,i||_1`.
pub fn landmark_loss(gt: &[[f64; 2]], proj: &[[f64; 2]], weights: &[f64]) -> Result<f64> {
    check_dim("projected landmarks", gt.len(), proj.len())?;
    check_dim("landmark weights", gt.len(), weights.len())?;
    Ok(gt
        .iter()
        .zip(proj)
        .zip(weights)
        .map(|((a, b), w)| w * ((a[0] - b[0]).abs() + (a[1] - b[1]).abs()))
        .sum())
}

/// Gradient of [`landmark_loss`] with respect to the projected landmarks.
pub fn landmark_loss_grad(gt: &[[f64; 2]], proj: &[[f64; 2]], weights: &[f64]) -> Vec<[f64; 2]> {
    gt.iter()
        .zip(proj)
        .zip(weights)
        .map(|((a, b), w)| [w * sign(b[0] - a[0]), w * sign(b[1] - a[1])])
        .collect()
}

/// `sum_{(i,j)} ||(k_i - k_j) - (p_i - p_j)||_1` where `p = s Π(M) + t` are the
/// projected model landmarks (the translation cancels in each offset).
pub fn eye_closure_loss(
    gt: &[[f64; 2]],
    proj: &[[f64; 2]],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    check_dim("projected landmarks", gt.len(), proj.len())?;
    let mut total = 0.0;
    for &(i, j) in pairs {
        if i >= gt.len() || j >= gt.len() {
            return Err(Error::IndexOutOfRange {
                what: "eyelid pair",
                index: i.max(j),
                len: gt.len(),
            });
        }
        for a in 0..2 {
            total += ((gt[i][a] - gt[j][a]) - (proj[i][a] - proj[j][a])).abs();
        }
    }
    Ok(total)
}

pub fn eye_closure_loss_grad(
    gt: &[[f64; 2]],
    proj: &[[f64; 2]],
    pairs: &[(usize, usize)],
) -> Vec<[f64; 2]> {
    let mut g = vec![[0.0; 2]; proj.len()];
    for &(i, j) in pairs {
        for a in 0..2 {
            let s = sign((proj[i][a] - proj[j][a]) - (gt[i][a] - gt[j][a]));
            g[i][a] += s;
            g[j][a] -= s;
        }
    }
    g
}

fn check_photometric(image: &Image, render: &Image, mask: &Image) -> Result<()> {
    image.check_same_shape(render, "rendered image")?;
    if mask.width != image.width || mask.height != image.height || mask.channels != 1 {
        return Err(Error::Validation(
            "photometric mask must be a 1-channel map of the image size".into(),
        ));
    }
    Ok(())
}

/// `||V ⊙ (I - I_r)||_{1,1}`: sum of absolute masked differences.
pub fn photometric_loss(image: &Image, render: &Image, mask: &Image) -> Result<f64> {
    check_photometric(image, render, mask)?;
    let c = image.channels;
    let mut total = 0.0;
    for i in 0..mask.data.len() {
        let m = mask.data[i];
        if m == 0.0 {
            continue;
        }
        for k in 0..c {
            total += (m * (image.data[c * i + k] - render.data[c * i + k])).abs();
        }
    }
    Ok(total)
}

/// Gradient of [`photometric_loss`] with respect to the rendered image.
pub fn photometric_loss_grad(image: &Image, render: &Image, mask: &Image) -> Image {
    let c = image.channels;
    let mut g = Image::new(render.width, render.height, c, MapKind::Color);
    for i in 0..mask.data.len() {
        let m = mask.data[i];
        if m == 0.0 {
            continue;
        }
        for k in 0..c {
            g.data[c * i + k] = m.abs() * sign(render.data[c * i + k] - image.data[c * i + k]);
        }
    }
    g
}

/// Mask area in pixels, used to report normalized photometric values.
pub fn mask_area(mask: &Image) -> f64 {
    mask.data.iter().map(|v| v.abs()).sum()
}

/// `1 - cos(f(I), f(I_r))`.
pub fn identity_loss(
    extractor: &dyn FeatureExtractor,
    image: &Image,
    render: &Image,
) -> Result<f64> {
    let a = extractor.embed(image)?;
    let b = extractor.embed(render)?;
    Ok(1.0 - cosine(&a, &b)?)
}

/// Identity loss against a precomputed target embedding, with its gradient
/// with respect to the rendered image.
pub fn identity_loss_with_grad(
    extractor: &dyn FeatureExtractor,
    target_embedding: &[f64],
    render: &Image,
) -> Result<(f64, Image)> {
    let b = extractor.embed(render)?;
    let na = norm(target_embedding);
    let nb = norm(&b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero identity embedding".into()));
    }
    let cos = dot(target_embedding, &b) / (na * nb);
    let g_b: Vec<f64> = target_embedding
        .iter()
        .zip(&b)
        .map(|(a, bi)| -(a / (na * nb) - cos * bi / (nb * nb)))
        .collect();
    Ok((1.0 - cos, extractor.embed_backward(render, &g_b)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("embedding", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero identity embedding".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Squared L2 norm.
pub fn squared_norm(x: &[f64]) -> f64 {
    dot(x, x)
}

/// `(||beta||^2, ||psi||^2, ||alpha||^2)`.
pub fn coarse_regularizers(shape: &[f64], expression: &[f64], albedo: &[f64]) -> (f64, f64, f64) {
    (
        squared_norm(shape),
        squared_norm(expression),
        squared_norm(albedo),
    )
}

/// `||V ⊙ (D - flip(D))||_{1,1}` with a horizontal flip.
pub fn symmetry_loss(disp: &Image, mask: &Image) -> Result<f64> {
    check_symmetry(disp, mask)?;
    let d = disp.width;
    let mut total = 0.0;
    for y in 0..disp.height {
        for x in 0..d {
            let i = y * d + x;
            let m = mask.data[i];
            if m != 0.0 {
                total += (m * (disp.data[i] - disp.data[y * d + d - 1 - x])).abs();
            }
        }
    }
    Ok(total)
}

pub fn symmetry_loss_grad(disp: &Image, mask: &Image) -> Image {
    let d = disp.width;
    let mut g = Image::new(d, disp.height, 1, MapKind::Displacement);
    for y in 0..disp.height {
        for x in 0..d {
            let i = y * d + x;
            let j = y * d + d - 1 - x;
            let m = mask.data[i];
            if m == 0.0 {
                continue;
            }
            let s = m.abs() * sign(disp.data[i] - disp.data[j]);
            g.data[i] += s;
            g.data[j] -= s;
        }
    }
    g
}

fn check_symmetry(disp: &Image, mask: &Image) -> Result<()> {
    if disp.width != disp.height || disp.channels != 1 {
        return Err(Error::Validation(
            "symmetry loss expects a square 1-channel map".into(),
        ));
    }
    if mask.width != disp.width || mask.height != disp.height {
        return Err(Error::Validation("symmetry mask size mismatch".into()));
    }
    Ok(())
}

/// `||D||_{1,1}`.
pub fn detail_regularizer(disp: &Image) -> f64 {
    let abs: Vec<f64> = disp.data.iter().map(|v| v.abs()).collect();
    pairwise_sum(&abs)
}

/// Pairwise summation; exact for uniform power-of-two sized inputs.
pub(crate) fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

pub fn detail_regularizer_grad(disp: &Image) -> Image {
    disp.map(sign)
}
