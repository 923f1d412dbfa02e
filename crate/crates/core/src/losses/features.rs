//! Pluggable image feature extractors for the identity and ID-MRF terms.

use crate::error::{Error, Result};
use crate::render::image::Image;

/// Grid of per-cell feature vectors, `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Side length of one cell in image pixels.
    pub cell: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros_like(other: &FeatureGrid) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            ..*other
        }
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Stand-in for pretrained recognition / perceptual networks.
///
/// Implementations must be deterministic and usable from several threads.
/// Patch grids are returned finest scale first.
pub trait FeatureExtractor: Send + Sync {
    /// Unit-norm identity embedding.
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
    /// Vector-Jacobian product of [`embed`](Self::embed).
    fn embed_backward(&self, image: &Image, grad: &[f64]) -> Image;
    fn patch_features(&self, image: &Image) -> Vec<FeatureGrid>;
    fn patch_features_backward(&self, image: &Image, grads: &[FeatureGrid]) -> Image;
}

/// Gradient-orientation histograms over 8x8 cells at two scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExtractor {
    pub cell: usize,
    pub bins: usize,
    /// Smoothing of the gradient magnitude near zero.
    pub magnitude_eps: f64,
    /// Added to every embedding entry before normalization.
    pub embed_floor: f64,
    /// Spatial pooling grid of the embedding.
    pub embed_grid: usize,
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self {
            cell: 8,
            bins: 9,
            magnitude_eps: 1e-3,
            embed_floor: 1e-3,
            embed_grid: 4,
        }
    }
}

fn grayscale(image: &Image) -> Vec<f64> {
    let c = image.channels;
    (0..image.pixel_count())
        .map(|i| image.data[c * i..c * i + c].iter().sum::<f64>() / c as f64)
        .collect()
}

fn grayscale_backward(image: &Image, g: &[f64]) -> Image {
    let c = image.channels;
    let mut out = Image::new(image.width, image.height, c, image.kind);
    for (i, gv) in g.iter().enumerate() {
        for k in 0..c {
            out.data[c * i + k] = gv / c as f64;
        }
    }
    out
}

fn pool2(x: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (pw, ph) = (w / 2, h / 2);
    let mut out = vec![0.0; pw * ph];
    for y in 0..ph {
        for xx in 0..pw {
            let a = 2 * y * w + 2 * xx;
            out[y * pw + xx] = 0.25 * (x[a] + x[a + 1] + x[a + w] + x[a + w + 1]);
        }
    }
    (out, pw, ph)
}

fn pool2_backward(g: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (pw, ph) = (w / 2, h / 2);
    let mut out = vec![0.0; w * h];
    for y in 0..ph {
        for xx in 0..pw {
            let a = 2 * y * w + 2 * xx;
            let v = 0.25 * g[y * pw + xx];
            out[a] += v;
            out[a + 1] += v;
            out[a + w] += v;
            out[a + w + 1] += v;
        }
    }
    out
}

impl ToyExtractor {
    /// Per-pixel soft binning: `(bin0, w0, bin1, w1, magnitude)`.
    fn pixel_terms(&self, gx: f64, gy: f64) -> (usize, f64, usize, f64, f64) {
        let e = self.magnitude_eps;
        let m = (gx * gx + gy * gy + e * e).sqrt() - e;
        let mut theta = gy.atan2(gx);
        if theta < 0.0 {
            theta += std::f64::consts::PI;
        }
        if theta >= std::f64::consts::PI {
            theta -= std::f64::consts::PI;
        }
        let width = std::f64::consts::PI / self.bins as f64;
        let p = theta / width - 0.5;
        let f = p.floor();
        let frac = p - f;
        let b0 = (f as isize).rem_euclid(self.bins as isize) as usize;
        let b1 = (b0 + 1) % self.bins;
        (b0, 1.0 - frac, b1, frac, m)
    }

    fn gradients(x: &[f64], w: usize, h: usize, px: usize, py: usize) -> (f64, f64) {
        let xl = px.saturating_sub(1);
        let xr = (px + 1).min(w - 1);
        let yu = py.saturating_sub(1);
        let yd = (py + 1).min(h - 1);
        (
            (x[py * w + xr] - x[py * w + xl]) * 0.5,
            (x[yd * w + px] - x[yu * w + px]) * 0.5,
        )
    }

    fn histograms(&self, x: &[f64], w: usize, h: usize, cell_px: usize) -> FeatureGrid {
        let c = self.cell;
        let (cw, ch) = (w / c, h / c);
        let mut grid = FeatureGrid {
            width: cw,
            height: ch,
            channels: self.bins,
            cell: cell_px,
            data: vec![0.0; cw * ch * self.bins],
        };
        if cw == 0 || ch == 0 {
            return grid;
        }
        for py in 0..ch * c {
            for px in 0..cw * c {
                let (gx, gy) = Self::gradients(x, w, h, px, py);
                let (b0, w0, b1, w1, m) = self.pixel_terms(gx, gy);
                let cellid = (py / c) * cw + px / c;
                grid.data[cellid * self.bins + b0] += m * w0;
                grid.data[cellid * self.bins + b1] += m * w1;
            }
        }
        grid
    }

    fn histograms_backward(&self, x: &[f64], w: usize, h: usize, g: &FeatureGrid) -> Vec<f64> {
        let c = self.cell;
        let mut gx_img = vec![0.0; w * h];
        let width = std::f64::consts::PI / self.bins as f64;
        let e = self.magnitude_eps;
        for py in 0..g.height * c {
            for px in 0..g.width * c {
                let (gx, gy) = Self::gradients(x, w, h, px, py);
                let (b0, w0, b1, w1, m) = self.pixel_terms(gx, gy);
                let cellid = (py / c) * g.width + px / c;
                let g0 = g.data[cellid * self.bins + b0];
                let g1 = g.data[cellid * self.bins + b1];
                if g0 == 0.0 && g1 == 0.0 {
                    continue;
                }
                let r2 = gx * gx + gy * gy;
                let root = (r2 + e * e).sqrt();
                // d m / d(gx, gy)
                let dm = (gx / root, gy / root);
                // d frac / d(gx, gy) = (d theta) / width
                let (dfx, dfy) = if r2 > 0.0 {
                    (-gy / r2 / width, gx / r2 / width)
                } else {
                    (0.0, 0.0)
                };
                let g_m = g0 * w0 + g1 * w1;
                let g_frac = m * (g1 - g0);
                let ggx = g_m * dm.0 + g_frac * dfx;
                let ggy = g_m * dm.1 + g_frac * dfy;
                let xl = px.saturating_sub(1);
                let xr = (px + 1).min(w - 1);
                let yu = py.saturating_sub(1);
                let yd = (py + 1).min(h - 1);
                gx_img[py * w + xr] += 0.5 * ggx;
                gx_img[py * w + xl] -= 0.5 * ggx;
                gx_img[yd * w + px] += 0.5 * ggy;
                gx_img[yu * w + px] -= 0.5 * ggy;
            }
        }
        gx_img
    }

    /// Pools a cell grid onto an `embed_grid x embed_grid` layout.
    fn pool_cells(&self, g: &FeatureGrid) -> Vec<f64> {
        let k = self.embed_grid;
        let mut out = vec![0.0; k * k * g.channels];
        for y in 0..g.height {
            for x in 0..g.width {
                let (ty, tx) = (y * k / g.height.max(1), x * k / g.width.max(1));
                let t = ty * k + tx;
                for c in 0..g.channels {
                    out[t * g.channels + c] += g.data[(y * g.width + x) * g.channels + c];
                }
            }
        }
        out
    }

    fn pool_cells_backward(&self, like: &FeatureGrid, grad: &[f64]) -> FeatureGrid {
        let k = self.embed_grid;
        let mut out = FeatureGrid::zeros_like(like);
        for y in 0..like.height {
            for x in 0..like.width {
                let (ty, tx) = (y * k / like.height.max(1), x * k / like.width.max(1));
                let t = ty * k + tx;
                for c in 0..like.channels {
                    out.data[(y * like.width + x) * like.channels + c] =
                        grad[t * like.channels + c];
                }
            }
        }
        out
    }

    fn raw_embedding(&self, grids: &[FeatureGrid]) -> Vec<f64> {
        let mut v: Vec<f64> = grids.iter().flat_map(|g| self.pool_cells(g)).collect();
        v.iter_mut().for_each(|x| *x += self.embed_floor);
        v
    }
}

impl FeatureExtractor for ToyExtractor {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let v = self.raw_embedding(&self.patch_features(image));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate("feature embedding has zero norm".into()));
        }
        Ok(v.into_iter().map(|x| x / n).collect())
    }

    fn embed_backward(&self, image: &Image, grad: &[f64]) -> Image {
        let grids = self.patch_features(image);
        let v = self.raw_embedding(&grids);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e: Vec<f64> = v.iter().map(|x| x / n).collect();
        let dot: f64 = e.iter().zip(grad).map(|(a, b)| a * b).sum();
        let g_v: Vec<f64> = grad
            .iter()
            .zip(&e)
            .map(|(g, ei)| (g - ei * dot) / n)
            .collect();
        let mut off = 0;
        let mut g_grids = Vec::new();
        for g in &grids {
            let len = self.embed_grid * self.embed_grid * g.channels;
            g_grids.push(self.pool_cells_backward(g, &g_v[off..off + len]));
            off += len;
        }
        self.patch_features_backward(image, &g_grids)
    }

    fn patch_features(&self, image: &Image) -> Vec<FeatureGrid> {
        let gray = grayscale(image);
        let (w, h) = (image.width, image.height);
        let fine = self.histograms(&gray, w, h, self.cell);
        let (pooled, pw, ph) = pool2(&gray, w, h);
        let coarse = self.histograms(&pooled, pw, ph, 2 * self.cell);
        vec![fine, coarse]
    }

    fn patch_features_backward(&self, image: &Image, grads: &[FeatureGrid]) -> Image {
        let gray = grayscale(image);
        let (w, h) = (image.width, image.height);
        let mut g_gray = self.histograms_backward(&gray, w, h, &grads[0]);
        if grads.len() > 1 {
            let (pooled, pw, ph) = pool2(&gray, w, h);
            let g_pooled = self.histograms_backward(&pooled, pw, ph, &grads[1]);
            for (a, b) in g_gray.iter_mut().zip(pool2_backward(&g_pooled, w, h)) {
                *a += b;
            }
        }
        grayscale_backward(image, &g_gray)
    }
}
