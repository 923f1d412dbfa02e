//! Expression-conditioned displacement decoder `D = F_d(delta, psi, theta_jaw)`.
//!
//! Output transform is `scale * tanh(raw)`, so `|D| <= scale` holds exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::render::image::{Image, MapKind};

pub const DEFAULT_OUTPUT_SCALE: f64 = 0.01;
const LEAK: f64 = 0.2;

/// Network layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DecoderArch {
    /// `raw = W x + b`, one row per texel.
    Linear,
    /// Fully connected to a `base x base x channels[0]` grid, then one
    /// 2x-upsample + 3x3 conv + leaky-ReLU stage per further entry of
    /// `channels`, then a 3x3 conv to one channel.
    Conv { base: usize, channels: Vec<usize> },
}

impl DecoderArch {
    /// Default convolutional layout reaching `size` from a 16x16 grid.
    pub fn conv_for(size: usize) -> Result<Self> {
        let base = 16.min(size);
        let mut stages = 0;
        let mut s = base;
        while s < size {
            s *= 2;
            stages += 1;
        }
        if s != size {
            return Err(Error::Config(format!(
                "conv decoder needs size = {base} * 2^k, got {size}"
            )));
        }
        let mut channels = vec![32];
        for i in 0..stages {
            channels.push([32, 16, 8, 8, 8, 8][i.min(5)]);
        }
        Ok(DecoderArch::Conv { base, channels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailDecoder {
    pub arch: DecoderArch,
    pub input_dim: usize,
    pub size: usize,
    pub output_scale: f64,
    pub params: Vec<f64>,
}

/// Layer-by-layer parameter offsets of the convolutional layout.
struct ConvLayout {
    fc_w: usize,
    fc_b: usize,
    /// (weight offset, bias offset, cin, cout) per conv, final conv last.
    convs: Vec<(usize, usize, usize, usize)>,
    total: usize,
}

fn conv_layout(base: usize, channels: &[usize], input_dim: usize) -> ConvLayout {
    let c0 = channels[0];
    let fc_w = 0;
    let fc_b = fc_w + base * base * c0 * input_dim;
    let mut off = fc_b + base * base * c0;
    let mut convs = Vec::new();
    let mut cin = c0;
    for &cout in channels[1..].iter().chain(std::iter::once(&1)) {
        let w = off;
        let b = w + cout * cin * 9;
        off = b + cout;
        convs.push((w, b, cin, cout));
        cin = cout;
    }
    ConvLayout {
        fc_w,
        fc_b,
        convs,
        total: off,
    }
}

/// Intermediates of one forward evaluation.
#[derive(Debug, Clone)]
pub struct DecoderTape {
    input: Vec<f64>,
    /// Pre-activation feature maps (conv layout) in evaluation order.
    pre: Vec<Vec<f64>>,
    /// Inputs to each conv (already activated and upsampled).
    conv_in: Vec<Vec<f64>>,
    raw: Vec<f64>,
    pub output: Image,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// Nearest-neighbour 2x upsampling of a channel-major `c x s x s` tensor.
fn upsample(x: &[f64], c: usize, s: usize) -> Vec<f64> {
    let t = 2 * s;
    let mut out = vec![0.0; c * t * t];
    for ch in 0..c {
        for y in 0..t {
            for xx in 0..t {
                out[ch * t * t + y * t + xx] = x[ch * s * s + (y / 2) * s + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward(g: &[f64], c: usize, s: usize) -> Vec<f64> {
    let t = 2 * s;
    let mut out = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..t {
            for xx in 0..t {
                out[ch * s * s + (y / 2) * s + xx / 2] += g[ch * t * t + y * t + xx];
            }
        }
    }
    out
}

/// Same-size 3x3 convolution with zero padding.
fn conv3x3(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * s * s];
    for co in 0..cout {
        let o = &mut out[co * s * s..(co + 1) * s * s];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let xi = &x[ci * s * s..(ci + 1) * s * s];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wk = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if wk == 0.0 {
                        continue;
                    }
                    for y in 0..s {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= s as isize {
                            continue;
                        }
                        let row = &xi[sy as usize * s..(sy as usize + 1) * s];
                        let orow = &mut o[y * s..(y + 1) * s];
                        let (lo, hi) = match kx {
                            0 => (1, s),
                            1 => (0, s),
                            _ => (0, s - 1),
                        };
                        for xx in lo..hi {
                            orow[xx] += wk * row[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input cotangent; accumulates weight and bias cotangents.
fn conv3x3_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    cin: usize,
    cout: usize,
    s: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; cin * s * s];
    for co in 0..cout {
        let go = &g[co * s * s..(co + 1) * s * s];
        gb[co] += go.iter().sum::<f64>();
        for ci in 0..cin {
            let xi = &x[ci * s * s..(ci + 1) * s * s];
            let gxi = &mut gx[ci * s * s..(ci + 1) * s * s];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wk = w[wi];
                    let mut acc = 0.0;
                    for y in 0..s {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= s as isize {
                            continue;
                        }
                        let r = sy as usize * s;
                        let (lo, hi) = match kx {
                            0 => (1, s),
                            1 => (0, s),
                            _ => (0, s - 1),
                        };
                        for xx in lo..hi {
                            let gv = go[y * s + xx];
                            acc += gv * xi[r + xx + kx - 1];
                            gxi[r + xx + kx - 1] += wk * gv;
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    gx
}

impl DetailDecoder {
    pub fn param_count(arch: &DecoderArch, input_dim: usize, size: usize) -> usize {
        match arch {
            DecoderArch::Linear => size * size * (input_dim + 1),
            DecoderArch::Conv { base, channels } => conv_layout(*base, channels, input_dim).total,
        }
    }

    /// All-zero decoder (outputs `D = 0`).
    pub fn zeros(arch: DecoderArch, input_dim: usize, size: usize) -> Result<Self> {
        if let DecoderArch::Conv { base, channels } = &arch {
            if channels.is_empty() || base << (channels.len() - 1) != size {
                return Err(Error::Config(format!(
                    "conv decoder with base {base} and {} stages cannot produce {size}x{size}",
                    channels.len().saturating_sub(1)
                )));
            }
        }
        let n = Self::param_count(&arch, input_dim, size);
        Ok(Self {
            arch,
            input_dim,
            size,
            output_scale: DEFAULT_OUTPUT_SCALE,
            params: vec![0.0; n],
        })
    }

    /// Randomly initialized decoder (scaled fan-in uniform weights, zero bias).
    pub fn seeded(arch: DecoderArch, input_dim: usize, size: usize, seed: u64) -> Result<Self> {
        let mut dec = Self::zeros(arch, input_dim, size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match dec.arch.clone() {
            DecoderArch::Linear => {
                let a = (1.0 / input_dim as f64).sqrt();
                let nw = size * size * input_dim;
                for p in &mut dec.params[..nw] {
                    *p = rng.gen_range(-a..a);
                }
            }
            DecoderArch::Conv { base, channels } => {
                let l = conv_layout(base, &channels, input_dim);
                let a = (3.0 / input_dim as f64).sqrt();
                for p in &mut dec.params[l.fc_w..l.fc_b] {
                    *p = rng.gen_range(-a..a);
                }
                for &(w, _, cin, cout) in &l.convs {
                    let a = (3.0 / (9 * cin) as f64).sqrt();
                    for p in &mut dec.params[w..w + cout * cin * 9] {
                        *p = rng.gen_range(-a..a);
                    }
                }
            }
        }
        Ok(dec)
    }

    /// Concatenates `[delta, psi, theta_jaw]` and checks its width.
    pub fn input(&self, delta: &[f64], psi: &[f64], jaw: &[f64; 3]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.input_dim);
        x.extend_from_slice(delta);
        x.extend_from_slice(psi);
        x.extend_from_slice(jaw);
        check_dim("decoder input", self.input_dim, x.len())?;
        Ok(x)
    }

    pub fn decode(&self, delta: &[f64], psi: &[f64], jaw: &[f64; 3]) -> Result<Image> {
        Ok(self.forward(&self.input(delta, psi, jaw)?)?.output)
    }

    pub fn forward(&self, x: &[f64]) -> Result<DecoderTape> {
        check_dim("decoder input", self.input_dim, x.len())?;
        check_dim(
            "decoder parameters",
            Self::param_count(&self.arch, self.input_dim, self.size),
            self.params.len(),
        )?;
        let d = self.size;
        let p = &self.params;
        let (raw, pre, conv_in) = match &self.arch {
            DecoderArch::Linear => {
                let nw = d * d * self.input_dim;
                let raw: Vec<f64> = (0..d * d)
                    .map(|t| {
                        let row = &p[t * self.input_dim..(t + 1) * self.input_dim];
                        p[nw + t] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect();
                (raw, Vec::new(), Vec::new())
            }
            DecoderArch::Conv { base, channels } => {
                let l = conv_layout(*base, channels, self.input_dim);
                let n0 = base * base * channels[0];
                let fc: Vec<f64> = (0..n0)
                    .map(|o| {
                        let row =
                            &p[l.fc_w + o * self.input_dim..l.fc_w + (o + 1) * self.input_dim];
                        p[l.fc_b + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect();
                let mut pre = vec![fc];
                let mut conv_in = Vec::new();
                let mut s = *base;
                let last = l.convs.len() - 1;
                for (i, &(w, b, cin, cout)) in l.convs.iter().enumerate() {
                    let act: Vec<f64> = pre.last().unwrap().iter().map(|v| leaky(*v)).collect();
                    let input = if i < last {
                        let u = upsample(&act, cin, s);
                        s *= 2;
                        u
                    } else {
                        act
                    };
                    let out = conv3x3(
                        &input,
                        &p[w..w + cout * cin * 9],
                        &p[b..b + cout],
                        cin,
                        cout,
                        s,
                    );
                    conv_in.push(input);
                    pre.push(out);
                }
                let raw = pre.pop().unwrap();
                (raw, pre, conv_in)
            }
        };
        let data = raw.iter().map(|r| self.output_scale * r.tanh()).collect();
        Ok(DecoderTape {
            input: x.to_vec(),
            pre,
            conv_in,
            raw,
            output: Image::from_data(d, d, 1, MapKind::Displacement, data)?,
        })
    }

    /// Cotangents of the parameters and of the input given a cotangent on `D`.
    pub fn backward(&self, tape: &DecoderTape, grad: &Image) -> (Vec<f64>, Vec<f64>) {
        let d = self.size;
        let p = &self.params;
        let mut gp = vec![0.0; p.len()];
        let mut gx = vec![0.0; self.input_dim];
        let g_raw: Vec<f64> = tape
            .raw
            .iter()
            .zip(&grad.data)
            .map(|(r, g)| {
                let t = r.tanh();
                g * self.output_scale * (1.0 - t * t)
            })
            .collect();
        match &self.arch {
            DecoderArch::Linear => {
                let nw = d * d * self.input_dim;
                for (t, &g) in g_raw.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gp[nw + t] += g;
                    let row = t * self.input_dim;
                    for i in 0..self.input_dim {
                        gp[row + i] += g * tape.input[i];
                        gx[i] += g * p[row + i];
                    }
                }
            }
            DecoderArch::Conv { base, channels } => {
                let l = conv_layout(*base, channels, self.input_dim);
                let mut s = *base << (l.convs.len() - 1);
                let last = l.convs.len() - 1;
                let mut g = g_raw;
                for i in (0..l.convs.len()).rev() {
                    let (w, b, cin, cout) = l.convs[i];
                    let (gw, rest) = gp[w..].split_at_mut(cout * cin * 9);
                    debug_assert_eq!(b, w + cout * cin * 9);
                    let gb = &mut rest[..cout];
                    let g_in = conv3x3_backward(
                        &tape.conv_in[i],
                        &p[w..w + cout * cin * 9],
                        &g,
                        gw,
                        gb,
                        cin,
                        cout,
                        s,
                    );
                    let g_act = if i < last {
                        s /= 2;
                        upsample_backward(&g_in, cin, s)
                    } else {
                        g_in
                    };
                    g = g_act
                        .iter()
                        .zip(&tape.pre[i])
                        .map(|(ga, z)| ga * leaky_grad(*z))
                        .collect();
                }
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    gp[l.fc_b + o] += go;
                    let row = l.fc_w + o * self.input_dim;
                    for i in 0..self.input_dim {
                        gp[row + i] += go * tape.input[i];
                        gx[i] += go * p[row + i];
                    }
                }
            }
        }
        (gp, gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_decoder_gives_zero_map() {
        for arch in [DecoderArch::Linear, DecoderArch::conv_for(32).unwrap()] {
            let dec = DetailDecoder::zeros(arch, 9, 32).unwrap();
            let d = dec
                .decode(&[0.3; 4], &[1.0, -2.0], &[0.1, 0.2, 0.3])
                .unwrap();
            assert!(d.data.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linear_texel_is_scaled_tanh_of_dot_product() {
        let mut dec = DetailDecoder::zeros(DecoderArch::Linear, 4, 2).unwrap();
        let w = [0.5, -1.0, 2.0, 0.25];
        dec.params[4 * 3..4 * 4].copy_from_slice(&w);
        let x = [1.0, 0.5, 0.25, -2.0];
        let d = dec.forward(&x).unwrap().output;
        let dot: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(d.data[3], 0.01 * dot.tanh());
        assert_eq!(d.data[0], 0.0);
    }

    #[test]
    fn output_is_bounded() {
        let dec = DetailDecoder::seeded(DecoderArch::conv_for(32).unwrap(), 6, 32, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let d = dec.forward(&x).unwrap().output;
            assert!(d.data.iter().all(|v| v.abs() <= 0.01));
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let dec = DetailDecoder::zeros(DecoderArch::Linear, 5, 4).unwrap();
        assert!(dec.decode(&[0.0; 2], &[0.0], &[0.0; 3]).is_err());
        assert!(DetailDecoder::zeros(
            DecoderArch::Conv {
                base: 16,
                channels: vec![4, 4]
            },
            5,
            64
        )
        .is_err());
    }

    fn check_gradients(dec: &DetailDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..dec.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let wgt: Vec<f64> = (0..dec.size * dec.size)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let f = |dec: &DetailDecoder, x: &[f64]| -> f64 {
            let out = dec.forward(x).unwrap().output;
            out.data.iter().zip(&wgt).map(|(a, b)| a * b).sum()
        };
        let tape = dec.forward(&x).unwrap();
        let g =
            Image::from_data(dec.size, dec.size, 1, MapKind::Displacement, wgt.clone()).unwrap();
        let (gp, gx) = dec.backward(&tape, &g);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(dec, &xp) - f(dec, &xm)) / (2.0 * h);
            assert!(
                (fd - gx[i]).abs() <= 1e-4 * fd.abs().max(gx[i].abs()) + 1e-10,
                "x[{i}] {fd} {}",
                gx[i]
            );
        }
        for k in (0..dec.params.len()).step_by((dec.params.len() / 40).max(1)) {
            let mut dp = dec.clone();
            let mut dm = dec.clone();
            dp.params[k] += h;
            dm.params[k] -= h;
            let fd = (f(&dp, &x) - f(&dm, &x)) / (2.0 * h);
            assert!(
                (fd - gp[k]).abs() <= 1e-4 * fd.abs().max(gp[k].abs()) + 1e-10,
                "p[{k}] {fd} {}",
                gp[k]
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        check_gradients(&DetailDecoder::seeded(DecoderArch::Linear, 7, 4, 2).unwrap());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let arch = DecoderArch::Conv {
            base: 4,
            channels: vec![3, 2, 2],
        };
        let mut dec = DetailDecoder::seeded(arch, 5, 16, 4).unwrap();
        for v in dec.params.iter_mut() {
            *v *= 3.0;
        }
        check_gradients(&dec);
    }
}
