//! Displacement application, UV-space detail normals and the normal-mapped
//! detail render `I'_r = R(M, B(alpha, l, N'), c)`.

use crate::error::Result;
use crate::model::Vec3;
use crate::render::image::{Image, MapKind};
use crate::render::scene::{render_texture, render_texture_backward, RenderState, Renderer};
use crate::render::sh::{shade, shade_backward};
use crate::render::uv::sample_bilinear;

#[inline]
fn at(map: &Image, i: usize) -> Vec3 {
    Vec3::new(map.data[3 * i], map.data[3 * i + 1], map.data[3 * i + 2])
}

#[inline]
fn put(map: &mut Image, i: usize, v: &Vec3) {
    map.data[3 * i..3 * i + 3].copy_from_slice(&[v.x, v.y, v.z]);
}

/// `M'_uv = M_uv + D ⊙ N_uv` inside the mask, `M_uv` elsewhere.
pub fn apply_displacement(positions: &Image, normals: &Image, disp: &Image, mask: &Image) -> Image {
    let mut out = positions.clone();
    out.kind = MapKind::Position;
    for i in 0..mask.data.len() {
        if mask.data[i] == 0.0 || disp.data[i] == 0.0 {
            continue;
        }
        let p = at(positions, i) + at(normals, i) * disp.data[i];
        put(&mut out, i, &p);
    }
    out
}

/// Finite-difference stencil of one tangent: `t = (M[plus] - M[minus]) * inv`.
#[derive(Clone, Copy)]
struct Stencil {
    plus: usize,
    minus: usize,
    inv: f64,
}

fn stencil(mask: &Image, x: usize, y: usize, axis: usize) -> Option<Stencil> {
    let d = mask.width;
    let h = mask.height;
    let idx = |x: usize, y: usize| y * d + x;
    let valid = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < d
            && (y as usize) < h
            && mask.data[idx(x as usize, y as usize)] != 0.0
    };
    let (dx, dy) = if axis == 0 { (1, 0) } else { (0, 1) };
    let (xi, yi) = (x as isize, y as isize);
    let fwd = valid(xi + dx, yi + dy);
    let bwd = valid(xi - dx, yi - dy);
    let here = idx(x, y);
    let n = |s: isize| idx((xi + s * dx) as usize, (yi + s * dy) as usize);
    match (fwd, bwd) {
        (true, true) => Some(Stencil {
            plus: n(1),
            minus: n(-1),
            inv: 0.5,
        }),
        (true, false) => Some(Stencil {
            plus: n(1),
            minus: here,
            inv: 1.0,
        }),
        (false, true) => Some(Stencil {
            plus: here,
            minus: n(-1),
            inv: 1.0,
        }),
        (false, false) => None,
    }
}

/// Unnormalized `dM/du x dM/dv` at texel `(x, y)`.
fn fd_cross(
    m: &Image,
    mask: &Image,
    x: usize,
    y: usize,
) -> Option<(Vec3, Vec3, Vec3, Stencil, Stencil)> {
    let su = stencil(mask, x, y, 0)?;
    let sv = stencil(mask, x, y, 1)?;
    let tu = (at(m, su.plus) - at(m, su.minus)) * su.inv;
    let tv = (at(m, sv.plus) - at(m, sv.minus)) * sv.inv;
    let c = tu.cross(&tv);
    let scale = tu.norm() * tv.norm();
    if !(c.norm() > 1e-12 * scale) || scale == 0.0 {
        return None;
    }
    Some((c, tu, tv, su, sv))
}

/// Normals of a UV position map from central-difference tangents
/// (one-sided at mask borders). Texels without a usable stencil keep the
/// fallback normal and are counted.
pub fn detail_normals(positions: &Image, mask: &Image, fallback: Option<&Image>) -> (Image, usize) {
    let d = mask.width;
    let mut out = Image::new(d, mask.height, 3, MapKind::Normal);
    let mut degenerate = 0;
    for y in 0..mask.height {
        for x in 0..d {
            let i = y * d + x;
            if mask.data[i] == 0.0 {
                continue;
            }
            match fd_cross(positions, mask, x, y) {
                Some((c, ..)) => put(&mut out, i, &c.normalize()),
                None => {
                    degenerate += 1;
                    if let Some(f) = fallback {
                        put(&mut out, i, &at(f, i));
                    }
                }
            }
        }
    }
    (out, degenerate)
}

/// Detail normal map used for rendering.
///
/// The finite-difference normal change caused by `D` is transferred onto the
/// smooth coarse normals: `N' = normalize(N + n(M') - n(M))`, with `n` the
/// stencil normal oriented along `N`. For `D = 0` this is `N` exactly.
#[derive(Debug, Clone)]
pub struct DetailNormalMap {
    pub normals: Image,
    pub degenerate: usize,
}

pub fn detail_normal_map(
    positions: &Image,
    normals: &Image,
    disp: &Image,
    mask: &Image,
) -> DetailNormalMap {
    if disp.data.iter().all(|v| *v == 0.0) {
        let mut n = normals.clone();
        n.kind = MapKind::Normal;
        return DetailNormalMap {
            normals: n,
            degenerate: 0,
        };
    }
    let displaced = apply_displacement(positions, normals, disp, mask);
    let d = mask.width;
    let mut out = normals.clone();
    out.kind = MapKind::Normal;
    let mut degenerate = 0;
    for y in 0..mask.height {
        for x in 0..d {
            let i = y * d + x;
            if mask.data[i] == 0.0 {
                continue;
            }
            let (Some((c0, ..)), Some((c1, ..))) = (
                fd_cross(positions, mask, x, y),
                fd_cross(&displaced, mask, x, y),
            ) else {
                degenerate += 1;
                continue;
            };
            let n = at(normals, i);
            let sigma = if c0.dot(&n) < 0.0 { -1.0 } else { 1.0 };
            let s = n + (c1.normalize() - c0.normalize()) * sigma;
            let len = s.norm();
            if len > 1e-12 {
                put(&mut out, i, &(s / len));
            } else {
                degenerate += 1;
            }
        }
    }
    DetailNormalMap {
        normals: out,
        degenerate,
    }
}

/// Cotangent of `D` given a cotangent on [`detail_normal_map`]'s output.
pub fn detail_normal_map_backward(
    positions: &Image,
    normals: &Image,
    disp: &Image,
    mask: &Image,
    grad: &Image,
) -> Image {
    let displaced = apply_displacement(positions, normals, disp, mask);
    let d = mask.width;
    let mut g_pos = Image::new(d, mask.height, 3, MapKind::Position);
    for y in 0..mask.height {
        for x in 0..d {
            let i = y * d + x;
            if mask.data[i] == 0.0 {
                continue;
            }
            let g = at(grad, i);
            if g == Vec3::zeros() {
                continue;
            }
            let (Some((c0, ..)), Some((c1, tu, tv, su, sv))) = (
                fd_cross(positions, mask, x, y),
                fd_cross(&displaced, mask, x, y),
            ) else {
                continue;
            };
            let n = at(normals, i);
            let sigma = if c0.dot(&n) < 0.0 { -1.0 } else { 1.0 };
            let s = n + (c1.normalize() - c0.normalize()) * sigma;
            let len = s.norm();
            if len <= 1e-12 {
                continue;
            }
            let out = s / len;
            let g_s = (g - out * out.dot(&g)) / len;
            let g_n1 = g_s * sigma;
            let c1n = c1.norm();
            let n1 = c1 / c1n;
            let g_c = (g_n1 - n1 * n1.dot(&g_n1)) / c1n;
            let g_tu = tv.cross(&g_c);
            let g_tv = g_c.cross(&tu);
            for (st, gt) in [(su, g_tu), (sv, g_tv)] {
                let v = gt * st.inv;
                let p = at(&g_pos, st.plus) + v;
                put(&mut g_pos, st.plus, &p);
                let m = at(&g_pos, st.minus) - v;
                put(&mut g_pos, st.minus, &m);
            }
        }
    }
    let mut g_d = Image::new(d, mask.height, 1, MapKind::Displacement);
    for i in 0..mask.data.len() {
        if mask.data[i] != 0.0 {
            g_d.data[i] = at(&g_pos, i).dot(&at(normals, i));
        }
    }
    g_d
}

/// Shaded texture and image of the detail render.
#[derive(Debug, Clone)]
pub struct DetailRender {
    pub shaded: Image,
    pub image: Image,
}

/// Renders the coarse geometry of `state` with shading on `detail_normals`.
pub fn render_detail(
    renderer: &Renderer,
    state: &RenderState,
    detail_normals: &Image,
) -> Result<DetailRender> {
    let shaded = shade(
        &state.albedo_uv,
        &state.light,
        detail_normals,
        &renderer.mask_uv,
    )?;
    let model = renderer.model;
    let image = render_texture(&state.fragments, &model.uv, &model.triangles, &shaded);
    Ok(DetailRender { shaded, image })
}

/// Cotangent of the detail normal map given a cotangent on `I'_r`
/// (coarse parameters held fixed).
pub fn render_detail_backward(
    renderer: &Renderer,
    state: &RenderState,
    detail_normals: &Image,
    detail: &DetailRender,
    grad_image: &Image,
) -> Image {
    let model = renderer.model;
    let d = renderer.uv_size();
    let mut g_b = Image::square(d, 3, MapKind::Shaded);
    render_texture_backward(
        &state.fragments,
        &model.uv,
        &model.triangles,
        None,
        &detail.shaded,
        grad_image,
        &mut g_b,
    );
    shade_backward(
        &state.albedo_uv,
        &state.light,
        detail_normals,
        &renderer.mask_uv,
        &g_b,
    )
    .normals
}

/// Detail mesh vertices: `D` sampled at each vertex UV and applied along the
/// vertex normal.
pub fn displace_vertices(
    vertices: &[Vec3],
    normals: &[Vec3],
    uv: &[[f64; 2]],
    disp: &Image,
) -> Vec<Vec3> {
    vertices
        .iter()
        .zip(normals)
        .zip(uv)
        .map(|((v, n), t)| {
            let mut s = [0.0];
            sample_bilinear(disp, *t, &mut s);
            v + n * s[0]
        })
        .collect()
}
