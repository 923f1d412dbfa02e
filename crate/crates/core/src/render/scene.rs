//! The differentiable coarse render path
//! `code -> M -> (N_uv, A) -> B -> I_r`, plus projected landmarks.

use super::albedo::{albedo_map, albedo_map_backward, AlbedoModel};
use super::camera::{project, project_backward, Camera};
use super::image::{Image, MapKind};
use super::raster::{bary_backward, rasterize_projected, Fragments};
use super::sh::{shade, shade_backward, Lighting};
use super::uv::{sample_bilinear, sample_bilinear_backward, UvRaster};
use crate::code::LatentCode;
use crate::error::Result;
use crate::model::mesh::{surface_landmarks_backward, vertex_normals_backward};
use crate::model::{
    evaluate_geometry, surface_landmarks, vertex_normals, GeometryEval, Mesh, ParametricHeadModel,
    Vec3,
};

/// Interpolated texture coordinate of a covered pixel.
#[inline]
fn fragment_uv(uvs: &[[f64; 2]], tri: [usize; 3], b: [f64; 3]) -> [f64; 2] {
    [
        b[0] * uvs[tri[0]][0] + b[1] * uvs[tri[1]][0] + b[2] * uvs[tri[2]][0],
        b[0] * uvs[tri[0]][1] + b[1] * uvs[tri[1]][1] + b[2] * uvs[tri[2]][1],
    ]
}

/// Samples `texture` bilinearly at each fragment's UV; uncovered pixels are 0.
pub fn render_texture(
    frags: &Fragments,
    uvs: &[[f64; 2]],
    triangles: &[[usize; 3]],
    texture: &Image,
) -> Image {
    let mut out = Image::new(frags.width, frags.height, texture.channels, MapKind::Color);
    let c = texture.channels;
    for i in 0..frags.triangle.len() {
        if !frags.covered(i) {
            continue;
        }
        let tri = triangles[frags.triangle[i] as usize];
        let uv = fragment_uv(uvs, tri, frags.bary[i]);
        sample_bilinear(texture, uv, &mut out.data[c * i..c * i + c]);
    }
    out
}

/// Adjoint of [`render_texture`]. Accumulates into `grad_texture` and, when
/// `projected` is given, returns cotangents of the projected vertices.
/// Visibility is held fixed.
pub fn render_texture_backward(
    frags: &Fragments,
    uvs: &[[f64; 2]],
    triangles: &[[usize; 3]],
    projected: Option<&[[f64; 2]]>,
    texture: &Image,
    grad_image: &Image,
    grad_texture: &mut Image,
) -> Vec<[f64; 2]> {
    let mut g_proj = vec![[0.0; 2]; projected.map_or(0, |p| p.len())];
    let c = texture.channels;
    for i in 0..frags.triangle.len() {
        if !frags.covered(i) {
            continue;
        }
        let g = &grad_image.data[c * i..c * i + c];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let tri = triangles[frags.triangle[i] as usize];
        let b = frags.bary[i];
        let uv = fragment_uv(uvs, tri, b);
        let g_uv = sample_bilinear_backward(texture, uv, g, grad_texture);
        if let Some(p) = projected {
            let g_b = [0, 1, 2].map(|k| g_uv[0] * uvs[tri[k]][0] + g_uv[1] * uvs[tri[k]][1]);
            let corners = tri.map(|v| p[v]);
            let gc = bary_backward(corners, b, g_b);
            for k in 0..3 {
                g_proj[tri[k]][0] += gc[k][0];
                g_proj[tri[k]][1] += gc[k][1];
            }
        }
    }
    g_proj
}

/// `I_r = R(M, B, c)`: rasterizes the mesh and samples the shaded texture.
pub fn render(mesh: &Mesh, shaded: &Image, camera: &Camera, size: usize) -> Result<Image> {
    camera.validate()?;
    let projected = project(&mesh.vertices, camera);
    let depth: Vec<f64> = mesh.vertices.iter().map(|v| v.z).collect();
    let frags = rasterize_projected(&projected, &depth, &mesh.triangles, size, size);
    Ok(render_texture(&frags, &mesh.uv, &mesh.triangles, shaded))
}

/// Model-bound renderer with a precomputed UV texel table.
#[derive(Debug, Clone)]
pub struct Renderer<'a> {
    pub model: &'a ParametricHeadModel,
    pub albedo: &'a AlbedoModel,
    pub uv: UvRaster,
    pub mask_uv: Image,
    pub width: usize,
    pub height: usize,
}

/// Forward intermediates kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub geometry: GeometryEval,
    pub normals: Vec<Vec3>,
    pub normals_uv: Image,
    pub albedo_uv: Image,
    pub shaded: Image,
    pub projected: Vec<[f64; 2]>,
    pub fragments: Fragments,
    pub image: Image,
    pub landmarks: Vec<Vec3>,
    pub landmarks_2d: Vec<[f64; 2]>,
    pub camera: Camera,
    pub light: Lighting,
}

impl RenderState {
    pub fn vertices(&self) -> &[Vec3] {
        &self.geometry.vertices
    }

    /// Image-space coverage mask (1 where a triangle is visible).
    pub fn coverage(&self) -> Image {
        let f = &self.fragments;
        let data = f
            .triangle
            .iter()
            .map(|t| {
                if *t == super::raster::NO_TRIANGLE {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        Image {
            width: f.width,
            height: f.height,
            channels: 1,
            kind: MapKind::Mask,
            data,
        }
    }
}

/// Cotangents of every coarse parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
    pub albedo: Vec<f64>,
    pub light: Lighting,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl RenderGrads {
    pub fn zeros(code: &LatentCode) -> Self {
        Self {
            shape: vec![0.0; code.shape.len()],
            expression: vec![0.0; code.expression.len()],
            pose: vec![0.0; code.pose.len()],
            albedo: vec![0.0; code.albedo.len()],
            light: Lighting::zeros(),
            scale: 0.0,
            translation: [0.0; 2],
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &RenderGrads, k: f64) {
        let axpy = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        axpy(&mut self.shape, &other.shape);
        axpy(&mut self.expression, &other.expression);
        axpy(&mut self.pose, &other.pose);
        axpy(&mut self.albedo, &other.albedo);
        for (a, b) in self.light.coeffs.iter_mut().zip(&other.light.coeffs) {
            axpy(a, b);
        }
        self.scale += k * other.scale;
        axpy(&mut self.translation, &other.translation);
    }
}

impl<'a> Renderer<'a> {
    pub fn new(model: &'a ParametricHeadModel, albedo: &'a AlbedoModel, image_size: usize) -> Self {
        let uv = UvRaster::build(&model.uv, &model.triangles, albedo.size());
        let mask_uv = uv.mask();
        Self {
            model,
            albedo,
            uv,
            mask_uv,
            width: image_size,
            height: image_size,
        }
    }

    pub fn uv_size(&self) -> usize {
        self.uv.size
    }

    pub fn forward(&self, code: &LatentCode) -> Result<RenderState> {
        code.validate(self.model, self.albedo)?;
        let model = self.model;
        let geometry =
            evaluate_geometry(model, &code.shape, &code.pose_params(), &code.expression)?;
        let vertices = &geometry.vertices;
        let normals = vertex_normals(vertices, &model.triangles)?;
        let normals_uv = self
            .uv
            .interpolate(&model.triangles, &normals, MapKind::Normal);
        let albedo_uv = albedo_map(self.albedo, &code.albedo)?;
        let shaded = shade(&albedo_uv, &code.light, &normals_uv, &self.mask_uv)?;
        let projected = project(vertices, &code.camera);
        let depth: Vec<f64> = vertices.iter().map(|v| v.z).collect();
        let fragments = rasterize_projected(
            &projected,
            &depth,
            &model.triangles,
            self.width,
            self.height,
        );
        let image = render_texture(&fragments, &model.uv, &model.triangles, &shaded);
        let landmarks = surface_landmarks(vertices, &model.triangles, &model.landmarks)?;
        let landmarks_2d = project(&landmarks, &code.camera);
        Ok(RenderState {
            geometry,
            normals,
            normals_uv,
            albedo_uv,
            shaded,
            projected,
            fragments,
            image,
            landmarks,
            landmarks_2d,
            camera: code.camera,
            light: code.light,
        })
    }

    /// Geometry and landmarks only (no shading or rasterization).
    pub fn landmarks_only(
        &self,
        code: &LatentCode,
    ) -> Result<(GeometryEval, Vec<Vec3>, Vec<[f64; 2]>)> {
        code.validate(self.model, self.albedo)?;
        let geometry = evaluate_geometry(
            self.model,
            &code.shape,
            &code.pose_params(),
            &code.expression,
        )?;
        let lm = surface_landmarks(
            &geometry.vertices,
            &self.model.triangles,
            &self.model.landmarks,
        )?;
        let lm2 = project(&lm, &code.camera);
        Ok((geometry, lm, lm2))
    }

    /// UV position map `M_uv` of the posed mesh.
    pub fn positions_uv(&self, state: &RenderState) -> Image {
        self.uv
            .interpolate(&self.model.triangles, state.vertices(), MapKind::Position)
    }

    /// Reverse pass from cotangents on the rendered image and/or the
    /// projected landmarks.
    pub fn backward(
        &self,
        state: &RenderState,
        grad_image: Option<&Image>,
        grad_landmarks: Option<&[[f64; 2]]>,
    ) -> RenderGrads {
        let model = self.model;
        let tris = &model.triangles;
        let vertices = state.vertices();
        let n = vertices.len();
        let mut g_vert = vec![Vec3::zeros(); n];
        let mut scale = 0.0;
        let mut translation = [0.0; 2];
        let mut light = Lighting::zeros();
        let mut albedo = vec![0.0; self.albedo.dim()];

        if let Some(gi) = grad_image {
            let d = self.uv.size;
            let mut g_b = Image::square(d, 3, MapKind::Shaded);
            let g_proj = render_texture_backward(
                &state.fragments,
                &model.uv,
                tris,
                Some(&state.projected),
                &state.shaded,
                gi,
                &mut g_b,
            );
            let (gp, gs, gt) = project_backward(vertices, &state.camera, &g_proj);
            for (a, b) in g_vert.iter_mut().zip(&gp) {
                *a += b;
            }
            scale += gs;
            translation[0] += gt[0];
            translation[1] += gt[1];
            let sg = shade_backward(
                &state.albedo_uv,
                &state.light,
                &state.normals_uv,
                &self.mask_uv,
                &g_b,
            );
            albedo = albedo_map_backward(self.albedo, &sg.albedo);
            light = sg.light;
            let g_n =
                self.uv
                    .interpolate_backward(tris, &state.normals, MapKind::Normal, &sg.normals);
            for (a, b) in g_vert
                .iter_mut()
                .zip(vertex_normals_backward(vertices, tris, &g_n))
            {
                *a += b;
            }
        }
        if let Some(gl) = grad_landmarks {
            let (g3, gs, gt) = project_backward(&state.landmarks, &state.camera, gl);
            scale += gs;
            translation[0] += gt[0];
            translation[1] += gt[1];
            for (a, b) in
                g_vert
                    .iter_mut()
                    .zip(surface_landmarks_backward(n, tris, &model.landmarks, &g3))
            {
                *a += b;
            }
        }
        let gg = state.geometry.backward(model, &g_vert);
        RenderGrads {
            shape: gg.shape,
            expression: gg.expression,
            pose: gg.pose,
            albedo,
            light,
            scale,
            translation,
        }
    }

    /// Landmark-only reverse pass.
    pub fn landmarks_backward(
        &self,
        geometry: &GeometryEval,
        landmarks: &[Vec3],
        camera: &Camera,
        grad_landmarks: &[[f64; 2]],
    ) -> RenderGrads {
        let model = self.model;
        let (g3, scale, translation) = project_backward(landmarks, camera, grad_landmarks);
        let g_vert = surface_landmarks_backward(
            model.vertex_count(),
            &model.triangles,
            &model.landmarks,
            &g3,
        );
        let gg = geometry.backward(model, &g_vert);
        RenderGrads {
            shape: gg.shape,
            expression: gg.expression,
            pose: gg.pose,
            albedo: vec![0.0; self.albedo.dim()],
            light: Lighting::zeros(),
            scale,
            translation,
        }
    }
}
