//! Expression retargeting and detail animation.

use crate::code::LatentCode;
use crate::detail::{detail_normal_map, displace_vertices, render_detail, DetailDecoder};
use crate::error::{Error, Result};
use crate::model::{Mesh, ParametricHeadModel};
use crate::render::{Image, Renderer};

use super::detail::DetailScene;

/// Identity code with the expression and jaw rotation of `expression`.
pub fn retarget_code(
    model: &ParametricHeadModel,
    identity: &LatentCode,
    expression: &LatentCode,
) -> Result<LatentCode> {
    if identity.expression.len() != expression.expression.len()
        || identity.pose.len() != expression.pose.len()
    {
        return Err(Error::Validation(
            "retargeting needs codes of the same model".into(),
        ));
    }
    let mut out = identity.clone();
    out.expression.clone_from(&expression.expression);
    out.set_joint_rotation(model.jaw_joint, expression.joint_rotation(model.jaw_joint));
    Ok(out)
}

/// Retargeted code and its displacement map
/// `D = F_d(δ_identity, ψ_expression, θ_jaw,expression)`.
pub fn retarget(
    model: &ParametricHeadModel,
    identity: &LatentCode,
    expression: &LatentCode,
    decoder: &DetailDecoder,
) -> Result<(LatentCode, Image)> {
    let code = retarget_code(model, identity, expression)?;
    let disp = decoder.decode(
        &code.detail,
        &code.expression,
        &code.joint_rotation(model.jaw_joint),
    )?;
    Ok((code, disp))
}

/// One animation frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub code: LatentCode,
    pub displacement: Image,
    /// Coarse geometry shaded with the detail normals.
    pub image: Image,
    /// Coarse mesh displaced by `D` along the vertex normals.
    pub mesh: Mesh,
}

/// Retargets every code of `expressions` onto `identity` and renders it.
pub fn animate_sequence(
    renderer: &Renderer,
    identity: &LatentCode,
    expressions: &[LatentCode],
    decoder: &DetailDecoder,
) -> Result<Vec<Frame>> {
    let model = renderer.model;
    expressions
        .iter()
        .map(|e| {
            let (code, disp) = retarget(model, identity, e, decoder)?;
            let scene = DetailScene::new(renderer, &code)?;
            let nm = detail_normal_map(
                &scene.positions_uv,
                &scene.state.normals_uv,
                &disp,
                &renderer.mask_uv,
            );
            let image = render_detail(renderer, &scene.state, &nm.normals)?.image;
            let vertices = displace_vertices(
                scene.state.vertices(),
                &scene.state.normals,
                &model.uv,
                &disp,
            );
            let mesh = Mesh::new(vertices, model.triangles.clone(), model.uv.clone());
            Ok(Frame {
                code,
                displacement: disp,
                image,
                mesh,
            })
        })
        .collect()
}
