//! Head model, albedo model and decoder persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detail::{DecoderArch, DetailDecoder};
use crate::error::{Error, Result};
use crate::model::{
    Blendshapes, JointRegressor, LandmarkBinding, ParametricHeadModel, SkinningWeights, Vec3,
};
use crate::render::{AlbedoModel, Image, MapKind};

use super::container::{read_container, write_container, write_container_dir, Tensor, Tensors};

pub const MODEL_KIND: &str = "model";
pub const DECODER_KIND: &str = "decoder";

/// Names of the tensors holding the landmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTable {
    pub triangles: String,
    pub barycentrics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub vertices: usize,
    pub triangles: usize,
    /// Articulated joints, excluding the root.
    pub joints: usize,
    pub shape_dim: usize,
    pub expression_dim: usize,
    pub albedo_dim: usize,
    pub uv_size: usize,
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub jaw_joint: usize,
    pub eyelid_pairs: Vec<(usize, usize)>,
    pub landmarks: usize,
    pub landmark_table: LandmarkTable,
    pub albedo_kind: MapKind,
    pub albedo_basis_kind: MapKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderMetadata {
    pub arch: DecoderArch,
    pub input_dim: usize,
    pub size: usize,
    pub output_scale: f64,
}

fn u64s(v: impl IntoIterator<Item = usize>) -> impl Iterator<Item = u64> {
    v.into_iter().map(|x| x as u64)
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn model_tensors(
    model: &ParametricHeadModel,
    albedo: &AlbedoModel,
) -> (serde_json::Value, Vec<(String, Tensor)>) {
    let n = model.vertex_count();
    let joints = model.joint_count();
    let d = albedo.size();
    let mut t = Vec::new();
    let mut put = |name: &str, tensor: Tensor| t.push((name.to_string(), tensor));
    put("template", Tensor::f64(vec![n, 3], &flat3(&model.template)));
    put(
        "triangles",
        Tensor::u64(
            vec![model.triangles.len(), 3],
            u64s(model.triangles.iter().flatten().copied()),
        ),
    );
    for (name, b) in [
        ("shape_basis", &model.shape_basis),
        ("expression_basis", &model.expression_basis),
        ("pose_basis", &model.pose_basis),
    ] {
        put(name, Tensor::f64(vec![b.count, n, 3], &b.data));
    }
    put(
        "skinning_weights",
        Tensor::f64(vec![joints, n], &model.skinning_weights.data),
    );
    let rows = &model.joint_regressor.rows;
    let mut offsets = vec![0usize];
    for r in rows {
        offsets.push(offsets.last().expect("non-empty") + r.len());
    }
    let nnz = *offsets.last().expect("non-empty");
    put(
        "joint_regressor_offsets",
        Tensor::u64(vec![joints + 1], u64s(offsets)),
    );
    put(
        "joint_regressor_indices",
        Tensor::u64(vec![nnz], u64s(rows.iter().flatten().map(|(v, _)| *v))),
    );
    let w: Vec<f64> = rows.iter().flatten().map(|(_, w)| *w).collect();
    put("joint_regressor_weights", Tensor::f64(vec![nnz], &w));
    put(
        "uv",
        Tensor::f64(
            vec![n, 2],
            &model.uv.iter().flatten().copied().collect::<Vec<_>>(),
        ),
    );
    let l = model.landmarks.len();
    put(
        "landmark_triangles",
        Tensor::u64(vec![l], u64s(model.landmarks.iter().map(|b| b.triangle))),
    );
    let bary: Vec<f64> = model.landmarks.iter().flat_map(|b| b.bary).collect();
    put("landmark_barycentrics", Tensor::f64(vec![l, 3], &bary));
    put("albedo_mean", Tensor::f64(vec![d, d, 3], &albedo.mean.data));
    let basis: Vec<f64> = albedo
        .basis
        .iter()
        .flat_map(|b| b.data.iter().copied())
        .collect();
    put(
        "albedo_basis",
        Tensor::f64(vec![albedo.dim(), d, d, 3], &basis),
    );
    let meta = ModelMetadata {
        vertices: n,
        triangles: model.triangles.len(),
        joints: model.articulated_joints(),
        shape_dim: model.shape_dim(),
        expression_dim: model.expression_dim(),
        albedo_dim: albedo.dim(),
        uv_size: d,
        joint_names: model.joint_names.clone(),
        parents: model.parents.clone(),
        jaw_joint: model.jaw_joint,
        eyelid_pairs: model.eyelid_pairs.clone(),
        landmarks: l,
        landmark_table: LandmarkTable {
            triangles: "landmark_triangles".into(),
            barycentrics: "landmark_barycentrics".into(),
        },
        albedo_kind: albedo.mean.kind,
        albedo_basis_kind: albedo.basis.first().map_or(MapKind::Albedo, |b| b.kind),
    };
    (serde_json::to_value(meta).expect("metadata serializes"), t)
}

/// Writes the single-file container.
pub fn save_model(path: &Path, model: &ParametricHeadModel, albedo: &AlbedoModel) -> Result<()> {
    let (meta, t) = model_tensors(model, albedo);
    write_container(path, MODEL_KIND, meta, &t)
}

/// Writes the directory form (`manifest.json` plus one blob per tensor).
pub fn save_model_dir(dir: &Path, model: &ParametricHeadModel, albedo: &AlbedoModel) -> Result<()> {
    let (meta, t) = model_tensors(model, albedo);
    write_container_dir(dir, MODEL_KIND, meta, &t)
}

fn expect_shape(t: &Tensors, name: &str, shape: &[usize]) -> Result<()> {
    let got = t.shape(name)?;
    if got != shape {
        return Err(Error::Invariant(format!(
            "tensor `{name}` has shape {got:?}, metadata implies {shape:?}"
        )));
    }
    Ok(())
}

fn indices(v: Vec<u64>) -> Result<Vec<usize>> {
    v.into_iter()
        .map(|x| {
            usize::try_from(x)
                .map_err(|_| Error::Invariant(format!("index {x} does not fit in usize")))
        })
        .collect()
}

fn check_kind(t: &Tensors, kind: &str) -> Result<()> {
    if t.manifest.kind != kind {
        return Err(Error::format(
            "asset",
            format!("expected a {kind} container, found `{}`", t.manifest.kind),
        ));
    }
    Ok(())
}

/// Reads either container form and validates every model invariant.
pub fn load_model(path: &Path) -> Result<(ParametricHeadModel, AlbedoModel)> {
    let t = read_container(path)?;
    check_kind(&t, MODEL_KIND)?;
    let meta: ModelMetadata = serde_json::from_value(t.manifest.metadata.clone())?;
    let n = meta.vertices;
    let joints = meta.parents.len();
    let d = meta.uv_size;
    expect_shape(&t, "template", &[n, 3])?;
    expect_shape(&t, "triangles", &[meta.triangles, 3])?;
    expect_shape(&t, "shape_basis", &[meta.shape_dim, n, 3])?;
    expect_shape(&t, "expression_basis", &[meta.expression_dim, n, 3])?;
    expect_shape(&t, "pose_basis", &[9 * meta.joints, n, 3])?;
    expect_shape(&t, "skinning_weights", &[joints, n])?;
    expect_shape(&t, "joint_regressor_offsets", &[joints + 1])?;
    expect_shape(&t, "uv", &[n, 2])?;
    expect_shape(&t, &meta.landmark_table.triangles, &[meta.landmarks])?;
    expect_shape(&t, &meta.landmark_table.barycentrics, &[meta.landmarks, 3])?;
    expect_shape(&t, "albedo_mean", &[d, d, 3])?;
    expect_shape(&t, "albedo_basis", &[meta.albedo_dim, d, d, 3])?;
    if meta.joints + 1 != joints {
        return Err(Error::Invariant(
            "joint count disagrees with the parent table".into(),
        ));
    }

    let template: Vec<Vec3> = t
        .f64("template")?
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let triangles: Vec<[usize; 3]> = indices(t.u64("triangles")?)?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let basis = |name: &str, count: usize| -> Result<Blendshapes> {
        Ok(Blendshapes {
            count,
            vertex_count: n,
            data: t.f64(name)?,
        })
    };
    let offsets = indices(t.u64("joint_regressor_offsets")?)?;
    let reg_idx = indices(t.u64("joint_regressor_indices")?)?;
    let reg_w = t.f64("joint_regressor_weights")?;
    if reg_idx.len() != reg_w.len()
        || offsets.first() != Some(&0)
        || offsets.windows(2).any(|w| w[0] > w[1])
        || offsets.last() != Some(&reg_idx.len())
    {
        return Err(Error::Invariant(
            "joint regressor table is inconsistent".into(),
        ));
    }
    let rows = offsets
        .windows(2)
        .map(|w| (w[0]..w[1]).map(|k| (reg_idx[k], reg_w[k])).collect())
        .collect();
    let lm_tri = indices(t.u64(&meta.landmark_table.triangles)?)?;
    let lm_bary = t.f64(&meta.landmark_table.barycentrics)?;
    let landmarks = lm_tri
        .iter()
        .zip(lm_bary.chunks_exact(3))
        .map(|(&triangle, b)| LandmarkBinding {
            triangle,
            bary: [b[0], b[1], b[2]],
        })
        .collect();
    let model = ParametricHeadModel {
        template,
        triangles,
        shape_basis: basis("shape_basis", meta.shape_dim)?,
        expression_basis: basis("expression_basis", meta.expression_dim)?,
        pose_basis: basis("pose_basis", 9 * meta.joints)?,
        skinning_weights: SkinningWeights {
            joint_count: joints,
            vertex_count: n,
            data: t.f64("skinning_weights")?,
        },
        joint_regressor: JointRegressor { rows },
        parents: meta.parents,
        joint_names: meta.joint_names,
        jaw_joint: meta.jaw_joint,
        landmarks,
        uv: t.f64("uv")?.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        eyelid_pairs: meta.eyelid_pairs,
    };
    model.validate()?;
    let mean = Image::from_data(d, d, 3, meta.albedo_kind, t.f64("albedo_mean")?)?;
    let all = t.f64("albedo_basis")?;
    let stride = d * d * 3;
    let basis = (0..meta.albedo_dim)
        .map(|k| {
            Image::from_data(
                d,
                d,
                3,
                meta.albedo_basis_kind,
                all[k * stride..(k + 1) * stride].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let albedo = AlbedoModel { mean, basis };
    albedo.validate()?;
    Ok((model, albedo))
}

fn decoder_parts(decoder: &DetailDecoder) -> (serde_json::Value, Vec<(String, Tensor)>) {
    let meta = DecoderMetadata {
        arch: decoder.arch.clone(),
        input_dim: decoder.input_dim,
        size: decoder.size,
        output_scale: decoder.output_scale,
    };
    (
        serde_json::to_value(meta).expect("metadata serializes"),
        vec![(
            "params".into(),
            Tensor::f64(vec![decoder.params.len()], &decoder.params),
        )],
    )
}

pub fn save_decoder(path: &Path, decoder: &DetailDecoder) -> Result<()> {
    let (meta, t) = decoder_parts(decoder);
    write_container(path, DECODER_KIND, meta, &t)
}

pub fn load_decoder(path: &Path) -> Result<DetailDecoder> {
    let t = read_container(path)?;
    check_kind(&t, DECODER_KIND)?;
    let meta: DecoderMetadata = serde_json::from_value(t.manifest.metadata.clone())?;
    let expected = DetailDecoder::param_count(&meta.arch, meta.input_dim, meta.size);
    expect_shape(&t, "params", &[expected])?;
    if !(meta.output_scale > 0.0) {
        return Err(Error::Invariant(
            "decoder output scale must be positive".into(),
        ));
    }
    Ok(DetailDecoder {
        arch: meta.arch,
        input_dim: meta.input_dim,
        size: meta.size,
        output_scale: meta.output_scale,
        params: t.f64("params")?,
    })
}
