//! Displacement decoding, displacement application and detail normals.

pub mod decoder;
pub mod normals;

pub use decoder::{DecoderArch, DecoderTape, DetailDecoder};
pub use normals::{
    apply_displacement, detail_normal_map, detail_normal_map_backward, detail_normals,
    displace_vertices, render_detail, render_detail_backward, DetailNormalMap, DetailRender,
};
