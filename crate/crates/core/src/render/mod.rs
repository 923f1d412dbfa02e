//! UV albedo, spherical-harmonics shading, orthographic projection and
//! hard rasterization with a reverse-mode contract.

pub mod albedo;
pub mod camera;
pub mod image;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod uv;

pub use albedo::{albedo_map, AlbedoModel};
pub use camera::{project, Camera};
pub use image::{Image, MapKind};
pub use raster::{rasterize, Fragments};
pub use scene::{render, RenderGrads, RenderState, Renderer};
pub use sh::{sh_basis, shade, Lighting};
pub use uv::{mesh_to_uv, UvRaster};
