//! Small shared fixtures for the pipeline tests.

use crate::model::{
    synthesize_toy_albedo, synthesize_toy_model, ParametricHeadModel, ToyModelSpec,
};
use crate::render::{AlbedoModel, Renderer};

pub(crate) struct Toy {
    pub model: ParametricHeadModel,
    pub albedo: AlbedoModel,
}

impl Toy {
    pub fn new() -> Self {
        let spec = ToyModelSpec {
            subdivisions: 2,
            shape_dim: 10,
            expression_dim: 6,
            albedo_dim: 5,
            uv_size: 32,
            ..Default::default()
        };
        Self {
            model: synthesize_toy_model(&spec),
            albedo: synthesize_toy_albedo(&spec),
        }
    }

    pub fn renderer(&self, size: usize) -> Renderer<'_> {
        Renderer::new(&self.model, &self.albedo, size)
    }
}
