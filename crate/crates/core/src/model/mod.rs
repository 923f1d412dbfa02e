//! Statistical head geometry: blendshapes, joint regression, pose
//! correctives, linear blend skinning and surface landmarks.

pub mod head;
pub mod mesh;
pub mod rotation;
pub mod toy;

pub use head::{
    blend_skinning, decode_geometry, evaluate_geometry, joint_locations, pose_correctives,
    Blendshapes, GeometryEval, GeometryGrads, JointRegressor, ParametricHeadModel, PoseParams,
    SkinningWeights,
};
pub use mesh::{surface_landmarks, vertex_normals, LandmarkBinding, Mesh};
pub use rotation::{rodrigues, Mat3, Vec3};
pub use toy::{synthesize_toy_albedo, synthesize_toy_model, ToyModelSpec};
