use facefit::eval::{scan_to_mesh_distance, RigidTransform};
use facefit::model::{rodrigues, synthesize_toy_model, ToyModelSpec, Vec3};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Moving scan and mesh together by one rigid motion leaves every
    /// distance unchanged.
    #[test]
    fn distances_are_rigidly_invariant(
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..3.0,
        shift in prop::array::uniform3(-50.0f64..50.0),
        points in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..40),
    ) {
        let axis = Vec3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let mesh = synthesize_toy_model(&ToyModelSpec {
            subdivisions: 1,
            shape_dim: 2,
            expression_dim: 2,
            albedo_dim: 2,
            uv_size: 16,
            ..Default::default()
        })
        .template_mesh();
        let scan: Vec<Vec3> = points.into_iter().map(Vec3::from).collect();
        let t = RigidTransform {
            rotation: rodrigues(&(axis.normalize() * angle)),
            translation: Vec3::from(shift),
            scale: 1.0,
        };
        let before = scan_to_mesh_distance(&scan, &mesh).unwrap();
        let after = scan_to_mesh_distance(&t.apply_all(&scan), &t.apply_mesh(&mesh)).unwrap();
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a), "{a} vs {b}");
        }
    }
}
