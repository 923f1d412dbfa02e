//! Coarse and detail fitting, toy-scale decoder training, retargeting and
//! animation.

pub mod coarse;
pub mod config;
pub mod detail;
pub mod multi;
pub mod optim;
pub mod retarget;
pub mod synth;

pub use coarse::{
    default_free_joints, fit_coarse, mean_landmark_error, similarity_from_landmarks, CoarseFit,
    CoarseFitter, FitStatus, FitTarget, FitTrace, TraceRow,
};
pub use config::{DetailStage, FitConfig, GroupRates, Stage, StageKind, TrainStage};
pub use detail::{
    detail_consistency_loss, detail_objective, fit_detail, round_robin_partner,
    train_detail_decoder, DecoderTraining, DetailFit, DetailScene, SubjectImage, SubjectSet,
    TrainRow,
};
pub use multi::{relative_l2, shape_consistency_loss, MultiFit};
pub use optim::{Adam, AdamParams};
pub use retarget::{animate_sequence, retarget, retarget_code, Frame};

#[cfg(test)]
pub(crate) mod testutil;
