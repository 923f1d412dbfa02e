//! Asset containers, run configuration and file formats.

pub mod assets;
pub mod config;
pub mod container;
pub mod formats;

pub use assets::{
    load_decoder, load_model, save_decoder, save_model, save_model_dir, ModelMetadata,
};
pub use config::RunConfig;
pub use container::{read_container, AssetManifest, DType, TensorEntry, FORMAT_VERSION};
pub use formats::*;
