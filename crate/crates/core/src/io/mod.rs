//! Persistence, configuration and exports.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod image;
pub mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_sae, load_vit, save_checkpoint,
    save_sae, save_vit, Checkpoint, CHECKPOINT_VERSION,
};
pub use config::{BaselineKind, RunConfig};
pub use image::{export_diverging, export_grayscale, load_image, save_image};
pub use synthetic::{
    generate_suite, load_suite, write_suite, InstanceKind, SuiteInstance, SuiteManifest,
    SyntheticConfig,
};
