//! Synthetic scenes, frozen encoders and the dataset directory format.

mod dataset;
mod encoder;
mod scene;

pub use dataset::{read_dataset, read_manifest, write_dataset, Dataset, Manifest, SampleEntry, MANIFEST};
pub use encoder::{EncoderConfig, FeatureBundle, SignatureBank, StubEncoders, VisualEncoder};
pub use scene::{category_color, generate_dataset, generate_scene, Sample, SceneConfig, Shape, BACKGROUND};
