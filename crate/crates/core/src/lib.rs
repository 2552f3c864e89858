//! Synthesis and evaluation of camera-object relation datasets.

pub mod asset;
pub mod config;
pub mod curation;
pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod geometry;
pub mod llm;
pub mod matching;
pub mod pipeline;
pub mod prompt;
pub mod render;
pub mod vqa;

pub use asset::{load_catalog, Asset, AssetCatalog, Mesh};
pub use config::PipelineConfig;
pub use curation::{ReviewService, ReviewStats, ReviewTask, Verdict};
pub use dataset::{Manifest, ManifestWriter, ReviewStatus, SampleRecord, SampleSource, Split};
pub use eval::{EvalReport, GradeVerdict, ModelResponse};
pub use geometry::{CameraObjectRelation, ClassTriple, OrientationClass, RelationAxis, ShotClass, ViewpointClass};
pub use pipeline::{generate_dataset, GenerateSummary, Services};
pub use render::PriorSet;
pub use vqa::VqaItem;
