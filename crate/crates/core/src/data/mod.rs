//! Dataset ingestion, augmentation, training examples and synthetic faces.

pub mod augment;
pub mod example;
pub mod manifest;
pub mod pts;
pub mod sample;
pub mod synth;

pub use augment::{augment, augment_with, AugmentParams};
pub use example::{make_example, Example, Target, TargetSpec};
pub use manifest::{scan_standard, CountReport, Manifest, ManifestEntry, Scan};
pub use pts::{parse_points, parse_pts, write_pts, PtsError};
pub use sample::{FaceSample, SampleMeta, Split};
pub use synth::{synth_faces, SynthFace};
