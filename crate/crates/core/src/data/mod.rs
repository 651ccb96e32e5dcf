//! Cohorts: task registry, manifests, feature files, splits and synthetic data.

pub mod cohort;
pub mod features;
pub mod manifest;
pub mod registry;
pub mod splits;
pub mod synth;

pub use cohort::{Cohort, Slide};
pub use features::{FeatureMatrix, FeatureStore};
pub use manifest::{parse_manifest, Manifest, SlideRecord};
pub use registry::{TaskKind, TaskRegistry, TaskSpec};
pub use splits::{check_split_coherence, make_patient_splits, Split, SplitAssignment, TaskSplits};
pub use synth::{synth_generate, SynthCohort, SynthConfig, SynthTask};
