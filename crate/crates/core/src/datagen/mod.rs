//! Synthetic annotated data: parameter and viewpoint sampling, mask+depth
//! rendering, keypoint/visibility annotation, cycle-consistency filtering
//! and manifest/shard output.

mod config;
mod dataset;
mod sample;

pub use dataset::{attempt_rng, build_dataset, run_attempt, Attempt, fit_prior, BlobSpan, Dataset, LoadedRecord, Manifest, RecordEntry, TaxonStats, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION, PRIORS_FILE, PRIOR_RIDGE};
pub use config::{GenConfig, MaskPerturbation};
pub use sample::{cycle_consistency_filter, dilate, family_centers, fold_axis_angle, perturb_mask, sample_body_params, synthesize_sample, SampleRecord};

