//! Input containers, file formats, labels, and the synthetic dataset.

mod dataset;
pub(crate) mod formats;
mod labels;
mod manifest;
pub mod synth;

pub use dataset::{generate_dataset, Batch, Dataset, GenerateOptions, Sample, MANIFEST_FILE};
pub use formats::{
    SilhouetteSequence, SmplSequence, FORMAT_VERSION, POSE_DIM, ROOT_DIM, SHAPE_DIM, SIL_MAGIC, SMPL_DIM, SMPL_MAGIC,
};
pub use labels::{
    bin_age, bin_bmi, bmi_from_imperial, AttributeLabels, Sex, SubjectMeta, AGE_RANGE, BMI_RANGE, HEIGHT_RANGE_IN,
    WEIGHT_RANGE_LB,
};
pub use manifest::{Manifest, ManifestRow, RangeTag, MANIFEST_HEADER};
