//! Patient data model, cohort files, synthetic generation, encoding and splitting.

pub mod csv_io;
pub mod encode;
pub mod split;
pub mod synthetic;
pub mod types;

pub use csv_io::{load_cohort_csv, read_cohort, save_cohort_csv, write_cohort, COLUMNS};
pub use encode::{
    feature_groups, FeatureEncoder, FeatureGroup, NormalizationStats, StageContext, StageResult,
    TransitionDist, BASE_LEN, CONTEXT_LEN, FULL_LEN,
};
pub use split::{split_indices, stratified_split};
pub use synthetic::{generate_synthetic_cohort, DecisionMode, SyntheticConfig};
pub use types::*;
