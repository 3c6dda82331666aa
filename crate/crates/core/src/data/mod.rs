//! Datasets, synthetic data and the skew-controlled label partitioner.

mod dataset;
mod glyphs;
pub mod idx;
mod partition;

pub use glyphs::glyph_dataset;
pub use dataset::{stratified_split, synth_dataset, Dataset};
pub use idx::{load_csv, load_idx, LoadOptions};
pub use partition::{format_skew_table, make_partition_plan, skew_report, PartitionPlan, PlanJson};
