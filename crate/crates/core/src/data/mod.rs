//! Task specification, vocabulary, feature bags, synthetic data and splits.

mod bag;
mod manifest;
pub mod spec;
mod split;
pub mod synthetic;

pub use bag::{read_bag_file, write_bag_file, FeatureBag};
pub use manifest::{load_manifest, read_manifest, write_manifest, LoadedData, ManifestEntry};
pub use spec::{CategoryDef, TaskDef, TaskSpec, Vocabulary};
pub use split::{merge, split, Partition, Split, SplitFractions};
pub use synthetic::{generate_synthetic, SyntheticSpec};
