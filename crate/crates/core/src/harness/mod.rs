//! Dataset synthesis and ingestion, folds, metrics, checkpoints and the
//! cross-validation training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod folds;
pub mod metrics;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::TrainConfig;
pub use data::{load_dataset, read_labels, read_manifest, write_labels, write_manifest, Clip, ClipRecord, Dataset};
pub use folds::{split_folds, FoldPlan};
pub use metrics::{f1_per_au, macro_f1, Confusion};
pub use synth::{generate_synthetic, SynthConfig};
pub use train::{cross_validate, evaluate, train_fold, CvSummary, FoldOutcome, FoldReport};
