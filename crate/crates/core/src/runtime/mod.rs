//! Configuration, data files, synthetic phantoms and the train / eval /
//! ablation / gradient-check drivers behind the command line.

pub mod ablate;
pub mod config;
pub mod data;
pub mod eval;
pub mod phantom;
pub mod train;
pub mod verify;
pub mod volume;

pub use config::{Precision, Preset, RunConfig};
pub use data::{LabelledVolume, Manifest, Split};
pub use phantom::PhantomSpec;
pub use train::Trainer;
pub use volume::VolumeFile;
