//! Run configuration, checkpoints and the run driver.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, write_atomic, Checkpoint, Dtype, Entry, EntryMethod,
    FactorSlot, Manifest, ManifestEntry, MAGIC,
};
pub use config::RunConfig;
pub use run::{evaluate, execute, prepare, Prepared, RunOutcome, Student};
