//! Corpus formats, persistence and the synthetic generator.

pub mod checkpoint;
pub mod corpus;
pub mod regions;
pub mod synth;

pub use checkpoint::{config_hash, file_sha256, load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use corpus::{Corpus, GalleryImage, Manifest, QueryRecord, Split, Tag};
pub use regions::{read_region_file, write_region_file};
pub use synth::{generate_synthetic, SynthSpec};
