//! Records, subword vocabulary, synthetic corpus and batching.

pub mod batch;
pub mod records;
pub mod render;
pub mod synth;
pub mod vocab;

pub use batch::{Batch, BatchConfig, BatchError, Batcher, QueryInput};
pub use records::{normalize_text, FeatureRecord, NarrativeRecord, RecordError, Region, TimedWord};
pub use synth::{generate_synthetic, split_by_group, Scene, SceneObject, SynthConfig, SynthDataset, SynthError};
pub use vocab::{build_vocabulary, tokenize_aligned, VocabError, Vocabulary, PAD_ID, UNK_ID};
