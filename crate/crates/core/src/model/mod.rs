//! Spectrogram transformers: patch embedder, encoder blocks, classification
//! head, reconstruction decoder and the checkpoint format.

pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod decoder;
pub mod head;

pub use backbone::{Backbone, BackboneCache, BackboneOutput};
pub use checkpoint::{Checkpoint, CheckpointConfig, CheckpointKind};
pub use classifier::{backbone_from_checkpoint, load_backbone, save_backbone, Classifier, Prediction};
pub use config::{CountScope, ModelConfig, INPUT_SIZE, NUM_PATCHES, SEQ_LEN};
pub use decoder::CnnDecoder;
pub use head::MlpHead;
