//! Scene datasets: the MMRS container, a synthetic generator, Non-IID
//! partitioning across clients and patch extraction.

pub mod container;
mod dataset;
mod partition;
mod patches;
mod synth;

pub use dataset::{load_dataset, save_dataset, MultimodalDataset};
pub use partition::{modality_of, partition_noniid, partner_of, Shard};
pub use patches::{extract_patches, extract_patches_sized, reflect, PatchSet, PATCH_SIZE};
pub use synth::{synth_generate, Signatures, SynthConfig, TEST_FRACTION};
