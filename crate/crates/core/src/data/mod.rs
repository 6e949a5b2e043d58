//! Episodic few-shot data: fold specs, dataset layout, leakage-filtered
//! indices, episode sampling and the synthetic-shapes corpus.

mod dataset;
mod episode;
mod fold;
mod index;
pub mod synthetic;

pub use dataset::{mask_to_gray, rgb_to_tensor, tensor_to_rgb, Dataset, Sample};
pub use episode::{read_pair_list, sample_episode, write_pair_list, Episode, EpisodeImage, EpisodePlan, MAX_CROP_ATTEMPTS};
pub use fold::{load_fold_spec, ClassId, FoldSpec};
pub use index::{build_index, EpisodeIndex, Split};
pub use synthetic::{
    generate_synthetic_dataset, load_metadata, synthetic_fold_file, AppearanceJitter, GenerationReport, ShapeKind,
    SyntheticDatasetSpec, SyntheticMetadata,
};
