//! Procedural image data: vocabulary, scene rendering, corruptions and the
//! on-disk dataset format.

mod corrupt;
mod dataset;
mod scene;
mod vocab;

pub use corrupt::{apply_corruption, Corruption, CorruptionKind, MAX_SEVERITY};
pub use dataset::{
    dataset_file_size, generate_dataset, load_dataset, sample_seed, save_dataset, Dataset, Split,
};
pub use scene::{
    class_name, render_scene, render_scene_sized, scene_geometry, Color, Geometry, ImageSample,
    SceneSpec, Shape, Size, DEFAULT_IMAGE_SIZE, NUM_CLASSES, NUM_POSITIONS,
};
pub use vocab::{checksum_of, Vocabulary, BOS, NUM_SPECIAL, PAD, UNK};

pub(crate) mod io;
pub(crate) use scene::POSITION_WORDS;
