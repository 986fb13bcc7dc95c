//! Synthetic labelled texture dataset and image ingestion.

mod store;
mod texture;

pub use store::{
    gen_texture_dataset, item_seed, load_dataset, load_images, rle_decode, rle_encode, save_dataset, Dataset,
    DatasetManifest, ItemRecord, LoadReport, Split, MANIFEST_FILE,
};
pub use texture::{generate_texture, patch_labels, GeneratorParams, TextureFamily, TextureImage};
