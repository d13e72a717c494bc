//! File formats: the binary matrix container, IDX image files, PCM16 WAV
//! audio and model bundles.

mod bundle;
mod idx;
mod matrix;
mod wav;

pub use bundle::{Manifest, ModelBundle, BUNDLE_FORMAT_VERSION, MANIFEST_FILE};
pub use idx::{load_idx_images, read_idx_images, write_idx_images, IDX_IMAGE_MAGIC};
pub use matrix::{read_matrix, read_matrix_from, write_matrix, write_matrix_to, MATRIX_MAGIC, MATRIX_VERSION};
pub use wav::{load_wav, write_wav};
