//! Deterministic synthetic defect dataset: generation, split manifest and
//! on-disk layout.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.json      splits, seed, config, config hash, class catalog
//! images/<id>.pgm    8-bit P5, value = round(255 * v)
//! masks/<id>.pgm     8-bit P5, value = class index
//! ```

pub mod catalog;
pub mod pnm;
pub mod synth;
mod dataset;

pub use catalog::{base_class_names, DefectKind, BACKGROUND, CATALOG_VERSION, CLASS_NAMES};
pub use dataset::{
    gen_dataset, read_dataset, read_sample, sample_seed, write_dataset, write_sample, Dataset, DatasetConfig,
    SplitEntry, SplitManifest, SupportEvent, MANIFEST_FILE,
};
pub use synth::{gen_background, stamp_defect, StampedDefect};

use thiserror::Error;

use crate::mask::Mask;
use crate::numerics::NumericsError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("could not place a {kind:?} defect after {attempts} attempts")]
    Placement { kind: DefectKind, attempts: usize },
    #[error("image is {image:?} but mask is {mask:?}")]
    DimMismatch { image: (usize, usize), mask: (usize, usize) },
    #[error("{path}: {source}")]
    Pnm {
        path: String,
        #[source]
        source: pnm::PnmError,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Grayscale cell image with its per-pixel class annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Mask) -> Result<Self, DataError> {
        let (_, h, w) = image.chw()?;
        if mask.dims() != (h, w) {
            return Err(DataError::DimMismatch {
                image: (h, w),
                mask: mask.dims(),
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn is_defective(&self) -> bool {
        self.mask.count_foreground() > 0
    }
}
