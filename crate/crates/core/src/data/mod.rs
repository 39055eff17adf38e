//! Synthetic multi-domain corpus, image I/O, the domain split and batching.

mod batch;
mod manifest;
mod pgm;
mod split;
mod synth;

pub use batch::{mixed_batch_iterator, source_batches, MixedBatch, MixedBatchIter};
pub use manifest::{load_corpus, read_manifest, write_corpus, write_manifest, ManifestRow, MANIFEST_NAME};
pub use pgm::{dequantize, load_pair, quantize, read_pgm, write_pgm, Pgm};
pub use split::{make_split, DataSplit};
pub use synth::{generate_corpus, generate_domain, DomainSpec, Palette, DEFAULT_SIZE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DOMAINS: [u8; 4] = [1, 2, 3, 4];

/// One 2-D slice: image in `[0, 1]` with shape `[1, H, W]` and an optional
/// binary mask of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
    pub domain_id: u8,
    pub subject_id: u32,
    pub slice_index: u32,
}

impl SliceSample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn is_labeled(&self) -> bool {
        self.mask.is_some()
    }

    pub fn unlabeled(&self) -> Self {
        Self {
            mask: None,
            ..self.clone()
        }
    }

    pub fn key(&self) -> (u8, u32, u32) {
        (self.domain_id, self.subject_id, self.slice_index)
    }
}

/// Stacks the images of `samples[indices]` into `[N, 1, H, W]`.
pub fn stack_images(samples: &[SliceSample], indices: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<_> = indices.iter().map(|&i| samples[i].image.clone()).collect();
    Tensor::stack(&items)
}

/// Stacks the masks of `samples[indices]`; every sample must be labeled.
pub fn stack_masks(samples: &[SliceSample], indices: &[usize]) -> Result<Tensor<f32>> {
    let items = indices
        .iter()
        .map(|&i| {
            samples[i].mask.clone().ok_or_else(|| {
                Error::invalid(
                    "stack_masks",
                    format!("slice {:?} has no mask", samples[i].key()),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}
