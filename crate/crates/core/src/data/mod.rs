//! Annotated images: on-disk formats, the synthetic corpus, augmentation and
//! batching.

pub mod annotation;
pub mod augment;
pub mod batch;
pub mod dataset;
pub mod image_io;
pub mod synth;

use crate::masks::{AnnotationPool, TextPolygon};
use crate::tensor::Tensor;

pub use annotation::parse_detection_file;
pub use augment::{augment, AugmentConfig, AugmentParams};
pub use batch::{make_batch, make_batch_with, make_supervised_batch, Batch};
pub use image_io::{load_image, save_image};
pub use synth::{synth_generate, SynthConfig};

/// An RGB image in [0,1] with its text polygons and, for STR data, the
/// text-free target.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    /// `[3,h,w]`
    pub image: Tensor,
    pub polygons: Vec<TextPolygon>,
    pub clean: Option<Tensor>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Collects every sample's polygons into a random-mask pool, in order.
pub fn pool_of(samples: &[AnnotatedImage]) -> AnnotationPool {
    let mut pool = AnnotationPool::default();
    for s in samples {
        pool.push(s.polygons.clone(), s.width(), s.height());
    }
    pool
}
