//! Training and evaluation machinery for chest-radiograph deterioration
//! prognosis: a small autodiff engine, image augmentation, contrastive
//! pretraining, single-image and image-sequence classifiers, cohort
//! assembly, and ranking statistics.

pub mod augment;
pub mod checkpoint;
pub mod cohort;
pub mod error;
pub mod evalstats;
pub mod image;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
