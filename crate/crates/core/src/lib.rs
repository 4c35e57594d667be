//! Bilinear descriptors, one-vs-rest gallery adaptation and open-set
//! identification metrics.
//!
//! The pipeline runs feature maps through [`encoder::encode`], trains one
//! rescaled linear SVM per enrolled identity with [`train::svm::train_ovr_svm`]
//! and scores probe templates with [`eval::identify`].

pub mod encoder;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod formats;
pub mod gradcheck;
pub mod protocol;
pub mod train;

pub use encoder::{encode, BilinearDescriptor, DescriptorStage, FeatureMap};
pub use error::{Error, Result};
pub use train::svm::{GalleryModelSet, LinearModel};
