//! Classifier training: per-identity linear SVMs and softmax fine-tuning.

pub mod finetune;
pub mod svm;
