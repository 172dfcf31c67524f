//! Multimodal TIPS-prognosis prediction stack.
//!
//! Optimal-transport co-attention fusion of deep, radiomics and clinical
//! features, progressive orthogonal disentanglement, staged multi-task
//! training for survival / portal-pressure / encephalopathy outcomes, and
//! the full survival-metrics and attribution battery, all on a small
//! self-contained autodiff core.

pub mod error;
pub mod tensor;

pub use error::{CoreError, Result};
