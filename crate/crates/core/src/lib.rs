//! Bi-directional unsupervised domain adaptation for image forgery
//! detection: synthetic manipulation domains, a dual-branch (visual plus
//! DCT frequency) transformer detector, adversarial forward adaptation,
//! self-distilling backward adaptation, and AUC / Grad-CAM evaluation.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod freqmap;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
