//! Active point prompting for interactive segmentation, driven by Bayesian
//! Active Learning by Disagreement (BALD).
//!
//! The pipeline: a frozen [`backbone`] turns an image and the current prompt
//! set into features and a mask; a small convolutional [`head`] with a
//! Laplace posterior turns features into an ensemble of probability maps;
//! [`acquisition`] scores every pixel by mutual information and picks the next
//! query; [`session`] runs the loop and its stopping rules; [`metrics`] and
//! [`bench`] evaluate strategies against each other.

pub mod acquisition;
pub mod backbone;
pub mod bench;
mod conv;
pub mod domain;
pub mod error;
pub mod head;
pub mod io;
pub mod metrics;
pub mod session;
pub mod synth;

pub use error::{Error, Result};
