//! Retrieval-guided caption training on a synthetic shape world.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`graphgrad`]) on top of which two models are built: an LSTM caption
//! decoder ([`captioner`]) and a frozen joint-embedding retrieval model
//! ([`retriever`]). The captioner is first trained by maximum likelihood,
//! then fine-tuned with self-critical REINFORCE where the reward mixes a
//! consensus n-gram score with a self-retrieval term ([`reward`],
//! [`rltrain`]). [`shapeworld`] generates the synthetic dataset and owns
//! the file formats, [`evalsuite`] produces the final report.

pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod evalsuite;
pub mod graphgrad;
mod linalg;
pub mod retriever;
pub mod reward;
pub mod rltrain;
pub mod shapeworld;
