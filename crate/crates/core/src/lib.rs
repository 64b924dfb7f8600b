//! Spectral graph pre-training and inductive graph alignment prompts.
//!
//! The crate is organized bottom-up:
//!
//! | module | contents |
//! |--------|----------|
//! | [`graph`] | attributed graphs, Laplacians, ego-subgraphs, text I/O |
//! | [`spectral`] | dense and Lanczos eigensolvers, graph Fourier transform |
//! | [`autodiff`] | a small reverse-mode tape over dense matrices |
//! | [`model`] | polynomial spectral filters, task head, Adam |
//! | [`pretrain`] | augmentations, contrastive samplers, InfoNCE, pre-training loop |
//! | [`prompt`] | signal, alignment and label prompts plus the fine-tuning loop |
//! | [`analysis`] | spectral SNR, alignment profiles, metrics |
//! | [`gradcheck`] | finite-difference checks of every trainable array |
//! | [`harness`] | splits, synthetic graphs, configs, checkpoints, pipelines |

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod model;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use graph::{build_laplacian, Graph, GraphSet, Laplacian, LaplacianKind};
pub use spectral::{eig_dense, eig_lanczos, SpectralBasis};
