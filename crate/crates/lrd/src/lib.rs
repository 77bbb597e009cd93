//! Latent refinement decoding for masked discrete-diffusion sequence models.
//!
//! The crate is organised around the decoding pipeline:
//!
//! - [`probcore`]: categorical distributions, entropy, KL, nucleus truncation,
//!   noise schedules and the absorbing forward/reverse process.
//! - [`denoiser`]: a tiny bidirectional transformer with hand-written
//!   reverse-mode gradients, trainable on synthetic corpora.
//! - [`sampler`]: the two-phase decoder — latent refinement over soft
//!   embeddings, then a predictive feedback loop with hard commits, governed
//!   by a KL convergence monitor.
//! - [`oracle`]: brute-force ground truth on enumerable instances.
//! - [`stability`]: spectral-norm and local-Lipschitz probes of the attention
//!   layers.
//! - [`harness`]: synthetic tasks, training loops, benchmark/ablation runners
//!   and the CSV/checkpoint plumbing behind the `lrd` CLI.

pub mod denoiser;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod probcore;
pub mod sampler;
pub mod stability;
pub mod tensor;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
