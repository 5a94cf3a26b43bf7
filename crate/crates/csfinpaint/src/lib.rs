//! Self-supervised 3D inpainting for multimodal brain MRI.
//!
//! The library trains a 3D adversarial inpainting model on real images by
//! dropping out random patches and asking the generator to re-synthesize them
//! from tissue labels, edge maps, and sinusoidal position channels. A trained
//! model is then applied to synthetically atrophied images to fill plausible
//! CSF into regions where gray matter was thinned.
//!
//! Entry points:
//! - [`volume`]: NIfTI/MGH ingestion, intensity normalization, 7-class tissue labels
//! - [`dropout`]: random patch dropout masks and the Gaussian noise fill
//! - [`channels`]: the five semantic input channels plus positional encoding
//! - [`networks`], [`losses`], [`trainer`]: the GAN itself
//! - [`inference`]: CSF dropout masks and Gaussian-weighted sliding-window inpainting
//! - [`metrics`], [`stats`]: evaluation (L1/PSNR/SSIM, tissue histograms, paired tests)
//! - [`pipeline`]: config-driven stage orchestration behind the `csfinpaint` binary
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `cargo run --example generate_dropout_masks`.

pub mod channels;
pub mod dropout;
pub mod edges;
pub mod error;
pub mod features;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod spe;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
