//! Trainable convolutional denoising built around a family of "clone" networks.
//!
//! A clone is a three-stage pipeline (low-level feature extraction, a
//! convolutional encoder/decoder module, and an image recovery stage) that maps
//! a noisy image to a cleaner one. Stacking T clones with shared weights and
//! choosing how information flows between them (image-level or feature-level
//! transfer, previous-only or coupled input, incremental or brute-force
//! residual anchoring, last-only or parallel loss) spans a model family that
//! ranges from a plain sequential chain to the fully parallel variant.
//!
//! The crate provides, from the ground up:
//!
//! - [`tensor`]: dense 4-D grids plus the forward/backward convolution,
//!   transposed-convolution, ReLU, concatenation, and MSE kernels. All loops
//!   run in a fixed order, so results are bit-reproducible run to run.
//! - [`net`]: the configurable clone-network family (forward, loss, backward).
//! - [`train`]: a from-scratch Adam optimizer, geometric learning-rate decay,
//!   and the mini-batch training loop with per-epoch convergence logging.
//! - [`data`]: seeded synthetic phantoms, low-dose noise simulation, and patch
//!   extraction for training.
//! - [`metrics`]: RMSE / PSNR / SSIM and a classical regularized
//!   gradient-descent baseline to compare against.
//! - [`io`]: simple binary tensor and checkpoint formats, key=value config
//!   parsing, and dataset manifests.
//! - [`ablate`]: a config-grid runner producing a summary table across
//!   model variants.

pub mod ablate;
pub mod data;
pub mod io;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod testing;
pub mod train;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and a kernel) have incompatible shapes.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// A configuration value or combination of values is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A plain argument is out of its documented range.
    #[error("invalid value: {0}")]
    Value(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training aborted: non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// The iterative baseline's objective rose for too many consecutive steps.
    #[error(
        "gradient descent diverged: objective increased for {streak} consecutive \
         iterations; choose a smaller step size gamma"
    )]
    Diverged { streak: usize },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An I/O failure annotated with the file it touched.
    #[error("i/o error at {path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the expected format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    /// Convenience constructor for shape mismatches.
    pub fn shape(context: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
