//! The clone-network model family: configuration, parameters, and
//! initialization.
//!
//! One *clone* is a three-stage denoiser: a low-level feature extraction
//! convolution, a multilayer convolutional encoder/decoder module, and a
//! recovery stage that turns features back into an image residual on top of an
//! anchor image. A network stacks `n_clones` such clones **sharing one
//! parameter set**, and four independent switches control how the clones are
//! wired together:
//!
//! - [`TransferMode`]: what a clone hands to the next one — its output image
//!   or its feature tensor.
//! - [`InputMode`]: whether a clone sees only its predecessor's result or that
//!   result coupled with the original noisy input.
//! - [`ResidualMode`]: whether the recovery anchor is the predecessor's output
//!   (incremental refinement) or always the noisy input (brute-force mapping).
//! - [`LossMode`]: whether training supervises only the last clone or every
//!   clone in parallel.
//!
//! The sequential chain (image transfer, previous-only input, incremental
//! residual, last-only loss) and the fully parallel variant (feature transfer,
//! coupled input, brute-force residual, parallel loss) are the two extreme
//! corners of this lattice; with one clone every combination collapses to the
//! same single-module model.

use crate::tensor::{ConvKernel, Grid4, Scalar};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod backward;
mod forward;

pub use backward::{network_backward, network_loss};
pub use forward::{
    denoise, denoise_all_clones, extract_low_features, module_forward, network_forward,
    recover_image, ForwardTrace,
};

// ============================================================================
// Configuration
// ============================================================================

/// What a clone passes to its successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    /// The predecessor's output image.
    Image,
    /// The predecessor's feature tensor (before recovery).
    Feature,
}

/// What a clone consumes alongside the transferred signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Only the transferred signal.
    PreviousOnly,
    /// The transferred signal coupled with the network input: at image level a
    /// 2-channel concatenation of noisy input and previous output, at feature
    /// level the concatenation of the input's low-level features with the
    /// transferred features.
    Coupled,
}

/// What the recovery stage adds its decoded residual to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// Anchor on the previous clone's output: each clone refines its
    /// predecessor.
    Incremental,
    /// Anchor on the noisy input: each clone predicts the full restoration.
    BruteForce,
}

/// Which clone outputs the training loss supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mean squared error on the last clone only.
    LastOnly,
    /// Average of the per-clone mean squared errors, supervising every clone.
    Parallel,
}

macro_rules! mode_strings {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<$ty> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}', expected one of: ",
                                $($name, " "),+),
                        other
                    ))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

mode_strings!(TransferMode { Image => "image", Feature => "feature" });
mode_strings!(InputMode { PreviousOnly => "previous_only", Coupled => "coupled" });
mode_strings!(ResidualMode { Incremental => "incremental", BruteForce => "brute_force" });
mode_strings!(LossMode { LastOnly => "last_only", Parallel => "parallel" });

/// Shape of the encoder/decoder module inside each clone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleTopology {
    /// Total layer count: the first half are 3x3 valid convolutions
    /// (the encoder), the second half transposed convolutions (the decoder).
    /// Must be even and at least 2.
    pub n_layers: usize,
    /// Channel width of every module layer.
    pub n_kernels: usize,
    /// Additive shortcuts `(encoder_layer, decoder_layer)`, 1-based: the
    /// output of encoder layer `e` is added to decoder layer `d`'s
    /// pre-activation. Spatial sizes only line up when `e + d == n_layers/2`.
    pub shortcut_pairs: Vec<(usize, usize)>,
}

impl ModuleTopology {
    /// Standard topology: `n_layers` layers, `n_kernels` channels, and a
    /// shortcut from every second encoder layer to its size-matched decoder
    /// layer (for 10 layers: encoder 2 -> decoder 3 and encoder 4 -> decoder 1).
    pub fn standard(n_layers: usize, n_kernels: usize) -> ModuleTopology {
        ModuleTopology {
            n_layers,
            n_kernels,
            shortcut_pairs: ModuleTopology::default_shortcuts(n_layers),
        }
    }

    /// Size-matched shortcut pairs for even encoder layers.
    pub fn default_shortcuts(n_layers: usize) -> Vec<(usize, usize)> {
        let m = n_layers / 2;
        (2..m).step_by(2).map(|e| (e, m - e)).collect()
    }

    /// Encoder (= decoder) depth.
    pub fn half_layers(&self) -> usize {
        self.n_layers / 2
    }

    /// Smallest spatial side the module itself accepts: each encoder layer
    /// removes 2 pixels and at least one must remain.
    pub fn min_module_side(&self) -> usize {
        2 * self.half_layers() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return Err(Error::Config(format!(
                "n_layers must be even and at least 2, got {}",
                self.n_layers
            )));
        }
        if self.n_kernels == 0 {
            return Err(Error::Config("n_kernels must be at least 1".into()));
        }
        let m = self.half_layers();
        for &(e, d) in &self.shortcut_pairs {
            if e < 1 || d < 1 || e > m || d > m || e + d != m {
                return Err(Error::Config(format!(
                    "shortcut ({e}, {d}) is not shape-compatible: encoder output \
                     {e} and decoder input {d} only match when e + d = {m} \
                     (n_layers/2), with both at least 1"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &(_, d) in &self.shortcut_pairs {
            if !seen.insert(d) {
                return Err(Error::Config(format!(
                    "decoder layer {d} receives more than one shortcut"
                )));
            }
        }
        Ok(())
    }
}

/// Full specification of one network in the family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloneNetConfig {
    /// Number of stacked clones (T >= 1), all sharing one parameter set.
    pub n_clones: usize,
    pub transfer_mode: TransferMode,
    pub input_mode: InputMode,
    pub residual_mode: ResidualMode,
    pub loss_mode: LossMode,
    pub topology: ModuleTopology,
}

impl CloneNetConfig {
    /// The sequential chain: image transfer, previous-only input, incremental
    /// residual, last-only loss.
    pub fn sequential(n_clones: usize, topology: ModuleTopology) -> CloneNetConfig {
        CloneNetConfig {
            n_clones,
            transfer_mode: TransferMode::Image,
            input_mode: InputMode::PreviousOnly,
            residual_mode: ResidualMode::Incremental,
            loss_mode: LossMode::LastOnly,
            topology,
        }
    }

    /// The fully parallel variant: feature transfer, coupled input,
    /// brute-force residual, parallel loss.
    pub fn parallel(n_clones: usize, topology: ModuleTopology) -> CloneNetConfig {
        CloneNetConfig {
            n_clones,
            transfer_mode: TransferMode::Feature,
            input_mode: InputMode::Coupled,
            residual_mode: ResidualMode::BruteForce,
            loss_mode: LossMode::Parallel,
            topology,
        }
    }

    /// Channel count entering the module's first layer.
    pub fn module_input_channels(&self) -> usize {
        match self.transfer_mode {
            TransferMode::Feature => 2 * self.topology.n_kernels,
            TransferMode::Image => self.topology.n_kernels,
        }
    }

    /// Channel count entering the low-level extraction stage.
    pub fn low_level_input_channels(&self) -> usize {
        match (self.transfer_mode, self.input_mode) {
            // Feature mode extracts low-level features from the noisy input
            // alone; coupling happens at feature level.
            (TransferMode::Feature, _) => 1,
            (TransferMode::Image, InputMode::PreviousOnly) => 1,
            (TransferMode::Image, InputMode::Coupled) => 2,
        }
    }

    /// Smallest square input image the network accepts: the low-level stage
    /// removes 2 pixels, the module's encoder needs `2*(n_layers/2)+1` left.
    pub fn min_image_side(&self) -> usize {
        self.topology.min_module_side() + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clones == 0 {
            return Err(Error::Config("n_clones must be at least 1".into()));
        }
        if self.transfer_mode == TransferMode::Feature && self.input_mode == InputMode::PreviousOnly
        {
            return Err(Error::Config(
                "feature transfer always couples the input's low-level features \
                 with the transferred features; input_mode previous_only is only \
                 meaningful with image transfer"
                    .into(),
            ));
        }
        self.topology.validate()
    }
}

// ============================================================================
// Parameters
// ============================================================================

/// The single parameter set shared by every clone: the low-level extraction
/// kernel, the module's layers (encoder convolutions then decoder transposed
/// convolutions), and the recovery kernel applied as a transposed convolution.
///
/// The same struct doubles as the gradient container, which keeps parameter
/// and gradient layouts congruent by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<E> {
    pub low_level: ConvKernel<E>,
    pub module_layers: Vec<ConvKernel<E>>,
    pub recovery: ConvKernel<E>,
}

impl<E: Scalar> ParameterSet<E> {
    /// All-zero parameters with the shapes the configuration requires.
    pub fn zeros(config: &CloneNetConfig) -> ParameterSet<E> {
        let k = config.topology.n_kernels;
        let m = config.topology.half_layers();
        let mut module_layers = Vec::with_capacity(config.topology.n_layers);
        for layer in 0..m {
            let c_in = if layer == 0 {
                config.module_input_channels()
            } else {
                k
            };
            module_layers.push(ConvKernel::zeros_conv(k, c_in));
        }
        for _ in 0..m {
            module_layers.push(ConvKernel::zeros_deconv(k, k));
        }
        ParameterSet {
            low_level: ConvKernel::zeros_conv(k, config.low_level_input_channels()),
            module_layers,
            recovery: ConvKernel::zeros_deconv(k, 1),
        }
    }

    /// Seeded initialization: every weight uniform in `(-b, b)` with
    /// `b = sqrt(1 / fan_in)` for its layer, biases zero. The draw order is
    /// the canonical parameter order, so a seed fully determines the result.
    pub fn init(config: &CloneNetConfig, seed: u64) -> ParameterSet<E> {
        let mut params = ParameterSet::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |kernel: &mut ConvKernel<E>, fan_in: usize| {
            let b = (1.0 / fan_in as f64).sqrt();
            for w in kernel.weights.data_mut() {
                *w = E::from_f64(rng.gen_range(-b..b));
            }
        };
        let ll_in = config.low_level_input_channels();
        fill(&mut params.low_level, ll_in * 9);
        let m = config.topology.half_layers();
        for layer in 0..2 * m {
            // Input channels sit in the second weight dimension for encoder
            // convolutions and the first for decoder transposed convolutions.
            let dims = params.module_layers[layer].weights.dims();
            let c_in = if layer < m { dims[1] } else { dims[0] };
            fill(&mut params.module_layers[layer], c_in * 9);
        }
        let k = config.topology.n_kernels;
        fill(&mut params.recovery, k * 9);
        params
    }

    /// Zero parameters with exactly this set's shapes (gradient container).
    pub fn zeros_like(&self) -> ParameterSet<E> {
        let zk = |k: &ConvKernel<E>| ConvKernel {
            weights: Grid4::zeros(k.weights.dims()),
            bias: vec![E::ZERO; k.bias.len()],
        };
        ParameterSet {
            low_level: zk(&self.low_level),
            module_layers: self.module_layers.iter().map(zk).collect(),
            recovery: zk(&self.recovery),
        }
    }

    /// Check that the shapes match what `config` requires.
    pub fn validate_against(&self, config: &CloneNetConfig) -> Result<()> {
        config.validate()?;
        let expected = ParameterSet::<E>::zeros(config);
        let pairs = |a: &ParameterSet<E>| {
            let mut v = vec![("low_level", a.low_level.weights.dims(), a.low_level.bias.len())];
            for k in &a.module_layers {
                v.push(("module layer", k.weights.dims(), k.bias.len()));
            }
            v.push(("recovery", a.recovery.weights.dims(), a.recovery.bias.len()));
            v
        };
        let got = pairs(self);
        let want = pairs(&expected);
        if got.len() != want.len() {
            return Err(Error::shape(
                "parameter set layer count",
                want.len(),
                got.len(),
            ));
        }
        for (idx, (g, w)) in got.iter().zip(&want).enumerate() {
            if g != w {
                return Err(Error::Shape {
                    context: format!("parameter tensor #{idx} ({})", g.0),
                    expected: format!("{:?} bias {}", w.1, w.2),
                    got: format!("{:?} bias {}", g.1, g.2),
                });
            }
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.low_level.param_count()
            + self
                .module_layers
                .iter()
                .map(|k| k.param_count())
                .sum::<usize>()
            + self.recovery.param_count()
    }

    /// All parameter storage as ordered immutable slices (canonical order:
    /// low-level weights, low-level bias, each module layer's weights and
    /// bias, recovery weights, recovery bias).
    pub fn slices(&self) -> Vec<&[E]> {
        let mut v: Vec<&[E]> = vec![self.low_level.weights.data(), &self.low_level.bias];
        for k in &self.module_layers {
            v.push(k.weights.data());
            v.push(&k.bias);
        }
        v.push(self.recovery.weights.data());
        v.push(&self.recovery.bias);
        v
    }

    /// Mutable variant of [`ParameterSet::slices`], same order.
    pub fn slices_mut(&mut self) -> Vec<&mut [E]> {
        let mut v: Vec<&mut [E]> = vec![self.low_level.weights.data_mut(), &mut self.low_level.bias];
        for k in &mut self.module_layers {
            v.push(k.weights.data_mut());
            v.push(&mut k.bias);
        }
        v.push(self.recovery.weights.data_mut());
        v.push(&mut self.recovery.bias);
        v
    }

    /// Names aligned with [`ParameterSet::slices`], used by checkpoints.
    pub fn slice_names(&self) -> Vec<String> {
        let mut v = vec!["low_level.weights".into(), "low_level.bias".into()];
        for i in 0..self.module_layers.len() {
            v.push(format!("module.{i}.weights"));
            v.push(format!("module.{i}.bias"));
        }
        v.push("recovery.weights".into());
        v.push("recovery.bias".into());
        v
    }

    pub fn all_finite(&self) -> bool {
        self.low_level.all_finite()
            && self.module_layers.iter().all(|k| k.all_finite())
            && self.recovery.all_finite()
    }

    pub fn cast<F: Scalar>(&self) -> ParameterSet<F> {
        ParameterSet {
            low_level: self.low_level.cast(),
            module_layers: self.module_layers.iter().map(|k| k.cast()).collect(),
            recovery: self.recovery.cast(),
        }
    }
}
