//! Forward evaluation of clone networks: the three clone stages, the full
//! multi-clone pass with trace capture for backprop, and trace-free denoising.

use super::{CloneNetConfig, InputMode, ModuleTopology, ParameterSet, ResidualMode, TransferMode};
use crate::tensor::ops::{concat_channels, conv2d_forward, deconv2d_forward, relu_forward};
use crate::tensor::{Grid4, Scalar};
use crate::{Error, Result};

/// Everything the backward pass needs to replay a forward pass exactly:
/// the input, the global low-level features (feature-transfer mode), and per
/// clone the stage inputs and all post-activation intermediates.
#[derive(Debug, Clone)]
pub struct ForwardTrace<E> {
    pub(crate) y: Grid4<E>,
    /// Low-level features of `y`, shared by all clones (feature mode only).
    pub(crate) f0: Option<Grid4<E>>,
    pub(crate) clones: Vec<CloneTrace<E>>,
}

#[derive(Debug, Clone)]
pub(crate) struct CloneTrace<E> {
    /// Image-mode input to the low-level stage (1 or 2 channels); `None` in
    /// feature mode, where the low-level stage runs once on `y` instead.
    pub(crate) input_img: Option<Grid4<E>>,
    /// What enters the module's first layer. In image mode this is also the
    /// low-level stage's post-activation output.
    pub(crate) module_input: Grid4<E>,
    /// Encoder post-activations, one per encoder layer.
    pub(crate) enc: Vec<Grid4<E>>,
    /// Decoder post-activations; the last entry is the clone's feature tensor.
    pub(crate) dec: Vec<Grid4<E>>,
    /// The clone's output image.
    pub(crate) x: Grid4<E>,
}

// ============================================================================
// Stages
// ============================================================================

/// Low-level feature extraction: `ReLU(conv(img))` with the dedicated kernel.
/// `img` carries 1 channel (plain input) or 2 (input coupled with the previous
/// output at image level); the kernel's shape decides which is accepted.
pub fn extract_low_features<E: Scalar>(
    img: &Grid4<E>,
    params: &ParameterSet<E>,
) -> Result<Grid4<E>> {
    Ok(relu_forward(&conv2d_forward(img, &params.low_level)?))
}

/// Add `src` into `dst` elementwise (shortcut connections, recovery anchor).
fn add_assign<E: Scalar>(dst: &mut Grid4<E>, src: &Grid4<E>) -> Result<()> {
    if dst.dims() != src.dims() {
        return Err(Error::shape("elementwise add", dst.dims(), src.dims()));
    }
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
    Ok(())
}

/// Run the encoder/decoder module, returning all post-activations.
fn module_forward_parts<E: Scalar>(
    f_in: &Grid4<E>,
    params: &ParameterSet<E>,
    topology: &ModuleTopology,
) -> Result<(Vec<Grid4<E>>, Vec<Grid4<E>>)> {
    let m = topology.half_layers();
    if params.module_layers.len() != 2 * m {
        return Err(Error::shape(
            "module layer count",
            2 * m,
            params.module_layers.len(),
        ));
    }
    let [_, _, h, w] = f_in.dims();
    let need = topology.min_module_side();
    if h < need || w < need {
        return Err(Error::Value(format!(
            "module input {h}x{w} is too small: {m} encoder layers each remove \
             2 pixels, so at least {need}x{need} (2*(n_layers/2)+1) is required"
        )));
    }

    let mut enc: Vec<Grid4<E>> = Vec::with_capacity(m);
    for l in 0..m {
        let input = if l == 0 { f_in } else { &enc[l - 1] };
        let z = conv2d_forward(input, &params.module_layers[l])?;
        enc.push(relu_forward(&z));
    }

    let mut dec: Vec<Grid4<E>> = Vec::with_capacity(m);
    for l in 1..=m {
        let input = if l == 1 { &enc[m - 1] } else { &dec[l - 2] };
        let mut pre = deconv2d_forward(input, &params.module_layers[m + l - 1])?;
        if let Some(&(e, _)) = topology.shortcut_pairs.iter().find(|&&(_, d)| d == l) {
            add_assign(&mut pre, &enc[e - 1])?;
        }
        dec.push(relu_forward(&pre));
    }
    Ok((enc, dec))
}

/// The clone's inner CNN module: encoder convolutions halve nothing but trim
/// borders, decoder transposed convolutions grow them back, with additive
/// shortcuts applied before the decoder activations. Output has the input's
/// spatial size and `n_kernels` channels.
pub fn module_forward<E: Scalar>(
    f_in: &Grid4<E>,
    params: &ParameterSet<E>,
    topology: &ModuleTopology,
) -> Result<Grid4<E>> {
    let (_, mut dec) = module_forward_parts(f_in, params, topology)?;
    Ok(dec.pop().expect("decoder depth >= 1"))
}

/// Recovery stage: `ReLU(anchor + deconv(features))` with the recovery kernel.
/// The transposed convolution must restore exactly the anchor's size.
pub fn recover_image<E: Scalar>(
    anchor: &Grid4<E>,
    features: &Grid4<E>,
    params: &ParameterSet<E>,
) -> Result<Grid4<E>> {
    let mut out = deconv2d_forward(features, &params.recovery)?;
    if out.dims() != anchor.dims() {
        return Err(Error::shape(
            "recovered residual vs anchor",
            anchor.dims(),
            out.dims(),
        ));
    }
    for (o, &a) in out.data_mut().iter_mut().zip(anchor.data()) {
        *o += a;
        if *o < E::ZERO {
            *o = E::ZERO;
        }
    }
    Ok(out)
}

// ============================================================================
// Full network
// ============================================================================

fn validate_input_image<E: Scalar>(y: &Grid4<E>, config: &CloneNetConfig) -> Result<()> {
    let [_, c, h, w] = y.dims();
    if c != 1 {
        return Err(Error::shape("network input channels", 1usize, c));
    }
    let s = config.min_image_side();
    if h < s || w < s {
        return Err(Error::Value(format!(
            "input image {h}x{w} is too small for this topology: needs at least \
             {s}x{s} (2*(n_layers/2)+1 for the module encoder plus a 2-pixel \
             margin for the low-level stage; the recovery stage restores the size)"
        )));
    }
    for &v in y.data() {
        if !(v >= E::ZERO && v <= E::ONE) {
            return Err(Error::Value(format!(
                "input image values must be finite and lie in [0, 1], found {v}"
            )));
        }
    }
    Ok(())
}

fn run_network<E: Scalar>(
    y: &Grid4<E>,
    config: &CloneNetConfig,
    params: &ParameterSet<E>,
    want_trace: bool,
) -> Result<(Vec<Grid4<E>>, Option<ForwardTrace<E>>)> {
    params.validate_against(config)?;
    validate_input_image(y, config)?;

    let f0 = match config.transfer_mode {
        TransferMode::Feature => Some(extract_low_features(y, params)?),
        TransferMode::Image => None,
    };

    let mut outputs: Vec<Grid4<E>> = Vec::with_capacity(config.n_clones);
    let mut clones: Vec<CloneTrace<E>> = Vec::new();
    let mut prev_img: Grid4<E> = y.clone();
    let mut prev_feat: Option<Grid4<E>> = None;

    for _t in 0..config.n_clones {
        let (input_img, module_input) = match config.transfer_mode {
            TransferMode::Feature => {
                // Couple the input's low-level features with the transferred
                // features; the first clone, having no predecessor, couples
                // them with themselves.
                let f0r = f0.as_ref().expect("f0 exists in feature mode");
                let transferred = prev_feat.as_ref().unwrap_or(f0r);
                (None, concat_channels(f0r, transferred)?)
            }
            TransferMode::Image => {
                let img_in = match config.input_mode {
                    InputMode::PreviousOnly => prev_img.clone(),
                    InputMode::Coupled => concat_channels(y, &prev_img)?,
                };
                let feats = extract_low_features(&img_in, params)?;
                (Some(img_in), feats)
            }
        };

        let (enc, dec) = module_forward_parts(&module_input, params, &config.topology)?;
        let features = &dec[dec.len() - 1];
        let anchor = match config.residual_mode {
            ResidualMode::BruteForce => y,
            ResidualMode::Incremental => &prev_img,
        };
        let x = recover_image(anchor, features, params)?;

        if config.transfer_mode == TransferMode::Feature {
            prev_feat = Some(features.clone());
        }
        prev_img = x.clone();
        if want_trace {
            clones.push(CloneTrace {
                input_img,
                module_input,
                enc,
                dec,
                x: x.clone(),
            });
        }
        outputs.push(x);
    }

    let trace = want_trace.then(|| ForwardTrace {
        y: y.clone(),
        f0,
        clones,
    });
    Ok((outputs, trace))
}

/// Run all clones on `y` (a `(n, 1, h, w)` grid with values in `[0, 1]`),
/// returning every clone's output image plus the trace needed for
/// [`super::network_backward`]. Output `t` has `y`'s dimensions.
pub fn network_forward<E: Scalar>(
    y: &Grid4<E>,
    config: &CloneNetConfig,
    params: &ParameterSet<E>,
) -> Result<(Vec<Grid4<E>>, ForwardTrace<E>)> {
    let (outputs, trace) = run_network(y, config, params, true)?;
    Ok((outputs, trace.expect("trace requested")))
}

/// Trace-free evaluation returning only the last clone's output. Runs the
/// identical code path as [`network_forward`], so results are bit-equal.
pub fn denoise<E: Scalar>(
    y: &Grid4<E>,
    config: &CloneNetConfig,
    params: &ParameterSet<E>,
) -> Result<Grid4<E>> {
    let (mut outputs, _) = run_network(y, config, params, false)?;
    Ok(outputs.pop().expect("n_clones >= 1"))
}

/// Trace-free evaluation returning every clone's output image in order.
pub fn denoise_all_clones<E: Scalar>(
    y: &Grid4<E>,
    config: &CloneNetConfig,
    params: &ParameterSet<E>,
) -> Result<Vec<Grid4<E>>> {
    let (outputs, _) = run_network(y, config, params, false)?;
    Ok(outputs)
}
