//! Loss evaluation and backpropagation through the full clone chain.
//!
//! All clones share one [`ParameterSet`], so the backward pass accumulates
//! every clone's contribution into a single gradient container, including the
//! multiple uses of the shared low-level features in feature-transfer mode.

use super::{CloneNetConfig, ForwardTrace, InputMode, LossMode, ParameterSet, ResidualMode, TransferMode};
use crate::tensor::ops::{
    conv2d_backward, deconv2d_backward, mse_loss, relu_backward, split_channels, ConvGrads,
};
use crate::tensor::{ConvKernel, Grid4, Scalar};
use crate::{Error, Result};

/// Compute the training loss and its gradient with respect to every clone
/// output. `last_only` scores just the final clone; `parallel` averages the
/// per-clone mean-squared errors (sum of the `T` losses divided by `T`).
/// Returns the loss and one gradient grid per clone, in clone order.
pub fn network_loss<E: Scalar>(
    outputs: &[Grid4<E>],
    target: &Grid4<E>,
    mode: LossMode,
) -> Result<(E, Vec<Grid4<E>>)> {
    if outputs.is_empty() {
        return Err(Error::Value("loss needs at least one clone output".into()));
    }
    for x in outputs {
        if x.dims() != target.dims() {
            return Err(Error::shape("loss: output vs target", target.dims(), x.dims()));
        }
    }
    match mode {
        LossMode::LastOnly => {
            let (loss, g) = mse_loss(outputs.last().expect("nonempty"), target)?;
            let mut grads: Vec<Grid4<E>> = outputs[..outputs.len() - 1]
                .iter()
                .map(|x| Grid4::zeros(x.dims()))
                .collect();
            grads.push(g);
            Ok((loss, grads))
        }
        LossMode::Parallel => {
            let t_count = E::from_f64(outputs.len() as f64);
            let mut sum = E::ZERO;
            let mut grads = Vec::with_capacity(outputs.len());
            for x in outputs {
                let (loss, mut g) = mse_loss(x, target)?;
                sum += loss;
                for v in g.data_mut() {
                    *v = *v / t_count;
                }
                grads.push(g);
            }
            Ok((sum / t_count, grads))
        }
    }
}

fn add_into<E: Scalar>(dst: &mut Grid4<E>, src: &Grid4<E>) -> Result<()> {
    if dst.dims() != src.dims() {
        return Err(Error::shape("gradient accumulation", dst.dims(), src.dims()));
    }
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
    Ok(())
}

fn add_opt<E: Scalar>(slot: &mut Option<Grid4<E>>, src: Grid4<E>) -> Result<()> {
    match slot {
        Some(acc) => add_into(acc, &src),
        None => {
            *slot = Some(src);
            Ok(())
        }
    }
}

fn accumulate_kernel<E: Scalar>(dst: &mut ConvKernel<E>, grads: &ConvGrads<E>) -> Result<()> {
    add_into(&mut dst.weights, &grads.weights)?;
    if dst.bias.len() != grads.bias.len() {
        return Err(Error::shape("bias gradient accumulation", dst.bias.len(), grads.bias.len()));
    }
    for (d, &s) in dst.bias.iter_mut().zip(&grads.bias) {
        *d += s;
    }
    Ok(())
}

fn check_trace<E: Scalar>(
    trace: &ForwardTrace<E>,
    output_grads: &[Grid4<E>],
    config: &CloneNetConfig,
) -> Result<()> {
    if trace.clones.len() != config.n_clones {
        return Err(Error::shape("trace clone count", config.n_clones, trace.clones.len()));
    }
    if output_grads.len() != config.n_clones {
        return Err(Error::shape("output gradient count", config.n_clones, output_grads.len()));
    }
    let feature = config.transfer_mode == TransferMode::Feature;
    if trace.f0.is_some() != feature {
        return Err(Error::Value(
            "trace does not match the config's transfer mode".into(),
        ));
    }
    let m = config.topology.half_layers();
    for (ct, g) in trace.clones.iter().zip(output_grads) {
        if ct.input_img.is_some() == feature {
            return Err(Error::Value(
                "trace does not match the config's transfer mode".into(),
            ));
        }
        if ct.enc.len() != m || ct.dec.len() != m {
            return Err(Error::shape("trace module depth", (m, m), (ct.enc.len(), ct.dec.len())));
        }
        if g.dims() != ct.x.dims() {
            return Err(Error::shape("output gradient vs traced output", ct.x.dims(), g.dims()));
        }
    }
    Ok(())
}

/// Backpropagate through every clone, given the forward trace and the loss
/// gradient with respect to each clone's output (zeros for clones the loss
/// ignores). Returns the gradient as a [`ParameterSet`]-shaped container with
/// all clones' contributions summed into the shared parameters.
pub fn network_backward<E: Scalar>(
    trace: &ForwardTrace<E>,
    output_grads: &[Grid4<E>],
    config: &CloneNetConfig,
    params: &ParameterSet<E>,
) -> Result<ParameterSet<E>> {
    config.validate()?;
    params.validate_against(config)?;
    check_trace(trace, output_grads, config)?;

    let m = config.topology.half_layers();
    let k = config.topology.n_kernels;
    let mut grad = ParameterSet::zeros_like(params);
    // Gradient flowing into x_{t-1} from the clones above (anchor chain and
    // image-level transfer), into F_{t-1} (feature-level transfer), and the
    // running sum over every use of the shared low-level features F_0.
    let mut carry_img: Option<Grid4<E>> = None;
    let mut carry_feat: Option<Grid4<E>> = None;
    let mut f0_acc: Option<Grid4<E>> = None;

    for ti in (0..config.n_clones).rev() {
        let ct = &trace.clones[ti];

        // Output stage: x = ReLU(anchor + deconv(F_t, recovery)).
        let mut g_x = output_grads[ti].clone();
        if let Some(c) = carry_img.take() {
            add_into(&mut g_x, &c)?;
        }
        let g_pre_out = relu_backward(&g_x, &ct.x)?;
        let rec_grads = deconv2d_backward(
            &g_pre_out,
            ct.dec.last().expect("decoder depth >= 1"),
            &params.recovery,
        )?;
        accumulate_kernel(&mut grad.recovery, &rec_grads)?;
        // The anchor enters the sum unchanged, so it receives g_pre_out as is.
        match config.residual_mode {
            ResidualMode::BruteForce => {} // anchor is y: no parameters upstream
            ResidualMode::Incremental => {
                if ti > 0 {
                    add_opt(&mut carry_img, g_pre_out.clone())?;
                } // at the first clone the anchor is y again
            }
        }

        // Module decoder, deepest layer last in `module_layers`.
        let mut g_feat = rec_grads.input;
        if let Some(c) = carry_feat.take() {
            add_into(&mut g_feat, &c)?;
        }
        let mut g_enc: Vec<Option<Grid4<E>>> = (0..m).map(|_| None).collect();
        let mut g_dec_out = g_feat;
        for l in (1..=m).rev() {
            let g_pre = relu_backward(&g_dec_out, &ct.dec[l - 1])?;
            if let Some(&(e, _)) = config.topology.shortcut_pairs.iter().find(|&&(_, d)| d == l) {
                add_opt(&mut g_enc[e - 1], g_pre.clone())?;
            }
            let input = if l == 1 { &ct.enc[m - 1] } else { &ct.dec[l - 2] };
            let grads = deconv2d_backward(&g_pre, input, &params.module_layers[m + l - 1])?;
            accumulate_kernel(&mut grad.module_layers[m + l - 1], &grads)?;
            if l == 1 {
                add_opt(&mut g_enc[m - 1], grads.input)?;
            } else {
                g_dec_out = grads.input;
            }
        }

        // Module encoder.
        let mut carry: Option<Grid4<E>> = None;
        for le in (0..m).rev() {
            let mut total = match (carry.take(), g_enc[le].take()) {
                (Some(mut c), Some(e)) => {
                    add_into(&mut c, &e)?;
                    c
                }
                (Some(c), None) => c,
                (None, Some(e)) => e,
                (None, None) => unreachable!("every encoder layer receives gradient"),
            };
            total = relu_backward(&total, &ct.enc[le])?;
            let input = if le == 0 { &ct.module_input } else { &ct.enc[le - 1] };
            let grads = conv2d_backward(&total, input, &params.module_layers[le])?;
            accumulate_kernel(&mut grad.module_layers[le], &grads)?;
            carry = Some(grads.input);
        }
        let g_module_input = carry.expect("encoder depth >= 1");

        // Route the module-input gradient back through the transfer path.
        match config.transfer_mode {
            TransferMode::Feature => {
                // Input was Cat(F_0, F_{t-1}) (or Cat(F_0, F_0) for clone 1).
                let (g_f0_half, g_transfer) = split_channels(&g_module_input, k)?;
                add_opt(&mut f0_acc, g_f0_half)?;
                if ti == 0 {
                    add_opt(&mut f0_acc, g_transfer)?;
                } else {
                    add_opt(&mut carry_feat, g_transfer)?;
                }
            }
            TransferMode::Image => {
                // Input was ReLU(conv(img_in, low_level)).
                let img_in = ct.input_img.as_ref().expect("image-mode trace");
                let g_pre = relu_backward(&g_module_input, &ct.module_input)?;
                let grads = conv2d_backward(&g_pre, img_in, &params.low_level)?;
                accumulate_kernel(&mut grad.low_level, &grads)?;
                let g_prev = match config.input_mode {
                    InputMode::PreviousOnly => grads.input,
                    InputMode::Coupled => {
                        // Channels were (y, x_{t-1}); y carries no parameters.
                        let (_g_y, g_prev) = split_channels(&grads.input, 1)?;
                        g_prev
                    }
                };
                if ti > 0 {
                    add_opt(&mut carry_img, g_prev)?;
                } // at the first clone the previous image is y
            }
        }
    }

    // Feature mode: F_0 = ReLU(conv(y, low_level)) ran once; its gradient is
    // the sum over every clone's uses, applied to the low-level kernel here.
    if let Some(f0) = &trace.f0 {
        let acc = f0_acc.expect("feature mode accumulates f0 gradient");
        let g_pre = relu_backward(&acc, f0)?;
        let grads = conv2d_backward(&g_pre, &trace.y, &params.low_level)?;
        accumulate_kernel(&mut grad.low_level, &grads)?;
    }

    Ok(grad)
}
