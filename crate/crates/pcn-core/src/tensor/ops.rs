//! Forward and backward kernels: valid 3x3 convolution, its exact adjoint
//! (transposed convolution), ReLU, channel concatenation, and mean-squared
//! error.
//!
//! Conventions, fixed once for the whole crate:
//!
//! - Convolution is cross-correlation (no kernel flip), stride 1, no padding:
//!   `(h, w)` shrinks to `(h-2, w-2)`.
//! - Transposed convolution is the linear adjoint of that map and grows
//!   `(h, w)` to `(h+2, w+2)`; for every weight tensor
//!   `<conv(x), u> == <x, deconv(u)>` holds up to rounding.
//! - ReLU's backward pass uses subgradient 0 at exactly 0.
//! - MSE is normalized by the total element count.
//!
//! Every reduction runs in a fixed loop order, so outputs are bit-identical
//! across runs for identical inputs; none of the kernels allocate scratch
//! buffers whose contents could leak into results.

use super::{ConvKernel, Grid4, Scalar};
use crate::{Error, Result};

/// Gradients produced by the backward convolution kernels: with respect to the
/// operation's input, its weights, and its bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<E> {
    pub input: Grid4<E>,
    pub weights: Grid4<E>,
    pub bias: Vec<E>,
}

// ============================================================================
// Convolution
// ============================================================================

fn check_conv_shapes<E: Scalar>(input: &Grid4<E>, kernel: &ConvKernel<E>) -> Result<()> {
    let [_, c, h, w] = input.dims();
    let kd = kernel.weights.dims();
    if h < 3 || w < 3 {
        return Err(Error::shape(
            "conv2d input spatial size (needs at least 3x3)",
            "(>=3, >=3)",
            (h, w),
        ));
    }
    if kd[1] != c {
        return Err(Error::shape("conv2d input channels vs kernel", kd[1], c));
    }
    if kernel.bias.len() != kd[0] {
        return Err(Error::shape(
            "conv2d bias length vs output channels",
            kd[0],
            kernel.bias.len(),
        ));
    }
    Ok(())
}

/// Valid cross-correlation: input `(n, c, h, w)` with kernel `(k, c, 3, 3)`
/// gives `(n, k, h-2, w-2)`, plus a per-output-channel bias.
pub fn conv2d_forward<E: Scalar>(input: &Grid4<E>, kernel: &ConvKernel<E>) -> Result<Grid4<E>> {
    check_conv_shapes(input, kernel)?;
    let [n, c, h, w] = input.dims();
    let k_out = kernel.weights.dims()[0];
    let (oh, ow) = (h - 2, w - 2);
    let mut out = Grid4::zeros([n, k_out, oh, ow]);

    for b in 0..n {
        for k in 0..k_out {
            out.plane_mut(b, k).fill(kernel.bias[k]);
        }
        for k in 0..k_out {
            for ch in 0..c {
                let ip = input.plane(b, ch);
                let op = out.plane_mut(b, k);
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = kernel.weight(k, ch, di, dj);
                        for i in 0..oh {
                            let irow = &ip[(i + di) * w + dj..(i + di) * w + dj + ow];
                            let orow = &mut op[i * ow..i * ow + ow];
                            for (o, &x) in orow.iter_mut().zip(irow) {
                                *o += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d_forward`]: given `d(loss)/d(output)`, the saved
/// input, and the kernel, produce gradients for input, weights, and bias.
pub fn conv2d_backward<E: Scalar>(
    grad_out: &Grid4<E>,
    input: &Grid4<E>,
    kernel: &ConvKernel<E>,
) -> Result<ConvGrads<E>> {
    check_conv_shapes(input, kernel)?;
    let [n, c, h, w] = input.dims();
    let k_out = kernel.weights.dims()[0];
    let (oh, ow) = (h - 2, w - 2);
    if grad_out.dims() != [n, k_out, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward grad_out",
            [n, k_out, oh, ow],
            grad_out.dims(),
        ));
    }

    let mut g_in = Grid4::zeros([n, c, h, w]);
    let mut g_w = Grid4::zeros(kernel.weights.dims());
    let mut g_b = vec![E::ZERO; k_out];

    for b in 0..n {
        // Bias: plain sum of grad_out over each output channel.
        for k in 0..k_out {
            let gop = grad_out.plane(b, k);
            let mut s = E::ZERO;
            for &v in gop {
                s += v;
            }
            g_b[k] += s;
        }
        // Weights: correlation of input with grad_out.
        for k in 0..k_out {
            let gop = grad_out.plane(b, k);
            for ch in 0..c {
                let ip = input.plane(b, ch);
                for di in 0..3 {
                    for dj in 0..3 {
                        let mut s = E::ZERO;
                        for i in 0..oh {
                            let irow = &ip[(i + di) * w + dj..(i + di) * w + dj + ow];
                            let grow = &gop[i * ow..i * ow + ow];
                            for (&x, &g) in irow.iter().zip(grow) {
                                s += x * g;
                            }
                        }
                        let cur = g_w.at(k, ch, di, dj);
                        g_w.set(k, ch, di, dj, cur + s);
                    }
                }
            }
        }
        // Input: scatter grad_out back through the kernel taps.
        for ch in 0..c {
            let gip = g_in.plane_mut(b, ch);
            for k in 0..k_out {
                let gop = grad_out.plane(b, k);
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = kernel.weight(k, ch, di, dj);
                        for i in 0..oh {
                            let grow = &gop[i * ow..i * ow + ow];
                            let irow = &mut gip[(i + di) * w + dj..(i + di) * w + dj + ow];
                            for (o, &g) in irow.iter_mut().zip(grow) {
                                *o += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

// ============================================================================
// Transposed convolution
// ============================================================================

fn check_deconv_shapes<E: Scalar>(input: &Grid4<E>, kernel: &ConvKernel<E>) -> Result<()> {
    let [_, c, _, _] = input.dims();
    let kd = kernel.weights.dims();
    if kd[0] != c {
        return Err(Error::shape("deconv2d input channels vs kernel", kd[0], c));
    }
    if kernel.bias.len() != kd[1] {
        return Err(Error::shape(
            "deconv2d bias length vs output channels",
            kd[1],
            kernel.bias.len(),
        ));
    }
    Ok(())
}

/// Transposed convolution, stride 1, no padding: input `(n, a, h, w)` with
/// kernel `(a, b, 3, 3)` gives `(n, b, h+2, w+2)`. This is exactly the adjoint
/// of [`conv2d_forward`] with the same weights; the bias (length `b`) is added
/// after the scatter.
pub fn deconv2d_forward<E: Scalar>(input: &Grid4<E>, kernel: &ConvKernel<E>) -> Result<Grid4<E>> {
    check_deconv_shapes(input, kernel)?;
    let [n, a_in, h, w] = input.dims();
    let b_out = kernel.weights.dims()[1];
    let (oh, ow) = (h + 2, w + 2);
    let mut out = Grid4::zeros([n, b_out, oh, ow]);

    for bt in 0..n {
        for ob in 0..b_out {
            out.plane_mut(bt, ob).fill(kernel.bias[ob]);
        }
        for ob in 0..b_out {
            let op = out.plane_mut(bt, ob);
            for a in 0..a_in {
                let ip = input.plane(bt, a);
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = kernel.weight(a, ob, di, dj);
                        for i in 0..h {
                            let irow = &ip[i * w..i * w + w];
                            let orow = &mut op[(i + di) * ow + dj..(i + di) * ow + dj + w];
                            for (o, &x) in orow.iter_mut().zip(irow) {
                                *o += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`deconv2d_forward`].
///
/// The input gradient is itself a valid correlation of `grad_out` with the
/// weights (the adjoint of the adjoint), so it shrinks back to the input size.
pub fn deconv2d_backward<E: Scalar>(
    grad_out: &Grid4<E>,
    input: &Grid4<E>,
    kernel: &ConvKernel<E>,
) -> Result<ConvGrads<E>> {
    check_deconv_shapes(input, kernel)?;
    let [n, a_in, h, w] = input.dims();
    let b_out = kernel.weights.dims()[1];
    let (oh, ow) = (h + 2, w + 2);
    if grad_out.dims() != [n, b_out, oh, ow] {
        return Err(Error::shape(
            "deconv2d_backward grad_out",
            [n, b_out, oh, ow],
            grad_out.dims(),
        ));
    }

    let mut g_in = Grid4::zeros([n, a_in, h, w]);
    let mut g_w = Grid4::zeros(kernel.weights.dims());
    let mut g_b = vec![E::ZERO; b_out];

    for bt in 0..n {
        for ob in 0..b_out {
            let gop = grad_out.plane(bt, ob);
            let mut s = E::ZERO;
            for &v in gop {
                s += v;
            }
            g_b[ob] += s;
        }
        // Weights: correlate the saved input with grad_out.
        for a in 0..a_in {
            let ip = input.plane(bt, a);
            for ob in 0..b_out {
                let gop = grad_out.plane(bt, ob);
                for di in 0..3 {
                    for dj in 0..3 {
                        let mut s = E::ZERO;
                        for i in 0..h {
                            let irow = &ip[i * w..i * w + w];
                            let grow = &gop[(i + di) * ow + dj..(i + di) * ow + dj + w];
                            for (&x, &g) in irow.iter().zip(grow) {
                                s += x * g;
                            }
                        }
                        let cur = g_w.at(a, ob, di, dj);
                        g_w.set(a, ob, di, dj, cur + s);
                    }
                }
            }
        }
        // Input: gather, i.e. a valid correlation of grad_out by the weights.
        for a in 0..a_in {
            let gip = g_in.plane_mut(bt, a);
            for ob in 0..b_out {
                let gop = grad_out.plane(bt, ob);
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = kernel.weight(a, ob, di, dj);
                        for i in 0..h {
                            let grow = &gop[(i + di) * ow + dj..(i + di) * ow + dj + w];
                            let irow = &mut gip[i * w..i * w + w];
                            for (o, &g) in irow.iter_mut().zip(grow) {
                                *o += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

// ============================================================================
// ReLU
// ============================================================================

/// Elementwise `max(0, x)`.
pub fn relu_forward<E: Scalar>(input: &Grid4<E>) -> Grid4<E> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < E::ZERO {
            *v = E::ZERO;
        }
    }
    out
}

/// Backward ReLU: passes the gradient where `input > 0`, zero elsewhere
/// (subgradient 0 at exactly 0). Note `input > 0` and `relu(input) > 0` select
/// the same elements, so the saved activation works as the mask too.
pub fn relu_backward<E: Scalar>(grad_out: &Grid4<E>, input: &Grid4<E>) -> Result<Grid4<E>> {
    if grad_out.dims() != input.dims() {
        return Err(Error::shape(
            "relu_backward dims",
            input.dims(),
            grad_out.dims(),
        ));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= E::ZERO {
            *g = E::ZERO;
        }
    }
    Ok(out)
}

// ============================================================================
// Channel concatenation
// ============================================================================

/// Stack `a` and `b` along the channel axis: `(n, c1, h, w)` and
/// `(n, c2, h, w)` become `(n, c1+c2, h, w)` with `a`'s channels first.
pub fn concat_channels<E: Scalar>(a: &Grid4<E>, b: &Grid4<E>) -> Result<Grid4<E>> {
    let [na, ca, ha, wa] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels batch/spatial dims",
            [na, ha, wa],
            [nb, hb, wb],
        ));
    }
    let mut out = Grid4::zeros([na, ca + cb, ha, wa]);
    for n in 0..na {
        for c in 0..ca {
            out.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..cb {
            out.plane_mut(n, ca + c).copy_from_slice(b.plane(n, c));
        }
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: split off the first `c_first` channels.
/// Applying this to an upstream gradient is the backward pass of concatenation.
pub fn split_channels<E: Scalar>(g: &Grid4<E>, c_first: usize) -> Result<(Grid4<E>, Grid4<E>)> {
    let [n, c, h, w] = g.dims();
    if c_first == 0 || c_first >= c {
        return Err(Error::Value(format!(
            "split_channels: cannot split {c} channels at {c_first}"
        )));
    }
    let mut a = Grid4::zeros([n, c_first, h, w]);
    let mut b = Grid4::zeros([n, c - c_first, h, w]);
    for bn in 0..n {
        for ch in 0..c_first {
            a.plane_mut(bn, ch).copy_from_slice(g.plane(bn, ch));
        }
        for ch in c_first..c {
            b.plane_mut(bn, ch - c_first)
                .copy_from_slice(g.plane(bn, ch));
        }
    }
    Ok((a, b))
}

// ============================================================================
// Mean squared error
// ============================================================================

/// MSE over all elements plus its gradient with respect to `pred`:
/// `loss = (1/N) * sum((pred - target)^2)`, `grad = 2 * (pred - target) / N`.
pub fn mse_loss<E: Scalar>(pred: &Grid4<E>, target: &Grid4<E>) -> Result<(E, Grid4<E>)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("mse_loss dims", target.dims(), pred.dims()));
    }
    let n = E::from_f64(pred.len() as f64);
    let two_over_n = E::from_f64(2.0) / n;
    let mut grad = Grid4::zeros(pred.dims());
    let mut acc = E::ZERO;
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = p - t;
        acc += d * d;
        *g = two_over_n * d;
    }
    Ok((acc / n, grad))
}
