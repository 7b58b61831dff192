//! Independent reference implementations ("oracles") and helpers used by the
//! test suites.
//!
//! Everything here recomputes results by a different route than the production
//! kernels: direct per-element summation instead of row-sliced accumulation,
//! central finite differences instead of analytic backprop, compensated
//! summation instead of plain accumulation. Production code must never call
//! into this module; it exists so the tests have something independent to
//! disagree with.

use crate::tensor::{ConvKernel, Grid4, Scalar};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ============================================================================
// Seeded random test data
// ============================================================================

/// Uniform random grid in `[lo, hi)`, reproducible from the seed.
pub fn seeded_grid<E: Scalar>(dims: [usize; 4], seed: u64, lo: f64, hi: f64) -> Grid4<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = dims.iter().product();
    let data = (0..len)
        .map(|_| E::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Grid4::from_vec(dims, data).expect("seeded_grid dims")
}

/// Random kernel with weights and bias in `[lo, hi)`. `conv` selects whether
/// the bias length follows the convolution orientation (first weight dim) or
/// the transposed orientation (second weight dim).
pub fn seeded_kernel<E: Scalar>(
    d0: usize,
    d1: usize,
    seed: u64,
    lo: f64,
    hi: f64,
    conv: bool,
) -> ConvKernel<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Grid4::from_vec(
        [d0, d1, 3, 3],
        (0..d0 * d1 * 9)
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect(),
    )
    .expect("seeded_kernel dims");
    let blen = if conv { d0 } else { d1 };
    let bias = (0..blen)
        .map(|_| E::from_f64(rng.gen_range(lo..hi)))
        .collect();
    ConvKernel { weights, bias }
}

// ============================================================================
// Direct (naive) convolution references
// ============================================================================

/// Valid cross-correlation computed element by element, innermost sums in the
/// order `c`, `di`, `dj` — a different reduction route than the production
/// kernel's row accumulation.
pub fn direct_conv2d<E: Scalar>(input: &Grid4<E>, kernel: &ConvKernel<E>) -> Grid4<E> {
    let [n, c, h, w] = input.dims();
    let k_out = kernel.weights.dims()[0];
    let (oh, ow) = (h - 2, w - 2);
    let mut out = Grid4::zeros([n, k_out, oh, ow]);
    for b in 0..n {
        for k in 0..k_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = kernel.bias[k];
                    for ch in 0..c {
                        for di in 0..3 {
                            for dj in 0..3 {
                                s += input.at(b, ch, i + di, j + dj) * kernel.weight(k, ch, di, dj);
                            }
                        }
                    }
                    out.set(b, k, i, j, s);
                }
            }
        }
    }
    out
}

/// Transposed convolution computed as a per-output gather over the taps that
/// can reach each position.
pub fn direct_deconv2d<E: Scalar>(input: &Grid4<E>, kernel: &ConvKernel<E>) -> Grid4<E> {
    let [n, a_in, h, w] = input.dims();
    let b_out = kernel.weights.dims()[1];
    let (oh, ow) = (h + 2, w + 2);
    let mut out = Grid4::zeros([n, b_out, oh, ow]);
    for bt in 0..n {
        for ob in 0..b_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = kernel.bias[ob];
                    for a in 0..a_in {
                        for di in 0..3 {
                            for dj in 0..3 {
                                if y >= di && y - di < h && x >= dj && x - dj < w {
                                    s += input.at(bt, a, y - di, x - dj)
                                        * kernel.weight(a, ob, di, dj);
                                }
                            }
                        }
                    }
                    out.set(bt, ob, y, x, s);
                }
            }
        }
    }
    out
}

/// Flat inner product of two same-shaped grids, accumulated in f64.
pub fn inner_product<E: Scalar>(a: &Grid4<E>, b: &Grid4<E>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum()
}

// ============================================================================
// Finite differences
// ============================================================================

/// Central-difference gradient of `f` with respect to every entry of `theta`:
/// `(f(theta + h e_i) - f(theta - h e_i)) / (2 h)`.
pub fn central_difference<F>(theta: &mut [f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let saved = theta[i];
        theta[i] = saved + h;
        let fp = f(theta);
        theta[i] = saved - h;
        let fm = f(theta);
        theta[i] = saved;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest floored relative error between an analytic gradient and a
/// finite-difference reference: `|a - r| / max(|a|, |r|, floor)` over all
/// entries. The floor keeps near-zero entries from inflating the ratio with
/// pure rounding noise.
pub fn max_rel_err(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / a.abs().max(r.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Error floor for [`max_rel_err`] scaled to the reference gradient itself: a
/// small fraction of its largest entry. Entries that are tiny through
/// cancellation are then judged against the gradient's overall scale rather
/// than against finite-difference rounding noise.
pub fn scaled_floor(reference: &[f64]) -> f64 {
    let peak = reference.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    (1e-3 * peak).max(1e-9)
}

/// Compensated (Kahan) sum — an independent accumulation route for checking
/// plainly-summed statistics.
pub fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

// ============================================================================
// Sequential clone chain, written out longhand
// ============================================================================

use crate::net::{ModuleTopology, ParameterSet};
use crate::tensor::ops::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, mse_loss,
    relu_backward, relu_forward,
};

/// Per-clone intermediates of the longhand sequential chain.
struct ChainStash<E> {
    prev_img: Grid4<E>,
    /// `acts[0]` is the module input (the low-level features of `prev_img`);
    /// `acts[i]` for `i >= 1` is encoder layer `i`'s post-activation.
    acts: Vec<Grid4<E>>,
    dec: Vec<Grid4<E>>,
    x: Grid4<E>,
}

fn scn_clone_forward<E: Scalar>(
    prev_img: &Grid4<E>,
    theta: &ParameterSet<E>,
    topology: &ModuleTopology,
) -> ChainStash<E> {
    let m = topology.half_layers();
    let mut acts =
        vec![relu_forward(&conv2d_forward(prev_img, &theta.low_level).expect("low level"))];
    for l in 0..m {
        let z = conv2d_forward(&acts[l], &theta.module_layers[l]).expect("encoder");
        acts.push(relu_forward(&z));
    }
    let mut dec: Vec<Grid4<E>> = Vec::with_capacity(m);
    for l in 1..=m {
        let input = if l == 1 { &acts[m] } else { &dec[l - 2] };
        let mut pre = deconv2d_forward(input, &theta.module_layers[m + l - 1]).expect("decoder");
        if let Some(&(e, _)) = topology.shortcut_pairs.iter().find(|&&(_, d)| d == l) {
            for (p, &s) in pre.data_mut().iter_mut().zip(acts[e].data()) {
                *p += s;
            }
        }
        dec.push(relu_forward(&pre));
    }
    let mut x = deconv2d_forward(&dec[m - 1], &theta.recovery).expect("recovery");
    for (v, &a) in x.data_mut().iter_mut().zip(prev_img.data()) {
        *v += a;
        if *v < E::ZERO {
            *v = E::ZERO;
        }
    }
    ChainStash {
        prev_img: prev_img.clone(),
        acts,
        dec,
        x,
    }
}

fn scn_chain_forward<E: Scalar>(
    y: &Grid4<E>,
    thetas: &[ParameterSet<E>],
    topology: &ModuleTopology,
) -> Vec<ChainStash<E>> {
    let mut stashes: Vec<ChainStash<E>> = Vec::with_capacity(thetas.len());
    let mut prev = y.clone();
    for theta in thetas {
        let stash = scn_clone_forward(&prev, theta, topology);
        prev = stash.x.clone();
        stashes.push(stash);
    }
    stashes
}

/// Sequential clone chain (image-level transfer of the previous output only,
/// incremental residual anchors) composed longhand from the tensor kernels,
/// with one parameter set per clone so weight sharing is the caller's choice.
/// Returns every clone's output image in order.
pub fn scn_compose_forward<E: Scalar>(
    y: &Grid4<E>,
    thetas: &[ParameterSet<E>],
    topology: &ModuleTopology,
) -> Vec<Grid4<E>> {
    scn_chain_forward(y, thetas, topology)
        .into_iter()
        .map(|s| s.x)
        .collect()
}

/// Backward pass of [`scn_compose_forward`] under a final-output MSE loss
/// against `target`, treating every clone's parameters as independent.
/// Returns the loss and one gradient container per clone; summing those
/// containers elementwise gives the weight-shared gradient.
pub fn scn_unshared_backward<E: Scalar>(
    y: &Grid4<E>,
    thetas: &[ParameterSet<E>],
    topology: &ModuleTopology,
    target: &Grid4<E>,
) -> (E, Vec<ParameterSet<E>>) {
    let m = topology.half_layers();
    let stashes = scn_chain_forward(y, thetas, topology);
    let last = &stashes.last().expect("at least one clone").x;
    let (loss, mut g_x) = mse_loss(last, target).expect("loss");

    let mut grads: Vec<ParameterSet<E>> = thetas.iter().map(ParameterSet::zeros_like).collect();
    for (t, stash) in stashes.iter().enumerate().rev() {
        let theta = &thetas[t];
        let grad = &mut grads[t];

        // Recovery: x = relu(prev + deconv(dec[m-1])).
        let g_pre = relu_backward(&g_x, &stash.x).expect("recovery relu");
        let rg = deconv2d_backward(&g_pre, &stash.dec[m - 1], &theta.recovery).expect("recovery");
        grad.recovery.weights = rg.weights;
        grad.recovery.bias = rg.bias;
        let g_anchor = g_pre;

        // Decoder, collecting shortcut gradients for the encoder walk.
        let mut g_enc_extra: Vec<Option<Grid4<E>>> = (0..=m).map(|_| None).collect();
        let mut g_cur = rg.input;
        for l in (1..=m).rev() {
            let g_dpre = relu_backward(&g_cur, &stash.dec[l - 1]).expect("decoder relu");
            if let Some(&(e, _)) = topology.shortcut_pairs.iter().find(|&&(_, d)| d == l) {
                g_enc_extra[e] = Some(g_dpre.clone());
            }
            let input = if l == 1 { &stash.acts[m] } else { &stash.dec[l - 2] };
            let dg = deconv2d_backward(&g_dpre, input, &theta.module_layers[m + l - 1])
                .expect("decoder");
            grad.module_layers[m + l - 1].weights = dg.weights;
            grad.module_layers[m + l - 1].bias = dg.bias;
            g_cur = dg.input;
        }

        // Encoder (acts[i] for i = m down to 1), then the low-level stage.
        for i in (1..=m).rev() {
            let mut total = g_cur;
            if let Some(extra) = g_enc_extra[i].take() {
                for (v, &e) in total.data_mut().iter_mut().zip(extra.data()) {
                    *v += e;
                }
            }
            let g_epre = relu_backward(&total, &stash.acts[i]).expect("encoder relu");
            let eg = conv2d_backward(&g_epre, &stash.acts[i - 1], &theta.module_layers[i - 1])
                .expect("encoder");
            grad.module_layers[i - 1].weights = eg.weights;
            grad.module_layers[i - 1].bias = eg.bias;
            g_cur = eg.input;
        }
        let g_fpre = relu_backward(&g_cur, &stash.acts[0]).expect("low level relu");
        let lg = conv2d_backward(&g_fpre, &stash.prev_img, &theta.low_level).expect("low level");
        grad.low_level.weights = lg.weights;
        grad.low_level.bias = lg.bias;

        // Both the anchor and the low-level stage consumed x_{t-1}.
        g_x = g_anchor;
        for (v, &s) in g_x.data_mut().iter_mut().zip(lg.input.data()) {
            *v += s;
        }
    }
    (loss, grads)
}

// ============================================================================
// Windowed structural-similarity oracle
// ============================================================================

/// Brute-force SSIM: loop every valid window position, sum the window pixel
/// by pixel, and evaluate the two-factor score directly. Quadratic and slow,
/// but free of integral-image bookkeeping, so it serves as the independent
/// reference for the production implementation.
pub fn brute_force_ssim<E: Scalar>(z: &Grid4<E>, x: &Grid4<E>, i_max: f64, window: usize) -> f64 {
    let [n, c, h, w] = z.dims();
    assert_eq!(z.dims(), x.dims());
    assert!(h >= window && w >= window);
    let c1 = (0.01 * i_max) * (0.01 * i_max);
    let c2 = (0.03 * i_max) * (0.03 * i_max);
    let area = (window * window) as f64;
    let mut scores = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            let zp = z.plane(ni, ci);
            let xp = x.plane(ni, ci);
            for top in 0..=(h - window) {
                for left in 0..=(w - window) {
                    let mut sz = 0.0;
                    let mut sx = 0.0;
                    for r in 0..window {
                        for q in 0..window {
                            let p = (top + r) * w + (left + q);
                            sz += zp[p].as_f64();
                            sx += xp[p].as_f64();
                        }
                    }
                    let mu_z = sz / area;
                    let mu_x = sx / area;
                    let mut vz = 0.0;
                    let mut vx = 0.0;
                    let mut cov = 0.0;
                    for r in 0..window {
                        for q in 0..window {
                            let p = (top + r) * w + (left + q);
                            let dz = zp[p].as_f64() - mu_z;
                            let dx = xp[p].as_f64() - mu_x;
                            vz += dz * dz;
                            vx += dx * dx;
                            cov += dz * dx;
                        }
                    }
                    let (vz, vx, cov) = (vz / area, vx / area, cov / area);
                    let l = (2.0 * mu_z * mu_x + c1) / (mu_z * mu_z + mu_x * mu_x + c1);
                    let s = (2.0 * cov + c2) / (vz + vx + c2);
                    scores.push(l * s);
                }
            }
        }
    }
    kahan_sum(scores.iter().copied()) / scores.len() as f64
}
