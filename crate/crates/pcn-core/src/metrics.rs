//! Image-quality metrics (RMSE, PSNR, SSIM) and the classical
//! gradient-descent least-squares denoiser used as a baseline.
//!
//! All metrics accumulate in `f64` regardless of the tensor element type, are
//! pure, and touch nothing but their arguments.

use crate::tensor::{Grid4, Scalar};
use crate::{Error, Result};

/// Window side used for SSIM unless a caller asks otherwise.
pub const DEFAULT_SSIM_WINDOW: usize = 11;

fn check_same_dims<E: Scalar>(z: &Grid4<E>, x: &Grid4<E>, context: &str) -> Result<()> {
    if z.dims() != x.dims() {
        return Err(Error::shape(context, x.dims(), z.dims()));
    }
    Ok(())
}

/// Root-mean-square error `sqrt(mean((z - x)^2))` over every element.
pub fn rmse<E: Scalar>(z: &Grid4<E>, x: &Grid4<E>) -> Result<f64> {
    check_same_dims(z, x, "rmse inputs")?;
    let mut sse = 0.0f64;
    for (&a, &b) in z.data().iter().zip(x.data()) {
        let d = a.as_f64() - b.as_f64();
        sse += d * d;
    }
    Ok((sse / z.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB from an already-computed RMSE:
/// `20*log10(i_max / rmse)`, with an exact zero RMSE reported as positive
/// infinity.
pub fn psnr_from_rmse(rmse: f64, i_max: f64) -> Result<f64> {
    if !(i_max > 0.0) {
        return Err(Error::Value(format!(
            "i_max must be positive, got {i_max}"
        )));
    }
    if !(rmse >= 0.0) {
        return Err(Error::Value(format!(
            "rmse must be nonnegative, got {rmse}"
        )));
    }
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (i_max / rmse).log10())
}

/// Peak signal-to-noise ratio of `z` against reference `x`.
pub fn psnr<E: Scalar>(z: &Grid4<E>, x: &Grid4<E>, i_max: f64) -> Result<f64> {
    psnr_from_rmse(rmse(z, x)?, i_max)
}

/// Summed-area table with a zero top row and left column, so any rectangle
/// sum is one four-corner expression.
struct Integral {
    data: Vec<f64>,
    w1: usize,
}

impl Integral {
    fn build(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Integral {
        let w1 = w + 1;
        let mut data = vec![0.0f64; (h + 1) * w1];
        for i in 0..h {
            let mut row = 0.0f64;
            for j in 0..w {
                row += f(i * w + j);
                data[(i + 1) * w1 + (j + 1)] = data[i * w1 + (j + 1)] + row;
            }
        }
        Integral { data, w1 }
    }

    /// Sum over rows `[top, top+win)` x cols `[left, left+win)`.
    #[inline]
    fn window(&self, top: usize, left: usize, win: usize) -> f64 {
        let (b, r) = (top + win, left + win);
        self.data[b * self.w1 + r] - self.data[top * self.w1 + r] - self.data[b * self.w1 + left]
            + self.data[top * self.w1 + left]
    }
}

/// Structural similarity with a uniform `window x window` box at every valid
/// (stride 1) position, averaged over positions. Window statistics are
/// means, population variances, and covariance; the stabilisers are
/// `c1 = (0.01*i_max)^2` and `c2 = (0.03*i_max)^2`.
///
/// Identical inputs score exactly 1: both factors reduce to a ratio of
/// bit-identical numerator and denominator.
pub fn ssim<E: Scalar>(z: &Grid4<E>, x: &Grid4<E>, i_max: f64, window: usize) -> Result<f64> {
    check_same_dims(z, x, "ssim inputs")?;
    if !(i_max > 0.0) {
        return Err(Error::Value(format!(
            "i_max must be positive, got {i_max}"
        )));
    }
    if window == 0 {
        return Err(Error::Value("ssim window must be at least 1".into()));
    }
    let [n, c, h, w] = z.dims();
    if h < window || w < window {
        return Err(Error::Value(format!(
            "image {h}x{w} is smaller than the {window}x{window} ssim window"
        )));
    }
    let c1 = (0.01 * i_max) * (0.01 * i_max);
    let c2 = (0.03 * i_max) * (0.03 * i_max);
    let area = (window * window) as f64;

    let mut total = 0.0f64;
    let mut windows = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let zp: Vec<f64> = z.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
            let xp: Vec<f64> = x.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
            let sz = Integral::build(h, w, |i| zp[i]);
            let sx = Integral::build(h, w, |i| xp[i]);
            let szz = Integral::build(h, w, |i| zp[i] * zp[i]);
            let sxx = Integral::build(h, w, |i| xp[i] * xp[i]);
            let szx = Integral::build(h, w, |i| zp[i] * xp[i]);
            for top in 0..=(h - window) {
                for left in 0..=(w - window) {
                    let mu_z = sz.window(top, left, window) / area;
                    let mu_x = sx.window(top, left, window) / area;
                    let var_z = szz.window(top, left, window) / area - mu_z * mu_z;
                    let var_x = sxx.window(top, left, window) / area - mu_x * mu_x;
                    let cov = szx.window(top, left, window) / area - mu_z * mu_x;
                    let l = (2.0 * mu_z * mu_x + c1) / (mu_z * mu_z + mu_x * mu_x + c1);
                    let s = (2.0 * cov + c2) / (var_z + var_x + c2);
                    total += l * s;
                    windows += 1;
                }
            }
        }
    }
    Ok(total / windows as f64)
}

/// Per-image metric row of a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Score one prediction against its reference with all three metrics.
pub fn score_image<E: Scalar>(
    id: impl Into<String>,
    pred: &Grid4<E>,
    reference: &Grid4<E>,
    i_max: f64,
) -> Result<ImageScore> {
    let r = rmse(pred, reference)?;
    Ok(ImageScore {
        id: id.into(),
        rmse: r,
        psnr_db: psnr_from_rmse(r, i_max)?,
        ssim: ssim(pred, reference, i_max, DEFAULT_SSIM_WINDOW)?,
    })
}

/// Mean and population standard deviation of a value set.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image quality table plus set-level mean and standard deviation.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub rows: Vec<ImageScore>,
}

impl MetricsReport {
    /// CSV rendering: a header, one row per image, then `mean` and `sd` rows
    /// (population standard deviation) recomputable from the per-image rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rmse,psnr_db,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.id, r.rmse, r.psnr_db, r.ssim));
        }
        let col = |f: fn(&ImageScore) -> f64| -> Vec<f64> { self.rows.iter().map(f).collect() };
        let (rm, rs) = mean_sd(&col(|r| r.rmse));
        let (pm, ps) = mean_sd(&col(|r| r.psnr_db));
        let (sm, ss) = mean_sd(&col(|r| r.ssim));
        out.push_str(&format!("mean,{rm},{pm},{sm}\n"));
        out.push_str(&format!("sd,{rs},{ps},{ss}\n"));
        out
    }
}

// ============================================================================
// Gradient-descent baseline
// ============================================================================

/// 4-neighbour graph Laplacian of one plane: `(L x)_p = deg(p)*x_p - sum of
/// neighbours`, with boundary pixels having fewer neighbours.
fn laplacian(plane: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let mut acc = 0.0;
            let mut deg = 0.0;
            if i > 0 {
                acc += plane[p - w];
                deg += 1.0;
            }
            if i + 1 < h {
                acc += plane[p + w];
                deg += 1.0;
            }
            if j > 0 {
                acc += plane[p - 1];
                deg += 1.0;
            }
            if j + 1 < w {
                acc += plane[p + 1];
                deg += 1.0;
            }
            out[p] = deg * plane[p] - acc;
        }
    }
}

/// Least-squares objective `0.5*||x - y||^2 + lambda * sum over grid edges of
/// (x_p - x_q)^2`, the quantity the descent iteration minimises.
fn gd_objective(x: &[f64], y: &[f64], h: usize, w: usize, lambda: f64) -> f64 {
    let mut fit = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        fit += d * d;
    }
    let mut reg = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if j + 1 < w {
                let d = x[p] - x[p + 1];
                reg += d * d;
            }
            if i + 1 < h {
                let d = x[p] - x[p + w];
                reg += d * d;
            }
        }
    }
    0.5 * fit + lambda * reg
}

/// One descent step `x - gamma*[(x - y) + lambda * 2 L x]` on every plane.
/// Exposed separately so the update rule itself is testable from arbitrary
/// starting points; [`gradient_descent_denoise`] always starts from `y`.
pub fn gd_step<E: Scalar>(x: &Grid4<E>, y: &Grid4<E>, lambda: f64, gamma: f64) -> Result<Grid4<E>> {
    check_same_dims(x, y, "gradient descent step")?;
    let [n, c, h, w] = x.dims();
    let mut out = x.clone();
    let mut lap = vec![0.0f64; h * w];
    for ni in 0..n {
        for ci in 0..c {
            let xp: Vec<f64> = x.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
            let yp: Vec<f64> = y.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
            laplacian(&xp, h, w, &mut lap);
            let dst = out.plane_mut(ni, ci);
            for p in 0..h * w {
                let grad = (xp[p] - yp[p]) + lambda * 2.0 * lap[p];
                dst[p] = E::from_f64(xp[p] - gamma * grad);
            }
        }
    }
    Ok(out)
}

/// Classical iterative least-squares denoiser: starting from `x = y`, run
/// `n_iter` steps of [`gd_step`] with a quadratic smoothness penalty. The
/// objective is tracked every step; ten consecutive increases abort with
/// [`Error::Diverged`] (the step size is too large).
pub fn gradient_descent_denoise<E: Scalar>(
    y: &Grid4<E>,
    lambda: f64,
    gamma: f64,
    n_iter: usize,
) -> Result<Grid4<E>> {
    if !(gamma > 0.0) {
        return Err(Error::Value(format!("gamma must be positive, got {gamma}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Value(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    for &v in y.data() {
        if !(v >= E::ZERO && v <= E::ONE) {
            return Err(Error::Value(format!(
                "input values must lie in [0, 1], found {v}"
            )));
        }
    }
    let [n, c, h, w] = y.dims();
    let mut x = y.clone();
    let mut prev_obj = {
        // Objective of the start point, summed over planes.
        let mut total = 0.0;
        for ni in 0..n {
            for ci in 0..c {
                let xp: Vec<f64> = x.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
                let yp: Vec<f64> = y.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
                total += gd_objective(&xp, &yp, h, w, lambda);
            }
        }
        total
    };
    let mut streak = 0usize;
    for _ in 0..n_iter {
        x = gd_step(&x, y, lambda, gamma)?;
        let mut obj = 0.0;
        for ni in 0..n {
            for ci in 0..c {
                let xp: Vec<f64> = x.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
                let yp: Vec<f64> = y.plane(ni, ci).iter().map(|v| v.as_f64()).collect();
                obj += gd_objective(&xp, &yp, h, w, lambda);
            }
        }
        if !obj.is_finite() || obj > prev_obj {
            streak += 1;
            if streak >= 10 {
                return Err(Error::Diverged { streak });
            }
        } else {
            streak = 0;
        }
        prev_obj = obj;
    }
    Ok(x)
}
