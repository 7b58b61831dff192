//! Synthetic paired clean/low-dose data: seeded piecewise-smooth phantoms,
//! additive-Gaussian dose simulation, patch extraction on a fixed stride
//! grid, and the seeded shuffled batch stream used by training.

use crate::tensor::{Grid4, Scalar};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A clean image and its simulated low-dose counterpart, both `(1, 1, h, w)`
/// with intensities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImagePair<E> {
    pub id: String,
    pub low: Grid4<E>,
    pub normal: Grid4<E>,
}

impl<E: Scalar> ImagePair<E> {
    pub fn validate(&self) -> Result<()> {
        if self.low.dims() != self.normal.dims() {
            return Err(Error::shape(
                "image pair dims",
                self.normal.dims(),
                self.low.dims(),
            ));
        }
        let [n, c, _, _] = self.low.dims();
        if n != 1 || c != 1 {
            return Err(Error::shape("image pair layout", [1usize, 1usize], [n, c]));
        }
        for g in [&self.low, &self.normal] {
            for &v in g.data() {
                if !(v >= E::ZERO && v <= E::ONE) {
                    return Err(Error::Value(format!(
                        "image '{}' has a value outside [0, 1]: {v}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Recipe for one synthetic phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: (usize, usize),
    pub n_ellipses: usize,
    /// Intensity range the ellipses draw from.
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    pub background: f64,
    /// Standard deviation, in pixels, of the smoothing blur; 0 disables it.
    pub blur_width: f64,
    /// Noise level for the paired low-dose simulation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: (64, 64),
            n_ellipses: 6,
            intensity_lo: 0.2,
            intensity_hi: 0.8,
            background: 0.1,
            blur_width: 1.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 64 || w < 64 {
            return Err(Error::Config(format!(
                "phantom size must be at least 64x64, got {h}x{w}"
            )));
        }
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
            Ok(())
        };
        unit("intensity_lo", self.intensity_lo)?;
        unit("intensity_hi", self.intensity_hi)?;
        unit("background", self.background)?;
        if self.intensity_lo > self.intensity_hi {
            return Err(Error::Config(format!(
                "intensity range inverted: {} > {}",
                self.intensity_lo, self.intensity_hi
            )));
        }
        if !(self.blur_width >= 0.0) {
            return Err(Error::Config(format!(
                "blur_width must be nonnegative, got {}",
                self.blur_width
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with edge renormalization (the kernel is re-scaled
/// to the in-bounds taps, so constants are preserved and no energy leaks in
/// from outside the image).
fn gaussian_blur(img: &mut Vec<f64>, h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let pass = |src: &[f64], dst: &mut [f64], len: usize, other: usize, stride_main: usize, stride_other: usize| {
        for o in 0..other {
            for i in 0..len {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (wi, k) in (-radius..=radius).enumerate() {
                    let p = i as isize + k;
                    if p < 0 || p >= len as isize {
                        continue;
                    }
                    let wv = weights[wi];
                    acc += wv * src[o * stride_other + p as usize * stride_main];
                    norm += wv;
                }
                dst[o * stride_other + i * stride_main] = acc / norm;
            }
        }
    };

    let mut tmp = vec![0.0f64; img.len()];
    // Horizontal pass: main axis is x (stride 1), other axis is rows.
    pass(img, &mut tmp, w, h, 1, w);
    // Vertical pass: main axis is y (stride w), other axis is columns.
    pass(&tmp, img, h, w, w, 1);
}

/// Deterministic piecewise-smooth phantom: a flat background, `n_ellipses`
/// seeded ellipses painted in arrival order (later ones overwrite), a few
/// small bright lesions, and a light blur; clamped to `[0, 1]`. With
/// `n_ellipses == 0` the image is exactly the constant background.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Grid4<f64>> {
    spec.validate()?;
    let (h, w) = spec.size;
    if spec.n_ellipses == 0 {
        return Ok(Grid4::filled([1, 1, h, w], spec.background));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = vec![spec.background; h * w];
    let min_side = h.min(w) as f64;

    for _ in 0..spec.n_ellipses {
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let a = rng.gen_range(0.06..0.30) * min_side;
        let b = rng.gen_range(0.06..0.30) * min_side;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let value = rng.gen_range(spec.intensity_lo..=spec.intensity_hi);
        let (s, c) = theta.sin_cos();
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 {
                    img[i * w + j] = value;
                }
            }
        }
    }

    // Small, bright, high-contrast lesions.
    let n_lesions = rng.gen_range(1..=3usize);
    for _ in 0..n_lesions {
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let r = rng.gen_range(1.5..4.0);
        let value = rng.gen_range(0.85..=1.0);
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    img[i * w + j] = value;
                }
            }
        }
    }

    gaussian_blur(&mut img, h, w, spec.blur_width);
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Grid4::from_vec([1, 1, h, w], img)
}

/// Additive zero-mean Gaussian noise followed by clamping to `[0, 1]`:
/// `y = clamp(x + n)`. A zero sigma returns the input bit-exactly.
pub fn simulate_low_dose<E: Scalar>(
    clean: &Grid4<E>,
    noise_sigma: f64,
    seed: u64,
) -> Result<Grid4<E>> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    for &v in clean.data() {
        if !(v >= E::ZERO && v <= E::ONE) {
            return Err(Error::Value(format!(
                "clean image values must lie in [0, 1], found {v}"
            )));
        }
    }
    if noise_sigma == 0.0 {
        return Ok(clean.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, noise_sigma)
        .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
    let mut out = clean.clone();
    for v in out.data_mut() {
        let n = normal.sample(&mut rng);
        *v = E::from_f64((v.as_f64() + n).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Derives the noise seed for a pair from the phantom seed, keeping the two
/// random streams distinct but both reproducible from one number.
fn noise_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// Generate a phantom and its simulated low-dose counterpart.
pub fn generate_pair(spec: &PhantomSpec, id: impl Into<String>) -> Result<ImagePair<f64>> {
    let normal = generate_phantom(spec)?;
    let low = simulate_low_dose(&normal, spec.noise_sigma, noise_seed(spec.seed))?;
    let pair = ImagePair {
        id: id.into(),
        low,
        normal,
    };
    pair.validate()?;
    Ok(pair)
}

/// Number of patch positions along each axis: `floor((dim - patch) / stride) + 1`.
pub fn patch_counts(h: usize, w: usize, patch: usize, stride: usize) -> Result<(usize, usize)> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config(
            "patch and stride must both be at least 1".into(),
        ));
    }
    if h < patch || w < patch {
        return Err(Error::Value(format!(
            "image {h}x{w} is smaller than the {patch}x{patch} patch"
        )));
    }
    Ok(((h - patch) / stride + 1, (w - patch) / stride + 1))
}

/// Aligned low/normal training patches, stacked as `(n, 1, patch, patch)`.
#[derive(Debug, Clone)]
pub struct PatchSet<E> {
    pub low: Grid4<E>,
    pub normal: Grid4<E>,
}

impl<E: Scalar> PatchSet<E> {
    pub fn len(&self) -> usize {
        self.low.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stack several sets (e.g. one per source image) into one.
    pub fn merge(sets: &[PatchSet<E>]) -> Result<PatchSet<E>> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Value("no patch sets to merge".into()))?;
        let [_, _, ph, pw] = first.low.dims();
        let total: usize = sets.iter().map(PatchSet::len).sum();
        let mut low = Grid4::zeros([total, 1, ph, pw]);
        let mut normal = Grid4::zeros([total, 1, ph, pw]);
        let mut row = 0;
        for set in sets {
            if set.low.dims()[2..] != [ph, pw] {
                return Err(Error::shape(
                    "patch sizes across merged sets",
                    [ph, pw],
                    [set.low.dims()[2], set.low.dims()[3]],
                ));
            }
            for i in 0..set.len() {
                low.plane_mut(row, 0).copy_from_slice(set.low.plane(i, 0));
                normal
                    .plane_mut(row, 0)
                    .copy_from_slice(set.normal.plane(i, 0));
                row += 1;
            }
        }
        Ok(PatchSet { low, normal })
    }

    /// Keep only the first `n` patches.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let [_, _, ph, pw] = self.low.dims();
        let take = |g: &Grid4<E>| {
            Grid4::from_vec([n, 1, ph, pw], g.data()[..n * ph * pw].to_vec()).expect("prefix")
        };
        self.low = take(&self.low);
        self.normal = take(&self.normal);
    }
}

/// Cut every aligned `patch`-sized window at stride-grid positions
/// `(i*stride, j*stride)`, row-major over positions, identically for the low
/// and normal images.
pub fn extract_patches<E: Scalar>(
    pair: &ImagePair<E>,
    patch: usize,
    stride: usize,
) -> Result<PatchSet<E>> {
    pair.validate()?;
    let [_, _, h, w] = pair.low.dims();
    let (ch, cw) = patch_counts(h, w, patch, stride)?;
    let n = ch * cw;
    let mut low = Grid4::zeros([n, 1, patch, patch]);
    let mut normal = Grid4::zeros([n, 1, patch, patch]);
    let src_low = pair.low.plane(0, 0);
    let src_normal = pair.normal.plane(0, 0);
    for pi in 0..ch {
        for pj in 0..cw {
            let idx = pi * cw + pj;
            let (top, left) = (pi * stride, pj * stride);
            for r in 0..patch {
                let src = (top + r) * w + left;
                let dst = r * patch;
                low.plane_mut(idx, 0)[dst..dst + patch]
                    .copy_from_slice(&src_low[src..src + patch]);
                normal.plane_mut(idx, 0)[dst..dst + patch]
                    .copy_from_slice(&src_normal[src..src + patch]);
            }
        }
    }
    Ok(PatchSet { low, normal })
}

/// Seeded shuffled stream of full batches of patch indices for one epoch.
/// Every patch appears at most once; a trailing partial batch is dropped. The
/// order depends only on `(seed, epoch)`, never on consumed generator state,
/// so any epoch's stream can be reproduced in isolation.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(n_patches: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n_patches).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            cursor: 0,
        })
    }

    /// Number of full batches this epoch will yield.
    pub fn n_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Some(batch)
    }
}
