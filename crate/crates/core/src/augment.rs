//! Stochastic grayscale augmentation: random resized crop, flips, Gaussian
//! blur, SNR-scaled noise, optional affine warps, and histogram
//! normalization. The pipeline order is fixed: crop, h-flip, v-flip, blur,
//! noise, (affine when configured), then histogram normalization always.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug)]
pub struct AffineRanges {
    /// Rotation sampled from ±this many degrees.
    pub rotate_deg: f64,
    /// Shear angles sampled from ±this many degrees per axis.
    pub shear_x_deg: f64,
    pub shear_y_deg: f64,
    /// Translation sampled from ±this fraction of each image extent.
    pub translate_frac: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            rotate_deg: 15.0,
            shear_x_deg: 10.0,
            shear_y_deg: 10.0,
            translate_frac: 0.10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Gate probability applied independently to each transform.
    pub p: f64,
    /// Output side length; every pipeline output is target x target.
    pub target: usize,
    /// Crop area fraction range.
    pub scale_range: (f64, f64),
    /// Crop aspect ratio range.
    pub aspect_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub snr_range: (f64, f64),
    /// Histogram normalization output range.
    pub out_range: (f32, f32),
    /// Extra affine warps; None outside the RA fine-tuning recipe.
    pub affine: Option<AffineRanges>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p: 0.5,
            target: 64,
            scale_range: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            blur_sigma_range: (0.1, 2.0),
            snr_range: (4.0, 8.0),
            out_range: (0.0, 1.0),
            affine: None,
        }
    }
}

impl AugmentConfig {
    /// Deterministic evaluation preprocessing: resize plus histogram
    /// normalization only.
    pub fn eval(target: usize) -> Self {
        AugmentConfig {
            p: 0.0,
            target,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::contract(format!("gate probability {} not in [0,1]", self.p)));
        }
        if self.target == 0 {
            return Err(Error::contract("target size must be positive"));
        }
        for (name, (lo, hi)) in [
            ("scale", self.scale_range),
            ("aspect", self.aspect_range),
            ("blur sigma", self.blur_sigma_range),
            ("snr", self.snr_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo <= 0.0 {
                return Err(Error::contract(format!("{name} range ({lo}, {hi}) invalid")));
            }
        }
        if self.out_range.1 <= self.out_range.0 {
            return Err(Error::contract("output range must have hi > lo"));
        }
        Ok(())
    }
}

/// RNG for one sample, derived from (seed, epoch, index) so workers can
/// augment out of order and still reproduce runs exactly.
pub fn sample_rng(global_seed: u64, epoch: u64, sample_index: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut h = mix(global_seed.wrapping_add(0x9e3779b97f4a7c15));
    h = mix(h ^ epoch);
    h = mix(h ^ sample_index);
    ChaCha8Rng::seed_from_u64(h)
}

/// Bilinear resize with half-pixel centers and edge clamping; corner pixels
/// map onto corner pixels.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    assert!(out_h > 0 && out_w > 0, "resize target must be positive");
    let (h, w) = (img.height(), img.width());
    if out_h == h && out_w == w {
        return img.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f32;
            let top = img.get(y0, x0) * (1.0 - dx) + img.get(y0, x1) * dx;
            let bot = img.get(y1, x0) * (1.0 - dx) + img.get(y1, x1) * dx;
            out[oy * out_w + ox] = top * (1.0 - dy) + bot * dy;
        }
    }
    Image::new(out_h, out_w, out).expect("interpolation of valid pixels is valid")
}

pub fn crop(img: &Image, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Image> {
    if ch == 0 || cw == 0 || y0 + ch > img.height() || x0 + cw > img.width() {
        return Err(Error::dim(format!(
            "crop {ch}x{cw} at ({y0},{x0}) outside {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut out = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        let row = &img.pixels()[y * img.width() + x0..y * img.width() + x0 + cw];
        out.extend_from_slice(row);
    }
    Image::new(ch, cw, out)
}

/// Sample crop geometry: area fraction and aspect ratio drawn uniformly, the
/// resulting extents clipped into [1, image extent].
pub fn sample_crop<R: Rng>(
    h: usize,
    w: usize,
    scale_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let s = rng.random_range(scale_range.0..=scale_range.1);
    let a = rng.random_range(aspect_range.0..=aspect_range.1);
    let target_area = s * area;
    let cw = ((target_area * a).sqrt().round() as usize).clamp(1, w);
    let ch = ((target_area / a).sqrt().round() as usize).clamp(1, h);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    (y0, x0, ch, cw)
}

pub fn random_resized_crop<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Image {
    let (y0, x0, ch, cw) = sample_crop(
        img.height(),
        img.width(),
        cfg.scale_range,
        cfg.aspect_range,
        rng,
    );
    let cropped = crop(img, y0, x0, ch, cw).expect("sampled crop is in bounds");
    resize_bilinear(&cropped, cfg.target, cfg.target)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.pixels().to_vec();
    for y in 0..h {
        out[y * w..(y + 1) * w].reverse();
    }
    Image::new(h, w, out).expect("flip preserves validity")
}

pub fn flip_vertical(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for y in (0..h).rev() {
        out.extend_from_slice(&img.pixels()[y * w..(y + 1) * w]);
    }
    Image::new(h, w, out).expect("flip preserves validity")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

pub fn random_flip<R: Rng>(img: &Image, rng: &mut R, axis: FlipAxis, p: f64) -> Image {
    if p > 0.0 && rng.random_bool(p) {
        match axis {
            FlipAxis::Horizontal => flip_horizontal(img),
            FlipAxis::Vertical => flip_vertical(img),
        }
    } else {
        img.clone()
    }
}

/// Separable Gaussian blur, kernel radius ceil(3 sigma), discrete weights
/// renormalized to sum 1, reflective (symmetric) boundaries.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::contract(format!("blur sigma {sigma} must be positive")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 * inv2s2).exp());
    }
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|&k| (k / total) as f32).collect();

    fn reflect(mut i: isize, n: isize) -> usize {
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    }

    let (h, w) = (img.height() as isize, img.width() as isize);
    let src = img.pixels();
    // Horizontal pass then vertical pass; separability makes this exact.
    let mut mid = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let xi = reflect(x + ki as isize - radius, w);
                acc += kv * src[(y * w) as usize + xi];
            }
            mid[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let yi = reflect(y + ki as isize - radius, h);
                acc += kv * mid[yi * w as usize + x as usize];
            }
            out[(y * w + x) as usize] = acc.max(0.0);
        }
    }
    Image::new(img.height(), img.width(), out)
}

/// Noise level implied by an image mean and a signal-to-noise ratio.
pub fn noise_sigma(image_mean: f32, snr: f64) -> f64 {
    image_mean as f64 / snr
}

/// Add zero-mean Gaussian noise with sigma = mean(img)/snr, clamped at 0.
pub fn add_gaussian_noise<R: Rng>(img: &Image, rng: &mut R, snr: f64) -> Result<Image> {
    if snr <= 0.0 || !snr.is_finite() {
        return Err(Error::contract(format!("snr {snr} must be positive")));
    }
    let sigma = noise_sigma(img.mean(), snr);
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0f64, sigma).expect("positive sigma");
    let out = img
        .pixels()
        .iter()
        .map(|&v| (v + normal.sample(rng) as f32).max(0.0))
        .collect();
    Image::new(img.height(), img.width(), out)
}

/// Tolerance unit for histogram normalization properties: one part in 256
/// of the output range, matching 8-bit intensity granularity.
pub const HIST_BINS: usize = 256;

/// Histogram equalization onto [lo, hi]: each pixel moves to its midrank
/// quantile under the empirical CDF, shifted and rescaled so the minimum
/// maps to lo and the maximum to hi. Uses the exact (unbinned) CDF, so the
/// map is strictly monotone on distinct values, ties stay ties, and the op
/// is exactly idempotent; a constant image maps to the midpoint.
pub fn histogram_normalize(img: &Image, out_range: (f32, f32)) -> Result<Image> {
    let (lo, hi) = out_range;
    if !(hi > lo) {
        return Err(Error::contract(format!("output range ({lo}, {hi}) needs hi > lo")));
    }
    let pixels = img.pixels();
    let n = pixels.len();
    let mut idx: Vec<u32> = (0..n as u32).collect();
    // Pixels are finite by the Image invariant.
    idx.sort_unstable_by(|&a, &b| {
        pixels[a as usize].partial_cmp(&pixels[b as usize]).unwrap()
    });
    let mut quantile = vec![0.0f64; n];
    let mut start = 0;
    while start < n {
        let v = pixels[idx[start] as usize];
        let mut end = start + 1;
        while end < n && pixels[idx[end] as usize] == v {
            end += 1;
        }
        let midrank = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            quantile[i as usize] = midrank;
        }
        start = end;
    }
    let qmin = quantile[idx[0] as usize];
    let qmax = quantile[idx[n - 1] as usize];
    if qmax <= qmin {
        let mid = lo + (hi - lo) * 0.5;
        return Image::new(img.height(), img.width(), vec![mid; n]);
    }
    let span = (hi - lo) as f64;
    let scale = span / (qmax - qmin);
    let out = quantile
        .iter()
        .map(|&q| (lo as f64 + (q - qmin) * scale) as f32)
        .collect();
    Image::new(img.height(), img.width(), out)
}

/// Apply a fixed affine map (rotation and shears about the image center,
/// then translation) by inverse-mapping with bilinear sampling and zero
/// fill. Angles in degrees, translation as a fraction of each extent.
pub fn affine_transform(
    img: &Image,
    rotate_deg: f64,
    shear_x_deg: f64,
    shear_y_deg: f64,
    translate_x_frac: f64,
    translate_y_frac: f64,
) -> Image {
    let (h, w) = (img.height(), img.width());
    let theta = rotate_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let shx = shear_x_deg.to_radians().tan();
    let shy = shear_y_deg.to_radians().tan();
    // Forward map: p_dst = R * Shx * Shy * (p_src - c) + c + t.
    let r = [[cos_t, -sin_t], [sin_t, cos_t]];
    let sx = [[1.0, shx], [0.0, 1.0]];
    let sy = [[1.0, 0.0], [shy, 1.0]];
    let m2 = mat2_mul(sx, sy);
    let a = mat2_mul(r, m2);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    // Shears and rotations keep det near 1; a degenerate composition would
    // be a config bug.
    assert!(det.abs() > 1e-9, "degenerate affine map");
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let tx = translate_x_frac * w as f64;
    let ty = translate_y_frac * h as f64;

    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sxf = inv[0][0] * dx + inv[0][1] * dy + cx;
            let syf = inv[1][0] * dx + inv[1][1] * dy + cy;
            out[y * w + x] = bilinear_zero_fill(img, syf, sxf);
        }
    }
    Image::new(h, w, out).expect("resampled pixels are valid")
}

fn mat2_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn bilinear_zero_fill(img: &Image, y: f64, x: f64) -> f32 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let dy = (y - y0 as f64) as f32;
    let dx = (x - x0 as f64) as f32;
    let mut acc = 0.0f32;
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1, dy)] {
        if yy < 0 || yy >= h || wy == 0.0 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1, dx)] {
            if xx < 0 || xx >= w || wx == 0.0 {
                continue;
            }
            acc += wy * wx * img.get(yy as usize, xx as usize);
        }
    }
    acc
}

pub fn random_affine<R: Rng>(img: &Image, rng: &mut R, ranges: &AffineRanges) -> Image {
    let draw = |rng: &mut R, half: f64| {
        if half == 0.0 {
            0.0
        } else {
            rng.random_range(-half..=half)
        }
    };
    let rot = draw(rng, ranges.rotate_deg);
    let shx = draw(rng, ranges.shear_x_deg);
    let shy = draw(rng, ranges.shear_y_deg);
    let tx = draw(rng, ranges.translate_frac);
    let ty = draw(rng, ranges.translate_frac);
    affine_transform(img, rot, shx, shy, tx, ty)
}

/// One full pipeline draw. Each stochastic transform fires with probability
/// `cfg.p`; the output is always target x target and histogram normalized.
pub fn augment_once<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Result<Image> {
    cfg.validate()?;
    if img.pixels().is_empty() {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    let gate = |rng: &mut R| cfg.p > 0.0 && rng.random_bool(cfg.p);
    let mut out = if gate(rng) {
        random_resized_crop(img, rng, cfg)
    } else {
        resize_bilinear(img, cfg.target, cfg.target)
    };
    if gate(rng) {
        out = flip_horizontal(&out);
    }
    if gate(rng) {
        out = flip_vertical(&out);
    }
    if gate(rng) {
        let sigma = rng.random_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
        out = gaussian_blur(&out, sigma)?;
    }
    if gate(rng) {
        let snr = rng.random_range(cfg.snr_range.0..=cfg.snr_range.1);
        out = add_gaussian_noise(&out, rng, snr)?;
    }
    if let Some(ranges) = &cfg.affine {
        if gate(rng) {
            out = random_affine(&out, rng, ranges);
        }
    }
    histogram_normalize(&out, cfg.out_range)
}

/// Two independent pipeline draws of the same base image: the contrastive
/// query and key views.
pub fn make_query_key_pair<R: Rng>(
    img: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(Image, Image)> {
    let q = augment_once(img, rng, cfg)?;
    let k = augment_once(img, rng, cfg)?;
    Ok((q, k))
}

/// Light training augmentation: resize to target, coin-flip mirrors, then
/// the usual value normalization. No crop, blur, or noise.
pub fn flips_only<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Result<Image> {
    if img.pixels().is_empty() {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    let base = resize_bilinear(img, cfg.target, cfg.target);
    let h = random_flip(&base, rng, FlipAxis::Horizontal, cfg.p);
    let v = random_flip(&h, rng, FlipAxis::Vertical, cfg.p);
    histogram_normalize(&v, cfg.out_range)
}

/// Flips plus a gated affine jitter, for the heavier fine-tuning ablation.
pub fn flips_affine<R: Rng>(
    img: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
    ranges: &AffineRanges,
) -> Result<Image> {
    if img.pixels().is_empty() {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    let base = resize_bilinear(img, cfg.target, cfg.target);
    let h = random_flip(&base, rng, FlipAxis::Horizontal, cfg.p);
    let v = random_flip(&h, rng, FlipAxis::Vertical, cfg.p);
    let jittered = if cfg.p > 0.0 && rng.random_bool(cfg.p) {
        random_affine(&v, rng, ranges)
    } else {
        v
    };
    histogram_normalize(&jittered, cfg.out_range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let px = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn identity_crop_preserves_target_sized_input() {
        let img = gradient_image(8, 8);
        let cfg = AugmentConfig {
            target: 8,
            scale_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            ..Default::default()
        };
        let mut rng = sample_rng(1, 0, 0);
        let out = random_resized_crop(&img, &mut rng, &cfg);
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn upsample_preserves_corners() {
        let img = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4);
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(0, 3), 2.0);
        assert_eq!(out.get(3, 0), 3.0);
        assert_eq!(out.get(3, 3), 4.0);
        // Interior weights at index 1: 0.75/0.25 blend.
        assert!((out.get(0, 1) - (0.75 * 1.0 + 0.25 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn crop_of_constant_is_constant() {
        let img = Image::new(6, 6, vec![0.3; 36]).unwrap();
        let cfg = AugmentConfig {
            target: 4,
            ..Default::default()
        };
        let mut rng = sample_rng(2, 0, 0);
        for _ in 0..20 {
            let out = random_resized_crop(&img, &mut rng, &cfg);
            assert!(out.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn flips_match_hand_cases() {
        let img = Image::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(flip_horizontal(&img).pixels(), &[2.0, 1.0]);
        let img2 = Image::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(flip_vertical(&img2).pixels(), &[2.0, 1.0]);

        let g = gradient_image(5, 7);
        assert_eq!(flip_horizontal(&flip_horizontal(&g)).pixels(), g.pixels());
        assert_eq!(flip_vertical(&flip_vertical(&g)).pixels(), g.pixels());

        let mut rng = sample_rng(3, 0, 0);
        let same = random_flip(&g, &mut rng, FlipAxis::Horizontal, 0.0);
        assert_eq!(same.pixels(), g.pixels());
    }

    #[test]
    fn blur_preserves_dc_and_tiny_sigma_is_identity() {
        let img = Image::new(4, 4, vec![0.7; 16]).unwrap();
        let out = gaussian_blur(&img, 1.3).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let g = gradient_image(6, 6);
        let near = gaussian_blur(&g, 0.1).unwrap();
        for (a, b) in g.pixels().iter().zip(near.pixels()) {
            assert!((a - b).abs() < 1e-3);
        }

        assert!(gaussian_blur(&g, 0.0).is_err());
        assert!(gaussian_blur(&g, -1.0).is_err());
    }

    #[test]
    fn blur_peak_stays_at_bright_pixel() {
        let mut img = Image::zeros(9, 9);
        img.set(4, 4, 1.0);
        let out = gaussian_blur(&img, 1.0).unwrap();
        let (mut best, mut best_v) = (0, -1.0f32);
        for (i, &v) in out.pixels().iter().enumerate() {
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        assert_eq!(best, 4 * 9 + 4);
    }

    #[test]
    fn noise_sigma_formula_and_empirical_std() {
        assert!((noise_sigma(100.0, 4.0) - 25.0).abs() < 1e-9);

        let zero = Image::zeros(4, 4);
        let mut rng = sample_rng(4, 0, 0);
        let out = add_gaussian_noise(&zero, &mut rng, 5.0).unwrap();
        assert_eq!(out.pixels(), zero.pixels());

        // 10^6 pixels of constant mean 100: empirical noise std within 1%.
        // Clamping at 0 is negligible here (mean is 4 sigma above zero).
        let big = Image::new(1000, 1000, vec![100.0; 1_000_000]).unwrap();
        let noisy = add_gaussian_noise(&big, &mut rng, 4.0).unwrap();
        let mean: f64 = noisy.pixels().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        let var: f64 = noisy
            .pixels()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / 1e6;
        let sd = var.sqrt();
        assert!((sd - 25.0).abs() < 0.25, "empirical sd {sd}");
    }

    #[test]
    fn histogram_extremes_map_to_range_ends() {
        let img = Image::new(1, 4, vec![0.0, 255.0, 0.0, 255.0]).unwrap();
        let out = histogram_normalize(&img, (0.0, 1.0)).unwrap();
        for (i, &v) in out.pixels().iter().enumerate() {
            if img.pixels()[i] == 0.0 {
                assert!(v.abs() < 1e-6);
            } else {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn histogram_preserves_rank_order() {
        let mut rng = sample_rng(5, 0, 0);
        for _ in 0..50 {
            let px: Vec<f32> = (0..64).map(|_| rng.random::<f32>() * 3.0).collect();
            let img = Image::new(8, 8, px).unwrap();
            let out = histogram_normalize(&img, (0.0, 1.0)).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    let (a, b) = (img.pixels()[i], img.pixels()[j]);
                    let (oa, ob) = (out.pixels()[i], out.pixels()[j]);
                    if a < b {
                        assert!(oa < ob, "rank broken: {a}<{b} but {oa}>={ob}");
                    }
                    if a == b {
                        assert_eq!(oa, ob);
                    }
                }
            }
        }
    }

    #[test]
    fn histogram_uniform_input_is_nearly_linear() {
        // 256 evenly spaced values: the CDF map should be the identity line
        // up to one bin width.
        let px: Vec<f32> = (0..256).map(|i| i as f32 / 255.0).collect();
        let img = Image::new(16, 16, px).unwrap();
        let out = histogram_normalize(&img, (0.0, 1.0)).unwrap();
        let binw = 1.0 / 256.0;
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() <= binw + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn histogram_constant_maps_to_midpoint() {
        let img = Image::new(2, 2, vec![0.4; 4]).unwrap();
        let out = histogram_normalize(&img, (0.2, 0.8)).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn histogram_idempotent_within_one_bin() {
        let mut rng = sample_rng(6, 0, 0);
        let px: Vec<f32> = (0..256).map(|_| rng.random::<f32>()).collect();
        let img = Image::new(16, 16, px).unwrap();
        let once = histogram_normalize(&img, (0.0, 1.0)).unwrap();
        let twice = histogram_normalize(&once, (0.0, 1.0)).unwrap();
        let binw = 1.0 / 256.0;
        for (a, b) in once.pixels().iter().zip(twice.pixels()) {
            assert!((a - b).abs() <= binw + 1e-6);
        }
    }

    #[test]
    fn affine_identity_and_half_turn() {
        let img = gradient_image(5, 5);
        let same = affine_transform(&img, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (a, b) in img.pixels().iter().zip(same.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }

        let sq = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rot = affine_transform(&sq, 180.0, 0.0, 0.0, 0.0, 0.0);
        let expect = [4.0, 3.0, 2.0, 1.0];
        for (a, b) in rot.pixels().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{:?}", rot.pixels());
        }

        let gone = affine_transform(&img, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(gone.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_pipeline_is_deterministic_resize_normalize() {
        let img = gradient_image(10, 10);
        let cfg = AugmentConfig::eval(6);
        let mut rng = sample_rng(7, 0, 0);
        let (q, k) = make_query_key_pair(&img, &mut rng, &cfg).unwrap();
        assert_eq!(q.pixels(), k.pixels());
        let expect =
            histogram_normalize(&resize_bilinear(&img, 6, 6), cfg.out_range).unwrap();
        assert_eq!(q.pixels(), expect.pixels());
    }

    #[test]
    fn query_and_key_views_differ_almost_always() {
        // Textured (non-monotone) content: a pure ramp is invariant in rank
        // under blur, which equalization would then erase.
        let mut rng = sample_rng(8, 0, 0);
        let px: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let img = Image::new(8, 8, px).unwrap();
        let cfg = AugmentConfig {
            target: 8,
            ..Default::default()
        };
        let mut distinct = 0;
        let trials = 1000;
        for _ in 0..trials {
            let (q, k) = make_query_key_pair(&img, &mut rng, &cfg).unwrap();
            assert_eq!(q.height(), 8);
            assert_eq!(q.width(), 8);
            if q.pixels() != k.pixels() {
                distinct += 1;
            }
        }
        assert!(distinct >= 990, "only {distinct}/{trials} pairs differed");
    }

    #[test]
    fn per_sample_rng_is_reproducible_and_distinct() {
        let img = gradient_image(9, 9);
        let cfg = AugmentConfig::default();
        let a = augment_once(&img, &mut sample_rng(42, 3, 17), &cfg).unwrap();
        let b = augment_once(&img, &mut sample_rng(42, 3, 17), &cfg).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        let c = augment_once(&img, &mut sample_rng(42, 3, 18), &cfg).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }
}
