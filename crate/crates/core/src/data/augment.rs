//! Paired geometric and image-only photometric augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    /// Rotation is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Per-axis translation bound as a fraction of the image side.
    pub translate_frac: f64,
    pub gamma: (f64, f64),
    /// Noise standard deviation is drawn from `[0, noise_sigma]`.
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_deg: 7.0,
            scale: (0.9, 1.1),
            translate_frac: 0.05,
            gamma: (0.8, 1.2),
            noise_sigma: 0.01,
        }
    }
}

impl AugmentationConfig {
    /// No transform at all.
    pub fn identity() -> Self {
        Self { flip_prob: 0.0, rotation_deg: 0.0, scale: (1.0, 1.0), translate_frac: 0.0, gamma: (1.0, 1.0), noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.rotation_deg >= 0.0
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.translate_frac >= 0.0
            && self.gamma.0 > 0.0
            && self.gamma.0 <= self.gamma.1
            && self.noise_sigma >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_rad: f64,
    pub scale: f64,
    /// Translation in pixels, `(dy, dx)`.
    pub shift: (f64, f64),
    pub gamma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { flip: false, angle_rad: 0.0, scale: 1.0, shift: (0.0, 0.0), gamma: 1.0, noise_sigma: 0.0, noise_seed: 0 }
    }

    pub fn sample(cfg: &AugmentationConfig, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut range = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let angle_rad = range(-cfg.rotation_deg, cfg.rotation_deg).to_radians();
        let scale = range(cfg.scale.0, cfg.scale.1);
        let t = cfg.translate_frac * size as f64;
        let shift = (range(-t, t), range(-t, t));
        let gamma = range(cfg.gamma.0, cfg.gamma.1);
        let noise_sigma = range(0.0, cfg.noise_sigma);
        let flip = rng.random_bool(cfg.flip_prob);
        let noise_seed = rng.random();
        Self { flip, angle_rad, scale, shift, gamma, noise_sigma, noise_seed }
    }

    fn is_rigid_identity(&self) -> bool {
        self.angle_rad == 0.0 && self.scale == 1.0 && self.shift == (0.0, 0.0)
    }

    /// Source coordinate `(y, x)` of output pixel `(y, x)` for the affine part:
    /// the forward map scales, rotates about the image centre, then shifts.
    pub fn source(&self, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy - self.shift.0, x as f64 - cx - self.shift.1);
        let (s, c) = self.angle_rad.sin_cos();
        // Inverse rotation, then inverse scale.
        let ry = (c * dy - s * dx) / self.scale;
        let rx = (s * dy + c * dx) / self.scale;
        (cy + ry, cx + rx)
    }
}

fn flip_plane<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        out.extend(data[y * w..(y + 1) * w].iter().rev());
    }
    out
}

/// Geometric part applied to an image: flip, then bilinear resampling with
/// zero fill outside the source.
pub fn warp_image(image: &Tensor<f32>, p: &AugmentParams) -> Tensor<f32> {
    let d = image.dims();
    let (h, w) = (d.h, d.w);
    let src = if p.flip { flip_plane(image.data(), h, w) } else { image.data().to_vec() };
    if p.is_rigid_identity() {
        return Tensor::from_vec(d, src).expect("same length");
    }
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    Tensor::from_fn(d, |_, _, y, x| {
        let (sy, sx) = p.source(h, w, y, x);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32
    })
}

/// Geometric part applied to a mask: flip, then nearest-neighbour sampling
/// with background outside the source.
pub fn warp_mask(mask: &BinaryMask, p: &AugmentParams) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let src = if p.flip {
        BinaryMask::from_bits(h, w, flip_plane(mask.bits(), h, w)).expect("same dims")
    } else {
        mask.clone()
    };
    if p.is_rigid_identity() {
        return src;
    }
    BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = p.source(h, w, y, x);
        src.get_or_bg(sy.round() as isize, sx.round() as isize)
    })
}

/// Gamma then additive Gaussian noise, clipped to `[0, 1]`.
pub fn photometric(image: &Tensor<f32>, p: &AugmentParams) -> Tensor<f32> {
    let mut out = if p.gamma == 1.0 { image.clone() } else { image.map(|v| (v as f64).powf(p.gamma) as f32) };
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        let normal = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
        for v in out.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

pub fn apply(sample: &SegmentationSample, p: &AugmentParams) -> SegmentationSample {
    SegmentationSample {
        image: photometric(&warp_image(&sample.image, p), p),
        mask: warp_mask(&sample.mask, p),
        ..sample.clone()
    }
}

/// Draws parameters from `seed` and applies them.
pub fn augment(sample: &SegmentationSample, cfg: &AugmentationConfig, seed: u64) -> SegmentationSample {
    apply(sample, &AugmentParams::sample(cfg, sample.image.dims().w, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Quality, View};
    use crate::tensor::Dims;

    fn sample() -> SegmentationSample {
        let image = Tensor::from_fn(Dims::new(1, 1, 8, 8), |_, _, y, x| ((y * 8 + x) as f32) / 63.0);
        let mask = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..4).contains(&x));
        SegmentationSample { id: "p".into(), view: View::Coronal, quality: Quality::High, image, mask }
    }

    #[test]
    fn identity_params_leave_sample_unchanged() {
        let s = sample();
        assert_eq!(augment(&s, &AugmentationConfig::identity(), 9), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let p = AugmentParams { flip: true, ..AugmentParams::identity() };
        let once = apply(&s, &p);
        assert_ne!(once.mask, s.mask);
        assert_eq!(apply(&once, &p), s);
    }

    #[test]
    fn gamma_value() {
        let t = Tensor::full(Dims::new(1, 1, 1, 1), 0.5f32);
        let p = AugmentParams { gamma: 1.2, ..AugmentParams::identity() };
        assert!((photometric(&t, &p).data()[0] - 0.435_275_3).abs() < 1e-6);
    }

    #[test]
    fn quarter_turn_about_centre() {
        let p = AugmentParams { angle_rad: std::f64::consts::FRAC_PI_2, ..AugmentParams::identity() };
        let (sy, sx) = p.source(5, 5, 0, 2);
        assert!((sy - 2.0).abs() < 1e-12 && (sx - 0.0).abs() < 1e-12);
    }
}
