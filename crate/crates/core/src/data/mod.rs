//! Samples, synthetic generation, augmentation, sampling and image I/O.

pub mod augment;
pub mod pgm;
pub mod sampler;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Coronal,
    LeftBending,
    RightBending,
}

impl View {
    pub const ALL: [View; 3] = [View::Coronal, View::LeftBending, View::RightBending];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Coronal => "coronal",
            View::LeftBending => "left_bending",
            View::RightBending => "right_bending",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown view `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quality {
    High,
    Medium,
    Low,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::High, Quality::Medium, Quality::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::High => "high",
            Quality::Medium => "medium",
            Quality::Low => "low",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Quality::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown quality `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// Patient id, shared by the three views of one patient.
    pub id: String,
    pub view: View,
    pub quality: Quality,
    /// `(1, 1, h, w)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

impl SegmentationSample {
    pub fn validate(&self) -> Result<()> {
        let d = self.image.dims();
        if d.n != 1 || d.c != 1 || d.h != self.mask.height() || d.w != self.mask.width() {
            return Err(shape_err!("sample {}: image {d} does not match mask", self.id));
        }
        Ok(())
    }
}

/// Maps an image linearly onto `[0, 1]`.
pub fn minmax_normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (lo, hi) = image.min_max();
    if !(hi > lo) {
        return Err(invalid!("cannot normalise a constant image"));
    }
    let range = hi - lo;
    Ok(image.map(|v| (v - lo) / range))
}

/// Resizes a single-channel image so its longer side equals `size`
/// (bilinear), then zero-pads the shorter side symmetrically.
pub fn resize_with_pad(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let d = image.dims();
    if d.n != 1 || d.c != 1 || d.h == 0 || d.w == 0 || size == 0 {
        return Err(shape_err!("resize_with_pad needs a non-empty (1,1,h,w) image, got {d}"));
    }
    let scale = size as f64 / d.h.max(d.w) as f64;
    let nh = ((d.h as f64 * scale).round() as usize).clamp(1, size);
    let nw = ((d.w as f64 * scale).round() as usize).clamp(1, size);
    let rows = resample_taps(d.h, nh);
    let cols = resample_taps(d.w, nw);
    let (top, left) = ((size - nh) / 2, (size - nw) / 2);
    let src = image.data();
    let mut out = Tensor::zeros(Dims::new(1, 1, size, size));
    for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let at = |yy: usize, xx: usize| src[yy * d.w + xx] as f64;
            let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.set(0, 0, top + y, left + x, (top_row * (1.0 - fy) + bottom_row * fy) as f32);
        }
    }
    Ok(out)
}

/// Half-pixel-centre bilinear taps for resampling `input` samples to `output`.
fn resample_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    if input == output {
        return (0..input).map(|i| (i, i, 0.0)).collect();
    }
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(input - 1), s - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::bilinear_taps;

    #[test]
    fn minmax_examples() {
        let t = Tensor::from_vec(Dims::new(1, 1, 1, 3), vec![2.0f32, 4.0, 6.0]).unwrap();
        assert_eq!(minmax_normalize(&t).unwrap().data(), &[0.0, 0.5, 1.0]);
        let unit = Tensor::from_vec(Dims::new(1, 1, 1, 3), vec![0.0f32, 0.25, 1.0]).unwrap();
        assert_eq!(minmax_normalize(&unit).unwrap(), unit);
        assert!(minmax_normalize(&Tensor::full(Dims::new(1, 1, 2, 2), 3.0)).is_err());
    }

    #[test]
    fn resize_pads_the_short_side() {
        let t = Tensor::full(Dims::new(1, 1, 4, 8), 1.0f32);
        let r = resize_with_pad(&t, 16).unwrap();
        assert_eq!(r.dims(), Dims::new(1, 1, 16, 16));
        assert_eq!(r.get(0, 0, 3, 5), 0.0);
        assert_eq!(r.get(0, 0, 4, 0), 1.0);
        assert_eq!(r.get(0, 0, 11, 15), 1.0);
        assert_eq!(r.get(0, 0, 12, 8), 0.0);
        let same = Tensor::from_fn(Dims::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f32);
        assert_eq!(resize_with_pad(&same, 4).unwrap(), same);
    }

    #[test]
    fn resampling_matches_upsampler_taps() {
        for (input, factor) in [(4, 2), (3, 4), (8, 1)] {
            let a = resample_taps(input, input * factor);
            let b = bilinear_taps(input, factor);
            let v: Vec<f64> = (0..input).map(|i| (i as f64 * 1.7).sin()).collect();
            let eval = |t: &(usize, usize, f64)| v[t.0] * (1.0 - t.2) + v[t.1] * t.2;
            assert!(a.iter().zip(&b).all(|(p, q)| (eval(p) - eval(q)).abs() < 1e-12));
        }
    }

    #[test]
    fn names_round_trip() {
        for v in View::ALL {
            assert_eq!(v.as_str().parse::<View>().unwrap(), v);
        }
        for q in Quality::ALL {
            assert_eq!(q.as_str().parse::<Quality>().unwrap(), q);
        }
        assert!("sideways".parse::<View>().is_err());
    }
}
