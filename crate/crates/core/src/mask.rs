//! Binary segmentation masks.

use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![false; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(shape_err!("mask {h}x{w} needs {} bits, got {}", h * w, bits.len()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(y, x));
            }
        }
        Self { h, w, bits }
    }

    /// Reads a single-channel tensor; any value >= 0.5 is foreground.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let d = t.dims();
        if d.n != 1 || d.c != 1 {
            return Err(shape_err!("mask tensor must be (1,1,h,w), got {d}"));
        }
        Ok(Self { h: d.h, w: d.w, bits: t.data().iter().map(|&v| v >= T::lit(0.5)).collect() })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(Dims::new(1, 1, self.h, self.w), data).expect("length matches")
    }

    /// `0`/`1` values in row-major order.
    pub fn to_values<T: Real>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    /// Out-of-bounds coordinates read as background.
    pub fn get_or_bg(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.get(y as usize, x as usize)
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(shape_err!("mask dims {}x{} vs {}x{}", self.h, self.w, other.h, other.w));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.w;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i / w, i % w))
    }
}
