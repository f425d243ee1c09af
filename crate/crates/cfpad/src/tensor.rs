//! Minimal dense 4-D tensor (batch, channel, height, width) over `f64`.
//!
//! Deliberately small: row-major storage, index helpers, and the handful of
//! accessors the layers need. All heavy math lives in the layer code.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Tensor4 {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f64>, b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != b * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match shape [{b}, {c}, {h}, {w}]",
                data.len()
            )));
        }
        Ok(Self { data, b, c, h, w })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.b, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of element (b, c, h, w).
    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(b, c, h, w);
        self.data[i] = v;
    }

    /// One (b, c) spatial plane as a contiguous slice.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.c + c) * self.h * self.w;
        let end = start + self.h * self.w;
        &mut self.data[start..end]
    }

    /// One sample (all channels) as a contiguous slice.
    #[inline]
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.c * self.h * self.w;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
