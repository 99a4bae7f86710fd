//! Dense H×W×C grids of f64 values, row-major with channels innermost.
//!
//! `DenseField` is the one array type in the crate: targets, latents,
//! predictions, conditioning images, and (by convention) network weights all
//! live in it. Index layout is `(y * width + x) * channels + ch`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseField {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

/// Elementwise op selector for [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of an elementwise op: a same-shaped field or a scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Field(&'a DenseField),
    Scalar(f64),
}

impl DenseField {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self { h, w, c, data: vec![value; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::InvalidArg(format!(
                "value buffer length {} does not match shape ({h}, {w}, {c})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "DenseField::from_vec".into() });
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape_mismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|v| v + s)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean absolute difference against another field of the same shape.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stack the channels of `a` then `b` at every pixel.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.h != b.h || a.w != b.w {
            return Err(Error::shape_mismatch(a.shape(), b.shape()));
        }
        let c = a.c + b.c;
        let mut data = Vec::with_capacity(a.h * a.w * c);
        for p in 0..a.h * a.w {
            data.extend_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
            data.extend_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
        }
        Ok(Self { h: a.h, w: a.w, c, data })
    }

    /// Extract one channel as an (H, W, 1) field.
    pub fn channel(&self, ch: usize) -> Self {
        assert!(ch < self.c, "channel out of range");
        let mut data = Vec::with_capacity(self.h * self.w);
        for p in 0..self.h * self.w {
            data.push(self.data[p * self.c + ch]);
        }
        Self { h: self.h, w: self.w, c: 1, data }
    }

    /// Rectangular crop of `ph`×`pw` pixels starting at (y0, x0), all channels.
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Self> {
        if y0 + ph > self.h || x0 + pw > self.w {
            return Err(Error::InvalidArg(format!(
                "crop ({y0},{x0})+({ph},{pw}) exceeds field ({}, {})",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(ph * pw * self.c);
        for y in y0..y0 + ph {
            let row = &self.data[(y * self.w + x0) * self.c..(y * self.w + x0 + pw) * self.c];
            data.extend_from_slice(row);
        }
        Ok(Self { h: ph, w: pw, c: self.c, data })
    }
}

/// Elementwise arithmetic with shape validation; the error names both shapes.
pub fn elementwise(op: ElemOp, a: &DenseField, b: Operand<'_>) -> Result<DenseField> {
    match b {
        Operand::Field(b) => match op {
            ElemOp::Add => a.add(b),
            ElemOp::Sub => a.sub(b),
            ElemOp::Mul => a.mul(b),
        },
        Operand::Scalar(s) => Ok(match op {
            ElemOp::Add => a.add_scalar(s),
            ElemOp::Sub => a.add_scalar(-s),
            ElemOp::Mul => a.scale(s),
        }),
    }
}
