//! Dense channel-major tensors over a 2D or 3D spatial grid.
//!
//! A 2D image of size H×W is stored as depth 1. Layout is `[c][d][h][w]`.

use std::fmt;

use crate::error::{Error, Result};

/// Spatial extent of an image or feature map. 2D grids use `d == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Spatial {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Spatial {
    pub fn new_2d(h: usize, w: usize) -> Self {
        Self { d: 1, h, w }
    }

    pub fn new_3d(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Number of genuinely spatial axes (2 when `d == 1`).
    pub fn rank(&self) -> usize {
        if self.d == 1 {
            2
        } else {
            3
        }
    }

    /// Shape after downsampling by `factor` along every spatial axis of a grid
    /// of the given rank. Returns `None` if any axis is not divisible.
    pub fn downsampled(&self, factor: usize, rank: usize) -> Option<Spatial> {
        let d = if rank == 3 {
            if !self.d.is_multiple_of(factor) {
                return None;
            }
            self.d / factor
        } else {
            self.d
        };
        if !self.h.is_multiple_of(factor) || !self.w.is_multiple_of(factor) {
            return None;
        }
        Some(Spatial {
            d,
            h: self.h / factor,
            w: self.w / factor,
        })
    }

    pub fn upsampled(&self, factor: usize, rank: usize) -> Spatial {
        Spatial {
            d: if rank == 3 { self.d * factor } else { self.d },
            h: self.h * factor,
            w: self.w * factor,
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.w;
        let y = (idx / self.w) % self.h;
        let z = idx / (self.w * self.h);
        (z, y, x)
    }
}

impl fmt::Display for Spatial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.d == 1 {
            write!(f, "{}x{}", self.h, self.w)
        } else {
            write!(f, "{}x{}x{}", self.d, self.h, self.w)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    spatial: Spatial,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, spatial: Spatial) -> Self {
        Self {
            channels,
            spatial,
            data: vec![0.0; channels * spatial.volume()],
        }
    }

    pub fn filled(channels: usize, spatial: Spatial, value: f64) -> Self {
        Self {
            channels,
            spatial,
            data: vec![value; channels * spatial.volume()],
        }
    }

    pub fn from_vec(channels: usize, spatial: Spatial, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * spatial.volume() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} channels of {}",
                data.len(),
                channels,
                spatial
            )));
        }
        Ok(Self {
            channels,
            spatial,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> Spatial {
        self.spatial
    }

    pub fn pixels(&self) -> usize {
        self.spatial.volume()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize) -> f64 {
        self.data[c * self.pixels() + i]
    }

    /// The feature vector across channels at pixel `i`.
    pub fn pixel_vector(&self, i: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.channels).map(|c| self.data[c * n + i]).collect()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.spatial == other.spatial
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Stacks the channels of `parts` in order.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let spatial = parts[0].spatial;
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * spatial.volume());
        for p in parts {
            debug_assert_eq!(p.spatial, spatial);
            data.extend_from_slice(&p.data);
        }
        Tensor {
            channels,
            spatial,
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        let n = self.pixels();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            out.push(Tensor {
                channels: c,
                spatial: self.spatial,
                data: self.data[start * n..(start + c) * n].to_vec(),
            });
            start += c;
        }
        out
    }

    /// Channel index of the maximum at every pixel; ties go to the lower index.
    pub fn argmax_channels(&self) -> Vec<u8> {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_v = self.data[i];
                for c in 1..self.channels {
                    let v = self.data[c * n + i];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}
