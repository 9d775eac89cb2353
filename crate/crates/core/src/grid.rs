//! Dense feature containers shared by the backbone, fusion and head.

use crate::error::{Error, Result};

/// A `height × width × channels` grid of features stored row-major by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "grid data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Swap rows and columns, keeping channel vectors intact.
    pub fn transpose(&self) -> FeatureGrid {
        let mut out = FeatureGrid::zeros(self.width, self.height, self.channels);
        for i in 0..self.height {
            for j in 0..self.width {
                out.cell_mut(j, i).copy_from_slice(self.cell(i, j));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &FeatureGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A 1D sequence of channel vectors, the unit consumed by the state-space scans.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureSeq {
    pub fn zeros(len: usize, channels: usize) -> Self {
        Self {
            len,
            channels,
            data: vec![0.0; len * channels],
        }
    }

    pub fn from_vec(len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * channels {
            return Err(Error::invalid(format!(
                "sequence data length {} does not match {len}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            len,
            channels,
            data,
        })
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// The same sequence traversed back to front.
    pub fn reversed(&self) -> FeatureSeq {
        let mut out = FeatureSeq::zeros(self.len, self.channels);
        for t in 0..self.len {
            out.step_mut(self.len - 1 - t).copy_from_slice(self.step(t));
        }
        out
    }

    pub fn add_assign(&mut self, other: &FeatureSeq) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
