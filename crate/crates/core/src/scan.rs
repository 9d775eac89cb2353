//! Scan orders turning a 2D patch grid into a 1D sequence.
//!
//! Cells are addressed row-major: cell `(i, j)` has index `i * width + j`.
//! Diagonal orders walk lines of constant `j - i` from `-(height - 1)` up to
//! `width - 1`; anti-diagonal orders walk lines of constant `i + j` upward.
//! Inside a line cells are taken by ascending row. A backward scan is the
//! element-wise reversal of the forward array.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, FeatureSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Horizontal,
        Direction::Vertical,
        Direction::Diagonal,
        Direction::AntiDiagonal,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Direction::Horizontal => "H",
            Direction::Vertical => "V",
            Direction::Diagonal => "D",
            Direction::AntiDiagonal => "A",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "h" | "horizontal" => Ok(Direction::Horizontal),
            "v" | "vertical" => Ok(Direction::Vertical),
            "d" | "diagonal" => Ok(Direction::Diagonal),
            "a" | "antidiagonal" | "anti-diagonal" | "anti_diagonal" => Ok(Direction::AntiDiagonal),
            other => Err(Error::invalid(format!("unknown scan direction `{other}`"))),
        }
    }
}

/// Parse a direction list such as `"H,V,D,A"` or `"HVDA"`.
pub fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    let tokens: Vec<String> = if s.contains(',') {
        s.split(',').map(|t| t.trim().to_string()).collect()
    } else {
        s.trim().chars().map(|c| c.to_string()).collect()
    };
    let mut out = Vec::new();
    for tok in tokens.iter().filter(|t| !t.is_empty()) {
        let d: Direction = tok.parse()?;
        if !out.contains(&d) {
            out.push(d);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("direction list is empty"));
    }
    Ok(out)
}

/// An explicit permutation of grid cells together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub direction: Direction,
    pub backward: bool,
    pub height: usize,
    pub width: usize,
    /// `forward[k]` is the row-major index of the cell visited at step `k`.
    pub forward: Vec<usize>,
    /// `inverse[cell]` is the step at which `cell` is visited.
    pub inverse: Vec<usize>,
}

pub fn build_order(direction: Direction, height: usize, width: usize) -> Result<ScanOrder> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "scan grid must be non-empty, got {height}x{width}"
        )));
    }
    let n = height * width;
    let mut forward = Vec::with_capacity(n);
    match direction {
        Direction::Horizontal => forward.extend(0..n),
        Direction::Vertical => {
            for j in 0..width {
                for i in 0..height {
                    forward.push(i * width + j);
                }
            }
        }
        Direction::Diagonal => {
            // line index d = j - i
            for d in -(height as isize - 1)..=(width as isize - 1) {
                for i in 0..height {
                    let j = i as isize + d;
                    if j >= 0 && (j as usize) < width {
                        forward.push(i * width + j as usize);
                    }
                }
            }
        }
        Direction::AntiDiagonal => {
            for s in 0..(height + width - 1) {
                for i in 0..height {
                    if s >= i && s - i < width {
                        forward.push(i * width + (s - i));
                    }
                }
            }
        }
    }
    Ok(ScanOrder::from_forward(direction, false, height, width, forward))
}

impl ScanOrder {
    fn from_forward(
        direction: Direction,
        backward: bool,
        height: usize,
        width: usize,
        forward: Vec<usize>,
    ) -> Self {
        let mut inverse = vec![0; forward.len()];
        for (k, &cell) in forward.iter().enumerate() {
            inverse[cell] = k;
        }
        Self {
            direction,
            backward,
            height,
            width,
            forward,
            inverse,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// The opposite orientation of the same traversal.
    pub fn reversed(&self) -> ScanOrder {
        let forward: Vec<usize> = self.forward.iter().rev().copied().collect();
        ScanOrder::from_forward(self.direction, !self.backward, self.height, self.width, forward)
    }

    /// `(k, row, col)` triples, one per line, for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,row,col\n");
        for (k, &cell) in self.forward.iter().enumerate() {
            out.push_str(&format!("{k},{},{}\n", cell / self.width, cell % self.width));
        }
        out
    }

    fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        if height != self.height || width != self.width {
            return Err(Error::invalid(format!(
                "grid {height}x{width} does not match scan order {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Flatten `grid` so that step `k` holds the features of cell `order.forward[k]`.
pub fn apply_order(grid: &FeatureGrid, order: &ScanOrder) -> Result<FeatureSeq> {
    order.check_grid(grid.height, grid.width)?;
    let c = grid.channels;
    let mut data = Vec::with_capacity(grid.data.len());
    for &cell in &order.forward {
        data.extend_from_slice(&grid.data[cell * c..(cell + 1) * c]);
    }
    Ok(FeatureSeq {
        len: order.len(),
        channels: c,
        data,
    })
}

/// Scatter a scanned sequence back onto the grid; inverse of [`apply_order`].
pub fn restore_grid(seq: &FeatureSeq, order: &ScanOrder) -> Result<FeatureGrid> {
    if seq.len != order.len() {
        return Err(Error::invalid(format!(
            "sequence length {} does not match scan order length {}",
            seq.len,
            order.len()
        )));
    }
    let c = seq.channels;
    let mut grid = FeatureGrid::zeros(order.height, order.width, c);
    for (k, &cell) in order.forward.iter().enumerate() {
        grid.data[cell * c..(cell + 1) * c].copy_from_slice(seq.step(k));
    }
    Ok(grid)
}
