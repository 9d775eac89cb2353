//! Counter and normalizer.
//!
//! The counter predicts one nonnegative count per `r × r` window anchored on
//! the stride-`s` lattice, giving a redundant `(H/s) × (W/s)` map whenever
//! `r > s`. Windows near the bottom and right borders are clipped to the image.
//! The normalizer spreads each window count uniformly over the window's
//! pixels and divides by how many windows cover each pixel, so the resulting
//! `H × W` map sums to the image count.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::data::Dot;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{impl_parameterized, silu, silu_grad, Linear};

/// Window size, stride and image size shared by every count-map operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CountGeometry {
    pub height: usize,
    pub width: usize,
    pub r: usize,
    pub s: usize,
}

impl CountGeometry {
    pub fn new(height: usize, width: usize, r: usize, s: usize) -> Result<Self> {
        if s == 0 || r == 0 {
            return Err(Error::invalid("window size and stride must be positive"));
        }
        if r < s {
            return Err(Error::invalid(format!(
                "window size r={r} is smaller than stride s={s}; r >= s is required"
            )));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "image {height}x{width} is not a positive multiple of stride {s}"
            )));
        }
        Ok(Self { height, width, r, s })
    }

    pub fn rows(&self) -> usize {
        self.height / self.s
    }

    pub fn cols(&self) -> usize {
        self.width / self.s
    }

    /// Pixel span `[start, end)` of window index `a` along an axis of length `len`.
    fn span(&self, a: usize, len: usize) -> (usize, usize) {
        let start = a * self.s;
        (start, (start + self.r).min(len))
    }

    /// Number of windows covering each coordinate along one axis.
    fn axis_coverage(&self, len: usize) -> Vec<u32> {
        let mut cov = vec![0u32; len];
        for a in 0..len / self.s {
            let (lo, hi) = self.span(a, len);
            for c in &mut cov[lo..hi] {
                *c += 1;
            }
        }
        cov
    }
}

/// One predicted count per window, `rows × cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantCountMap {
    pub geometry: CountGeometry,
    pub values: Vec<f64>,
}

impl RedundantCountMap {
    pub fn new(geometry: CountGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.rows() * geometry.cols() {
            return Err(Error::invalid(format!(
                "count map has {} values, geometry expects {}x{}",
                values.len(),
                geometry.rows(),
                geometry.cols()
            )));
        }
        Ok(Self { geometry, values })
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.geometry.cols() + b]
    }
}

/// Pixel-level count density; sums to the image count.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCountMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Number of windows containing each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u32>,
}

impl CoverageMap {
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.values[y * self.width + x]
    }
}

pub fn coverage_map(height: usize, width: usize, r: usize, s: usize) -> Result<CoverageMap> {
    let g = CountGeometry::new(height, width, r, s)?;
    let (rows, cols) = (g.axis_coverage(height), g.axis_coverage(width));
    let mut values = Vec::with_capacity(height * width);
    for ry in &rows {
        values.extend(cols.iter().map(|cx| ry * cx));
    }
    Ok(CoverageMap {
        height,
        width,
        values,
    })
}

/// Inclusive 2D prefix sums with a zero border, `(h+1) × (w+1)`.
fn integral(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Redistribute window counts uniformly over their pixels and divide by coverage.
pub fn normalize_map(cr: &RedundantCountMap) -> NormalizedCountMap {
    let g = cr.geometry;
    let (h, w) = (g.height, g.width);
    // scatter each window's density into a difference array
    let mut diff = vec![0.0; (h + 1) * (w + 1)];
    for a in 0..g.rows() {
        let (y0, y1) = g.span(a, h);
        for b in 0..g.cols() {
            let (x0, x1) = g.span(b, w);
            let dens = cr.get(a, b) / ((y1 - y0) * (x1 - x0)) as f64;
            diff[y0 * (w + 1) + x0] += dens;
            diff[y0 * (w + 1) + x1] -= dens;
            diff[y1 * (w + 1) + x0] -= dens;
            diff[y1 * (w + 1) + x1] += dens;
        }
    }
    let (rows, cols) = (g.axis_coverage(h), g.axis_coverage(w));
    let mut values = vec![0.0; h * w];
    let mut above = vec![0.0; w + 1];
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            run += diff[y * (w + 1) + x];
            above[x] += run;
            values[y * w + x] = above[x] / (rows[y] * cols[x]) as f64;
        }
    }
    NormalizedCountMap {
        height: h,
        width: w,
        values,
    }
}

/// Gradient of a loss with respect to the redundant map, given its gradient
/// with respect to the normalized map.
pub fn normalize_map_backward(g: CountGeometry, grad_normalized: &[f64]) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let (rows, cols) = (g.axis_coverage(h), g.axis_coverage(w));
    let q: Vec<f64> = (0..h * w)
        .map(|p| grad_normalized[p] / (rows[p / w] * cols[p % w]) as f64)
        .collect();
    let s = integral(&q, h, w);
    let mut out = Vec::with_capacity(g.rows() * g.cols());
    for a in 0..g.rows() {
        let (y0, y1) = g.span(a, h);
        for b in 0..g.cols() {
            let (x0, x1) = g.span(b, w);
            let rect = s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0]
                + s[y0 * (w + 1) + x0];
            out.push(rect / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// `∂C/∂C_r(w)` for the image count `C`: how much each window contributes.
pub fn count_weights(g: CountGeometry) -> Vec<f64> {
    normalize_map_backward(g, &vec![1.0; g.height * g.width])
}

/// Sum of the normalized map.
pub fn image_count(cn: &NormalizedCountMap) -> f64 {
    cn.values.iter().sum()
}

/// Ground-truth window counts: number of dots inside each clipped window.
pub fn window_counts_from_dots(
    dots: &[Dot],
    height: usize,
    width: usize,
    r: usize,
    s: usize,
) -> Result<RedundantCountMap> {
    let g = CountGeometry::new(height, width, r, s)?;
    let mut values = vec![0.0; g.rows() * g.cols()];
    let axis = |v: f64, n_windows: usize| -> (usize, usize) {
        // windows a with a*s <= v < a*s + r
        let hi = ((v / s as f64).floor() as usize).min(n_windows - 1);
        let lo_f = ((v - r as f64) / s as f64).floor() + 1.0;
        let lo = if lo_f < 0.0 { 0 } else { lo_f as usize };
        (lo, hi)
    };
    for d in dots {
        if !(d.x >= 0.0 && d.x < width as f64 && d.y >= 0.0 && d.y < height as f64) {
            return Err(Error::invalid(format!(
                "dot ({}, {}) outside {width}x{height} image",
                d.x, d.y
            )));
        }
        let (a0, a1) = axis(d.y, g.rows());
        let (b0, b1) = axis(d.x, g.cols());
        for a in a0..=a1 {
            for b in b0..=b1 {
                values[a * g.cols() + b] += 1.0;
            }
        }
    }
    RedundantCountMap::new(g, values)
}

/// Two 1×1 convolutions with SiLU between and a ReLU clamp on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct CountHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl_parameterized!(CountHead { hidden, output });

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    pre_hidden: Vec<f64>,
    act_hidden: Vec<f64>,
    pre_out: Vec<f64>,
}

impl CountHead {
    pub fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(channels, hidden, true, rng),
            output: Linear::new(hidden, 1, true, rng),
        }
    }

    pub fn forward(&self, features: &FeatureGrid) -> (Vec<f64>, HeadCache) {
        let pre_hidden = self.hidden.forward(&features.data);
        let act_hidden: Vec<f64> = pre_hidden.iter().map(|&v| silu(v)).collect();
        let pre_out = self.output.forward(&act_hidden);
        let counts = pre_out.iter().map(|&v| v.max(0.0)).collect();
        (
            counts,
            HeadCache {
                input: features.data.clone(),
                pre_hidden,
                act_hidden,
                pre_out,
            },
        )
    }

    /// Returns the gradient with respect to the input features.
    pub fn backward(&mut self, cache: &HeadCache, grad_counts: &[f64]) -> Vec<f64> {
        let g_out: Vec<f64> = grad_counts
            .iter()
            .zip(&cache.pre_out)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect();
        let g_act = self.output.backward(&cache.act_hidden, &g_out);
        let g_pre: Vec<f64> = g_act
            .iter()
            .zip(&cache.pre_hidden)
            .map(|(g, &z)| g * silu_grad(z))
            .collect();
        self.hidden.backward(&cache.input, &g_pre)
    }
}

/// Predict the redundant map for fused features covering an `H × W` image.
pub fn predict_redundant_map(
    features: &FeatureGrid,
    head: &CountHead,
    geometry: CountGeometry,
) -> Result<RedundantCountMap> {
    if features.height != geometry.rows() || features.width != geometry.cols() {
        return Err(Error::invalid(format!(
            "features {}x{} do not match count map {}x{}",
            features.height,
            features.width,
            geometry.rows(),
            geometry.cols()
        )));
    }
    if features.channels != head.hidden.input_dim() {
        return Err(Error::invalid(format!(
            "features have {} channels, head expects {}",
            features.channels,
            head.hidden.input_dim()
        )));
    }
    RedundantCountMap::new(geometry, head.forward(features).0)
}

impl NormalizedCountMap {
    /// One row per line, values separated by single spaces, ten decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 14);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.10}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = 0;
        let mut height = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Result<Vec<f64>> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("map line {}: {e}", i + 1)))
                })
                .collect();
            let row = row?;
            if height == 0 {
                width = row.len();
            } else if row.len() != width {
                return Err(Error::invalid(format!("map line {} has ragged width", i + 1)));
            }
            values.extend(row);
            height += 1;
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// 16-bit grayscale PNG with `pixel = round(value / max_value * 65535)`.
    /// `max_value` is written as `max_value = <f64>` to `<path>.meta`; returns it.
    pub fn write_png16(&self, path: &Path) -> Result<f64> {
        let max_value = self.values.iter().cloned().fold(0.0, f64::max);
        let pixels: Vec<u16> = self
            .values
            .iter()
            .map(|&v| {
                if max_value > 0.0 {
                    (v.max(0.0) / max_value * 65535.0).round() as u16
                } else {
                    0
                }
            })
            .collect();
        let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, pixels)
                .ok_or_else(|| Error::invalid("map buffer size mismatch"))?;
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let meta = meta_path(path);
        let mut f = std::fs::File::create(&meta).map_err(|e| Error::io(&meta, e))?;
        writeln!(f, "max_value = {max_value:e}").map_err(|e| Error::io(&meta, e))?;
        Ok(max_value)
    }

    pub fn read_png16(path: &Path) -> Result<Self> {
        let meta = meta_path(path);
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let max_value: f64 = text
            .trim()
            .strip_prefix("max_value = ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid(format!("malformed map metadata in {}", meta.display())))?;
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .into_luma16();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            values: img
                .into_raw()
                .into_iter()
                .map(|p| p as f64 / 65535.0 * max_value)
                .collect(),
        })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}
