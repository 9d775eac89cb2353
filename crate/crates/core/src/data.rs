//! Samples, synthetic dataset generation, annotation I/O and crop augmentation.
//!
//! Dataset directory layout:
//!
//! ```text
//! <root>/images/<id>.png     8-bit RGB images
//! <root>/annotations.csv     header `image,x,y`, one dot per row
//! <root>/manifest            `key = value` lines: generating config and seed
//! ```
//!
//! Dot coordinates are pixels with the origin at the top-left corner, `x` the
//! column and `y` the row.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub dots: Vec<Dot>,
}

impl Sample {
    pub fn count(&self) -> usize {
        self.dots.len()
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Placement {
    #[default]
    Uniform,
    DiagonalBand,
    AntiDiagonalBand,
    RowBand,
    ColumnBand,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "uniform" => Ok(Placement::Uniform),
            "diagonalband" | "diagonal" => Ok(Placement::DiagonalBand),
            "antidiagonalband" | "antidiagonal" => Ok(Placement::AntiDiagonalBand),
            "rowband" | "row" => Ok(Placement::RowBand),
            "columnband" | "column" => Ok(Placement::ColumnBand),
            _ => Err(Error::invalid(format!("unknown placement `{s}`"))),
        }
    }
}

/// Parameters of the synthetic blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Visible blob radius in pixels; the Gaussian profile uses `sigma = radius / 2`.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Peak blend weight of the blob colour, 0..=255.
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Standard deviation of per-pixel Gaussian noise, in 8-bit levels.
    pub noise: f64,
    pub placement: Placement,
    /// Perpendicular distance between band centre lines, pixels.
    pub band_spacing: f64,
    /// Half width of each band, pixels.
    pub band_halfwidth: f64,
    /// Minimum distance of every dot from the image border, pixels.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            count_min: 0,
            count_max: 15,
            radius_min: 3.0,
            radius_max: 5.0,
            intensity_min: 160.0,
            intensity_max: 230.0,
            noise: 6.0,
            placement: Placement::Uniform,
            band_spacing: 48.0,
            band_halfwidth: 8.0,
            margin: 0.0,
            seed: 0,
        }
    }
}

const BACKGROUND: [f64; 3] = [72.0, 58.0, 40.0];
const BLOB: [f64; 3] = [235.0, 214.0, 120.0];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max {
            return Err(Error::invalid("count_min exceeds count_max"));
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(8) || !self.height.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.width, self.height
            )));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::invalid("blob radius range must satisfy 0 < min <= max"));
        }
        if !(0.0..=255.0).contains(&self.intensity_min)
            || !(0.0..=255.0).contains(&self.intensity_max)
            || self.intensity_min > self.intensity_max
        {
            return Err(Error::invalid("blob intensity range must lie in 0..=255 with min <= max"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise level must be nonnegative"));
        }
        if 2.0 * self.margin >= self.width.min(self.height) as f64 || self.margin < 0.0 {
            return Err(Error::invalid("margin leaves no room for dots"));
        }
        if self.placement != Placement::Uniform
            && !(self.band_spacing > 0.0 && self.band_halfwidth > 0.0)
        {
            return Err(Error::invalid("band placements need positive spacing and half width"));
        }
        Ok(())
    }

    /// Whether `(x, y)` lies inside the band region of the configured placement.
    pub fn in_band(&self, x: f64, y: f64) -> bool {
        let u = match self.placement {
            Placement::Uniform => return true,
            Placement::RowBand => y,
            Placement::ColumnBand => x,
            Placement::DiagonalBand => (x - y) / std::f64::consts::SQRT_2,
            Placement::AntiDiagonalBand => (x + y) / std::f64::consts::SQRT_2,
        };
        let offset = u - self.band_spacing * (u / self.band_spacing).round();
        offset.abs() <= self.band_halfwidth
    }

    /// `key = value` lines describing this config, in field order.
    pub fn manifest(&self, n: usize) -> String {
        let mut out = format!("n = {n}\n");
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(self) {
            for (k, v) in map {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    fn sample_dot(&self, rng: &mut ChaCha8Rng) -> Result<Dot> {
        let (w, h, m) = (self.width as f64, self.height as f64, self.margin);
        for _ in 0..100_000 {
            let x = rng.gen_range(m..w - m);
            let y = rng.gen_range(m..h - m);
            if self.in_band(x, y) {
                return Ok(Dot { x, y });
            }
        }
        Err(Error::invalid("band region too small to place dots"))
    }

    fn render(&self, rng: &mut ChaCha8Rng, dots: &[Dot]) -> RgbImage {
        let (w, h) = (self.width, self.height);
        let mut acc = vec![0.0f64; w * h];
        for d in dots {
            let radius = rng.gen_range(self.radius_min..=self.radius_max);
            let peak = rng.gen_range(self.intensity_min..=self.intensity_max) / 255.0;
            let sigma = radius / 2.0;
            let reach = (3.0 * sigma).ceil() as isize;
            let (cx, cy) = (d.x.floor() as isize, d.y.floor() as isize);
            for yy in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
                for xx in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                    let dx = xx as f64 + 0.5 - d.x;
                    let dy = yy as f64 + 0.5 - d.y;
                    let p = peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let a = &mut acc[yy as usize * w + xx as usize];
                    *a = 1.0 - (1.0 - *a) * (1.0 - p);
                }
            }
        }
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise level");
        let mut img = RgbImage::new(w as u32, h as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            let a = acc[i];
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let mut v = BACKGROUND[c] * (1.0 - a) + BLOB[c] * a;
                if self.noise > 0.0 {
                    v += noise.sample(rng);
                }
                rgb[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            *px = Rgb(rgb);
        }
        img
    }
}

/// Generate `n` samples. Sample `i` draws from its own stream `(seed, i)`.
pub fn gen_synthetic(cfg: &SynthConfig, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let count = rng.gen_range(cfg.count_min..=cfg.count_max);
            let dots = (0..count)
                .map(|_| cfg.sample_dot(&mut rng))
                .collect::<Result<Vec<_>>>()?;
            let image = cfg.render(&mut rng, &dots);
            Ok(Sample {
                id: format!("img_{i:05}.png"),
                image,
                dots,
            })
        })
        .collect()
}

/// Only zero-background images: no blobs and no noise.
pub fn blank_sample(id: &str, width: usize, height: usize) -> Sample {
    Sample {
        id: id.to_string(),
        image: RgbImage::new(width as u32, height as u32),
        dots: Vec::new(),
    }
}

/// Read `image,x,y` dot rows or `image,x1,y1,x2,y2` box rows (converted to centres).
pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, Vec<Dot>>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(|s| s.to_ascii_lowercase())
        .collect();
    let boxes = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["image", "x", "y"] => false,
        ["image", "x1", "y1", "x2", "y2"] => true,
        [] => return Ok(BTreeMap::new()),
        other => {
            return Err(parse_err(
                1,
                format!("expected header `image,x,y` or `image,x1,y1,x2,y2`, got `{}`", other.join(",")),
            ))
        }
    };
    let mut out: BTreeMap<String, Vec<Dot>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let want = if boxes { 5 } else { 3 };
        if record.len() != want {
            return Err(parse_err(line, format!("expected {want} fields, got {}", record.len())));
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("`{}` is not a number", &record[i])))
        };
        let dot = if boxes {
            let (x1, y1, x2, y2) = (num(1)?, num(2)?, num(3)?, num(4)?);
            Dot {
                x: (x1 + x2) / 2.0,
                y: (y1 + y2) / 2.0,
            }
        } else {
            Dot { x: num(1)?, y: num(2)? }
        };
        out.entry(record[0].to_string()).or_default().push(dot);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut text = String::from("image,x,y\n");
    for s in samples {
        for d in &s.dots {
            text.push_str(&format!("{},{},{}\n", s.id, d.x, d.y));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the `images/`, `annotations.csv`, `manifest` layout under `root`.
pub fn write_dataset(root: &Path, samples: &[Sample], manifest: &str) -> Result<()> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in samples {
        let p = images.join(&s.id);
        s.image.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
    }
    write_annotations(&root.join("annotations.csv"), samples)?;
    let m = root.join("manifest");
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb8())
}

/// Load every `images/*.png` (sorted by name) with its dots.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = root.join("images");
    let mut names: Vec<String> = fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    let ann_path = root.join("annotations.csv");
    let mut annotations = if ann_path.exists() {
        load_annotations(&ann_path)?
    } else {
        BTreeMap::new()
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let p = images.join(&name);
        let image = load_image(&p)?;
        let dots = annotations.remove(&name).unwrap_or_default();
        let (w, h) = (image.width() as f64, image.height() as f64);
        if let Some(d) = dots.iter().find(|d| !(d.x >= 0.0 && d.x < w && d.y >= 0.0 && d.y < h)) {
            return Err(Error::invalid(format!(
                "dot ({}, {}) of {name} lies outside the {w}x{h} image",
                d.x, d.y
            )));
        }
        out.push(Sample { id: name, image, dots });
    }
    Ok(out)
}

/// Crop a `size × size` window with top-left corner `(x0, y0)`.
pub fn crop_at(sample: &Sample, x0: usize, y0: usize, size: usize) -> Result<Sample> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::invalid(format!("crop size {size} must be a positive multiple of 8")));
    }
    if x0 + size > sample.width() || y0 + size > sample.height() {
        return Err(Error::invalid(format!(
            "crop {size}x{size} at ({x0}, {y0}) exceeds {}x{} image",
            sample.width(),
            sample.height()
        )));
    }
    let image = image::imageops::crop_imm(&sample.image, x0 as u32, y0 as u32, size as u32, size as u32).to_image();
    let (fx, fy, fs) = (x0 as f64, y0 as f64, size as f64);
    let dots = sample
        .dots
        .iter()
        .filter(|d| d.x >= fx && d.x < fx + fs && d.y >= fy && d.y < fy + fs)
        .map(|d| Dot { x: d.x - fx, y: d.y - fy })
        .collect();
    Ok(Sample {
        id: sample.id.clone(),
        image,
        dots,
    })
}

/// Uniformly random `size × size` crop, deterministic in `seed`.
pub fn crop_augment(sample: &Sample, size: usize, seed: u64) -> Result<Sample> {
    if size > sample.width() || size > sample.height() {
        return Err(Error::invalid(format!(
            "crop size {size} exceeds {}x{} image",
            sample.width(),
            sample.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.gen_range(0..=sample.width() - size);
    let y0 = rng.gen_range(0..=sample.height() - size);
    crop_at(sample, x0, y0, size)
}

/// How external images are brought to the network's working resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResizeMode {
    /// Resize to exactly `width × height`.
    Fixed { width: usize, height: usize },
    /// Scale both axes by a ratio; the result is floored to a multiple of 8.
    Ratio(f64),
}

pub fn resize_sample(sample: &Sample, mode: ResizeMode) -> Result<Sample> {
    let (w, h) = match mode {
        ResizeMode::Fixed { width, height } => (width, height),
        ResizeMode::Ratio(r) => {
            if !(r > 0.0) {
                return Err(Error::invalid("resize ratio must be positive"));
            }
            let f = |v: usize| ((v as f64 * r) as usize) / 8 * 8;
            (f(sample.width()), f(sample.height()))
        }
    };
    if w == 0 || h == 0 {
        return Err(Error::invalid("resize target is empty"));
    }
    let image = image::imageops::resize(&sample.image, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let (sx, sy) = (w as f64 / sample.width() as f64, h as f64 / sample.height() as f64);
    let dots = sample
        .dots
        .iter()
        .map(|d| Dot {
            x: (d.x * sx).min(w as f64 - 1e-9),
            y: (d.y * sy).min(h as f64 - 1e-9),
        })
        .collect();
    Ok(Sample {
        id: sample.id.clone(),
        image,
        dots,
    })
}

/// Extend the bottom and right edges by mirror reflection (edge pixel not
/// repeated) up to the next multiple of `multiple`. Returns the padding added.
pub fn pad_reflect(img: &RgbImage, multiple: usize) -> Result<(RgbImage, usize, usize)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let tw = w.div_ceil(multiple) * multiple;
    let th = h.div_ceil(multiple) * multiple;
    if (tw > w && tw - w >= w) || (th > h && th - h >= h) {
        return Err(Error::invalid(format!("image {w}x{h} too small to reflect-pad to {tw}x{th}")));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let out = RgbImage::from_fn(tw as u32, th as u32, |x, y| {
        *img.get_pixel(reflect(x as usize, w) as u32, reflect(y as usize, h) as u32)
    });
    Ok((out, th - h, tw - w))
}
