//! The full counting network and its checkpoint format.
//!
//! `image → branches → adaptive fusion (+ β·CNN branch) → count head →
//! redundant count map → image count`.
//!
//! Checkpoints are JSON documents:
//!
//! ```text
//! {
//!   "format": "ssmcount-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "train_count_mean": 7.5 | null,
//!   "params": [ { "name": "branches.0.embed.proj.weight", "shape": [12, 16], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameters appear in the model's fixed visiting order. Batch-norm running
//! statistics are stored alongside the trainable arrays.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{group_directions, image_to_grid, Branch, BranchCache, BranchDims, ExpertGrouping, OUTPUT_STRIDE};
use crate::count_head::{count_weights, CountGeometry, CountHead, HeadCache, RedundantCountMap};
use crate::data::pad_reflect;
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_global, fuse_global_backward, AdaptiveFusion, CnnBranch, CnnCache, FusionCache, FusionMode, FusionWeights,
};
use crate::grid::FeatureGrid;
use crate::nn::{impl_parameterized, Parameterized};
use crate::scan::Direction;

pub const CHECKPOINT_FORMAT: &str = "ssmcount-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            _ => Err(Error::invalid(format!("unknown preset `{s}` (tiny, small, base)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub directions: Vec<Direction>,
    pub grouping: ExpertGrouping,
    pub embed_dim: usize,
    pub depths: [usize; 3],
    pub expand: usize,
    pub state_dim: usize,
    pub d_skip: bool,
    pub head_hidden: usize,
    pub adaptive_fusion: bool,
    pub fusion_mode: FusionMode,
    pub cnn_branch: bool,
    pub beta: f64,
    pub r: usize,
    pub s: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (embed_dim, depths, expand, state_dim, head_hidden) = match p {
            Preset::Tiny => (8, [1, 1, 1], 1, 4, 16),
            Preset::Small => (16, [1, 1, 1], 1, 4, 32),
            Preset::Base => (48, [2, 2, 2], 2, 16, 64),
        };
        Self {
            directions: Direction::ALL.to_vec(),
            grouping: ExpertGrouping::Four,
            embed_dim,
            depths,
            expand,
            state_dim,
            d_skip: true,
            head_hidden,
            adaptive_fusion: true,
            fusion_mode: FusionMode::Position,
            cnn_branch: true,
            beta: 1.0,
            r: 64,
            s: OUTPUT_STRIDE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::invalid("at least one scan direction is required"));
        }
        let mut seen = self.directions.clone();
        seen.sort_by_key(|d| *d as u8);
        seen.dedup();
        if seen.len() != self.directions.len() {
            return Err(Error::invalid("scan directions must not repeat"));
        }
        if self.embed_dim == 0 || self.expand == 0 || self.state_dim == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("model widths must be positive"));
        }
        if self.s != OUTPUT_STRIDE {
            return Err(Error::invalid(format!(
                "count-map stride must equal the backbone output stride {OUTPUT_STRIDE}, got {}",
                self.s
            )));
        }
        if self.r < self.s {
            return Err(Error::invalid(format!("window size r={} must be at least s={}", self.r, self.s)));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite"));
        }
        Ok(())
    }

    pub fn branch_dims(&self) -> BranchDims {
        BranchDims {
            embed_dim: self.embed_dim,
            depths: self.depths,
            expand: self.expand,
            state_dim: self.state_dim,
            d_skip: self.d_skip,
        }
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<CountGeometry> {
        CountGeometry::new(height, width, self.r, self.s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    pub config: ModelConfig,
    pub branches: Vec<Branch>,
    pub fusion: Option<AdaptiveFusion>,
    pub cnn: Option<CnnBranch>,
    pub head: CountHead,
}

impl_parameterized!(CountModel {
    branches,
    fusion,
    cnn,
    head
});

/// Per-image outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub map: RedundantCountMap,
    pub count: f64,
    pub fusion_weights: FusionWeights,
}

#[derive(Debug, Clone)]
struct ImageCache {
    branches: Vec<BranchCache>,
    features: Vec<FeatureGrid>,
    fusion: Option<FusionCache>,
    head: HeadCache,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    images: Vec<ImageCache>,
    cnn: Option<CnnCache>,
    count_weights: Vec<f64>,
}

impl CountModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let groups = group_directions(&config.directions, config.grouping)?;
        let dims = config.branch_dims();
        let branches: Vec<Branch> = groups.iter().map(|g| Branch::new(g, dims, &mut rng)).collect();
        let c = dims.out_channels();
        let fusion = (config.adaptive_fusion && branches.len() > 1)
            .then(|| AdaptiveFusion::new(branches.len(), c, config.fusion_mode, &mut rng));
        let cnn = config.cnn_branch.then(|| CnnBranch::new(dims.stage_channels(), &mut rng));
        let head = CountHead::new(c, config.head_hidden, &mut rng);
        Ok(Self {
            config,
            branches,
            fusion,
            cnn,
            head,
        })
    }

    /// Short names of each branch, e.g. `H`, `HV`.
    pub fn branch_names(&self) -> Vec<String> {
        self.branches
            .iter()
            .map(|b| b.directions.iter().map(|d| d.short_name()).collect())
            .collect()
    }

    /// Forward a batch of equally sized images. `train` selects batch
    /// statistics in the local branch.
    pub fn forward(&self, images: &[FeatureGrid], train: bool) -> Result<(Vec<Prediction>, ModelCache)> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        if images.iter().any(|im| im.height != first.height || im.width != first.width) {
            return Err(Error::invalid("images in a batch must share one size"));
        }
        let geometry = self.config.geometry(first.height, first.width)?;
        let cw = count_weights(geometry);
        let (locals, cnn_cache) = match &self.cnn {
            Some(cnn) => {
                let (l, c) = cnn.forward(images, train)?;
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        let k = self.branches.len();
        let mut preds = Vec::with_capacity(images.len());
        let mut caches = Vec::with_capacity(images.len());
        for (i, image) in images.iter().enumerate() {
            let mut features = Vec::with_capacity(k);
            let mut branch_caches = Vec::with_capacity(k);
            for b in &self.branches {
                let (f, c) = b.forward(image)?;
                features.push(f);
                branch_caches.push(c);
            }
            let (weights, fusion_cache) = match &self.fusion {
                Some(f) => {
                    let (w, c) = f.forward(&features)?;
                    (w, Some(c))
                }
                None => (FusionWeights::uniform(k), None),
            };
            let mut fused = fuse_global(&features, &weights)?;
            if let Some(l) = &locals {
                for (a, b) in fused.data.iter_mut().zip(&l[i].data) {
                    *a += self.config.beta * b;
                }
            }
            if !fused.is_finite() {
                return Err(Error::NumericDomain("non-finite fused features".into()));
            }
            let (values, head_cache) = self.head.forward(&fused);
            let count = values.iter().zip(&cw).map(|(a, b)| a * b).sum();
            preds.push(Prediction {
                map: RedundantCountMap::new(geometry, values)?,
                count,
                fusion_weights: weights,
            });
            caches.push(ImageCache {
                branches: branch_caches,
                features,
                fusion: fusion_cache,
                head: head_cache,
            });
        }
        Ok((
            preds,
            ModelCache {
                images: caches,
                cnn: cnn_cache,
                count_weights: cw,
            },
        ))
    }

    /// Accumulate gradients given `∂L/∂count` per image and optionally
    /// `∂L/∂C_r` per image for window-level terms.
    pub fn backward(&mut self, preds: &[Prediction], cache: &ModelCache, grad_counts: &[f64], grad_maps: Option<&[Vec<f64>]>) {
        let k = self.branches.len();
        let mut grad_locals = Vec::with_capacity(preds.len());
        for (i, ic) in cache.images.iter().enumerate() {
            let mut g_map: Vec<f64> = cache.count_weights.iter().map(|w| w * grad_counts[i]).collect();
            if let Some(gm) = grad_maps {
                for (a, b) in g_map.iter_mut().zip(&gm[i]) {
                    *a += b;
                }
            }
            let gf = self.head.backward(&ic.head, &g_map);
            let f0 = &ic.features[0];
            let g_fused = FeatureGrid {
                height: f0.height,
                width: f0.width,
                channels: f0.channels,
                data: gf,
            };
            let mut g_branches: Vec<FeatureGrid> =
                (0..k).map(|_| FeatureGrid::zeros(f0.height, f0.width, f0.channels)).collect();
            let g_weights = fuse_global_backward(&ic.features, &preds[i].fusion_weights, &g_fused, &mut g_branches);
            if let (Some(f), Some(fc)) = (&mut self.fusion, &ic.fusion) {
                f.backward(fc, &g_weights, &mut g_branches);
            }
            for ((b, bc), g) in self.branches.iter_mut().zip(&ic.branches).zip(&g_branches) {
                b.backward(bc, g);
            }
            let mut gl = g_fused;
            gl.data.iter_mut().for_each(|v| *v *= self.config.beta);
            grad_locals.push(gl);
        }
        if let (Some(cnn), Some(cc)) = (&mut self.cnn, &cache.cnn) {
            cnn.backward(cc, &grad_locals);
        }
    }

    pub fn update_running_stats(&mut self, cache: &ModelCache) {
        if let (Some(cnn), Some(cc)) = (&mut self.cnn, &cache.cnn) {
            cnn.update_running_stats(cc);
        }
    }

    /// Recompute batch-norm running statistics over `images`.
    pub fn recalibrate(&mut self, images: &[FeatureGrid]) {
        if let Some(cnn) = &mut self.cnn {
            cnn.recalibrate(images);
        }
    }

    /// Inference on one image already sized to a multiple of 8.
    pub fn predict(&self, image: &RgbImage) -> Result<Prediction> {
        let grid = image_to_grid(image);
        Ok(self.forward(std::slice::from_ref(&grid), false)?.0.remove(0))
    }

    pub fn to_checkpoint(&self, train_count_mean: Option<f64>) -> Checkpoint {
        let mut params = Vec::new();
        self.visit("", &mut |name, p| {
            params.push(NamedArray {
                name: name.to_string(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            train_count_mean,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint {
                name: "format".into(),
                message: format!("expected `{CHECKPOINT_FORMAT}`, found `{}`", ck.format),
            });
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                name: "version".into(),
                message: format!("unsupported version {}", ck.version),
            });
        }
        let mut model = CountModel::new(ck.config.clone())?;
        let mut by_name: HashMap<&str, &NamedArray> = ck.params.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut err = None;
        model.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => {
                    err = Some(Error::Checkpoint {
                        name: name.into(),
                        message: "missing from checkpoint".into(),
                    })
                }
                Some(a) if a.shape != p.shape || a.data.len() != p.len() => {
                    err = Some(Error::Checkpoint {
                        name: name.into(),
                        message: format!("shape {:?} does not match model shape {:?}", a.shape, p.shape),
                    })
                }
                Some(a) => p.value.copy_from_slice(&a.data),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint {
                name: extra.to_string(),
                message: "not a parameter of the configured model".into(),
            });
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub train_count_mean: Option<f64>,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            name: "<file>".into(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// Make an image usable by the network: reflect-pad the bottom and right
/// edges up to a multiple of 8, or refuse when `strict`. Returns the image
/// and the `(bottom, right)` padding applied.
pub fn prepare_image(img: &RgbImage, strict: bool) -> Result<(RgbImage, usize, usize)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w % OUTPUT_STRIDE == 0 && h % OUTPUT_STRIDE == 0 {
        return Ok((img.clone(), 0, 0));
    }
    if strict {
        return Err(Error::invalid(format!(
            "image {w}x{h} is not divisible by {OUTPUT_STRIDE}; drop --strict to pad or use --resize"
        )));
    }
    pad_reflect(img, OUTPUT_STRIDE)
}
