//! Patch embedding, directional state-space blocks, patch merging and the
//! multi-branch directional group.
//!
//! A branch is `patch_embed → stage₁ → merge → stage₂ → merge → stage₃` with a
//! total output stride of 8. Every block in a branch scans along the branch's
//! directions; a branch with one direction is one "expert".

use image::RgbImage;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, FeatureSeq};
use crate::nn::{impl_parameterized, silu, silu_grad, LayerNorm, Linear, NormCache, Param, Parameterized};
use crate::scan::{build_order, Direction, ScanOrder};
use crate::ssm::{bidirectional_backward, bidirectional_forward, BiScanCache, SsmParams};

pub const PATCH: usize = 2;
pub const OUTPUT_STRIDE: usize = 8;
pub const CONV_KERNEL: usize = 4;

/// Pixels scaled to `[0, 1]` as a 3-channel grid.
pub fn image_to_grid(img: &RgbImage) -> FeatureGrid {
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    FeatureGrid {
        height: img.height() as usize,
        width: img.width() as usize,
        channels: 3,
        data,
    }
}

fn gather(data: &[f64], channels: usize, order: &ScanOrder) -> FeatureSeq {
    let mut out = Vec::with_capacity(data.len());
    for &cell in &order.forward {
        out.extend_from_slice(&data[cell * channels..(cell + 1) * channels]);
    }
    FeatureSeq {
        len: order.len(),
        channels,
        data: out,
    }
}

fn scatter_add(seq: &FeatureSeq, order: &ScanOrder, into: &mut [f64]) {
    let c = seq.channels;
    for (k, &cell) in order.forward.iter().enumerate() {
        for (a, b) in into[cell * c..(cell + 1) * c].iter_mut().zip(seq.step(k)) {
            *a += b;
        }
    }
}

/// Linear projection of non-overlapping 2×2 patches, flattened `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl_parameterized!(PatchEmbed { proj });

fn space_to_depth(grid: &FeatureGrid) -> Result<Vec<f64>> {
    if !grid.height.is_multiple_of(2) || !grid.width.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "grid {}x{} is not divisible into 2x2 patches",
            grid.height, grid.width
        )));
    }
    let (h2, w2, c) = (grid.height / 2, grid.width / 2, grid.channels);
    let mut out = Vec::with_capacity(grid.data.len());
    for i in 0..h2 {
        for j in 0..w2 {
            for di in 0..2 {
                for dj in 0..2 {
                    out.extend_from_slice(grid.cell(2 * i + di, 2 * j + dj));
                }
            }
        }
    }
    debug_assert_eq!(out.len(), h2 * w2 * 4 * c);
    Ok(out)
}

fn depth_to_space(data: &[f64], height: usize, width: usize, channels: usize) -> FeatureGrid {
    let mut grid = FeatureGrid::zeros(height, width, channels);
    let (h2, w2) = (height / 2, width / 2);
    let mut k = 0;
    for i in 0..h2 {
        for j in 0..w2 {
            for di in 0..2 {
                for dj in 0..2 {
                    grid.cell_mut(2 * i + di, 2 * j + dj).copy_from_slice(&data[k..k + channels]);
                    k += channels;
                }
            }
        }
    }
    grid
}

impl PatchEmbed {
    pub fn new(in_channels: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::new(PATCH * PATCH * in_channels, dim, true, rng),
        }
    }

    pub fn forward(&self, image: &FeatureGrid) -> Result<(FeatureGrid, Vec<f64>)> {
        if image.channels * PATCH * PATCH != self.proj.input_dim() {
            return Err(Error::invalid(format!(
                "patch embedding expects {} input channels, got {}",
                self.proj.input_dim() / 4,
                image.channels
            )));
        }
        let patches = space_to_depth(image)?;
        let data = self.proj.forward(&patches);
        let grid = FeatureGrid {
            height: image.height / 2,
            width: image.width / 2,
            channels: self.proj.output_dim(),
            data,
        };
        Ok((grid, patches))
    }

    pub fn backward(&mut self, patches: &[f64], grad: &FeatureGrid) {
        self.proj.backward(patches, &grad.data);
    }
}

pub fn patch_embed(image: &FeatureGrid, params: &PatchEmbed) -> Result<FeatureGrid> {
    Ok(params.forward(image)?.0)
}

/// Per-channel causal convolution along a sequence. Weight `[channels, k]`,
/// tap `j` multiplies the input `j` steps back.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv1d {
    pub weight: Param,
    pub bias: Param,
}

impl_parameterized!(DepthwiseConv1d { weight, bias });

impl DepthwiseConv1d {
    pub fn new(channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::uniform(&[channels, kernel], 1.0 / (kernel as f64).sqrt(), rng),
            bias: Param::zeros(&[channels]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &FeatureSeq) -> FeatureSeq {
        let (c, k) = (x.channels, self.kernel());
        let mut y = FeatureSeq::zeros(x.len, c);
        for t in 0..x.len {
            let yt = &mut y.data[t * c..(t + 1) * c];
            yt.copy_from_slice(&self.bias.value);
            for j in 0..k.min(t + 1) {
                let xs = &x.data[(t - j) * c..(t - j + 1) * c];
                for ch in 0..c {
                    yt[ch] += self.weight.value[ch * k + j] * xs[ch];
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &FeatureSeq, gy: &FeatureSeq) -> FeatureSeq {
        let (c, k) = (x.channels, self.kernel());
        let mut gx = FeatureSeq::zeros(x.len, c);
        for t in 0..x.len {
            let g = &gy.data[t * c..(t + 1) * c];
            for ch in 0..c {
                self.bias.grad[ch] += g[ch];
            }
            for j in 0..k.min(t + 1) {
                let s = (t - j) * c;
                for ch in 0..c {
                    self.weight.grad[ch * k + j] += g[ch] * x.data[s + ch];
                    gx.data[s + ch] += g[ch] * self.weight.value[ch * k + j];
                }
            }
        }
        gx
    }
}

/// Convolution and bidirectional scan along one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPath {
    pub direction: Direction,
    pub conv: DepthwiseConv1d,
    pub forward: SsmParams,
    pub backward: SsmParams,
}

impl_parameterized!(ScanPath { conv, forward, backward });

/// Layer sizes of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub channels: usize,
    pub hidden: usize,
    pub state_dim: usize,
    pub d_skip: bool,
}

/// Pre-norm, gated state-space block with a residual connection:
/// `out = x + out_proj(silu(gate_proj(n)) ∘ post_proj(Σ_paths scan_path(in_proj(n))))`
/// where `n = norm(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub paths: Vec<ScanPath>,
    pub post_proj: Linear,
    pub out_proj: Linear,
}

impl_parameterized!(DirectionalBlock {
    norm,
    in_proj,
    gate_proj,
    paths,
    post_proj,
    out_proj
});

#[derive(Debug, Clone)]
struct PathCache {
    order: ScanOrder,
    seq: FeatureSeq,
    pre: FeatureSeq,
    scan: BiScanCache,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    height: usize,
    width: usize,
    norm: NormCache,
    normed: Vec<f64>,
    gate_pre: Vec<f64>,
    paths: Vec<PathCache>,
    scanned: Vec<f64>,
    post: Vec<f64>,
    mixed: Vec<f64>,
}

impl DirectionalBlock {
    pub fn new(dims: BlockDims, directions: &[Direction], rng: &mut ChaCha8Rng) -> Self {
        let BlockDims {
            channels,
            hidden,
            state_dim,
            d_skip,
        } = dims;
        let paths = directions
            .iter()
            .map(|&direction| ScanPath {
                direction,
                conv: DepthwiseConv1d::new(hidden, CONV_KERNEL, rng),
                forward: SsmParams::new(hidden, state_dim, d_skip, rng),
                backward: SsmParams::new(hidden, state_dim, d_skip, rng),
            })
            .collect();
        Self {
            norm: LayerNorm::new(channels),
            in_proj: Linear::new(channels, hidden, false, rng),
            gate_proj: Linear::new(channels, hidden, false, rng),
            paths,
            post_proj: Linear::new(hidden, hidden, false, rng),
            out_proj: Linear::new(hidden, channels, false, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.norm.dim()
    }

    pub fn hidden(&self) -> usize {
        self.in_proj.output_dim()
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.paths.iter().map(|p| p.direction).collect()
    }

    pub fn forward(&self, x: &FeatureGrid) -> Result<(FeatureGrid, BlockCache)> {
        let orders = self
            .paths
            .iter()
            .map(|p| build_order(p.direction, x.height, x.width))
            .collect::<Result<Vec<_>>>()?;
        self.forward_with_orders(x, orders)
    }

    fn forward_with_orders(&self, x: &FeatureGrid, orders: Vec<ScanOrder>) -> Result<(FeatureGrid, BlockCache)> {
        if x.channels != self.channels() {
            return Err(Error::invalid(format!(
                "block expects {} channels, got {}",
                self.channels(),
                x.channels
            )));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite value entering a block".into()));
        }
        let e = self.hidden();
        let (normed, norm) = self.norm.forward(&x.data);
        let u = self.in_proj.forward(&normed);
        let gate_pre = self.gate_proj.forward(&normed);
        let mut scanned = vec![0.0; x.cells() * e];
        let mut paths = Vec::with_capacity(self.paths.len());
        for (path, order) in self.paths.iter().zip(orders) {
            if order.height != x.height || order.width != x.width {
                return Err(Error::invalid("scan order does not match the grid"));
            }
            let seq = gather(&u, e, &order);
            let pre = path.conv.forward(&seq);
            let mut act = pre.clone();
            act.data.iter_mut().for_each(|v| *v = silu(*v));
            let (y, scan) = bidirectional_forward(&path.forward, &path.backward, &act);
            scatter_add(&y, &order, &mut scanned);
            paths.push(PathCache { order, seq, pre, scan });
        }
        let post = self.post_proj.forward(&scanned);
        let mixed: Vec<f64> = gate_pre.iter().zip(&post).map(|(g, p)| silu(*g) * p).collect();
        let delta = self.out_proj.forward(&mixed);
        let mut out = x.clone();
        for (o, d) in out.data.iter_mut().zip(&delta) {
            *o += d;
        }
        let cache = BlockCache {
            height: x.height,
            width: x.width,
            norm,
            normed,
            gate_pre,
            paths,
            scanned,
            post,
            mixed,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &BlockCache, grad: &FeatureGrid) -> FeatureGrid {
        let e = self.hidden();
        let mut gx = grad.clone();
        let gmixed = self.out_proj.backward(&cache.mixed, &grad.data);
        let mut gpost = vec![0.0; gmixed.len()];
        let mut ggate = vec![0.0; gmixed.len()];
        for i in 0..gmixed.len() {
            let g = cache.gate_pre[i];
            gpost[i] = gmixed[i] * silu(g);
            ggate[i] = gmixed[i] * cache.post[i] * silu_grad(g);
        }
        let gscanned = self.post_proj.backward(&cache.scanned, &gpost);
        let mut gu = vec![0.0; gscanned.len()];
        for (path, pc) in self.paths.iter_mut().zip(&cache.paths) {
            let gy = gather(&gscanned, e, &pc.order);
            let mut gact = bidirectional_backward(&mut path.forward, &mut path.backward, &pc.scan, &gy);
            for (g, z) in gact.data.iter_mut().zip(&pc.pre.data) {
                *g *= silu_grad(*z);
            }
            let gseq = path.conv.backward(&pc.seq, &gact);
            scatter_add(&gseq, &pc.order, &mut gu);
        }
        let mut gn = self.in_proj.backward(&cache.normed, &gu);
        for (a, b) in gn.iter_mut().zip(self.gate_proj.backward(&cache.normed, &ggate)) {
            *a += b;
        }
        for (a, b) in gx.data.iter_mut().zip(self.norm.backward(&cache.norm, &gn)) {
            *a += b;
        }
        debug_assert_eq!((gx.height, gx.width), (cache.height, cache.width));
        gx
    }
}

/// One block along a single explicit order (its forward orientation; the
/// bidirectional scan covers the backward orientation).
pub fn directional_block(grid: &FeatureGrid, order: &ScanOrder, params: &DirectionalBlock) -> Result<FeatureGrid> {
    if params.paths.len() != 1 {
        return Err(Error::invalid("directional_block needs a block with exactly one scan path"));
    }
    if order.height != grid.height || order.width != grid.width {
        return Err(Error::invalid(format!(
            "grid {}x{} does not match scan order {}x{}",
            grid.height, grid.width, order.height, order.width
        )));
    }
    Ok(params.forward_with_orders(grid, vec![order.clone()])?.0)
}

/// 2×2 patch merging: concatenate, normalize, project to twice the channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl_parameterized!(PatchMerge { norm, proj });

#[derive(Debug, Clone)]
pub struct MergeCache {
    height: usize,
    width: usize,
    channels: usize,
    norm: NormCache,
    normed: Vec<f64>,
}

impl PatchMerge {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: LayerNorm::new(4 * channels),
            proj: Linear::new(4 * channels, 2 * channels, false, rng),
        }
    }

    pub fn forward(&self, x: &FeatureGrid) -> Result<(FeatureGrid, MergeCache)> {
        if 4 * x.channels != self.norm.dim() {
            return Err(Error::invalid(format!(
                "merge expects {} channels, got {}",
                self.norm.dim() / 4,
                x.channels
            )));
        }
        let cat = space_to_depth(x)?;
        let (normed, norm) = self.norm.forward(&cat);
        let data = self.proj.forward(&normed);
        let out = FeatureGrid {
            height: x.height / 2,
            width: x.width / 2,
            channels: self.proj.output_dim(),
            data,
        };
        let cache = MergeCache {
            height: x.height,
            width: x.width,
            channels: x.channels,
            norm,
            normed,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &MergeCache, grad: &FeatureGrid) -> FeatureGrid {
        let gn = self.proj.backward(&cache.normed, &grad.data);
        let gcat = self.norm.backward(&cache.norm, &gn);
        depth_to_space(&gcat, cache.height, cache.width, cache.channels)
    }
}

pub fn downsample(grid: &FeatureGrid, params: &PatchMerge) -> Result<FeatureGrid> {
    Ok(params.forward(grid)?.0)
}

/// How selected directions are grouped into branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExpertGrouping {
    /// A single branch whose blocks scan every selected direction.
    One,
    /// Horizontal with vertical, diagonal with anti-diagonal.
    Two,
    /// One branch per direction.
    #[default]
    Four,
}

impl std::str::FromStr for ExpertGrouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one" | "1" => Ok(ExpertGrouping::One),
            "two" | "2" => Ok(ExpertGrouping::Two),
            "four" | "4" => Ok(ExpertGrouping::Four),
            _ => Err(Error::invalid(format!("unknown expert grouping `{s}`"))),
        }
    }
}

/// Split `directions` into per-branch direction lists.
pub fn group_directions(directions: &[Direction], grouping: ExpertGrouping) -> Result<Vec<Vec<Direction>>> {
    if directions.is_empty() {
        return Err(Error::invalid("at least one scan direction is required"));
    }
    Ok(match grouping {
        ExpertGrouping::One => vec![directions.to_vec()],
        ExpertGrouping::Four => directions.iter().map(|&d| vec![d]).collect(),
        ExpertGrouping::Two => {
            let pick = |set: [Direction; 2]| -> Vec<Direction> {
                directions.iter().copied().filter(|d| set.contains(d)).collect()
            };
            [
                pick([Direction::Horizontal, Direction::Vertical]),
                pick([Direction::Diagonal, Direction::AntiDiagonal]),
            ]
            .into_iter()
            .filter(|g| !g.is_empty())
            .collect()
        }
    })
}

/// Widths and depths of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchDims {
    pub embed_dim: usize,
    pub depths: [usize; 3],
    pub expand: usize,
    pub state_dim: usize,
    pub d_skip: bool,
}

impl BranchDims {
    pub fn stage_channels(&self) -> [usize; 3] {
        [self.embed_dim, 2 * self.embed_dim, 4 * self.embed_dim]
    }

    pub fn out_channels(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub directions: Vec<Direction>,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<DirectionalBlock>>,
    pub merges: Vec<PatchMerge>,
}

impl_parameterized!(Branch { embed, stages, merges });

#[derive(Debug, Clone)]
pub struct BranchCache {
    patches: Vec<f64>,
    blocks: Vec<Vec<BlockCache>>,
    merges: Vec<MergeCache>,
}

impl Branch {
    pub fn new(directions: &[Direction], dims: BranchDims, rng: &mut ChaCha8Rng) -> Self {
        let channels = dims.stage_channels();
        let embed = PatchEmbed::new(3, dims.embed_dim, rng);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let bd = BlockDims {
                channels: c,
                hidden: c * dims.expand,
                state_dim: dims.state_dim,
                d_skip: dims.d_skip,
            };
            stages.push((0..dims.depths[i]).map(|_| DirectionalBlock::new(bd, directions, rng)).collect());
            if i + 1 < channels.len() {
                merges.push(PatchMerge::new(c, rng));
            }
        }
        Self {
            directions: directions.to_vec(),
            embed,
            stages,
            merges,
        }
    }

    pub fn forward(&self, image: &FeatureGrid) -> Result<(FeatureGrid, BranchCache)> {
        if !image.height.is_multiple_of(OUTPUT_STRIDE) || !image.width.is_multiple_of(OUTPUT_STRIDE) || image.height == 0 || image.width == 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not a positive multiple of {OUTPUT_STRIDE}",
                image.height, image.width
            )));
        }
        let (mut x, patches) = self.embed.forward(image)?;
        let mut blocks = Vec::with_capacity(self.stages.len());
        let mut merges = Vec::with_capacity(self.merges.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(&x)?;
                x = y;
                caches.push(c);
            }
            blocks.push(caches);
            if let Some(m) = self.merges.get(i) {
                let (y, c) = m.forward(&x)?;
                x = y;
                merges.push(c);
            }
        }
        Ok((x, BranchCache { patches, blocks, merges }))
    }

    pub fn backward(&mut self, cache: &BranchCache, grad: &FeatureGrid) {
        let mut g = grad.clone();
        for i in (0..self.stages.len()).rev() {
            if let Some(m) = self.merges.get_mut(i) {
                g = m.backward(&cache.merges[i], &g);
            }
            for (block, c) in self.stages[i].iter_mut().zip(&cache.blocks[i]).rev() {
                g = block.backward(c, &g);
            }
        }
        self.embed.backward(&cache.patches, &g);
    }
}

/// Run every branch on the same image. Outputs share one shape.
pub fn mssg_forward(image: &FeatureGrid, branches: &[Branch]) -> Result<Vec<FeatureGrid>> {
    if branches.is_empty() {
        return Err(Error::invalid("no branches configured"));
    }
    branches.iter().map(|b| Ok(b.forward(image)?.0)).collect()
}

/// Number of trainable scalars across branches.
pub fn branch_parameters(branches: &[Branch]) -> usize {
    branches.iter().map(|b| b.num_trainable()).sum()
}
