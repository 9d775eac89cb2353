//! Global-local adaptive fusion: softmax-weighted blending of the branch
//! features plus a β-scaled convolutional local branch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{impl_parameterized, silu, silu_grad, Linear, Param};

/// Where the fusion logits are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// One softmax per spatial position.
    #[default]
    Position,
    /// One softmax per image from spatially averaged features.
    Pooled,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "position" | "positionwise" | "position-wise" => Ok(FusionMode::Position),
            "pooled" | "global" => Ok(FusionMode::Pooled),
            _ => Err(Error::invalid(format!("unknown fusion mode `{s}`"))),
        }
    }
}

/// Softmax weights, `positions × branches` row-major. Pooled weights have a
/// single row broadcast over every position.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub positions: usize,
    pub branches: usize,
    pub values: Vec<f64>,
}

impl FusionWeights {
    pub fn uniform(branches: usize) -> Self {
        Self {
            positions: 1,
            branches,
            values: vec![1.0 / branches as f64; branches],
        }
    }

    /// Weights used at `position`.
    pub fn at(&self, position: usize) -> &[f64] {
        let p = if self.positions == 1 { 0 } else { position };
        &self.values[p * self.branches..(p + 1) * self.branches]
    }

    /// Per-branch mean over positions.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.branches];
        for p in 0..self.positions {
            for (a, b) in m.iter_mut().zip(self.at(p)) {
                *a += b;
            }
        }
        m.iter().map(|v| v / self.positions as f64).collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_grids(grids: &[FeatureGrid]) -> Result<()> {
    let first = grids.first().ok_or_else(|| Error::invalid("no feature grids to fuse"))?;
    for g in &grids[1..] {
        g.check_same_shape(first, "fused grids differ")?;
    }
    Ok(())
}

/// Learned map `W` from concatenated branch features to one logit per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveFusion {
    pub weight: Linear,
    pub mode: FusionMode,
}

impl_parameterized!(AdaptiveFusion { weight });

#[derive(Debug, Clone)]
pub struct FusionCache {
    concat: Vec<f64>,
    weights: FusionWeights,
}

impl AdaptiveFusion {
    pub fn new(branches: usize, channels: usize, mode: FusionMode, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Linear::new(branches * channels, branches, false, rng),
            mode,
        }
    }

    pub fn branches(&self) -> usize {
        self.weight.output_dim()
    }

    fn concat(&self, grids: &[FeatureGrid]) -> Result<Vec<f64>> {
        check_grids(grids)?;
        let (k, c) = (grids.len(), grids[0].channels);
        if k * c != self.weight.input_dim() {
            return Err(Error::invalid(format!(
                "fusion expects {} concatenated channels, got {k}x{c}",
                self.weight.input_dim()
            )));
        }
        let cells = grids[0].cells();
        let rows = if self.mode == FusionMode::Pooled { 1 } else { cells };
        let mut cat = vec![0.0; rows * k * c];
        for p in 0..cells {
            let r = if rows == 1 { 0 } else { p };
            for (i, g) in grids.iter().enumerate() {
                let dst = &mut cat[(r * k + i) * c..(r * k + i + 1) * c];
                for (d, s) in dst.iter_mut().zip(&g.data[p * c..(p + 1) * c]) {
                    *d += s;
                }
            }
        }
        if rows == 1 {
            cat.iter_mut().for_each(|v| *v /= cells as f64);
        }
        Ok(cat)
    }

    pub fn forward(&self, grids: &[FeatureGrid]) -> Result<(FusionWeights, FusionCache)> {
        let concat = self.concat(grids)?;
        let k = grids.len();
        let logits = self.weight.forward(&concat);
        let values: Vec<f64> = logits.chunks(k).flat_map(softmax).collect();
        let weights = FusionWeights {
            positions: values.len() / k,
            branches: k,
            values,
        };
        Ok((weights.clone(), FusionCache { concat, weights }))
    }

    /// Backpropagate a gradient on the weights into `W` and the branch features.
    pub fn backward(&mut self, cache: &FusionCache, grad_weights: &[f64], grad_grids: &mut [FeatureGrid]) {
        let k = cache.weights.branches;
        let mut glogits = vec![0.0; grad_weights.len()];
        for (p, (gl, ga)) in glogits.chunks_mut(k).zip(grad_weights.chunks(k)).enumerate() {
            let a = cache.weights.at(p);
            let dot: f64 = a.iter().zip(ga).map(|(x, y)| x * y).sum();
            for i in 0..k {
                gl[i] = a[i] * (ga[i] - dot);
            }
        }
        let gcat = self.weight.backward(&cache.concat, &glogits);
        let c = grad_grids[0].channels;
        let cells = grad_grids[0].cells();
        let pooled = cache.weights.positions == 1 && self.mode == FusionMode::Pooled;
        for p in 0..cells {
            let r = if pooled { 0 } else { p };
            let scale = if pooled { 1.0 / cells as f64 } else { 1.0 };
            for (i, g) in grad_grids.iter_mut().enumerate() {
                let src = &gcat[(r * k + i) * c..(r * k + i + 1) * c];
                for (d, s) in g.data[p * c..(p + 1) * c].iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
    }
}

pub fn adaptive_weights(grids: &[FeatureGrid], fusion: &AdaptiveFusion) -> Result<FusionWeights> {
    Ok(fusion.forward(grids)?.0)
}

/// `Σ_i α_i ∘ F_i` with weights broadcast over channels.
pub fn fuse_global(grids: &[FeatureGrid], weights: &FusionWeights) -> Result<FeatureGrid> {
    check_grids(grids)?;
    let cells = grids[0].cells();
    if weights.branches != grids.len() || (weights.positions != 1 && weights.positions != cells) {
        return Err(Error::invalid(format!(
            "{}x{} fusion weights do not fit {} grids of {cells} cells",
            weights.positions,
            weights.branches,
            grids.len()
        )));
    }
    let c = grids[0].channels;
    let mut out = FeatureGrid::zeros(grids[0].height, grids[0].width, c);
    for p in 0..cells {
        let a = weights.at(p);
        let dst = &mut out.data[p * c..(p + 1) * c];
        for (g, &w) in grids.iter().zip(a) {
            for (d, s) in dst.iter_mut().zip(&g.data[p * c..(p + 1) * c]) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`fuse_global`]: returns `∂L/∂α` and adds `α_i ∘ g` into each grid gradient.
pub fn fuse_global_backward(
    grids: &[FeatureGrid],
    weights: &FusionWeights,
    grad: &FeatureGrid,
    grad_grids: &mut [FeatureGrid],
) -> Vec<f64> {
    let (k, c, cells) = (grids.len(), grad.channels, grad.cells());
    let mut gw = vec![0.0; weights.positions * k];
    for p in 0..cells {
        let a = weights.at(p);
        let row = if weights.positions == 1 { 0 } else { p };
        let g = &grad.data[p * c..(p + 1) * c];
        for i in 0..k {
            let f = &grids[i].data[p * c..(p + 1) * c];
            gw[row * k + i] += g.iter().zip(f).map(|(x, y)| x * y).sum::<f64>();
            for (d, s) in grad_grids[i].data[p * c..(p + 1) * c].iter_mut().zip(g) {
                *d += a[i] * s;
            }
        }
    }
    gw
}

/// `F_global + β·F_local`.
pub fn fuse_global_local(global: &FeatureGrid, local: &FeatureGrid, beta: f64) -> Result<FeatureGrid> {
    global.check_same_shape(local, "global and local features differ")?;
    let mut out = global.clone();
    for (o, l) in out.data.iter_mut().zip(&local.data) {
        *o += beta * l;
    }
    Ok(out)
}

/// `image_id` followed by one mean weight per branch.
pub fn fusion_weights_csv(names: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("image_id");
    for n in names {
        out.push_str(&format!(",alpha_{n}"));
    }
    out.push('\n');
    for (id, w) in rows {
        out.push_str(id);
        for v in w {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// 3×3 convolution with unit stride and zero padding. Weight `[3, 3, in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
}

impl_parameterized!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((9 * input) as f64).sqrt();
        let mut weight = Param::zeros(&[3, 3, input, output]);
        for v in &mut weight.value {
            *v = rng.gen_range(-bound..=bound);
        }
        Self {
            weight,
            bias: Param::zeros(&[output]),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }

    pub fn forward(&self, x: &FeatureGrid) -> FeatureGrid {
        let (ci, co) = self.dims();
        let (h, w) = (x.height, x.width);
        let mut y = FeatureGrid::zeros(h, w, co);
        let wv = &self.weight.value;
        for i in 0..h {
            for j in 0..w {
                let out = &mut y.data[(i * w + j) * co..(i * w + j + 1) * co];
                out.copy_from_slice(&self.bias.value);
                for ky in 0..3 {
                    let yy = i as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let inp = x.cell(yy as usize, xx as usize);
                        let base = (ky * 3 + kx) * ci * co;
                        for (c, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let wr = &wv[base + c * co..base + (c + 1) * co];
                            for (o, wo) in out.iter_mut().zip(wr) {
                                *o += v * wo;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &FeatureGrid, gy: &FeatureGrid) -> FeatureGrid {
        let (ci, co) = self.dims();
        let (h, w) = (x.height, x.width);
        let mut gx = FeatureGrid::zeros(h, w, ci);
        for i in 0..h {
            for j in 0..w {
                let g = &gy.data[(i * w + j) * co..(i * w + j + 1) * co];
                for (b, gv) in self.bias.grad.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..3 {
                    let yy = i as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let cell = yy as usize * w + xx as usize;
                        let base = (ky * 3 + kx) * ci * co;
                        for c in 0..ci {
                            let v = x.data[cell * ci + c];
                            let r = base + c * co..base + (c + 1) * co;
                            let wr = &self.weight.value[r.clone()];
                            gx.data[cell * ci + c] += wr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            if v != 0.0 {
                                for (gw, gv) in self.weight.grad[r].iter_mut().zip(g) {
                                    *gw += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Batch normalization over the batch and all spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl_parameterized!(BatchNorm {
    gamma,
    beta,
    running_mean,
    running_var
});

#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn batch_stats(xs: &[FeatureGrid]) -> BnStats {
        let c = xs[0].channels;
        let count: usize = xs.iter().map(|x| x.cells()).sum();
        let mut mean = vec![0.0; c];
        for x in xs {
            for cell in x.data.chunks(c) {
                for (m, v) in mean.iter_mut().zip(cell) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for x in xs {
            for cell in x.data.chunks(c) {
                for k in 0..c {
                    let d = cell[k] - mean[k];
                    var[k] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        BnStats { mean, var, count }
    }

    fn normalize(&self, xs: &[FeatureGrid], mean: &[f64], var: &[f64]) -> (Vec<FeatureGrid>, Vec<FeatureGrid>) {
        let c = mean.len();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut h = x.clone();
            let mut y = x.clone();
            for (p, (hc, yc)) in h.data.chunks_mut(c).zip(y.data.chunks_mut(c)).enumerate() {
                for k in 0..c {
                    let v = (x.data[p * c + k] - mean[k]) * inv[k];
                    hc[k] = v;
                    yc[k] = v * self.gamma.value[k] + self.beta.value[k];
                }
            }
            xhat.push(h);
            out.push(y);
        }
        (out, xhat)
    }
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Vec<FeatureGrid>,
    xhat: Vec<FeatureGrid>,
    inv_std: Vec<f64>,
    train: bool,
    stats: Option<BnStats>,
    pre_act: Vec<FeatureGrid>,
    argmax: Vec<Vec<usize>>,
    act_shape: (usize, usize),
}

/// `[conv 3×3, batch norm, SiLU, 2×2 max pool]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnStage {
    pub conv: Conv2d,
    pub norm: BatchNorm,
}

impl_parameterized!(CnnStage { conv, norm });

impl CnnStage {
    fn infer(&self, x: &FeatureGrid) -> FeatureGrid {
        let norm = &self.norm;
        let (mut a, _) = norm.normalize(&[self.conv.forward(x)], &norm.running_mean.value, &norm.running_var.value);
        let mut a = a.remove(0);
        a.data.iter_mut().for_each(|v| *v = silu(*v));
        max_pool(&a).0
    }
}

/// Local feature branch: three conv stages, total stride 8.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnBranch {
    pub stages: Vec<CnnStage>,
}

impl_parameterized!(CnnBranch { stages });

#[derive(Debug, Clone)]
pub struct CnnCache {
    stages: Vec<StageCache>,
}

fn max_pool(x: &FeatureGrid) -> (FeatureGrid, Vec<usize>) {
    let (h2, w2, c) = (x.height / 2, x.width / 2, x.channels);
    let mut out = FeatureGrid::zeros(h2, w2, c);
    let mut arg = vec![0; h2 * w2 * c];
    for i in 0..h2 {
        for j in 0..w2 {
            for k in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * i + di) * x.width + 2 * j + dj) * c + k;
                    if x.data[idx] > best {
                        best = x.data[idx];
                        at = idx;
                    }
                }
                out.data[(i * w2 + j) * c + k] = best;
                arg[(i * w2 + j) * c + k] = at;
            }
        }
    }
    (out, arg)
}

impl CnnBranch {
    pub fn new(channels: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let mut input = 3;
        let stages = channels
            .iter()
            .map(|&c| {
                let s = CnnStage {
                    conv: Conv2d::new(input, c, rng),
                    norm: BatchNorm::new(c),
                };
                input = c;
                s
            })
            .collect();
        Self { stages }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.norm.gamma.len()).unwrap_or(3)
    }

    /// Forward a batch. `train` normalizes with batch statistics; otherwise
    /// the running statistics are used.
    pub fn forward(&self, images: &[FeatureGrid], train: bool) -> Result<(Vec<FeatureGrid>, CnnCache)> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        for im in images {
            if im.height % 8 != 0 || im.width % 8 != 0 || im.height != first.height || im.width != first.width {
                return Err(Error::invalid(format!(
                    "batch images must share a size divisible by 8, got {}x{}",
                    im.height, im.width
                )));
            }
        }
        let mut xs: Vec<FeatureGrid> = images.to_vec();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let conv: Vec<FeatureGrid> = xs.iter().map(|x| stage.conv.forward(x)).collect();
            let stats = train.then(|| BatchNorm::batch_stats(&conv));
            let (mean, var) = match &stats {
                Some(s) => (s.mean.clone(), s.var.clone()),
                None => (stage.norm.running_mean.value.clone(), stage.norm.running_var.value.clone()),
            };
            let (normed, xhat) = stage.norm.normalize(&conv, &mean, &var);
            let inv_std = var.iter().map(|v| 1.0 / (v + stage.norm.eps).sqrt()).collect();
            let act_shape = (normed[0].height, normed[0].width);
            let mut next = Vec::with_capacity(xs.len());
            let mut argmax = Vec::with_capacity(xs.len());
            for n in &normed {
                let mut a = n.clone();
                a.data.iter_mut().for_each(|v| *v = silu(*v));
                let (p, arg) = max_pool(&a);
                next.push(p);
                argmax.push(arg);
            }
            caches.push(StageCache {
                input: std::mem::replace(&mut xs, next),
                xhat,
                inv_std,
                train,
                stats,
                pre_act: normed,
                argmax,
                act_shape,
            });
        }
        Ok((xs, CnnCache { stages: caches }))
    }

    /// Fold the batch statistics of a training forward pass into the running statistics.
    pub fn update_running_stats(&mut self, cache: &CnnCache) {
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages) {
            if let Some(s) = &sc.stats {
                let m = stage.norm.momentum;
                let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
                for k in 0..s.mean.len() {
                    let rm = &mut stage.norm.running_mean.value[k];
                    *rm = (1.0 - m) * *rm + m * s.mean[k];
                    let rv = &mut stage.norm.running_var.value[k];
                    *rv = (1.0 - m) * *rv + m * s.var[k] * unbias;
                }
            }
        }
    }

    /// Replace the running statistics with exact population statistics over
    /// `images`, stage by stage, each stage seeing its predecessors in
    /// inference mode.
    pub fn recalibrate(&mut self, images: &[FeatureGrid]) {
        if images.is_empty() {
            return;
        }
        for k in 0..self.stages.len() {
            let c = self.stages[k].norm.gamma.len();
            let (mut n, mut mean, mut m2) = (0usize, vec![0.0; c], vec![0.0; c]);
            for im in images {
                let mut x = im.clone();
                for stage in &self.stages[..k] {
                    x = stage.infer(&x);
                }
                let s = BatchNorm::batch_stats(&[self.stages[k].conv.forward(&x)]);
                let total = n + s.count;
                for ch in 0..c {
                    let d = s.mean[ch] - mean[ch];
                    mean[ch] += d * s.count as f64 / total as f64;
                    m2[ch] += s.var[ch] * s.count as f64 + d * d * (n * s.count) as f64 / total as f64;
                }
                n = total;
            }
            let norm = &mut self.stages[k].norm;
            norm.running_mean.value = mean;
            norm.running_var.value = m2.iter().map(|v| v / (n.max(2) - 1) as f64).collect();
        }
    }

    pub fn backward(&mut self, cache: &CnnCache, grads: &[FeatureGrid]) {
        let mut gs: Vec<FeatureGrid> = grads.to_vec();
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages).rev() {
            let c = stage.norm.gamma.len();
            let (h, w) = sc.act_shape;
            // max pool and SiLU
            let mut gpre: Vec<FeatureGrid> = Vec::with_capacity(gs.len());
            for ((g, arg), pre) in gs.iter().zip(&sc.argmax).zip(&sc.pre_act) {
                let mut ga = FeatureGrid::zeros(h, w, c);
                for (gv, &idx) in g.data.iter().zip(arg) {
                    ga.data[idx] += gv * silu_grad(pre.data[idx]);
                }
                gpre.push(ga);
            }
            // batch norm
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (g, xh) in gpre.iter().zip(&sc.xhat) {
                for (gc, hc) in g.data.chunks(c).zip(xh.data.chunks(c)) {
                    for k in 0..c {
                        sum_g[k] += gc[k];
                        sum_gx[k] += gc[k] * hc[k];
                    }
                }
            }
            for k in 0..c {
                stage.norm.beta.grad[k] += sum_g[k];
                stage.norm.gamma.grad[k] += sum_gx[k];
            }
            let count: usize = gpre.iter().map(|g| g.cells()).sum();
            let mut gconv = gpre;
            for (g, xh) in gconv.iter_mut().zip(&sc.xhat) {
                for (gc, hc) in g.data.chunks_mut(c).zip(xh.data.chunks(c)) {
                    for k in 0..c {
                        let scale = stage.norm.gamma.value[k] * sc.inv_std[k];
                        gc[k] = if sc.train {
                            let mg = sum_g[k] * stage.norm.gamma.value[k] / count as f64;
                            let mgx = sum_gx[k] * stage.norm.gamma.value[k] / count as f64;
                            sc.inv_std[k] * (gc[k] * stage.norm.gamma.value[k] - mg - hc[k] * mgx)
                        } else {
                            gc[k] * scale
                        };
                    }
                }
            }
            gs = sc
                .input
                .iter()
                .zip(&gconv)
                .map(|(x, g)| stage.conv.backward(x, g))
                .collect();
        }
    }
}

/// Single-image inference through the local branch with running statistics.
pub fn cnn_local(image: &FeatureGrid, branch: &CnnBranch) -> Result<FeatureGrid> {
    Ok(branch.forward(std::slice::from_ref(image), false)?.0.remove(0))
}
