//! Optimization, evaluation and baselines.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::image_to_grid;
use crate::count_head::{image_count, normalize_map, window_counts_from_dots};
use crate::data::{crop_augment, Sample};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{prepare_image, CountModel};
use crate::nn::{Param, Parameterized};

/// `(1/B) Σ |C_i − C*_i|`.
pub fn l1_count_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Subgradient of [`l1_count_loss`] with `sign(0) = 0`.
pub fn l1_count_grad(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let b = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            if d > 0.0 {
                1.0 / b
            } else if d < 0.0 {
                -1.0 / b
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every trainable parameter from its accumulated gradient.
    pub fn step<P: Parameterized>(&mut self, model: &mut P) {
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut("", &mut |_, p: &mut Param| {
            if !p.trainable {
                return;
            }
            if ms.len() <= i {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for k in 0..p.len() {
                let g = p.grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p.value[k] -= lr * mh / (vh.sqrt() + eps);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random square crop side applied to every training image each epoch.
    pub crop: Option<usize>,
    /// Weight of a window-level L1 term against ground-truth window counts; 0 disables it.
    pub window_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            crop: None,
            window_loss_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.window_loss_weight >= 0.0) {
            return Err(Error::invalid("window loss weight must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae\n");
    for e in log {
        let v = e.val_mae.map(|v| format!("{v:.10}")).unwrap_or_default();
        out.push_str(&format!("{},{:.10},{}\n", e.epoch, e.train_loss, v));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CountModel,
    pub best: CountModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub train_count_mean: f64,
}

fn mean_count(samples: &[Sample]) -> f64 {
    samples.iter().map(|s| s.count() as f64).sum::<f64>() / samples.len().max(1) as f64
}

/// One optimizer step on `batch`; returns the per-image absolute errors
/// measured before the update.
pub fn train_step(model: &mut CountModel, opt: &mut Adam, cfg: &TrainConfig, batch: &[Sample]) -> Result<Vec<f64>> {
    let grids: Vec<FeatureGrid> = batch.iter().map(|s| image_to_grid(&s.image)).collect();
    let gt: Vec<f64> = batch.iter().map(|s| s.count() as f64).collect();
    let (preds, cache) = model.forward(&grids, true)?;
    let counts: Vec<f64> = preds.iter().map(|p| p.count).collect();
    let loss = l1_count_loss(&counts, &gt)?;
    if !loss.is_finite() {
        return Err(Error::NumericDomain(format!(
            "training loss became {loss}; lower the learning rate"
        )));
    }
    let grad = l1_count_grad(&counts, &gt);
    let window_grads = if cfg.window_loss_weight > 0.0 {
        let mut all = Vec::with_capacity(batch.len());
        for (s, p) in batch.iter().zip(&preds) {
            let g = p.map.geometry;
            let target = window_counts_from_dots(&s.dots, g.height, g.width, g.r, g.s)?;
            let scale = cfg.window_loss_weight / (batch.len() * target.values.len()) as f64;
            all.push(
                p.map
                    .values
                    .iter()
                    .zip(&target.values)
                    .map(|(a, b)| scale * (a - b).signum() * ((a - b) != 0.0) as u8 as f64)
                    .collect(),
            );
        }
        Some(all)
    } else {
        None
    };
    model.zero_grad();
    model.backward(&preds, &cache, &grad, window_grads.as_deref());
    opt.step(model);
    model.update_running_stats(&cache);
    Ok(counts.iter().zip(&gt).map(|(p, g)| (p - g).abs()).collect())
}

/// Train from `model`'s current weights. Writes `final.json`, `best.json`
/// and `loss.csv` under `out_dir` when given. The best checkpoint is chosen
/// by validation MAE, or by training loss without a validation set.
/// Batch-norm running statistics are recomputed over the full training
/// images after every epoch.
pub fn train(
    mut model: CountModel,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let train_count_mean = mean_count(train_set);
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let calibration = train_set
        .iter()
        .map(|s| Ok(image_to_grid(&prepare_image(&s.image, false)?.0)))
        .collect::<Result<Vec<_>>>()?;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut errors = Vec::with_capacity(train_set.len());
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| match cfg.crop {
                    Some(size) => {
                        let seed = cfg.seed ^ ((epoch as u64) << 40) ^ ((bi as u64) << 20) ^ j as u64;
                        crop_augment(&train_set[i], size, seed)
                    }
                    None => Ok(train_set[i].clone()),
                })
                .collect::<Result<_>>()?;
            errors.extend(train_step(&mut model, &mut opt, cfg, &batch)?);
        }
        let train_loss = errors.iter().sum::<f64>() / errors.len() as f64;
        model.recalibrate(&calibration);
        let val_mae = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set)?.0.mae)
        };
        log::info!("epoch {epoch}: train_loss {train_loss:.4} val_mae {val_mae:?}");
        let score = val_mae.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mae,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.to_checkpoint(Some(train_count_mean)).save(&dir.join("final.json"))?;
        best.to_checkpoint(Some(train_count_mean)).save(&dir.join("best.json"))?;
        let p = dir.join("loss.csv");
        fs::write(&p, loss_csv(&log)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        log,
        train_count_mean,
    })
}

/// One row per image: `(id, ground truth, prediction)`.
pub type PerImage = Vec<(String, f64, f64)>;

pub fn per_image_csv(rows: &PerImage) -> String {
    let mut out = String::from("image,gt,pred\n");
    for (id, g, p) in rows {
        out.push_str(&format!("{id},{g},{p:.6}\n"));
    }
    out
}

fn report(rows: PerImage) -> Result<(MetricsReport, PerImage)> {
    let gt: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok((compute_metrics(&gt, &pred)?, rows))
}

/// Network predictions with inference-mode normalization.
pub fn evaluate(model: &CountModel, samples: &[Sample]) -> Result<(MetricsReport, PerImage)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (img, _, _) = prepare_image(&s.image, false)?;
        let p = model.predict(&img)?;
        rows.push((s.id.clone(), s.count() as f64, p.count));
    }
    report(rows)
}

/// Predict a constant count for every image.
pub fn evaluate_constant(value: f64, samples: &[Sample]) -> Result<(MetricsReport, PerImage)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    report(samples.iter().map(|s| (s.id.clone(), s.count() as f64, value)).collect())
}

/// Count through ground-truth window counts and the normalizer instead of the network.
pub fn evaluate_oracle(samples: &[Sample], r: usize, s: usize) -> Result<(MetricsReport, PerImage)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for smp in samples {
        let (h, w) = (smp.height() / s * s, smp.width() / s * s);
        let dots: Vec<_> = smp.dots.iter().copied().filter(|d| d.x < w as f64 && d.y < h as f64).collect();
        let cr = window_counts_from_dots(&dots, h, w, r, s)?;
        rows.push((smp.id.clone(), smp.count() as f64, image_count(&normalize_map(&cr))));
    }
    report(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::{ModelConfig, Preset};
    use crate::scan::Direction;

    #[test]
    fn loss_examples() {
        assert_eq!(l1_count_loss(&[5.0, 10.0], &[7.0, 9.0]).unwrap(), 1.5);
        assert_eq!(l1_count_loss(&[3.0], &[0.0]).unwrap(), 3.0);
        assert_eq!(l1_count_loss(&[2.0, 4.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert!(l1_count_loss(&[], &[]).is_err());
        assert!(l1_count_loss(&[1.0], &[]).is_err());
        assert_eq!(l1_count_grad(&[5.0, 10.0, 1.0], &[7.0, 9.0, 1.0]), vec![-1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::from_values(&[2], vec![1.0, -1.0]);
        p.grad = vec![0.5, -2.0];
        let mut opt = Adam::new(0.01);
        opt.step(&mut p);
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] + 0.99).abs() < 1e-9);
        let mut b = Param::buffer(&[1], 3.0);
        b.grad = vec![1.0];
        Adam::new(0.1).step(&mut b);
        assert_eq!(b.value, vec![3.0]);
    }

    fn micro() -> ModelConfig {
        ModelConfig {
            embed_dim: 2,
            state_dim: 2,
            head_hidden: 4,
            r: 16,
            ..ModelConfig::preset(Preset::Tiny)
        }
    }

    fn data(n: usize, seed: u64) -> Vec<Sample> {
        let cfg = SynthConfig {
            width: 32,
            height: 32,
            count_min: 1,
            count_max: 4,
            seed,
            ..Default::default()
        };
        gen_synthetic(&cfg, n).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let model = CountModel::new(micro()).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(model.clone(), &cfg, &data(2, 1), &[], None).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.best, model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut model = CountModel::new(micro()).unwrap();
        let sample = data(1, 2);
        let grid = image_to_grid(&sample[0].image);
        let gt = sample[0].count() as f64;
        let err = |m: &CountModel| (m.forward(std::slice::from_ref(&grid), true).unwrap().0[0].count - gt).abs();
        let before = err(&model);
        assert!(before > 0.0);
        let mut opt = Adam::new(1e-5);
        train_step(&mut model, &mut opt, &TrainConfig::default(), &sample).unwrap();
        assert!(err(&model) < before);
    }

    #[test]
    fn every_parameter_group_moves() {
        let mut cfg = micro();
        cfg.directions = Direction::ALL.to_vec();
        let mut model = CountModel::new(cfg).unwrap();
        let before = model.clone();
        let mut opt = Adam::new(1e-3);
        train_step(&mut model, &mut opt, &TrainConfig::default(), &data(2, 3)).unwrap();
        for (a, b) in model.branches.iter().zip(&before.branches) {
            assert_ne!(a.embed, b.embed);
            assert_ne!(a.stages[2][0].paths[0].forward, b.stages[2][0].paths[0].forward);
        }
        assert_ne!(model.fusion, before.fusion);
        assert_ne!(model.cnn.as_ref().unwrap().stages[0].conv, before.cnn.as_ref().unwrap().stages[0].conv);
        assert_ne!(model.head, before.head);
    }

    #[test]
    fn training_is_deterministic_and_writes_files() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            crop: Some(24),
            window_loss_weight: 0.5,
            ..Default::default()
        };
        let set = data(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let a = train(CountModel::new(micro()).unwrap(), &cfg, &set, &set[..1], Some(dir.path())).unwrap();
        let b = train(CountModel::new(micro()).unwrap(), &cfg, &set, &set[..1], None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv, loss_csv(&a.log));
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("best.json").exists() && dir.path().join("final.json").exists());
        assert!(train(CountModel::new(micro()).unwrap(), &TrainConfig { lr: 0.0, ..cfg }, &set, &[], None).is_err());
    }

    #[test]
    fn baselines() {
        let set = data(5, 6);
        let blank: Vec<Sample> = (0..3).map(|i| crate::data::blank_sample(&format!("{i}.png"), 32, 32)).collect();
        let model = CountModel::new(micro()).unwrap();
        assert_eq!(evaluate(&model, &blank).unwrap().0.mae, 0.0);
        let mean = mean_count(&set);
        let (m, _) = evaluate_constant(mean, &set).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-12);
        let other = data(5, 60);
        let (o, _) = evaluate_constant(mean, &other).unwrap();
        if (mean_count(&other) - mean).abs() > 1e-9 {
            assert!(o.r2.is_none_or(|r| r <= 0.0));
        }
        assert!(evaluate(&model, &[]).is_err());
        let rows = evaluate_oracle(&set, 16, 8).unwrap().1;
        assert!(per_image_csv(&rows).starts_with("image,gt,pred\nimg_00000.png,"));
    }
}
