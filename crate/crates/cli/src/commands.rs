use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ssmcount::count_head::normalize_map;
use ssmcount::data::{self, gen_synthetic, load_dataset, resize_sample, ResizeMode, Sample};
use ssmcount::fusion::fusion_weights_csv;
use ssmcount::metrics::MetricsReport;
use ssmcount::model::{prepare_image, Checkpoint, CountModel};
use ssmcount::train::{evaluate, evaluate_constant, evaluate_oracle, per_image_csv, train};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::CliConfig;
use crate::{Command, EvalArgs, InferArgs, SynthArgs, TrainArgs};

pub fn run(cmd: &Command, out_root: &Path) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, out_root),
        Command::Train(a) => train_cmd(a, out_root),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a, out_root),
    }
}

/// Create `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
        }
        if non_empty {
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: &SynthArgs, out_root: &Path) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    let s = &mut cfg.synth;
    macro_rules! set {
        ($($flag:ident => $field:expr),*) => { $( if let Some(v) = a.$flag.clone() { $field = v; } )* };
    }
    set!(seed => s.seed, width => s.width, height => s.height, count_min => s.count_min,
         count_max => s.count_max, band_spacing => s.band_spacing, band_halfwidth => s.band_halfwidth,
         noise => s.noise, margin => s.margin, n => cfg.dataset.n);
    if let Some(p) = &a.placement {
        cfg.synth.placement = p.parse()?;
    }
    let out = a.out.clone().unwrap_or_else(|| out_root.join("synth"));
    let samples = gen_synthetic(&cfg.synth, cfg.dataset.n)?;
    prepare_out(&out, a.force)?;
    data::write_dataset(&out, &samples, &cfg.synth.manifest(cfg.dataset.n))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let counts: Vec<usize> = samples.iter().map(|s| s.count()).collect();
    let total: usize = counts.iter().sum();
    println!("wrote {} images to {}", samples.len(), out.display());
    println!(
        "dots: total = {total}, mean = {:.3}, min = {}, max = {}",
        total as f64 / samples.len().max(1) as f64,
        counts.iter().min().copied().unwrap_or(0),
        counts.iter().max().copied().unwrap_or(0)
    );
    Ok(())
}

fn load_nonempty(dir: &Path) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    let s = load_dataset(dir)?;
    if s.is_empty() {
        bail!("dataset {} contains no images", dir.display());
    }
    Ok(s)
}

fn train_cmd(a: &TrainArgs, out_root: &Path) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    if let Some(p) = &a.preset {
        m.preset = p.parse()?;
    }
    if let Some(d) = &a.directions {
        m.directions = Some(d.clone());
    }
    if let Some(g) = &a.grouping {
        m.grouping = Some(g.parse()?);
    }
    if let Some(f) = &a.fusion_mode {
        m.fusion_mode = Some(f.parse()?);
    }
    if a.no_adaptive_fusion {
        m.adaptive_fusion = Some(false);
    }
    if a.no_cnn {
        m.cnn_branch = Some(false);
    }
    m.beta = a.beta.or(m.beta);
    m.r = a.r.or(m.r);
    t.lr = a.lr.unwrap_or(t.lr);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.seed = a.seed.unwrap_or(t.seed);
    t.crop = a.crop.or(t.crop);
    t.window_loss_weight = a.window_loss_weight.unwrap_or(t.window_loss_weight);
    cfg.dataset.val_fraction = a.val_fraction.unwrap_or(cfg.dataset.val_fraction);
    cfg.train.validate()?;
    if !(0.0..1.0).contains(&cfg.dataset.val_fraction) {
        bail!("val fraction must lie in [0, 1)");
    }
    let model_cfg = cfg.model.resolve(cfg.train.seed)?;

    let mut samples = load_nonempty(&a.data)?;
    let val = match &a.val {
        Some(v) => load_nonempty(v)?,
        None if cfg.dataset.val_fraction > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            samples.shuffle(&mut rng);
            let k = ((samples.len() as f64 * cfg.dataset.val_fraction).ceil() as usize).min(samples.len() - 1);
            let val = samples.drain(..k).collect();
            samples.sort_by(|x, y| x.id.cmp(&y.id));
            val
        }
        None => Vec::new(),
    };
    let out = a.out.clone().unwrap_or_else(|| out_root.join("train"));
    prepare_out(&out, a.force)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let model = CountModel::new(model_cfg)?;
    log::info!("training {} parameters on {} images", ssmcount::nn::Parameterized::num_trainable(&model), samples.len());
    let outcome = train(model, &cfg.train, &samples, &val, Some(&out))?;
    let last = outcome.log.last();
    println!("trained {} epochs on {} images; checkpoints in {}", outcome.log.len(), samples.len(), out.display());
    if let Some(e) = last {
        println!("final train_loss = {:.6}", e.train_loss);
        if let Some(v) = e.val_mae {
            println!("final val_mae = {v:.6}");
        }
    }
    println!("best epoch = {}", outcome.best_epoch);
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("resize target `{s}` is not of the form WxH"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn infer(a: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = CountModel::from_checkpoint(&ck)?;
    let mut sample = Sample {
        id: a.image.display().to_string(),
        image: data::load_image(&a.image)?,
        dots: Vec::new(),
    };
    if let Some(r) = &a.resize {
        let (width, height) = parse_size(r)?;
        sample = resize_sample(&sample, ResizeMode::Fixed { width, height })?;
    } else if let Some(r) = a.resize_ratio {
        sample = resize_sample(&sample, ResizeMode::Ratio(r))?;
    }
    let (img, bottom, right) = prepare_image(&sample.image, a.strict)?;
    if bottom + right > 0 {
        eprintln!(
            "padded {}x{} image by reflection to {}x{} ({bottom} rows, {right} columns)",
            sample.width(),
            sample.height(),
            img.width(),
            img.height()
        );
    }
    let pred = model.predict(&img)?;
    println!("count = {:.6}", pred.count);
    if let Some(prefix) = &a.emit_map {
        let map = normalize_map(&pred.map);
        let with_ext = |ext: &str| -> PathBuf {
            let mut s = prefix.clone().into_os_string();
            s.push(ext);
            PathBuf::from(s)
        };
        if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let (txt, png) = (with_ext(".txt"), with_ext(".png"));
        map.write_text(&txt)?;
        map.write_png16(&png)?;
        println!("map = {} {}", txt.display(), png.display());
    }
    Ok(())
}

fn eval(a: &EvalArgs, out_root: &Path) -> Result<()> {
    let samples = load_nonempty(&a.data)?;
    let model = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Some((CountModel::from_checkpoint(&ck)?, ck.train_count_mean))
        }
        None => None,
    };
    let mut fusion_rows = Vec::new();
    let (report, rows, mode): (MetricsReport, _, &str) = if a.oracle {
        let (r, s) = match &model {
            Some((m, _)) => (m.config.r, m.config.s),
            None => (a.r, ssmcount::backbone::OUTPUT_STRIDE),
        };
        let (rep, rows) = evaluate_oracle(&samples, r, s)?;
        (rep, rows, "oracle")
    } else if a.mean_baseline {
        let mean = match &model {
            Some((_, Some(m))) => *m,
            Some((_, None)) => bail!("checkpoint does not record a training mean count"),
            None => samples.iter().map(|s| s.count() as f64).sum::<f64>() / samples.len() as f64,
        };
        let (rep, rows) = evaluate_constant(mean, &samples)?;
        (rep, rows, "mean-baseline")
    } else {
        let Some((m, _)) = &model else {
            bail!("--checkpoint is required unless --oracle or --mean-baseline is given");
        };
        for s in &samples {
            let (img, _, _) = prepare_image(&s.image, false)?;
            fusion_rows.push((s.id.clone(), m.predict(&img)?.fusion_weights.mean()));
        }
        let (rep, rows) = evaluate(m, &samples)?;
        (rep, rows, "network")
    };
    let out = a.out.clone().unwrap_or_else(|| out_root.join("eval"));
    prepare_out(&out, a.force)?;
    let mut echo = format!("mode = \"{mode}\"\ndata = {:?}\n", a.data.display().to_string());
    if let Some(c) = &a.checkpoint {
        echo.push_str(&format!("checkpoint = {:?}\n", c.display().to_string()));
    }
    if let Some((m, _)) = &model {
        echo.push_str(&format!("\n[model]\n{}", toml::to_string(&m.config).unwrap_or_default()));
    }
    write(&out.join("config.toml"), &echo)?;
    write(&out.join("metrics.txt"), &report.to_text())?;
    write(
        &out.join("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.to_csv_row()),
    )?;
    write(&out.join("per_image.csv"), &per_image_csv(&rows))?;
    if let Some((m, _)) = &model {
        if !fusion_rows.is_empty() {
            write(&out.join("fusion_weights.csv"), &fusion_weights_csv(&m.branch_names(), &fusion_rows))?;
        }
    }
    print!("{}", report.to_text());
    Ok(())
}
