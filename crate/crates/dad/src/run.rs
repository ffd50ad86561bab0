//! Training, evaluation and prediction drivers.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use dad_core::autograd::Var;
use dad_core::metrics::{MetricRecord, MetricReport};
use dad_core::nn::Mode;
use dad_core::train::{self, EpochReport, Network, Sample, Segmenter, Trainer};
use dad_core::{math, ops, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::checkpoint::{read_weights, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, read_rgb, rgb_to_tensor, save_png};
use crate::error::{io_err, Error, Result};

/// A fresh network for `cfg`, with pretrained backbone weights when configured.
pub fn build_network(cfg: &RunConfig) -> Result<Network> {
    let mut net = Network::new(&cfg.model_config()?)?;
    if let Some(path) = &cfg.model.backbone_weights {
        let values = read_weights(path)?;
        let n = net.store.load_prefix("backbone.", &values)?;
        log::info!("loaded {n} backbone tensors from {}", path.display());
    }
    Ok(net)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub epochs: Vec<EpochReport>,
    /// Final checkpoint, loss curve and periodic checkpoints, when written.
    pub final_checkpoint: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

/// Knobs that do not belong in the run configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Keep everything in memory; used by the ablation runner.
    pub no_artifacts: bool,
}

/// Train on `cfg.data.train_dir`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let dir = cfg
        .data
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_dir is required for training".into()))?;
    let data = load_dataset(dir, cfg.data.image_size)?;
    log::info!("{} training pairs from {}", data.samples.len(), dir.display());
    train_on(cfg, &data.samples, opts)
}

/// Train on already loaded samples.
pub fn train_on(cfg: &RunConfig, samples: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut start = 0;
    let mut trainer = Trainer::new(build_network(cfg)?, cfg.train_config())?;
    trainer.schedule = cfg.schedule();
    if let Some(path) = &opts.resume {
        let ckpt = Checkpoint::load(path)?;
        ckpt.load_into(&mut trainer.net.store)
            .map_err(|e| Error::Config(format!("cannot resume from {}: {e}", path.display())))?;
        trainer.adam = ckpt
            .restore_adam(&trainer.net.store, trainer.config.adam)
            .map_err(|e| Error::Config(format!("cannot resume from {}: {e}", path.display())))?;
        start = ckpt.epochs_done;
        log::info!("resuming after epoch {start}");
    }

    let out = &cfg.output_dir;
    let mut curve = None;
    let mut curve_path = None;
    if !opts.no_artifacts {
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        let p = out.join("loss_curve.csv");
        let fresh = opts.resume.is_none() || !p.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&p)
            .map_err(io_err(&p))?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(["epoch", "lr", "mean_total_loss"])?;
        }
        curve = Some(w);
        curve_path = Some(p);
    }

    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start..cfg.optim.epochs {
        let report = trainer.train_epoch(samples, epoch)?;
        log::info!(
            "epoch {}/{} lr {:.3e} loss {:.5}",
            epoch + 1,
            cfg.optim.epochs,
            report.lr,
            report.mean_loss
        );
        if let Some(w) = curve.as_mut() {
            w.write_record(&[(epoch + 1).to_string(), report.lr.to_string(), report.mean_loss.to_string()])?;
            w.flush().map_err(io_err(curve_path.clone().unwrap()))?;
        }
        let every = cfg.optim.checkpoint_every;
        if !opts.no_artifacts && every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.optim.epochs {
            let p = out.join("checkpoints").join(format!("epoch_{:04}.ckpt", epoch + 1));
            Checkpoint::capture(cfg, epoch + 1, &trainer.net, Some(&trainer.adam)).save(&p)?;
            checkpoints.push(p);
        }
        epochs.push(report);
    }

    let mut final_checkpoint = None;
    if !opts.no_artifacts {
        let p = out.join("final.ckpt");
        Checkpoint::capture(cfg, cfg.optim.epochs, &trainer.net, Some(&trainer.adam)).save(&p)?;
        final_checkpoint = Some(p);
    }
    Ok(TrainOutcome {
        net: trainer.net,
        epochs,
        final_checkpoint,
        loss_curve: curve_path,
        checkpoints,
    })
}

/// Evaluate the final map of `model` on every pair under `dir`.
pub fn evaluate_dir(model: &dyn Segmenter, dir: &Path, image_size: usize) -> Result<MetricReport> {
    let data = load_dataset(dir, image_size)?;
    Ok(train::evaluate(model, &data.samples)?)
}

/// `metrics.csv` (one row per image, then AGGREGATE) and `summary.txt`.
pub fn write_report(report: &MetricReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(MetricRecord::COLUMNS)?;
    for r in report.per_image.iter().chain([&report.aggregate]) {
        let mut row = vec![r.image_id.clone()];
        row.extend(r.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    let summary_path = out_dir.join("summary.txt");
    let mut text = report.summary();
    let flagged: Vec<_> = report.per_image.iter().filter(|r| !r.flags.is_empty()).collect();
    if !flagged.is_empty() {
        text.push_str("flags:\n");
        for r in flagged {
            text.push_str(&format!("  {}: {}\n", r.image_id, r.flags.join("; ")));
        }
    }
    std::fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
    Ok((csv_path, summary_path))
}

/// `round(255 * sigmoid(logits))` after bilinear resizing of the logits to `(h, w)`.
pub fn render_map(logits: &Tensor, (h, w): (usize, usize)) -> Result<GrayImage> {
    let (_, _, lh, lw) = logits.dims4()?;
    let resized = if (lh, lw) == (h, w) {
        logits.clone()
    } else {
        ops::resize_bilinear(&Var::constant(logits.clone()), (h, w))?.value().clone()
    };
    let d = resized.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(255.0 * math::sigmoid(d[y as usize * w + x as usize])).round() as u8])
    }))
}

/// Colour-mapped prediction blended at 0.5 over the input.
pub fn overlay(input: &RgbImage, map: &GrayImage) -> RgbImage {
    RgbImage::from_fn(input.width(), input.height(), |x, y| {
        let p = map.get_pixel(x, y)[0] as f64 / 255.0;
        let c = colorous::TURBO.eval_continuous(p);
        let src = input.get_pixel(x, y).0;
        let heat = [c.r, c.g, c.b];
        image::Rgb(core::array::from_fn(|k| {
            (0.5 * heat[k] as f64 + 0.5 * src[k] as f64).round() as u8
        }))
    })
}

/// Write `<stem>_c<K>.png` for the final map `K` (plus every earlier stage
/// with `all_stages`) and `<stem>_overlay.png`, all at the input resolution.
pub fn predict(
    model: &dyn Segmenter,
    image_size: usize,
    image_path: &Path,
    out_dir: &Path,
    all_stages: bool,
) -> Result<Vec<PathBuf>> {
    let input = read_rgb(image_path)?;
    let (w, h) = (input.width() as usize, input.height() as usize);
    let s = image_size as u32;
    let resized = image::imageops::resize(&input, s, s, FilterType::Triangle);
    let maps = model.predict_maps(&rgb_to_tensor(&resized), Mode::Eval)?;
    if maps.is_empty() {
        return Err(dad_core::Error::Validation("segmenter returned no maps".into()).into());
    }
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset(format!("{} has no file name", image_path.display())))?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let last = maps.len() - 1;
    let mut written = Vec::new();
    let mut final_map = None;
    for (k, logits) in maps.iter().enumerate() {
        if k != last && !all_stages {
            continue;
        }
        let img = render_map(logits, (h, w))?;
        let p = out_dir.join(format!("{stem}_c{k}.png"));
        save_png(&img, &p)?;
        written.push(p);
        if k == last {
            final_map = Some(img);
        }
    }
    let p = out_dir.join(format!("{stem}_overlay.png"));
    save_png(&overlay(&input, final_map.as_ref().expect("final map rendered")), &p)?;
    written.push(p);
    Ok(written)
}
