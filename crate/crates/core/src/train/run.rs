use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::cache::FeatureCache;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::moves::{IterLog, MoveTrainer, SupervisedTrainer, MOVE_KIND};
use super::pretrain::{load_mae, reconstruction_mse, MaePretrainer, MAE_KIND};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::nn::{Module, TinyMae};
use crate::render::{save_panels, training_panels};
use crate::synthdata::{load_dataset, Dataset};
use crate::tensor::Tensor;

/// Append-only CSV file that can be reopened at a resume point.
pub struct CsvLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvLog {
    /// Create `path` with `header`. With `resume_from`, keep the existing rows
    /// whose first column is below it and continue after them.
    pub fn open(path: &Path, header: &str, resume_from: Option<u64>) -> Result<Self> {
        let mut kept = vec![header.to_string()];
        if let (Some(limit), true) = (resume_from, path.exists()) {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let first = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if first.is_some_and(|it| it < limit) {
                    kept.push(line);
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        };
        for line in kept {
            log.row(&line)?;
        }
        Ok(log)
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn images_of(ds: &Dataset) -> Vec<Tensor> {
    ds.samples.iter().map(|s| s.image.clone()).collect()
}

fn masks_of(ds: &Dataset) -> Vec<Tensor> {
    ds.samples.iter().map(|s| s.mask.clone()).collect()
}

fn due(iter: u64, every: u64) -> bool {
    every > 0 && iter % every == 0
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub iters: u64,
    /// Validation error before the first step; absent when resuming.
    pub initial_val_mse: Option<f64>,
    pub final_val_mse: f64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Pretrain the autoencoder; writes `cfg.paths.mae_checkpoint` and CSV logs
/// next to it.
pub fn run_pretrain(cfg: &TrainConfig, resume: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<PretrainSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let p = &cfg.pretrain;
    let train = load_dataset(&cfg.paths.train_data, None)?;
    let val = load_dataset(&cfg.paths.val_data, Some(p.val_images))?;
    check_size(cfg, &train)?;
    let val_images = images_of(&val);
    let ckpt_path = cfg.paths.mae_checkpoint.clone();
    let out = ckpt_path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.echo_to(&out)?;

    let mut t = match resume {
        Some(path) => {
            let c = Checkpoint::load_kind(path, MAE_KIND)?;
            MaePretrainer::resume(cfg.clone(), images_of(&train), &c)?
        }
        None => MaePretrainer::new(cfg.clone(), images_of(&train))?,
    };
    let resume_at = resume.map(|_| t.iter);
    let mut loss_csv = CsvLog::open(&out.join("pretrain_loss.csv"), "iter,loss", resume_at)?;
    let mut val_csv = CsvLog::open(&out.join("pretrain_val.csv"), "iter,val_mse", resume_at)?;
    let initial = if resume.is_none() {
        let v = reconstruction_mse(&t.mae, &val_images, p.mask_ratio, cfg.seed)?;
        val_csv.row(&format!("0,{v}"))?;
        log(&format!("pretrain iter 0 val_mse {v:.5}"));
        Some(v)
    } else {
        None
    };
    while t.iter < p.iters {
        let it = t.iter;
        let loss = t.step()?;
        loss_csv.row(&format!("{it},{loss}"))?;
        if due(t.iter, p.val_every) {
            let v = reconstruction_mse(&t.mae, &val_images, p.mask_ratio, cfg.seed)?;
            val_csv.row(&format!("{},{v}", t.iter))?;
            log(&format!("pretrain iter {} loss {loss:.5} val_mse {v:.5}", t.iter));
        }
        if due(t.iter, p.checkpoint_every) {
            t.checkpoint().save(&ckpt_path)?;
        }
    }
    let final_val_mse = reconstruction_mse(&t.mae, &val_images, p.mask_ratio, cfg.seed)?;
    t.checkpoint().save(&ckpt_path)?;
    Ok(PretrainSummary {
        iters: t.iter,
        initial_val_mse: initial,
        final_val_mse,
        checkpoint: ckpt_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn check_size(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if ds.manifest.size != cfg.mae.img_size {
        return Err(Error::Config(format!(
            "dataset {} has {}px images but the model expects {}px",
            ds.root.display(),
            ds.manifest.size,
            cfg.mae.img_size
        )));
    }
    Ok(())
}

fn frozen_mae(cfg: &TrainConfig) -> Result<TinyMae> {
    let mae = load_mae(&Checkpoint::load_kind(&cfg.paths.mae_checkpoint, MAE_KIND)?)?;
    if mae.cfg != cfg.mae {
        return Err(Error::Config(format!(
            "{} was trained with {:?}, the configuration says {:?}",
            cfg.paths.mae_checkpoint.display(),
            mae.cfg,
            cfg.mae
        )));
    }
    Ok(mae)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoveSummary {
    pub iters: u64,
    pub final_val: MetricsReport,
    pub best_val_iou: f64,
    pub best_iter: u64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub seconds: f64,
}

pub const VAL_CSV_HEADER: &str = "iter,acc,iou,coverage,max_f_beta,corloc";

fn val_row(iter: u64, r: &MetricsReport) -> String {
    format!(
        "{iter},{},{},{},{},{}",
        r.mean_acc, r.mean_iou, r.mean_coverage, r.max_f_beta, r.corloc
    )
}

/// Train the segmenter adversarially. Writes `loss.csv`, `val.csv`,
/// `last.ckpt`, `best.ckpt` and optional panels into `cfg.paths.out_dir`.
pub fn run_move(cfg: &TrainConfig, resume: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<MoveSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let m = &cfg.moves;
    let train = load_dataset(&cfg.paths.train_data, m.train_images)?;
    let val = load_dataset(&cfg.paths.val_data, Some(m.val_images))?;
    check_size(cfg, &train)?;
    let mae = frozen_mae(cfg)?;
    let mae_sum = mae.checksum();
    let out = cfg.paths.out_dir.clone();
    cfg.echo_to(&out)?;
    let train_cache = FeatureCache::build(&mae, &images_of(&train))?;
    let val_cache = FeatureCache::build(&mae, &images_of(&val))?;
    let gts = masks_of(&val);

    let (mut t, mut best) = match resume {
        Some(path) => {
            let c = Checkpoint::load_kind(path, MOVE_KIND)?;
            let best_iou = c.meta.get("best_iou").and_then(|v| v.as_f64()).unwrap_or(f64::NEG_INFINITY);
            let best_iter = c.meta.get("best_iter").and_then(|v| v.as_u64()).unwrap_or(0);
            (MoveTrainer::resume(cfg.clone(), mae, &c)?, (best_iou, best_iter))
        }
        None => (MoveTrainer::new(cfg.clone(), mae)?, (f64::NEG_INFINITY, 0)),
    };
    let resume_at = resume.map(|_| t.iter);
    let mut loss_csv = CsvLog::open(&out.join("loss.csv"), IterLog::CSV_HEADER, resume_at)?;
    let mut val_csv = CsvLog::open(&out.join("val.csv"), VAL_CSV_HEADER, resume_at.map(|i| i + 1))?;
    let last_path = out.join("last.ckpt");
    let best_path = out.join("best.ckpt");
    let save = |t: &MoveTrainer, best: (f64, u64), path: &Path| {
        let mut c = t.checkpoint();
        c.meta.insert("best_iou".into(), best.0.into());
        c.meta.insert("best_iter".into(), best.1.into());
        c.save(path)
    };

    let mut final_val = None;
    while t.iter < m.iters {
        let row = t.step(&train_cache)?;
        loss_csv.row(&row.csv_row())?;
        let done = t.iter == m.iters;
        if due(t.iter, m.val_every) || done {
            let r = t.validate(&val_cache, &gts)?;
            val_csv.row(&val_row(t.iter, &r))?;
            log(&format!(
                "iter {} L_advD {:.4} L_advS {:.4} L_min {:.4} L_bin {:.4} val_iou {:.4} coverage {:.4}",
                t.iter, row.adv_d, row.adv_s, row.min, row.bin, r.mean_iou, r.mean_coverage
            ));
            if r.mean_iou > best.0 {
                best = (r.mean_iou, t.iter);
                save(&t, best, &best_path)?;
            }
            let stop = m.target_iou.is_some_and(|target| r.mean_iou >= target);
            final_val = Some(r);
            if stop {
                log(&format!("target IoU reached at iter {}", t.iter));
                break;
            }
        }
        if due(t.iter, m.checkpoint_every) {
            save(&t, best, &last_path)?;
        }
        if due(t.iter, m.render_every) {
            let panels = training_panels(&t.mae, &t.seg, m, &val_cache, 4, cfg.seed)?;
            save_panels(&panels, &out.join("panels"), &format!("iter{:06}", t.iter))?;
        }
    }
    let final_val = match final_val {
        Some(r) => r,
        None => t.validate(&val_cache, &gts)?,
    };
    if best.0 == f64::NEG_INFINITY {
        best = (final_val.mean_iou, t.iter);
        save(&t, best, &best_path)?;
    }
    save(&t, best, &last_path)?;
    if t.mae.checksum() != mae_sum {
        return Err(Error::invalid("run_move", "frozen autoencoder changed during training"));
    }
    Ok(MoveSummary {
        iters: t.iter,
        final_val,
        best_val_iou: best.0,
        best_iter: best.1,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedSummary {
    pub iters: u64,
    pub final_val: MetricsReport,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Train the segmenter head on ground-truth masks; writes
/// `supervised_loss.csv`, `supervised_val.csv` and `supervised.ckpt`.
pub fn run_supervised(cfg: &TrainConfig, log: &mut dyn FnMut(&str)) -> Result<SupervisedSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let s = &cfg.supervised;
    let train = load_dataset(&cfg.paths.train_data, cfg.moves.train_images)?;
    let val = load_dataset(&cfg.paths.val_data, Some(cfg.moves.val_images))?;
    check_size(cfg, &train)?;
    let mae = frozen_mae(cfg)?;
    let out = cfg.paths.out_dir.clone();
    cfg.echo_to(&out)?;
    let train_cache = FeatureCache::build(&mae, &images_of(&train))?;
    let val_cache = FeatureCache::build(&mae, &images_of(&val))?;
    let (train_gts, val_gts) = (masks_of(&train), masks_of(&val));
    let mut t = SupervisedTrainer::new(cfg.clone())?;
    let mut loss_csv = CsvLog::open(&out.join("supervised_loss.csv"), "iter,bce", None)?;
    let mut val_csv = CsvLog::open(&out.join("supervised_val.csv"), VAL_CSV_HEADER, None)?;
    while t.iter < s.iters {
        let it = t.iter;
        let loss = t.step(&train_cache, &train_gts)?;
        loss_csv.row(&format!("{it},{loss}"))?;
        if due(t.iter, s.val_every) && t.iter < s.iters {
            let r = t.validate(&val_cache, &val_gts)?;
            val_csv.row(&val_row(t.iter, &r))?;
            log(&format!("supervised iter {} bce {loss:.4} val_iou {:.4}", t.iter, r.mean_iou));
        }
    }
    let final_val = t.validate(&val_cache, &val_gts)?;
    val_csv.row(&val_row(t.iter, &final_val))?;
    let path = out.join("supervised.ckpt");
    t.checkpoint().save(&path)?;
    Ok(SupervisedSummary {
        iters: t.iter,
        final_val,
        checkpoint: path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Load a segmenter checkpoint and the autoencoder it was trained on.
pub fn load_pipeline(
    ckpt_path: &Path,
    mae_override: Option<&Path>,
) -> Result<(crate::nn::Segmenter, TinyMae, TrainConfig)> {
    let c = Checkpoint::load(ckpt_path)?;
    let (seg, mut cfg) = super::moves::load_segmenter(&c)?;
    if let Some(p) = mae_override {
        cfg.paths.mae_checkpoint = p.to_path_buf();
    }
    let mae = frozen_mae(&cfg)?;
    Ok((seg, mae, cfg))
}
