use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_stream, Dataset};
use crate::error::{Error, Result};
use crate::model::{apply_norm_stats, loss_and_grad, ModelParams, ModelSpec};
use crate::train::adam::{adam_step, OptimizerState};
use crate::train::checkpoint::{Checkpoint, CheckpointMeta};
use crate::train::eval::evaluate;
use crate::train::{lr_schedule, TrainConfig};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_margin_loss: f64,
    pub mean_recon_loss: f64,
    pub test_error: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_error: f64,
    pub params: ModelParams<f32>,
    pub log_path: PathBuf,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
}

pub const LOG_FILE: &str = "log.csv";
pub const BEST_FILE: &str = "best.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "train_config.json";

/// Trains from a seeded initialisation. Writes the CSV log row by row, the
/// best-by-test-error checkpoint and the final checkpoint (with optimizer
/// state) into `cfg.checkpoint_dir`, next to the resolved configuration.
pub fn fit(spec: &ModelSpec, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<FitReport> {
    cfg.validate()?;
    spec.validate()?;
    let train = cfg.train_limit.map_or_else(|| train.clone(), |n| train.head(n));
    let test = cfg.test_limit.map_or_else(|| test.clone(), |n| test.head(n));

    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let best_path = dir.join(BEST_FILE);
    let final_path = dir.join(FINAL_FILE);
    let resolved = serde_json::to_string_pretty(&(spec, cfg)).map_err(|e| Error::Format(e.to_string()))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, resolved).map_err(|e| Error::io(&config_path, e))?;
    let mut writer = csv::Writer::from_path(&log_path).map_err(|e| csv_err(&log_path, e))?;

    let mut params = ModelParams::<f32>::init(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = OptimizerState::new(&params);
    let classes = spec.num_classes();
    let (train_mode, test_mode) = (cfg.train_mode(), cfg.test_mode());

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let started = Instant::now();
        let stream = epoch_stream(&train, train_mode.clone(), classes, cfg.seed, epoch as u64, cfg.batch_size, true)?;
        let batches = stream.batch_count();
        let (mut total, mut margin, mut recon, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in stream.enumerate() {
            let (loss, grads, out) = loss_and_grad(spec, &params, &batch)?;
            apply_norm_stats(&mut params, &out.norm_stats);
            adam_step(&mut params, &grads, &mut opt, &cfg.adam, lr, b)?;
            let n = batch.len() as f64;
            total += loss.total * n;
            margin += loss.margin * n;
            recon += loss.recon * n;
            seen += batch.len();
            if cfg.progress && (b + 1) % 500 == 0 {
                println!(
                    "epoch {epoch} batch {}/{batches} loss {:.5} ({:.0}s)",
                    b + 1,
                    total / seen as f64,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        let eval = evaluate(spec, &params, &test, &test_mode, cfg.test_seed, cfg.task.k(), cfg.strict)?;
        let seen = seen.max(1) as f64;
        let record = EpochRecord {
            epoch,
            mean_total_loss: total / seen,
            mean_margin_loss: margin / seen,
            mean_recon_loss: recon / seen,
            test_error: eval.error,
            lr,
        };
        writer.serialize(&record).map_err(|e| csv_err(&log_path, e))?;
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        if cfg.progress {
            println!(
                "epoch {epoch} loss {:.5} margin {:.5} recon {:.5} test_error {:.4}% lr {:.3e} ({:.0}s)",
                record.mean_total_loss,
                record.mean_margin_loss,
                record.mean_recon_loss,
                100.0 * record.test_error,
                lr,
                started.elapsed().as_secs_f64()
            );
        }
        let meta = CheckpointMeta {
            epoch: epoch as u64,
            test_error: Some(eval.error),
        };
        if best.is_none_or(|(_, e)| eval.error < e) {
            best = Some((epoch, eval.error));
            Checkpoint {
                spec: spec.clone(),
                params: params.clone(),
                optimizer: None,
                meta: meta.clone(),
            }
            .save(&best_path)?;
        }
        Checkpoint {
            spec: spec.clone(),
            params: params.clone(),
            optimizer: Some(opt.clone()),
            meta,
        }
        .save(&final_path)?;
        log.push(record);
    }
    let (best_epoch, best_error) = best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    Ok(FitReport {
        log,
        best_epoch,
        best_error,
        params,
        log_path,
        best_path,
        final_path,
    })
}

fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
