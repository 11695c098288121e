use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::{filter_dataset, gen_dataset, split_dataset, DatasetManifest, Preloaded};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::model::{build_model, load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use crate::tensor::{Mode, RngState, Tape, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &[Tensor]) -> AdamW {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update; a `None` gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

/// Root-mean-square and mean absolute error.
pub fn rmse_mae(y: &[f64], y_hat: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::InvalidArgument(format!(
            "metrics need equal non-empty lengths, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len() as f64;
    let sq = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let abs = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok((sq.sqrt(), abs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ids: Vec<usize>,
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Predictions {
    pub fn metrics(&self) -> Result<(f64, f64)> {
        rmse_mae(&self.y, &self.y_hat)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["id", "y", "y_hat", "sigma"]).map_err(err)?;
        for i in 0..self.ids.len() {
            w.serialize((self.ids[i], self.y[i], self.y_hat[i], self.sigma[i])).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

const EVAL_CHUNK: usize = 128;

/// Eval-mode predictions for every sample of `data`, in load order.
pub fn predict(model: &mut Model, data: &Preloaded) -> Result<Predictions> {
    let bb = &model.config.backbone;
    let all = data.all();
    let shape = all.frames.shape();
    if (shape[2], shape[3]) != (bb.height, bb.width) {
        return Err(Error::InvalidArgument(format!(
            "model expects {}x{} inputs, dataset has {}x{}",
            bb.height, bb.width, shape[2], shape[3]
        )));
    }
    let mut out = Predictions {
        ids: Vec::new(),
        y: Vec::new(),
        y_hat: Vec::new(),
        sigma: Vec::new(),
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.gather(chunk)?;
        let (mu, sigma) = model.predict(&batch.frames, &batch.events)?;
        out.ids.extend(&batch.ids);
        out.y.extend_from_slice(batch.steering.data());
        out.y_hat.extend(mu);
        out.sigma.extend(sigma);
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    /// Model at the epoch with the lowest validation RMSE (the initial model
    /// when no epoch ran).
    pub best: Model,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best_record(&self) -> Option<&MetricsRecord> {
        self.metrics.iter().find(|m| m.epoch == self.best_epoch)
    }
}

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 1 << 20;
const NOISE_STREAM: u64 = 2 << 20;

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_rmse", "val_mae", "wall_seconds"])
        .expect("in-memory csv");
    for r in records {
        w.serialize(r).expect("in-memory csv");
    }
    fs::write(path, w.into_inner().expect("in-memory csv")).map_err(|e| Error::io(path, e))
}

/// Behaviour cloning with AdamW. Writes `metrics.csv` after every epoch and
/// keeps the lowest-validation-RMSE model in `out_dir/checkpoint`.
///
/// The minibatch order of epoch `k` comes from a stream keyed by the seed
/// and `k`, so runs that differ only in model flags see the same batches.
pub fn train(cfg: &RunConfig, train_set: &Preloaded, val_set: &Preloaded, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset("training needs non-empty train and validation sets".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoint");
    let metrics_path = out_dir.join("metrics.csv");
    let loss_cfg = cfg.loss_config();

    let mut model = build_model(&cfg.model_config(), cfg.seed.wrapping_add(INIT_STREAM))?;
    save_checkpoint(&model, CheckpointMeta { seed: cfg.seed, epoch: 0 }, &ckpt_dir)?;
    write_metrics(&metrics_path, &[])?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_rmse = f64::INFINITY;

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, model.params.tensors());
    let mut records = Vec::new();
    let start = Instant::now();
    let n = train_set.len();
    for epoch in 1..=cfg.effective_epochs() {
        let mut order: Vec<usize> = (0..n).collect();
        RngState::derive(cfg.seed, ORDER_STREAM + epoch as u64).shuffle(&mut order);
        let mut rng = RngState::derive(cfg.seed, NOISE_STREAM + epoch as u64);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.gather(idx)?;
            let b = idx.len();
            let mut tape = Tape::new();
            let f = tape.constant(batch.frames);
            let e = tape.constant(batch.events);
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                step: step + 1,
                loss,
            };
            // blown-up weights can fail inside the forward pass before a loss exists
            let (vars, out) = match model.forward(&mut tape, f, e, Mode::Train, &mut rng) {
                Err(Error::Domain { value, .. }) if !value.is_finite() => return Err(diverged(value)),
                other => other?,
            };
            let z = tape.constant(batch.steering.reshaped([b, 1])?);
            let loss = total_loss(&mut tape, &out.pred, z, &loss_cfg, &mut rng)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(diverged(value));
            }
            loss_sum += value * b as f64;
            tape.backward(loss)?;
            let grads: Vec<Option<&[f64]>> = vars.iter().map(|v| tape.grad(*v)).collect();
            opt.step(model.params.tensors_mut(), &grads);
        }
        let (val_rmse, val_mae) = predict(&mut model, val_set)?.metrics()?;
        records.push(MetricsRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_rmse,
            val_mae,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        write_metrics(&metrics_path, &records)?;
        if val_rmse < best_rmse {
            best_rmse = val_rmse;
            best_epoch = epoch;
            best = model.clone();
            save_checkpoint(&model, CheckpointMeta { seed: cfg.seed, epoch }, &ckpt_dir)?;
        }
    }
    Ok(TrainOutcome {
        metrics: records,
        best,
        best_epoch,
    })
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(missing))
    }
}

/// Loads the train and test splits written by [`cmd_gen_data`].
pub fn load_splits(cfg: &RunConfig) -> Result<(Preloaded, Preloaded)> {
    let (tp, vp) = (cfg.train_manifest_path(), cfg.test_manifest_path());
    require(&[tp.clone(), vp.clone()])?;
    let train = Preloaded::load(&DatasetManifest::load(&tp)?, cfg.normalize)?;
    let test = Preloaded::load(&DatasetManifest::load(&vp)?, cfg.normalize)?;
    Ok((train, test))
}

/// Generates `cfg.samples` samples, splits them and filters each split.
/// Writes `manifest.json`, `train.json` and `test.json` into the data dir.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let all = gen_dataset(cfg.samples, cfg.seed, &cfg.scenario, &cfg.data_dir)?;
    let (train, test) = split_dataset(&all, cfg.test_fraction, cfg.seed)?;
    let train = filter_dataset(&train, &cfg.filters)?;
    let test = filter_dataset(&test, &cfg.filters)?;
    train.save(&cfg.train_manifest_path())?;
    test.save(&cfg.test_manifest_path())?;
    Ok((train, test))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train_set, test_set) = load_splits(cfg)?;
    train(cfg, &train_set, &test_set, &cfg.out_dir)
}

/// Evaluates a checkpoint on a manifest and writes `predictions.csv` to
/// `out_dir`. Returns `(rmse, mae)`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path) -> Result<(f64, f64)> {
    require(&[checkpoint.to_path_buf(), manifest.to_path_buf()])?;
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let data = Preloaded::load(&DatasetManifest::load(manifest)?, cfg.normalize)?;
    let preds = predict(&mut model, &data)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    preds.write_csv(&cfg.out_dir.join("predictions.csv"))?;
    preds.metrics()
}

/// Writes the ECFM activation maps of sample `index` of `manifest` into
/// `out_dir/activations`.
pub fn cmd_dump_activations(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, index: usize) -> Result<PathBuf> {
    require(&[checkpoint.to_path_buf(), manifest.to_path_buf()])?;
    let (mut model, _) = load_checkpoint(checkpoint)?;
    if model.config.fusion != crate::model::FusionVariant::Ecfm {
        return Err(Error::InvalidArgument(format!(
            "activation maps need an ecfm model, checkpoint uses {}",
            model.config.fusion.name()
        )));
    }
    let batch = crate::data::load_batch(&DatasetManifest::load(manifest)?, &[index], cfg.normalize)?;
    let mut tape = Tape::new();
    let f = tape.constant(batch.frames);
    let e = tape.constant(batch.events);
    let (_, out) = model.forward(&mut tape, f, e, Mode::Eval, &mut RngState::new(0))?;
    let bundles: Vec<_> = out
        .ecfm
        .iter()
        .map(|o| crate::fusion::ActivationBundle::from_output(&tape, o))
        .collect();
    let dir = cfg.out_dir.join("activations");
    crate::fusion::dump_activations(&bundles, &dir)?;
    Ok(dir)
}
