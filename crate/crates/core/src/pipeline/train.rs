//! Mini-batch SGD training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{load_manifest, load_utterances, ExperimentConfig, PipelineError, TargetSet, Utterance};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::model::Model;
use crate::numerics::{sgd_step, Gradients, ParamStore, TrainMode};

pub const LOG_HEADER: &str = "epoch,train_loss,dev_loss,lr,skipped,improved";

/// Step decay on a dev-loss plateau: after `patience` epochs without a new
/// best, the learning rate is multiplied by `decay`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(base_lr: f64, decay: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr: base_lr,
            decay,
            patience: patience.max(1),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's dev loss; true when it is a new best.
    pub fn observe(&mut self, dev_loss: f64) -> bool {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.decay;
            self.stale = 0;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub skipped: usize,
    pub improved: bool,
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.dev_loss,
            self.lr,
            self.skipped,
            u8::from(self.improved)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<EpochRecord>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Length-sorted batches in a seeded random order.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, u64::MAX));
    batches.shuffle(&mut rng);
    batches
}

fn clip(grads: &mut Gradients, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    model: Model,
    store: ParamStore,
    pool: rayon::ThreadPool,
}

impl Trainer<'_> {
    fn utterance_grad(&self, utt: &Utterance, index: usize, epoch: usize) -> (Result<f64, PipelineError>, Gradients) {
        let t = &self.cfg.training;
        let mut grads = self.store.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(t.seed, epoch as u64, index as u64));
        let mut mode = TrainMode {
            rng: &mut rng,
            noise_sigma: t.noise_sigma,
        };
        let loss = self
            .model
            .loss_and_grad(&self.store, &utt.features, &utt.target, Some(&mut mode), &mut grads)
            .map_err(PipelineError::from);
        (loss, grads)
    }

    /// One optimizer step. Returns the mean loss and number of skipped
    /// utterances, or `None` when every utterance was skipped.
    fn step(
        &mut self,
        data: &[Utterance],
        batch: &[usize],
        epoch: usize,
        batch_no: usize,
        lr: f64,
    ) -> Result<(Option<f64>, usize), PipelineError> {
        let results: Vec<_> = self
            .pool
            .install(|| batch.par_iter().map(|&i| self.utterance_grad(&data[i], i, epoch)).collect());
        let mut total = self.store.zeros_like();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for (&i, (loss, grads)) in batch.iter().zip(results) {
            match loss {
                Ok(l) if !l.is_finite() => {
                    return Err(PipelineError::NonFinite {
                        what: format!("loss on {}", data[i].id),
                        epoch,
                        batch: batch_no,
                    })
                }
                Ok(l) => {
                    loss_sum += l;
                    used += 1;
                    total.add_scaled(&grads, 1.0);
                }
                Err(PipelineError::Model(e)) if e.is_infeasible() => {
                    log::debug!("skipping {}: {e}", data[i].id);
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Ok((None, skipped));
        }
        total.scale(1.0 / used as f64);
        if !total.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "gradient".into(),
                epoch,
                batch: batch_no,
            });
        }
        clip(&mut total, self.cfg.training.grad_clip);
        self.store.accumulate(&total);
        sgd_step(&mut self.store, lr)?;
        Ok((Some(loss_sum / used as f64), skipped))
    }

    fn dev_loss(&self, dev: &[Utterance]) -> Result<f64, PipelineError> {
        let losses: Vec<_> = self.pool.install(|| {
            dev.par_iter()
                .map(|u| self.model.loss(&self.store, &u.features, &u.target))
                .collect()
        });
        let mut sum = 0.0;
        let mut n = 0usize;
        for l in losses {
            match l {
                Ok(l) => {
                    sum += l;
                    n += 1;
                }
                Err(e) if e.is_infeasible() => {}
                Err(e) => return Err(e.into()),
            }
        }
        if n == 0 {
            return Err(PipelineError::Data("no feasible development utterances".into()));
        }
        Ok(sum / n as f64)
    }
}

/// Trains from the config's manifests and writes `model.ckpt` (best dev
/// loss) and `train_log.csv` into `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainSummary, PipelineError> {
    let targets = TargetSet::from_config(cfg)?;
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone().ok_or_else(|| PipelineError::Usage(format!("config has no [data] {what} manifest")))
    };
    let train = load_utterances(&load_manifest(&need(&cfg.data.train, "train")?)?, &targets, cfg.feature_dim)?;
    let dev = load_utterances(&load_manifest(&need(&cfg.data.dev, "dev")?)?, &targets, cfg.feature_dim)?;
    train_on(cfg, &targets, &train, &dev, out_dir)
}

pub fn train_on(
    cfg: &ExperimentConfig,
    targets: &TargetSet,
    train: &[Utterance],
    dev: &[Utterance],
    out_dir: &Path,
) -> Result<TrainSummary, PipelineError> {
    if train.is_empty() || dev.is_empty() {
        return Err(PipelineError::Data("training and development sets must be non-empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let t = &cfg.training;
    let model_cfg = cfg.model_config(targets.alphabet.len());
    let mut store = ParamStore::new(t.seed);
    let model = Model::register(&mut store, &model_cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(t.threads)
        .build()
        .map_err(|e| PipelineError::Usage(format!("thread pool: {e}")))?;
    let mut trainer = Trainer {
        cfg,
        model,
        store,
        pool,
    };
    log::info!(
        "training {} on {} utterances ({} dev), {} parameters",
        cfg.kind,
        train.len(),
        dev.len(),
        trainer.store.num_scalars()
    );

    let checkpoint = out_dir.join("model.ckpt");
    let log_path = out_dir.join("train_log.csv");
    let mut log_file = fs::File::create(&log_path).map_err(|e| PipelineError::io(&log_path, e))?;
    writeln!(log_file, "{LOG_HEADER}").map_err(|e| PipelineError::io(&log_path, e))?;

    let lengths: Vec<usize> = train.iter().map(|u| u.features.rows()).collect();
    let mut schedule = PlateauSchedule::new(t.base_lr, t.lr_decay, t.patience);
    let mut records = Vec::with_capacity(t.epochs);
    let mut step_losses = Vec::new();
    let mut best_epoch = 0;
    for epoch in 1..=t.epochs {
        let lr = schedule.lr();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut skipped = 0usize;
        for (b, batch) in make_batches(&lengths, t.batch_size, t.seed, epoch).iter().enumerate() {
            let (loss, skip) = trainer.step(train, batch, epoch, b + 1, lr)?;
            skipped += skip;
            if let Some(l) = loss {
                loss_sum += l;
                steps += 1;
                step_losses.push(l);
            }
        }
        if steps == 0 {
            return Err(PipelineError::Data("every training utterance was skipped as infeasible".into()));
        }
        let dev_loss = trainer.dev_loss(dev)?;
        if !dev_loss.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "dev loss".into(),
                epoch,
                batch: 0,
            });
        }
        let improved = schedule.observe(dev_loss);
        if improved {
            best_epoch = epoch;
            let meta = CheckpointMeta {
                model: model_cfg.clone(),
                scheme: targets.scheme(),
                alphabet_fingerprint: targets.alphabet.fingerprint(),
                seed: t.seed,
                epoch,
                dev_loss: Some(dev_loss),
            };
            save_checkpoint(&checkpoint, &meta, &trainer.store)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            dev_loss,
            lr,
            skipped,
            improved,
        };
        log::info!(
            "epoch {epoch}: train {:.4} dev {:.4} lr {lr:.3e} skipped {skipped}{}",
            record.train_loss,
            dev_loss,
            if improved { " *" } else { "" }
        );
        writeln!(log_file, "{}", record.csv_row()).map_err(|e| PipelineError::io(&log_path, e))?;
        records.push(record);
    }
    Ok(TrainSummary {
        checkpoint,
        log: log_path,
        records,
        step_losses,
        best_epoch,
        best_dev_loss: schedule.best(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_fixture_decays_by_factor() {
        let mut s = PlateauSchedule::new(0.05, 0.1, 3);
        let mut lrs = Vec::new();
        for dev in [5.0, 4.0, 4.5, 4.2, 4.1, 4.3, 3.0, 3.5] {
            lrs.push(s.lr());
            s.observe(dev);
        }
        lrs.push(s.lr());
        let expect = [0.05, 0.05, 0.05, 0.05, 0.05, 0.005, 0.005, 0.005, 0.005];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
        assert_eq!(s.best(), 3.0);
    }

    #[test]
    fn batches_cover_every_utterance_once() {
        let lengths = [5, 3, 9, 1, 7, 7, 2];
        let batches = make_batches(&lengths, 3, 4, 1);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 3));
        // batches hold neighbours in length order
        assert!(batches.contains(&vec![3, 6, 1]));
        assert_eq!(batches, make_batches(&lengths, 3, 4, 1));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", 2, 1, crate::numerics::Init::Zeros).unwrap();
        let mut g = store.zeros_like();
        g.get_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        clip(&mut g, Some(1.0));
        assert!((g.norm() - 1.0).abs() < 1e-12);
        clip(&mut g, None);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
