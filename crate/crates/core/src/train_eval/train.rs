//! Seeded mini-batch training with periodic checkpoints and a held-out evaluation.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate_indexed, EvalReport, Reconstructor};
use super::optim::{lr_at, round_store, OptimizerState};
use super::TrainError;
use crate::spike_sim::DatasetSample;
use crate::swinsf::{Checkpoint, ParamStore, SwinSf};

pub const LOG_NAME: &str = "train_log.txt";
pub const LAST_CHECKPOINT: &str = "last.swsf";
pub const HOLDOUT_CSV: &str = "holdout_metrics.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: u64,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub decay_every: u64,
    pub batch_size: usize,
    /// Seeds the train/holdout split and per-epoch shuffling.
    pub shuffle_seed: u64,
    /// Fraction of samples held out for the final evaluation.
    pub holdout: f64,
    /// Epochs between checkpoint files; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// A batch loss above this multiple of the run's first batch loss aborts
    /// training as diverged.
    pub divergence_factor: f64,
    pub manifest: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 300,
            lr0: 1e-4,
            decay_every: 100,
            batch_size: 1,
            shuffle_seed: 0,
            holdout: 0.1,
            checkpoint_every: 50,
            divergence_factor: 1e4,
            manifest: None,
        }
    }
}

impl TrainRunConfig {
    /// 900 epochs, halving every 300, batch 4.
    pub fn full_scale() -> Self {
        TrainRunConfig {
            epochs: 900,
            decay_every: 300,
            batch_size: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.decay_every == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs, decay_every and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return Err(TrainError::Config(format!(
                "divergence_factor {} must exceed 1",
                self.divergence_factor
            )));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(TrainError::Config(format!(
                "holdout {} must lie in [0, 1)",
                self.holdout
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| TrainError::Config(format!("{key} = {v:?}: {e}")))
        }
        match key {
            "epochs" => self.epochs = p(key, value)?,
            "lr0" | "lr" => self.lr0 = p(key, value)?,
            "decay_every" => self.decay_every = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "shuffle_seed" => self.shuffle_seed = p(key, value)?,
            "holdout" => self.holdout = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "divergence_factor" => self.divergence_factor = p(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            _ => return Err(TrainError::Config(format!("unknown run key {key:?}"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        matches!(
            key,
            "epochs"
                | "lr0"
                | "lr"
                | "decay_every"
                | "batch_size"
                | "shuffle_seed"
                | "holdout"
                | "checkpoint_every"
                | "divergence_factor"
                | "manifest"
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr0 = {:?}", self.lr0);
        let _ = writeln!(s, "decay_every = {}", self.decay_every);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "shuffle_seed = {}", self.shuffle_seed);
        let _ = writeln!(s, "holdout = {:?}", self.holdout);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "divergence_factor = {:?}", self.divergence_factor);
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest = {}", m.display());
        }
        s
    }
}

/// Seeded `(train, holdout)` index split. At least one sample always trains;
/// an empty holdout means evaluation falls back to the training samples.
pub fn split_indices(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((n as f64 * holdout).floor() as usize).min(n.saturating_sub(1));
    let hold = idx.split_off(n - n_hold);
    let (mut train, mut hold) = (idx, hold);
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u64,
    pub lr: f64,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} lr={:e} loss={:.8} steps={}",
            self.epoch, self.lr, self.loss, self.steps
        )
    }
}

/// Training state over a fixed sample set.
pub struct Trainer<'a> {
    model: SwinSf,
    opt: OptimizerState,
    epochs_done: u64,
    run: TrainRunConfig,
    samples: &'a [DatasetSample],
    train_idx: Vec<usize>,
    hold_idx: Vec<usize>,
    first_loss: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(mut model: SwinSf, run: TrainRunConfig, samples: &'a [DatasetSample]) -> Result<Self, TrainError> {
        round_store(model.params_mut());
        let opt = OptimizerState::new(model.params(), run.lr0);
        Self::build(model, opt, 0, run, samples)
    }

    pub fn resume(ck: Checkpoint, run: TrainRunConfig, samples: &'a [DatasetSample]) -> Result<Self, TrainError> {
        let opt = match ck.adam {
            Some(a) => OptimizerState::from_snapshot(a, run.lr0),
            None => OptimizerState::new(ck.model.params(), run.lr0),
        };
        Self::build(ck.model, opt, ck.epochs_done, run, samples)
    }

    fn build(
        model: SwinSf,
        opt: OptimizerState,
        epochs_done: u64,
        run: TrainRunConfig,
        samples: &'a [DatasetSample],
    ) -> Result<Self, TrainError> {
        run.validate()?;
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let need = model.config().windows.total();
        if let Some(s) = samples.iter().find(|s| s.stream.t_len() != need) {
            return Err(TrainError::Contract(format!(
                "dataset samples have {} ticks, model windows {} need {need}",
                s.stream.t_len(),
                model.config().windows
            )));
        }
        let (train_idx, hold_idx) = split_indices(samples.len(), run.holdout, run.shuffle_seed);
        Ok(Trainer {
            model,
            opt,
            epochs_done,
            run,
            samples,
            train_idx,
            hold_idx,
            first_loss: None,
        })
    }

    pub fn model(&self) -> &SwinSf {
        &self.model
    }

    pub fn epochs_done(&self) -> u64 {
        self.epochs_done
    }

    pub fn steps(&self) -> u64 {
        self.opt.step
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn holdout_indices(&self) -> &[usize] {
        &self.hold_idx
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            epochs_done: self.epochs_done,
            adam: Some(self.opt.snapshot()),
        }
    }

    /// One pass over the shuffled training samples.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let epoch = self.epochs_done;
        let lr = lr_at(self.run.lr0, epoch, self.run.decay_every);
        self.opt.lr = lr;
        let mut order = self.train_idx.clone();
        order.shuffle(&mut epoch_rng(self.run.shuffle_seed, epoch));
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.run.batch_size) {
            let mut acc: Option<ParamStore> = None;
            for &k in batch {
                let s = &self.samples[k];
                let (loss, grads) = self.model.loss_and_grads(&s.stream, &s.gt)?;
                if !loss.is_finite() {
                    return Err(self.non_finite("loss"));
                }
                let first = *self.first_loss.get_or_insert(loss);
                if loss > first * self.run.divergence_factor {
                    return Err(TrainError::Diverged {
                        loss,
                        first,
                        epoch: self.epochs_done + 1,
                        step: self.opt.step,
                    });
                }
                loss_sum += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (name, t) in a.iter_mut() {
                            let g = grads.get(name).expect("same layout");
                            for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            if grads.iter().any(|(_, t)| !t.all_finite()) {
                return Err(self.non_finite("gradient"));
            }
            self.opt.adam_step(self.model.params_mut(), &grads)?;
            self.opt.round_to_f32(self.model.params_mut());
            if self.model.params().iter().any(|(_, t)| !t.all_finite()) {
                return Err(self.non_finite("parameter"));
            }
        }
        self.epochs_done += 1;
        Ok(EpochRecord {
            epoch: self.epochs_done,
            lr,
            loss: loss_sum / order.len() as f64,
            steps: self.opt.step,
        })
    }

    fn non_finite(&self, what: &'static str) -> TrainError {
        TrainError::NonFinite {
            what,
            epoch: self.epochs_done + 1,
            step: self.opt.step,
        }
    }

    /// Scores the held-out samples, or the training samples when none are held out.
    pub fn evaluate_holdout(&self) -> Result<(EvalReport, bool), TrainError> {
        let on_train = self.hold_idx.is_empty();
        let idx = if on_train { &self.train_idx } else { &self.hold_idx };
        let rep = evaluate_indexed(
            self.samples,
            idx,
            &Reconstructor::SwinSf(&self.model),
            self.model.config().windows,
        )?;
        Ok((rep, on_train))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub holdout: EvalReport,
    /// The holdout split was empty and the report covers training samples.
    pub holdout_is_train: bool,
}

/// Trains up to `run.epochs` total epochs, continuing from `resume` if given.
///
/// With `out_dir`, appends one log line per epoch, writes
/// `epoch_NNNN.swsf` every `checkpoint_every` epochs, `last.swsf` at the end,
/// and the held-out metrics table as CSV.
pub fn train(
    model: SwinSf,
    run: TrainRunConfig,
    samples: &[DatasetSample],
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    let epochs = run.epochs;
    let every = run.checkpoint_every;
    let mut tr = match resume {
        Some(ck) => Trainer::resume(ck, run, samples)?,
        None => Trainer::new(model, run, samples)?,
    };
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let mut o = OpenOptions::new();
            o.create(true);
            if tr.epochs_done() > 0 {
                o.append(true);
            } else {
                o.write(true).truncate(true);
            }
            Some(o.open(d.join(LOG_NAME))?)
        }
        None => None,
    };
    let mut log = Vec::new();
    while tr.epochs_done() < epochs {
        let rec = tr.run_epoch()?;
        log::info!("{}", rec.to_line());
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", rec.to_line())?;
        }
        on_epoch(&rec);
        if let Some(d) = out_dir {
            if every > 0 && rec.epoch % every == 0 {
                tr.checkpoint().save(&d.join(format!("epoch_{:04}.swsf", rec.epoch)))?;
            }
        }
        log.push(rec);
    }
    let checkpoint = tr.checkpoint();
    let (holdout, holdout_is_train) = tr.evaluate_holdout()?;
    if let Some(d) = out_dir {
        checkpoint.save(&d.join(LAST_CHECKPOINT))?;
        fs::write(d.join(HOLDOUT_CSV), holdout.to_csv())?;
    }
    Ok(TrainReport {
        checkpoint,
        log,
        holdout,
        holdout_is_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_keeps_a_training_sample() {
        assert_eq!(split_indices(10, 0.2, 3), split_indices(10, 0.2, 3));
        let (t, h) = split_indices(10, 0.2, 3);
        assert_eq!((t.len(), h.len()), (8, 2));
        let (t, h) = split_indices(2, 0.1, 0);
        assert_eq!((t, h), (vec![0, 1], vec![]));
        let (t, h) = split_indices(1, 0.9, 0);
        assert_eq!((t.len(), h.len()), (1, 0));
    }

    #[test]
    fn run_config_keys() {
        let mut r = TrainRunConfig::default();
        r.set("lr", "0.002").unwrap();
        r.set("epochs", "7").unwrap();
        assert_eq!((r.lr0, r.epochs), (0.002, 7));
        assert!(r.set("beta", "1").is_err());
        r.decay_every = 0;
        assert!(r.validate().is_err());
        assert!(TrainRunConfig::is_key("holdout") && !TrainRunConfig::is_key("channels"));
    }
}
