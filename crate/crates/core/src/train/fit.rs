use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{loss_by_name, Loss};
use super::schedule::{Action, PlateauSchedule};
use crate::data::{batch_iter, Batch, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, MetricReport, Metrics, DEFAULT_THRESHOLD};
use crate::model::{save_weights, TeslNet};
use crate::nn::Mode;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub loss: String,
    pub seed: u64,
    pub shuffle: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr0: 0.001,
            lr_factor: 0.25,
            lr_patience: 4,
            early_stop_patience: 6,
            min_delta: 1e-4,
            batch_size: 4,
            loss: "bce+dice".into(),
            seed: 0,
            shuffle: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let lr_ok = self.lr0 > 0.0 && self.lr_factor > 0.0 && self.lr_factor <= 1.0;
        if !lr_ok {
            return bad("lr0 must be positive and lr_factor in (0, 1]");
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        loss_by_name(&self.loss).map(|_| ())
    }

    pub fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule::new(
            self.lr0,
            self.lr_factor,
            self.lr_patience,
            self.early_stop_patience,
            self.min_delta,
        )
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_acc: f64,
    pub val_se: f64,
    pub val_sp: f64,
    pub val_iou: f64,
    pub val_dice: f64,
    /// Rate in effect after this epoch's decision.
    pub lr: f64,
    pub action: Action,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: f64,
    /// Serialized weights of the best epoch.
    pub best_weights: Option<Vec<u8>>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Produces the validation metrics that drive the schedule.
pub trait Validator {
    fn validate(&mut self, net: &TeslNet<f32>, epoch: usize) -> Result<Metrics>;
}

/// Mean per-image metrics of `ids` in evaluation mode.
pub struct DatasetValidator<'a> {
    pub source: &'a dyn SampleSource,
    pub ids: Vec<String>,
    pub batch_size: usize,
    pub threshold: f64,
}

impl Validator for DatasetValidator<'_> {
    fn validate(&mut self, net: &TeslNet<f32>, _epoch: usize) -> Result<Metrics> {
        Ok(evaluate(net, self.source, &self.ids, self.batch_size, self.threshold, |_, _, _| Ok(()))?.mean)
    }
}

/// Runs the network over `ids` and scores binarized predictions. `on_pred`
/// sees every sample with its probability map and binary mask.
pub fn evaluate(
    net: &TeslNet<f32>,
    source: &dyn SampleSource,
    ids: &[String],
    batch_size: usize,
    threshold: f64,
    mut on_pred: impl FnMut(&Sample, &[f32], &[u8]) -> Result<()>,
) -> Result<MetricReport> {
    if ids.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut counts = Vec::with_capacity(ids.len());
    for chunk in batch_iter(ids, batch_size, 0, false)? {
        let samples = source.load_all(&chunk)?;
        let batch = Batch::from_samples(&samples)?;
        let prob = net.predict(&batch.images)?;
        let hw = prob.numel() / samples.len();
        let pred = binarize(&prob, threshold)?;
        for (i, s) in samples.iter().enumerate() {
            let p = &pred[i * hw..(i + 1) * hw];
            counts.push((s.id.clone(), confusion(p, &s.mask)?));
            on_pred(s, &prob.data()[i * hw..(i + 1) * hw], p)?;
        }
    }
    MetricReport::from_counts(counts)
}

/// Forward, backward and one Adam update on a single batch. Returns the loss.
pub fn train_step(
    net: &mut TeslNet<f32>,
    adam: &mut Adam<f32>,
    loss: &dyn Loss,
    batch: &Batch,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let gt = tape.constant(batch.masks.clone());
    let pred = net.forward(x, Mode::Train)?;
    let l = loss.forward(pred, gt)?;
    let value = f64::from(l.value().item());
    if !value.is_finite() {
        return Err(Error::NumericalAbort {
            epoch: 0,
            step: 0,
            batch_ids: batch.ids.clone(),
        });
    }
    tape.backward(l, &mut net.params)?;
    net.params.apply_updates(tape.take_stat_updates());
    adam.step(&mut net.params, lr);
    Ok(value)
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    /// Directory receiving `train_log.jsonl`, `best.weights` and
    /// `last.weights`.
    pub dir: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_WEIGHTS: &str = "best.weights";
pub const LAST_WEIGHTS: &str = "last.weights";

/// Trains on the source's training ids, validating after every epoch.
pub fn fit(
    net: &mut TeslNet<f32>,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    validator: &mut dyn Validator,
    outputs: &FitOutputs,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let train_ids = source.split().train.clone();
    if train_ids.is_empty() {
        return Err(Error::Data(format!("{} has no training samples", source.describe())));
    }
    let loss = loss_by_name(&cfg.loss)?;
    let mut adam = Adam::new(&net.params);
    let mut schedule = cfg.schedule();
    let mut log = TrainingLog::default();
    let mut log_file = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr();
        let batches = batch_iter(&train_ids, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64), cfg.shuffle)?;
        let (mut total, mut seen) = (0.0, 0usize);
        for (step, ids) in batches.iter().enumerate() {
            let batch = Batch::load(source, ids)?;
            let l = train_step(net, &mut adam, loss.as_ref(), &batch, lr).map_err(|e| match e {
                Error::NumericalAbort { batch_ids, .. } => Error::NumericalAbort {
                    epoch,
                    step: step + 1,
                    batch_ids,
                },
                e => e,
            })?;
            total += l * ids.len() as f64;
            seen += ids.len();
        }
        let val = validator.validate(net, epoch)?;
        let improved = log.best_epoch.is_none() || val.dice > log.best_val_dice;
        let action = schedule.observe(val.dice);
        if improved {
            log.best_epoch = Some(epoch);
            log.best_val_dice = val.dice;
            let bytes = save_weights(net);
            if let Some(dir) = &outputs.dir {
                let p = dir.join(BEST_WEIGHTS);
                std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            }
            log.best_weights = Some(bytes);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / seen as f64,
            val_acc: val.acc,
            val_se: val.se,
            val_sp: val.sp,
            val_iou: val.iou,
            val_dice: val.dice,
            lr: schedule.lr(),
            action,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", record.to_json_line()).map_err(|e| Error::io(path.clone(), e))?;
        }
        log.records.push(record);
        if action == Action::EarlyStop {
            break;
        }
    }
    if let Some(dir) = &outputs.dir {
        let p = dir.join(LAST_WEIGHTS);
        std::fs::write(&p, save_weights(net)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SynthOptions, SynthSource};
    use crate::model::{load_weights, TeslNetConfig};

    struct Scripted(Vec<f64>);

    impl Validator for Scripted {
        fn validate(&mut self, _: &TeslNet<f32>, epoch: usize) -> Result<Metrics> {
            let d = self.0[(epoch - 1).min(self.0.len() - 1)];
            Ok(Metrics {
                acc: d,
                se: d,
                sp: d,
                iou: d,
                dice: d,
            })
        }
    }

    fn tiny_source(n: usize) -> SynthSource {
        SynthSource::new(SynthOptions {
            n,
            val_is_train: true,
            ..SynthOptions::new(3, 32)
        })
        .unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn scripted_plateau_drives_lr_and_stop() {
        let mut net = TeslNet::<f32>::build(&TeslNetConfig::tiny()).unwrap();
        let src = tiny_source(2);
        let log = fit(&mut net, &src, &quick_cfg(10), &mut Scripted(vec![0.5]), &FitOutputs::default()).unwrap();
        let lrs: Vec<f64> = log.records.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![0.001, 0.001, 0.001, 0.001, 0.00025, 0.00025, 0.00025]);
        assert_eq!(log.records[4].action, Action::ReduceLr);
        assert_eq!(log.records[6].action, Action::EarlyStop);
        assert_eq!(log.best_epoch, Some(1));
    }

    #[test]
    fn deterministic_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let run = |out: &FitOutputs| {
            let mut net = TeslNet::<f32>::build(&TeslNetConfig::tiny()).unwrap();
            let src = tiny_source(3);
            let mut v = DatasetValidator {
                source: &src,
                ids: src.split().val.clone(),
                batch_size: 2,
                threshold: 0.5,
            };
            let log = fit(&mut net, &src, &quick_cfg(3), &mut v, out).unwrap();
            (log, net)
        };
        let (a, net_a) = run(&FitOutputs {
            dir: Some(dir.path().to_path_buf()),
        });
        let (b, net_b) = run(&FitOutputs::default());
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(save_weights(&net_a), save_weights(&net_b));
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text, a.to_jsonl());
        assert_eq!(text.lines().count(), 3);
        let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "mean_loss", "val_acc", "val_se", "val_sp", "val_iou", "val_dice", "lr", "action"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
        assert!(dir.path().join(BEST_WEIGHTS).is_file());
        assert!(dir.path().join(LAST_WEIGHTS).is_file());

        // best checkpoint reproduces the best recorded validation Dice
        let mut best = TeslNet::<f32>::build(&TeslNetConfig::tiny()).unwrap();
        load_weights(&mut best, &std::fs::read(dir.path().join(BEST_WEIGHTS)).unwrap()).unwrap();
        let src = tiny_source(3);
        let report = evaluate(&best, &src, &src.split().val, 2, 0.5, |_, _, _| Ok(())).unwrap();
        let max = a.records.iter().map(|r| r.val_dice).fold(f64::MIN, f64::max);
        assert_eq!(report.mean.dice, max);
    }

    #[test]
    fn nan_loss_aborts_naming_batch() {
        let mut net = TeslNet::<f32>::build(&TeslNetConfig::tiny()).unwrap();
        let id = net.params.id_of("head.bias").unwrap();
        net.params.get_mut(id).value.fill(f32::NAN);
        let src = tiny_source(2);
        let err = fit(&mut net, &src, &quick_cfg(1), &mut Scripted(vec![0.5]), &FitOutputs::default()).unwrap_err();
        match &err {
            Error::NumericalAbort { epoch, step, batch_ids } => {
                assert_eq!((*epoch, *step), (1, 1));
                assert_eq!(batch_ids.len(), 2);
                assert!(err.to_string().contains(&batch_ids[0]));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            loss: "hinge".into(),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
