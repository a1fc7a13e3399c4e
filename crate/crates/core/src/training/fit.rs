use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{augment, make_example, Example, FaceSample};
use crate::error::{Error, Result};
use crate::losses::LossValue;
use crate::training::batch::collate;
use crate::training::{TrainConfig, Trainer};

/// True once the last `patience` values each failed to improve on the
/// best value seen before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut streak = 0;
    for &v in history {
        if v < best {
            best = v;
            streak = 0;
        } else {
            streak += 1;
        }
    }
    streak >= patience
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub loss: f64,
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps_run: u64,
    pub best_step: Option<u64>,
    pub best_val_loss: Option<f64>,
    pub best_val_nmse: Option<f64>,
    pub stop_reason: StopReason,
    pub validations: Vec<ValRecord>,
    pub train_seconds: f64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory receiving `train_log.csv`, `report.json`, `best.ckpt`
    /// and, on a non-finite loss, `nonfinite.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Print one line per validation to stderr.
    pub verbose: bool,
}

pub struct FitResult {
    /// Trainer holding the best-validation parameters.
    pub trainer: Trainer,
    pub report: FitReport,
    /// CSV `step,split,loss,<terms...>,nmse`.
    pub log: String,
}

/// CSV training log with columns fixed by the first row.
struct Log {
    columns: Option<Vec<String>>,
    text: String,
}

impl Log {
    fn row(&mut self, step: u64, split: &str, loss: &LossValue, extra: &[(&str, f64)]) {
        let mut cells: Vec<(String, f64)> = loss.terms.iter().map(|t| (t.name.clone(), t.value)).collect();
        cells.extend(extra.iter().map(|(n, v)| (n.to_string(), *v)));
        let cols = self.columns.get_or_insert_with(|| {
            let mut c: Vec<String> = cells.iter().map(|(n, _)| n.clone()).filter(|n| n != "nmse").collect();
            c.push("nmse".into());
            self.text = format!("step,split,loss,{}\n", c.join(","));
            c
        });
        let _ = write!(self.text, "{step},{split},{}", loss.value);
        for c in cols.iter() {
            match cells.iter().find(|(n, _)| n == c) {
                Some((_, v)) => {
                    let _ = write!(self.text, ",{v}");
                }
                None => self.text.push(','),
            }
        }
        self.text.push('\n');
    }
}

fn examples(trainer: &Trainer, samples: &[FaceSample]) -> Result<Vec<Example>> {
    let spec = trainer.spec();
    samples.iter().map(|s| make_example(s, spec.input_size, spec.map_size(), spec.head, trainer.config.target)).collect()
}

fn write_file(dir: &std::path::Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
}

/// Step, validation loss, NMSE, detector and discriminator parameters.
type Snapshot = (u64, f64, f64, ParamStore<f32>, Option<ParamStore<f32>>);

/// Trains from scratch, validating every `val_interval` steps and after
/// the last step, until `max_steps` or early stopping; returns the
/// best-validation parameters.
pub fn fit(config: &TrainConfig, train: &[FaceSample], val: &[FaceSample], opts: &FitOptions) -> Result<FitResult> {
    let first = train.first().or(val.first()).ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let spec = config.model_spec(first.landmarks.scheme());
    let mut trainer = Trainer::new(config.clone(), spec)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let val_examples = examples(&trainer, val)?;
    let fixed_train = if config.augment { Vec::new() } else { examples(&trainer, train)? };
    if config.max_steps > 0 && (train.is_empty() || val_examples.is_empty()) {
        return Err(Error::InvalidArgument("training needs non-empty train and validation sets".into()));
    }
    let spec = trainer.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Log { columns: None, text: String::new() };
    let mut history = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut stop_reason = StopReason::MaxSteps;
    let start = Instant::now();

    while trainer.step < config.max_steps {
        let mut batch_ex = Vec::with_capacity(config.batch_size);
        let mut picked = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().expect("refilled"));
        }
        for &i in &picked {
            if config.augment {
                let (s, _) = augment(&train[i], &mut rng)?;
                batch_ex.push(make_example(&s, spec.input_size, spec.map_size(), spec.head, config.target)?);
            }
        }
        let refs: Vec<&Example> = if config.augment { batch_ex.iter().collect() } else { picked.iter().map(|&i| &fixed_train[i]).collect() };
        let batch = collate(&refs)?;
        let outcome = match trainer.train_step(&batch) {
            Ok(o) => o,
            Err(e) => {
                if let (Error::NonFiniteLoss { .. }, Some(dir)) = (&e, &opts.out_dir) {
                    trainer.checkpoint().save(&dir.join("nonfinite.ckpt"))?;
                    write_file(dir, "train_log.csv", log.text.as_bytes())?;
                }
                return Err(e);
            }
        };
        let extra: Vec<(&str, f64)> = outcome.disc.iter().map(|d| ("disc", d.value)).collect();
        log.row(trainer.step, "train", &outcome.loss, &extra);

        let last = trainer.step == config.max_steps;
        if trainer.step % config.val_interval == 0 || last {
            let v = trainer.validate(&val_examples)?;
            log.row(trainer.step, "val", &LossValue::leaf("val", v.loss), &[("nmse", v.nmse)]);
            if opts.verbose {
                eprintln!("step {:>6}  val loss {:.6}  nmse {:.5}", trainer.step, v.loss, v.nmse);
            }
            validations.push(ValRecord { step: trainer.step, loss: v.loss, nmse: v.nmse });
            if best.as_ref().is_none_or(|b| v.loss < b.1) {
                let adv = trainer.adversary.as_ref().map(|a| a.store.clone());
                best = Some((trainer.step, v.loss, v.nmse, trainer.store.clone(), adv));
            }
            history.push(v.loss);
            if early_stop(&history, config.patience) {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let steps_run = trainer.step;
    let (best_step, best_val_loss, best_val_nmse) = match best {
        Some((step, loss, nmse, store, adv)) => {
            trainer.store = store;
            if let (Some(a), Some(s)) = (trainer.adversary.as_mut(), adv) {
                a.store = s;
            }
            (Some(step), Some(loss), Some(nmse))
        }
        None => (None, None, None),
    };
    let report = FitReport {
        steps_run,
        best_step,
        best_val_loss,
        best_val_nmse,
        stop_reason,
        validations,
        train_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    if log.columns.is_none() {
        log.text = "step,split,loss,nmse\n".into();
    }
    if let Some(dir) = &opts.out_dir {
        write_file(dir, "train_log.csv", log.text.as_bytes())?;
        let json = serde_json::to_string_pretty(&report).expect("report json");
        write_file(dir, "report.json", json.as_bytes())?;
        trainer.checkpoint().save(&dir.join("best.ckpt"))?;
    }
    Ok(FitResult { trainer, report, log: log.text })
}
