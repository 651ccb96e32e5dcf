use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::log::{LogEntry, TrainingLog, LOG_HEADER};
use super::optim::{AdamWConfig, OptimizerState};
use super::sampler::{augment_bag, sample_bag, val_rng, AugmentConfig, Bag, SampleMode};
use super::step::{multitask_step, StepReport};
use crate::data::{check_split_coherence, Cohort, Split, TaskSplits};
use crate::error::{Error, Result};
use crate::eval::metrics::{cross_entropy, macro_auc_ovr, softmax};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointBundle, Metadata, MultiTaskModel};
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub bag_min: usize,
    pub bag_max: usize,
    pub val_bag: usize,
    pub epochs: u64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub bags_per_task: usize,
    /// Run validation after every epoch. Without it the last epoch is kept.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bag_min: 64,
            bag_max: 128,
            val_bag: 128,
            epochs: 200,
            adamw: AdamWConfig::default(),
            seed: 0,
            augment: AugmentConfig::default(),
            bags_per_task: 1,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bag_min == 0 || self.bag_min > self.bag_max || self.val_bag == 0 || self.bags_per_task == 0 {
            return Err(Error::Config(format!(
                "bag sizes need 1 <= bag_min <= bag_max, val_bag >= 1 and bags_per_task >= 1 (got {}, {}, {}, {})",
                self.bag_min, self.bag_max, self.val_bag, self.bags_per_task
            )));
        }
        self.adamw.validate()?;
        self.augment.validate()
    }
}

/// Slides and per-task splits to train on.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub cohort: &'a Cohort,
    pub splits: &'a TaskSplits,
}

/// Best checkpoint so far.
#[derive(Clone, Debug)]
pub struct Best {
    /// `None` when no epoch has completed.
    pub epoch: Option<u64>,
    pub score: f64,
    pub bundle: CheckpointBundle,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub best: Best,
    pub model: MultiTaskModel,
    pub optimizer: OptimizerState,
}

struct TaskData {
    task_id: String,
    num_classes: usize,
    train: Vec<usize>,
    val: Vec<(Bag, usize)>,
}

#[derive(Clone, Debug, Default)]
struct Accum {
    loss_sum: f64,
    correct: u64,
    count: u64,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    model: MultiTaskModel,
    optimizer: OptimizerState,
    tasks: Vec<TaskData>,
    steps_per_epoch: u64,
    epoch: u64,
    step: u64,
    accum: Vec<Accum>,
    orders: HashMap<(usize, u64), Vec<usize>>,
    log: TrainingLog,
    best: Option<Best>,
    log_file: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Verifies split coherence, gathers per-task slide lists and caches the
    /// fixed validation bags.
    pub fn new(model: MultiTaskModel, data: TrainData<'a>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let registry = model.registry().clone();
        let report = check_split_coherence(data.splits, &registry);
        if !report.is_coherent() {
            return Err(Error::Incoherent(report.violations.len()));
        }
        let mut tasks = Vec::new();
        for spec in registry.tasks() {
            let assign = data
                .splits
                .get(&spec.task_id)
                .ok_or_else(|| Error::Data(format!("no split assignment for task `{}`", spec.task_id)))?;
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, slide) in data.cohort.slides.iter().enumerate() {
                let Some(label) = slide.label(&spec.task_id) else {
                    continue;
                };
                match assign.get(slide.slide_id()) {
                    Some(Split::Train) => train.push(i),
                    Some(Split::Val) if cfg.validate => {
                        let mut r = val_rng(cfg.seed, slide.slide_id());
                        let bag = sample_bag(slide, (cfg.val_bag, cfg.val_bag), SampleMode::Val, &mut r)?;
                        val.push((bag, label));
                    }
                    _ => {}
                }
            }
            if train.is_empty() {
                return Err(Error::Data(format!("task `{}` has no training slides", spec.task_id)));
            }
            if cfg.validate && val.is_empty() {
                return Err(Error::Data(format!("task `{}` has no validation slides", spec.task_id)));
            }
            tasks.push(TaskData {
                task_id: spec.task_id.clone(),
                num_classes: spec.num_classes,
                train,
                val,
            });
        }
        let bpt = cfg.bags_per_task;
        let steps_per_epoch = tasks
            .iter()
            .map(|t| t.train.len().div_ceil(bpt) as u64)
            .max()
            .unwrap_or(0);
        let n = tasks.len();
        Ok(Trainer {
            cfg,
            data,
            model,
            optimizer: OptimizerState::new(),
            tasks,
            steps_per_epoch,
            epoch: 0,
            step: 0,
            accum: vec![Accum::default(); n],
            orders: HashMap::new(),
            log: TrainingLog::new(),
            best: None,
            log_file: None,
        })
    }

    /// Appends each finished epoch's log lines to `path`, which is truncated now.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        let mut text = format!("{LOG_HEADER}\n");
        for e in self.log.entries() {
            text.push_str(&format!("{e}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        self.log_file = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &MultiTaskModel {
        &self.model
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn best(&self) -> Option<&Best> {
        self.best.as_ref()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// `(epoch, step within epoch)` of the next step.
    pub fn position(&self) -> (u64, u64) {
        (self.epoch, self.step)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn slide_at(&mut self, task: usize, pos: usize) -> usize {
        let list = &self.tasks[task].train;
        let cycle = (pos / list.len()) as u64;
        let k = pos % list.len();
        let (seed, epoch) = (self.cfg.seed, self.epoch);
        let order = self.orders.entry((task, cycle)).or_insert_with(|| {
            let mut o = list.clone();
            o.shuffle(&mut stream(seed, &[tag::ORDER, epoch, task as u64, cycle]));
            o
        });
        order[k]
    }

    /// Runs one multi-task step, closing the epoch when it is the last one.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let (e, s, seed) = (self.epoch, self.step, self.cfg.seed);
        let bpt = self.cfg.bags_per_task;
        let mut batch = BTreeMap::new();
        for ti in 0..self.tasks.len() {
            let mut bags = Vec::with_capacity(bpt);
            for j in 0..bpt {
                let idx = self.slide_at(ti, s as usize * bpt + j);
                let slide = &self.data.cohort.slides[idx];
                let mut rng = stream(seed, &[tag::SAMPLE, e, s, ti as u64, j as u64]);
                let bag = sample_bag(slide, (self.cfg.bag_min, self.cfg.bag_max), SampleMode::Train, &mut rng)?;
                bags.push(augment_bag(&bag, &self.cfg.augment, &mut rng)?);
            }
            batch.insert(self.tasks[ti].task_id.clone(), bags);
        }
        let mut drop_rng = stream(seed, &[tag::DROPOUT, e, s]);
        let report = multitask_step(&mut self.model, &batch, &mut self.optimizer, &self.cfg.adamw, &mut drop_rng)?;
        for (acc, t) in self.accum.iter_mut().zip(&report.tasks) {
            acc.loss_sum += t.loss * t.bags as f64;
            acc.correct += t.correct as u64;
            acc.count += t.bags as u64;
        }
        self.step += 1;
        if self.step == self.steps_per_epoch {
            self.end_epoch()?;
        }
        Ok(report)
    }

    /// Eval-mode mean loss and AUC of every task on its cached val bags.
    pub fn validation(&self) -> Result<Vec<(f64, f64)>> {
        self.tasks
            .iter()
            .map(|t| {
                let mut loss = 0.0;
                let mut probs = Vec::with_capacity(t.val.len());
                let mut labels = Vec::with_capacity(t.val.len());
                for (bag, label) in &t.val {
                    let (logits, _) = self.model.predict(&t.task_id, &bag.features)?;
                    loss += cross_entropy(logits.values(), *label);
                    probs.push(softmax(logits.values()));
                    labels.push(*label);
                }
                let auc = match macro_auc_ovr(&probs, &labels, t.num_classes) {
                    Ok(a) => a,
                    Err(Error::MetricUndefined(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
                Ok((loss / t.val.len() as f64, auc))
            })
            .collect()
    }

    fn end_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let mut entries = Vec::new();
        for (t, acc) in self.tasks.iter().zip(&self.accum) {
            entries.push(LogEntry {
                epoch,
                task_id: t.task_id.clone(),
                split: Split::Train,
                loss: acc.loss_sum / acc.count as f64,
                metric: acc.correct as f64 / acc.count as f64,
            });
        }
        let mut meta = Metadata::new();
        meta.set("epoch", epoch).set("rng.seed", self.cfg.seed);
        let mut score = f64::NAN;
        if self.cfg.validate {
            let val = self.validation()?;
            for (t, &(loss, auc)) in self.tasks.iter().zip(&val) {
                entries.push(LogEntry {
                    epoch,
                    task_id: t.task_id.clone(),
                    split: Split::Val,
                    loss,
                    metric: auc,
                });
                meta.set(format!("val_loss.{}", t.task_id), format!("{loss:?}"));
            }
            score = val.iter().map(|v| v.0).sum::<f64>() / val.len() as f64;
        }
        let improved = match &self.best {
            _ if !self.cfg.validate => true,
            Some(b) => score < b.score,
            None => true,
        };
        if improved {
            meta.set("best.score", format!("{score:?}"));
            self.best = Some(Best {
                epoch: Some(epoch),
                score,
                bundle: save_checkpoint(&self.model, &self.optimizer, &meta),
            });
        }
        if let Some(path) = &self.log_file {
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            let text: String = entries.iter().map(|e| format!("{e}\n")).collect();
            f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        for e in entries {
            self.log.push(e);
        }
        self.epoch += 1;
        self.step = 0;
        self.accum = vec![Accum::default(); self.tasks.len()];
        self.orders.clear();
        Ok(())
    }

    /// Runs up to `n` steps; returns whether training is finished.
    pub fn run_steps(&mut self, n: u64) -> Result<bool> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.step()?;
        }
        Ok(self.is_done())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    /// Final state. With no completed epoch the initial model is the best.
    pub fn finish(self) -> TrainOutcome {
        let best = self.best.unwrap_or_else(|| {
            let mut meta = Metadata::new();
            meta.set("rng.seed", self.cfg.seed);
            Best {
                epoch: None,
                score: f64::NAN,
                bundle: save_checkpoint(&self.model, &self.optimizer, &meta),
            }
        });
        TrainOutcome {
            log: self.log,
            best,
            model: self.model,
            optimizer: self.optimizer,
        }
    }

    /// Everything needed to continue this run exactly, except the best
    /// checkpoint, which is saved on its own.
    pub fn resume_bundle(&self) -> CheckpointBundle {
        let mut meta = Metadata::new();
        meta.set("rng.seed", self.cfg.seed)
            .set("train.epoch", self.epoch)
            .set("train.step", self.step);
        for (t, a) in self.tasks.iter().zip(&self.accum) {
            meta.set(format!("train.accum.{}.loss_sum", t.task_id), format!("{:?}", a.loss_sum))
                .set(format!("train.accum.{}.correct", t.task_id), a.correct)
                .set(format!("train.accum.{}.count", t.task_id), a.count);
        }
        if let Some(b) = &self.best {
            if let Some(e) = b.epoch {
                meta.set("best.epoch", e);
            }
            meta.set("best.score", format!("{:?}", b.score));
        }
        for (i, e) in self.log.entries().iter().enumerate() {
            meta.set(format!("log.{i:08}"), e);
        }
        save_checkpoint(&self.model, &self.optimizer, &meta)
    }

    /// Continues a run from [`Trainer::resume_bundle`] output. `best` is the
    /// best checkpoint saved alongside it, if any epoch had completed.
    pub fn resume(
        bundle: &CheckpointBundle,
        best: Option<CheckpointBundle>,
        data: TrainData<'a>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let (model, optimizer, meta) = load_checkpoint(bundle)?;
        let seed: u64 = meta.parse("rng.seed")?;
        if seed != cfg.seed {
            return Err(Error::Config(format!("resume seed {} differs from checkpoint seed {seed}", cfg.seed)));
        }
        let mut t = Trainer::new(model, data, cfg)?;
        t.optimizer = optimizer;
        t.epoch = meta.parse("train.epoch")?;
        t.step = meta.parse("train.step")?;
        for (task, acc) in t.tasks.iter().zip(t.accum.iter_mut()) {
            acc.loss_sum = meta.parse(&format!("train.accum.{}.loss_sum", task.task_id))?;
            acc.correct = meta.parse(&format!("train.accum.{}.correct", task.task_id))?;
            acc.count = meta.parse(&format!("train.accum.{}.count", task.task_id))?;
        }
        for (k, v) in meta.iter() {
            if k.starts_with("log.") {
                t.log.push(v.parse()?);
            }
        }
        t.best = match (meta.get("best.score"), best) {
            (None, _) => None,
            (Some(_), Some(bundle)) => Some(Best {
                epoch: meta.get("best.epoch").map(str::parse).transpose().map_err(|_| {
                    Error::Config("malformed best.epoch".into())
                })?,
                score: meta.parse("best.score")?,
                bundle,
            }),
            (Some(_), None) => {
                return Err(Error::Contract("resume state records a best checkpoint that was not supplied".into()))
            }
        };
        Ok(t)
    }
}
