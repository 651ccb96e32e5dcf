//! Frozen-encoder fine-tuning: the encoder of a pretrained model is kept
//! fixed while the aggregation module and a new head are trained on a
//! downstream task, repeated with different seeds.

use std::fmt;
use std::str::FromStr;

use super::metrics::{argmax, balanced_accuracy, macro_auc_ovr, quadratic_kappa, softmax};
use super::report::{MetricReport, MetricSummary};
use crate::data::{Cohort, Split, TaskKind, TaskSpec, TaskSplits};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, MultiTaskModel, Scope};
use crate::rng::{stream, tag};
use crate::train::{sample_bag, val_rng, SampleMode, TrainConfig, TrainData, Trainer, TrainingLog};

/// How the aggregation module starts each repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggInit {
    RandomAgg,
    PretrainedAgg,
}

impl fmt::Display for AggInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggInit::RandomAgg => "random_agg",
            AggInit::PretrainedAgg => "pretrained_agg",
        })
    }
}

impl FromStr for AggInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_agg" => Ok(AggInit::RandomAgg),
            "pretrained_agg" => Ok(AggInit::PretrainedAgg),
            _ => Err(Error::Config(format!("unknown aggregation init `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub repeats: usize,
    pub init: AggInit,
    /// Repeat `r` trains with seed `base.seed + r`. `base.epochs` and
    /// `base.adamw.lr` default to 15 and 1e-4.
    pub base: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let mut base = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        base.adamw.lr = 1e-4;
        FinetuneConfig {
            repeats: 4,
            init: AggInit::PretrainedAgg,
            base,
        }
    }
}

/// Test-set prediction of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub slide_id: String,
    pub truth: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub best_epoch: Option<u64>,
    pub log: TrainingLog,
    pub predictions: Vec<Prediction>,
    pub auc: f64,
    pub balanced_accuracy: f64,
    pub kappa: Option<f64>,
    pub encoder_digest: String,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub report: MetricReport,
    pub repeats: Vec<RepeatOutcome>,
}

/// Runs the protocol. Repeats execute on separate threads and are merged in
/// repeat order, so results do not depend on scheduling.
pub fn finetune_protocol(
    pretrained: &MultiTaskModel,
    cohort: &Cohort,
    splits: &TaskSplits,
    task: &TaskSpec,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if cfg.repeats == 0 {
        return Err(Error::Config("fine-tuning needs at least one repeat".into()));
    }
    task.validate()?;
    let encoder = pretrained.digest(Scope::Encoder);
    let outcomes: Vec<Result<RepeatOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.repeats)
            .map(|r| s.spawn(move || run_repeat(pretrained, cohort, splits, task, cfg, r)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("fine-tuning thread panicked".into()))))
            .collect()
    });
    let repeats = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(r) = repeats.iter().find(|r| r.encoder_digest != encoder) {
        return Err(Error::Contract(format!("repeat {} changed the frozen encoder", r.repeat)));
    }
    let mut metrics = vec![
        MetricSummary::from_raw("auc", repeats.iter().map(|r| r.auc).collect())?,
        MetricSummary::from_raw("balanced_accuracy", repeats.iter().map(|r| r.balanced_accuracy).collect())?,
    ];
    if let Some(k) = repeats.iter().map(|r| r.kappa).collect::<Option<Vec<f64>>>() {
        metrics.push(MetricSummary::from_raw("kappa", k)?);
    }
    Ok(FinetuneOutcome {
        report: MetricReport {
            label: format!("{} ({})", task.task_id, cfg.init),
            metrics,
        },
        repeats,
    })
}

fn run_repeat(
    pretrained: &MultiTaskModel,
    cohort: &Cohort,
    splits: &TaskSplits,
    task: &TaskSpec,
    cfg: &FinetuneConfig,
    repeat: usize,
) -> Result<RepeatOutcome> {
    let seed = cfg.base.seed.wrapping_add(repeat as u64);
    let mut model = pretrained.transfer(task.clone())?;
    if cfg.init == AggInit::RandomAgg {
        model.reinit_pool(&mut stream(seed, &[tag::INIT]))?;
    }
    model.freeze(Scope::Encoder);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.base.clone()
    };
    let outcome = Trainer::new(model, TrainData { cohort, splits }, train_cfg)?.run()?;
    let (best, _, _) = load_checkpoint(&outcome.best.bundle)?;

    let assign = splits
        .get(&task.task_id)
        .ok_or_else(|| Error::Data(format!("no split assignment for task `{}`", task.task_id)))?;
    let mut predictions = Vec::new();
    for slide in &cohort.slides {
        let (Some(truth), Some(Split::Test)) = (slide.label(&task.task_id), assign.get(slide.slide_id())) else {
            continue;
        };
        let n = cfg.base.val_bag;
        let bag = sample_bag(slide, (n, n), SampleMode::Val, &mut val_rng(cfg.base.seed, slide.slide_id()))?;
        let (logits, _) = best.predict(&task.task_id, &bag.features)?;
        predictions.push(Prediction {
            slide_id: slide.slide_id().to_string(),
            truth,
            probs: softmax(logits.values()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Data(format!("task `{}` has no test slides", task.task_id)));
    }
    let probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
    let truth: Vec<usize> = predictions.iter().map(|p| p.truth).collect();
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let c = task.num_classes;
    let auc = match macro_auc_ovr(&probs, &truth, c) {
        Err(Error::MetricUndefined(_)) => f64::NAN,
        other => other?,
    };
    let kappa = match task.kind {
        TaskKind::OrdinalAsMulticlass => Some(match quadratic_kappa(&pred, &truth, c) {
            Err(Error::MetricUndefined(_)) => f64::NAN,
            other => other?,
        }),
        _ => None,
    };
    Ok(RepeatOutcome {
        repeat,
        seed,
        best_epoch: outcome.best.epoch,
        log: outcome.log,
        auc,
        balanced_accuracy: balanced_accuracy(&pred, &truth, c)?,
        kappa,
        encoder_digest: best.digest(Scope::Encoder),
        predictions,
    })
}

/// Writes test predictions in the `eval` input format.
pub fn predictions_csv(task_id: &str, predictions: &[Prediction]) -> String {
    let c = predictions.first().map_or(2, |p| p.probs.len());
    let mut s = String::from("slide_id,task_id,truth");
    for k in 0..c {
        s.push_str(&format!(",score_{k}"));
    }
    s.push('\n');
    for p in predictions {
        s.push_str(&format!("{},{task_id},{}", p.slide_id, p.truth));
        for v in &p.probs {
            s.push_str(&format!(",{v:.16e}"));
        }
        s.push('\n');
    }
    s
}
