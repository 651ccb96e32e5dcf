use std::collections::BTreeMap;

use rand::Rng;

use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::sampler::Bag;
use crate::error::{Error, Result};
use crate::eval::metrics::argmax;
use crate::model::MultiTaskModel;
use crate::tensor::{Mode, Tape};

/// Outcome of one task within a step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStep {
    pub task_id: String,
    /// Mean unweighted cross-entropy over the task's bags.
    pub loss: f64,
    pub correct: usize,
    pub bags: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Optimizer step count after this step.
    pub step: u64,
    pub tasks: Vec<TaskStep>,
    /// Norm of the accumulated gradient before the update.
    pub grad_norm: f64,
}

/// One combined update: every task in `batch` is forwarded in registry order
/// and its `loss_weight · mean cross-entropy` is back-propagated into the
/// shared gradient buffers, then a single AdamW step is taken.
///
/// All dropout masks come from `rng`, consumed in task then bag order.
pub fn multitask_step<R: Rng + ?Sized>(
    model: &mut MultiTaskModel,
    batch: &BTreeMap<String, Vec<Bag>>,
    optimizer: &mut OptimizerState,
    adamw: &AdamWConfig,
    rng: &mut R,
) -> Result<StepReport> {
    for task in batch.keys() {
        model.registry().require(task)?;
    }
    model.store_mut().zero_grad();
    let tasks: Vec<_> = model.registry().tasks().to_vec();
    let mut report = Vec::new();
    for spec in &tasks {
        let Some(bags) = batch.get(&spec.task_id) else {
            continue;
        };
        if bags.is_empty() {
            continue;
        }
        let scale = spec.loss_weight / bags.len() as f64;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for bag in bags {
            let label = bag.label(&spec.task_id)?;
            let mut tape = Tape::new();
            let x = tape.constant(bag.features.clone());
            let out = model.forward_tape(&mut tape, &spec.task_id, x, Mode::Train, rng)?;
            correct += usize::from(argmax(tape.value(out.logits).values()) == label);
            let ce = tape.cross_entropy_logits(out.logits, &[label])?;
            let loss = tape.value(ce).item();
            if !loss.is_finite() {
                model.store_mut().zero_grad();
                return Err(Error::Divergence {
                    task_id: spec.task_id.clone(),
                    step: optimizer.step + 1,
                });
            }
            loss_sum += loss;
            let scaled = tape.scale(ce, scale)?;
            tape.backward(scaled, model.store_mut())?;
        }
        report.push(TaskStep {
            task_id: spec.task_id.clone(),
            loss: loss_sum / bags.len() as f64,
            correct,
            bags: bags.len(),
        });
    }
    let grad_norm = model.store().grad_norm();
    adamw_step(model.store_mut(), optimizer, adamw);
    model.store_mut().zero_grad();
    Ok(StepReport {
        step: optimizer.step,
        tasks: report,
        grad_norm,
    })
}
