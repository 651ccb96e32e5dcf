//! Metrics from a predictions file.
//!
//! Columns are `slide_id,task_id,truth` followed by either one `pred` column
//! of predicted class ids, one positive-class score (binary tasks) or one
//! score per class.

use std::collections::BTreeMap;
use std::path::Path;

use super::metrics::{argmax, auc, balanced_accuracy, macro_auc_ovr, quadratic_kappa};
use crate::data::TaskRegistry;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub slide_id: String,
    pub task_id: String,
    pub truth: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    /// Predicted class ids.
    Class,
    /// Positive-class score.
    BinaryScore,
    /// One score per class.
    ClassScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFile {
    pub kind: ValueKind,
    pub rows: Vec<PredictionRow>,
}

pub fn parse_predictions(text: &str) -> Result<PredictionFile> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("predictions header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 4 || header[..3] != ["slide_id", "task_id", "truth"] {
        return Err(Error::Data(
            "predictions header must be slide_id,task_id,truth,<values...>".into(),
        ));
    }
    let kind = match header.len() - 3 {
        1 if header[3] == "pred" => ValueKind::Class,
        1 => ValueKind::BinaryScore,
        _ => ValueKind::ClassScores,
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("predictions row {}: {e}", i + 1)))?;
        let bad = |what: &str| Error::Data(format!("predictions row {}: bad {what}", i + 1));
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(PredictionRow {
            slide_id: rec[0].to_string(),
            task_id: rec[1].to_string(),
            truth: rec[2].parse().map_err(|_| bad("truth"))?,
            values,
        });
    }
    Ok(PredictionFile { kind, rows })
}

pub fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

/// Metrics of one task; `None` where a metric is not applicable or undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub n: usize,
    pub num_classes: usize,
    pub auc: Option<f64>,
    pub balanced_accuracy: f64,
    pub kappa: Option<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MetricUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-task metrics. Class counts come from `registry` when given, otherwise
/// from the data.
pub fn evaluate_predictions(
    file: &PredictionFile,
    registry: Option<&TaskRegistry>,
) -> Result<BTreeMap<String, TaskMetrics>> {
    let mut by_task: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for r in &file.rows {
        by_task.entry(&r.task_id).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (task, rows) in by_task {
        let truth: Vec<usize> = rows.iter().map(|r| r.truth).collect();
        let (pred, probs): (Vec<usize>, Option<Vec<Vec<f64>>>) = match file.kind {
            ValueKind::Class => {
                let p = rows
                    .iter()
                    .map(|r| {
                        let v = r.values[0];
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Data(format!("`{}`: predicted class {v} is not a class id", r.slide_id)))
                        }
                    })
                    .collect::<Result<_>>()?;
                (p, None)
            }
            ValueKind::BinaryScore => (
                rows.iter().map(|r| usize::from(r.values[0] >= 0.5)).collect(),
                Some(rows.iter().map(|r| vec![1.0 - r.values[0], r.values[0]]).collect()),
            ),
            ValueKind::ClassScores => (
                rows.iter().map(|r| argmax(&r.values)).collect(),
                Some(rows.iter().map(|r| r.values.clone()).collect()),
            ),
        };
        let observed = truth.iter().chain(&pred).max().map_or(2, |m| m + 1).max(2);
        let c = match registry {
            Some(reg) => reg.require(task)?.num_classes,
            None => match &probs {
                Some(p) => p[0].len().max(observed),
                None => observed,
            },
        };
        let auc = match &probs {
            Some(p) if c == 2 => {
                let s: Vec<f64> = p.iter().map(|v| v[1]).collect();
                defined(auc(&s, &truth))?
            }
            Some(p) => defined(macro_auc_ovr(p, &truth, c))?,
            None => None,
        };
        let kappa = if c > 2 { defined(quadratic_kappa(&pred, &truth, c))? } else { None };
        out.insert(
            task.to_string(),
            TaskMetrics {
                n: rows.len(),
                num_classes: c,
                auc,
                balanced_accuracy: balanced_accuracy(&pred, &truth, c)?,
                kappa,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_scores_and_class_predictions() {
        let f = parse_predictions("slide_id,task_id,truth,score\na,t,0,0.1\nb,t,0,0.4\nc,t,1,0.35\nd,t,1,0.8\n").unwrap();
        let m = &evaluate_predictions(&f, None).unwrap()["t"];
        assert_eq!(m.auc, Some(0.75));
        assert_eq!(m.balanced_accuracy, 0.75);
        let f = parse_predictions("slide_id,task_id,truth,pred\na,g,0,0\nb,g,1,1\nc,g,2,1\nd,g,2,2\n").unwrap();
        let m = &evaluate_predictions(&f, None).unwrap()["g"];
        assert_eq!(m.num_classes, 3);
        assert!(m.auc.is_none());
        assert!(m.kappa.is_some());
    }
}
