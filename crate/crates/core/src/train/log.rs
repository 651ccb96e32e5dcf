use std::collections::BTreeMap;
use std::fmt;

use crate::data::Split;
use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "epoch,task_id,split,loss,metric";

/// One `(epoch, task, split)` record. The metric is training accuracy on the
/// train split and AUC on the val split.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub epoch: u64,
    pub task_id: String,
    pub split: Split,
    pub loss: f64,
    pub metric: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.epoch, self.task_id, self.split, self.loss, self.metric
        )
    }
}

impl std::str::FromStr for LogEntry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed log line `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(LogEntry {
            epoch: f[0].parse().map_err(|_| bad())?,
            task_id: f[1].to_string(),
            split: f[2].parse().map_err(|_| bad())?,
            loss: f[3].parse().map_err(|_| bad())?,
            metric: f[4].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for e in &self.entries {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().is_some_and(|h| h != LOG_HEADER) {
            return Err(Error::Data("training log lacks its header".into()));
        }
        Ok(TrainingLog {
            entries: lines.map(str::parse).collect::<Result<_>>()?,
        })
    }

    /// Bitwise equality, so that NaN metrics compare equal to themselves.
    pub fn bit_eq(&self, other: &TrainingLog) -> bool {
        self.to_text() == other.to_text()
    }

    /// Losses of one task and split, in epoch order.
    pub fn losses(&self, task_id: &str, split: Split) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.task_id == task_id && e.split == split)
            .map(|e| e.loss)
            .collect()
    }

    /// Mean validation loss over tasks, per epoch.
    pub fn val_loss_means(&self) -> Vec<(u64, f64)> {
        let mut by_epoch: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.split == Split::Val) {
            let s = by_epoch.entry(e.epoch).or_default();
            s.0 += e.loss;
            s.1 += 1;
        }
        by_epoch.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Epoch attaining the minimal mean validation loss; the earliest wins ties.
    pub fn best_epoch(&self) -> Option<u64> {
        self.val_loss_means()
            .into_iter()
            .fold(None, |best: Option<(u64, f64)>, (e, m)| match best {
                Some((_, b)) if b <= m => best,
                _ => Some((e, m)),
            })
            .map(|(e, _)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_best_epoch() {
        let mut log = TrainingLog::new();
        for (epoch, v) in [(0, 0.7), (1, 0.3), (2, 0.3)] {
            for t in ["a", "b"] {
                log.push(LogEntry {
                    epoch,
                    task_id: t.into(),
                    split: Split::Train,
                    loss: 0.1 + 0.2,
                    metric: 0.5,
                });
                log.push(LogEntry {
                    epoch,
                    task_id: t.into(),
                    split: Split::Val,
                    loss: v,
                    metric: f64::NAN,
                });
            }
        }
        let back = TrainingLog::parse(&log.to_text()).unwrap();
        assert!(back.bit_eq(&log));
        assert_eq!(back.entries()[0].loss, 0.1 + 0.2);
        assert_eq!(log.best_epoch(), Some(1));
    }
}
