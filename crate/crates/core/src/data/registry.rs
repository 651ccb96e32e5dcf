use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass,
    OrdinalAsMulticlass,
    /// Overall-survival targets reduced to a binary event label.
    SurvivalEventBinary,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass => "multiclass",
            TaskKind::OrdinalAsMulticlass => "ordinal_as_multiclass",
            TaskKind::SurvivalEventBinary => "survival_event_binary",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TaskKind::Binary,
            TaskKind::Multiclass,
            TaskKind::OrdinalAsMulticlass,
            TaskKind::SurvivalEventBinary,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown task kind `{s}`")))
    }
}

fn default_weight() -> f64 {
    1.0
}

/// One weak-label task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(rename = "id")]
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(rename = "classes")]
    pub num_classes: usize,
    #[serde(rename = "weight", default = "default_weight")]
    pub loss_weight: f64,
    #[serde(rename = "cohort", default)]
    pub cohort_tag: String,
}

impl TaskSpec {
    pub fn binary(task_id: impl Into<String>) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind: TaskKind::Binary,
            num_classes: 2,
            loss_weight: 1.0,
            cohort_tag: String::new(),
        }
    }

    pub fn multiclass(task_id: impl Into<String>, num_classes: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Multiclass,
            num_classes,
            ..Self::binary(task_id)
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_task_id(&self.task_id)?;
        let ok = match self.kind {
            TaskKind::Binary | TaskKind::SurvivalEventBinary => self.num_classes == 2,
            TaskKind::Multiclass | TaskKind::OrdinalAsMulticlass => self.num_classes >= 2,
        };
        if !ok {
            return Err(Error::Config(format!(
                "task `{}`: {} classes inconsistent with kind {}",
                self.task_id,
                self.num_classes,
                self.kind.as_str()
            )));
        }
        if !(self.loss_weight > 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "task `{}`: loss weight must be positive, got {}",
                self.task_id, self.loss_weight
            )));
        }
        Ok(())
    }
}

/// Accepts non-empty ids of ASCII letters, digits, `_`, `-` and `.`.
pub fn validate_task_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "task id `{id}` must be non-empty ASCII letters, digits, `_`, `-` or `.`"
        )))
    }
}

/// Ordered set of tasks. Order fixes the per-step accumulation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    #[serde(rename = "task", default)]
    tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if tasks[..i].iter().any(|u| u.task_id == t.task_id) {
                return Err(Error::Config(format!("duplicate task `{}`", t.task_id)));
            }
        }
        Ok(TaskRegistry { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn require(&self, task_id: &str) -> Result<&TaskSpec> {
        self.get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn position(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    /// Registry restricted to the named tasks, keeping their order here.
    pub fn subset(&self, ids: &[&str]) -> Result<Self> {
        for id in ids {
            self.require(id)?;
        }
        Ok(TaskRegistry {
            tasks: self
                .tasks
                .iter()
                .filter(|t| ids.contains(&t.task_id.as_str()))
                .cloned()
                .collect(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("registry serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: TaskRegistry =
            toml::from_str(text).map_err(|e| Error::Config(format!("task registry: {e}")))?;
        Self::new(raw.tasks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
