use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::manifest::Manifest;
use super::registry::TaskRegistry;
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

/// Slide → split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slide_id: impl Into<String>, split: Split) {
        self.map.insert(slide_id.into(), split);
    }

    pub fn get(&self, slide_id: &str) -> Option<Split> {
        self.map.get(slide_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.map.values().filter(|&&s| s == split).count()
    }

    pub fn slides_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.map
            .iter()
            .filter(move |(_, &s)| s == split)
            .map(|(k, _)| k.as_str())
    }
}

impl FromIterator<(String, Split)> for SplitAssignment {
    fn from_iter<T: IntoIterator<Item = (String, Split)>>(iter: T) -> Self {
        SplitAssignment {
            map: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub assignment: SplitAssignment,
    /// Tasks whose labeled slides all landed in a single split.
    pub warnings: Vec<String>,
}

/// Patient-level split: patients are shuffled by `seed` and laid out in order
/// across the train, val and test slide quotas.
pub fn make_patient_splits(manifest: &Manifest, fractions: (f64, f64, f64), seed: u64) -> Result<SplitOutcome> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        by_patient
            .entry(r.patient_id.as_str())
            .or_default()
            .push(r.slide_id.as_str());
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut stream(seed, &[tag::SPLIT]));

    // Patients fill train, then val, then test: a patient belongs to the split
    // whose cumulative target interval contains the slides placed before it.
    let total = manifest.records.len() as f64;
    let bounds = [fr[0] * total, (fr[0] + fr[1]) * total];
    let mut placed = 0.0f64;
    let mut assignment = SplitAssignment::new();
    for p in patients {
        let slides = &by_patient[p];
        let pick = bounds.iter().position(|&b| placed < b).unwrap_or(2);
        placed += slides.len() as f64;
        for s in slides {
            assignment.insert(*s, Split::ALL[pick]);
        }
    }

    let mut warnings = Vec::new();
    for t in manifest.registry.tasks() {
        let used: BTreeSet<Split> = manifest
            .records
            .iter()
            .filter(|r| r.labels.contains_key(&t.task_id))
            .filter_map(|r| assignment.get(&r.slide_id))
            .collect();
        if used.len() == 1 {
            warnings.push(format!(
                "task `{}`: all labeled slides fall in {}",
                t.task_id,
                used.iter().next().unwrap()
            ));
        }
    }
    Ok(SplitOutcome {
        assignment,
        warnings,
    })
}

/// Per-task split views. A global assignment restricted to each task's
/// labeled slides is one instance; externally supplied per-task splits are
/// another.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskSplits {
    per_task: BTreeMap<String, SplitAssignment>,
}

impl TaskSplits {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_global(global: &SplitAssignment, manifest: &Manifest) -> Self {
        let mut out = TaskSplits::new();
        for t in manifest.registry.tasks() {
            let a: SplitAssignment = manifest
                .records
                .iter()
                .filter(|r| r.labels.contains_key(&t.task_id))
                .filter_map(|r| global.get(&r.slide_id).map(|s| (r.slide_id.clone(), s)))
                .collect();
            out.per_task.insert(t.task_id.clone(), a);
        }
        out
    }

    pub fn insert(&mut self, task_id: impl Into<String>, a: SplitAssignment) {
        self.per_task.insert(task_id.into(), a);
    }

    pub fn get(&self, task_id: &str) -> Option<&SplitAssignment> {
        self.per_task.get(task_id)
    }

    pub fn set(&mut self, task_id: &str, slide_id: &str, split: Split) {
        self.per_task
            .entry(task_id.to_string())
            .or_default()
            .insert(slide_id, split);
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.per_task.keys().map(String::as_str)
    }
}

/// A validation or test slide of `task_a` that is used to train `task_b`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub task_a: String,
    pub task_b: String,
    pub slide_id: String,
    pub split_a: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoherenceReport {
    pub violations: Vec<Violation>,
}

impl CoherenceReport {
    pub fn is_coherent(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for CoherenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(
                f,
                "slide `{}` is {} for task `{}` but train for task `{}`",
                v.slide_id, v.split_a, v.task_a, v.task_b
            )?;
        }
        Ok(())
    }
}

/// Lists every slide that is held out (val/test) for one task while training
/// another. Tasks are visited in registry order, then any remaining tasks by id.
pub fn check_split_coherence(splits: &TaskSplits, registry: &TaskRegistry) -> CoherenceReport {
    let mut order: Vec<&str> = registry
        .tasks()
        .iter()
        .map(|t| t.task_id.as_str())
        .filter(|t| splits.per_task.contains_key(*t))
        .collect();
    for t in splits.tasks() {
        if !order.contains(&t) {
            order.push(t);
        }
    }
    let mut violations = Vec::new();
    for &a in &order {
        let sa = &splits.per_task[a];
        for &b in &order {
            if a == b {
                continue;
            }
            let sb = &splits.per_task[b];
            for (slide, split_a) in sa.iter() {
                if split_a != Split::Train && sb.get(slide) == Some(Split::Train) {
                    violations.push(Violation {
                        task_a: a.to_string(),
                        task_b: b.to_string(),
                        slide_id: slide.to_string(),
                        split_a,
                    });
                }
            }
        }
    }
    CoherenceReport { violations }
}

/// Contents of a split file: one global assignment or per-task assignments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitFile {
    Global(SplitAssignment),
    PerTask(TaskSplits),
}

impl SplitFile {
    /// Per-task view; a global file is restricted to each task's labeled slides.
    pub fn task_splits(&self, manifest: &Manifest) -> TaskSplits {
        match self {
            SplitFile::Global(g) => TaskSplits::from_global(g, manifest),
            SplitFile::PerTask(t) => t.clone(),
        }
    }
}

/// Reads `slide_id,split` or `slide_id,task_id,split` CSV.
pub fn read_splits(path: &Path) -> Result<SplitFile> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let per_task = match header.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["slide_id", "split"] => false,
        ["slide_id", "task_id", "split"] => true,
        _ => {
            return Err(Error::Data(format!(
                "{}: header must be `slide_id,split` or `slide_id,task_id,split`",
                path.display()
            )))
        }
    };
    let mut global = SplitAssignment::new();
    let mut tasks = TaskSplits::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if per_task {
            tasks.set(&row[1], &row[0], row[2].parse()?);
        } else {
            global.insert(&row[0], row[1].parse()?);
        }
    }
    Ok(if per_task {
        SplitFile::PerTask(tasks)
    } else {
        SplitFile::Global(global)
    })
}

pub fn write_global_splits(path: &Path, a: &SplitAssignment) -> Result<()> {
    let mut text = String::from("slide_id,split\n");
    for (s, split) in a.iter() {
        text.push_str(&format!("{s},{split}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_task_splits(path: &Path, t: &TaskSplits) -> Result<()> {
    let mut text = String::from("slide_id,task_id,split\n");
    for (task, a) in &t.per_task {
        for (s, split) in a.iter() {
            text.push_str(&format!("{s},{task},{split}\n"));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
