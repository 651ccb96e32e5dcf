//! Synthetic multi-task bag cohorts.
//!
//! Instances are drawn from an isotropic Gaussian background. Every task owns
//! one concept direction per non-zero class; a slide of class `k > 0` has a
//! `signal_fraction` of its instances shifted by that class's concept. Labels
//! therefore follow a known presence rule, and the shifted instances are
//! ground truth for attention checks. All tasks share the background, so what
//! an encoder learns for one task transfers to the others.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use super::cohort::{Cohort, Slide};
use super::features::{FeatureMatrix, FeatureStore};
use super::manifest::{Manifest, SlideRecord};
use super::registry::{TaskKind, TaskRegistry, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Patch pitch used for synthetic instance coordinates.
pub const PATCH_SIZE: u32 = 256;

const LABELS: u64 = 1;
const PATIENTS: u64 = 2;
const SLIDES: u64 = 3;
const CONCEPTS: u64 = 4;

/// Labeling rule for one synthetic task: class `k > 0` is marked by the
/// presence of concept `concepts[k - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub task_id: String,
    pub num_classes: usize,
    pub concepts: Vec<usize>,
}

impl SynthTask {
    pub fn binary(task_id: impl Into<String>, concept: usize) -> Self {
        SynthTask {
            task_id: task_id.into(),
            num_classes: 2,
            concepts: vec![concept],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub instances_per_slide: usize,
    pub d_in: usize,
    pub tasks: Vec<SynthTask>,
    pub signal_fraction: f64,
    pub noise_sigma: f64,
    /// Length of every concept shift vector.
    pub concept_norm: f64,
    pub seed: u64,
    /// Seed for concept directions; defaults to `seed`. Cohorts sharing it
    /// share their concepts.
    pub concept_seed: Option<u64>,
    pub max_slides_per_patient: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides: 600,
            instances_per_slide: 200,
            d_in: 32,
            tasks: (0..3).map(|t| SynthTask::binary(format!("task{t}"), t)).collect(),
            signal_fraction: 0.1,
            noise_sigma: 1.0,
            concept_norm: 4.0,
            seed: 0,
            concept_seed: None,
            max_slides_per_patient: 3,
        }
    }
}

impl SynthConfig {
    pub fn concept_seed(&self) -> u64 {
        self.concept_seed.unwrap_or(self.seed)
    }

    /// Instances carrying a concept on a slide of a positive class.
    pub fn signal_count(&self) -> usize {
        if self.signal_fraction <= 0.0 {
            return 0;
        }
        ((self.signal_fraction * self.instances_per_slide as f64).round() as usize)
            .clamp(1, self.instances_per_slide)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_slides == 0 || self.instances_per_slide == 0 || self.d_in == 0 {
            return bad("slides, instances and width must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) || !(self.noise_sigma >= 0.0) {
            return bad("signal_fraction must be in [0, 1] and noise_sigma >= 0".into());
        }
        if self.max_slides_per_patient == 0 {
            return bad("max_slides_per_patient must be positive".into());
        }
        for t in &self.tasks {
            if t.num_classes < 2 || t.concepts.len() != t.num_classes - 1 {
                return bad(format!(
                    "task `{}`: {} classes need {} concepts, got {}",
                    t.task_id,
                    t.num_classes,
                    t.num_classes.saturating_sub(1),
                    t.concepts.len()
                ));
            }
            if self.n_slides < 2 * t.num_classes {
                return bad(format!(
                    "task `{}`: {} slides cannot give 2 slides to each of {} classes",
                    t.task_id, self.n_slides, t.num_classes
                ));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<TaskRegistry> {
        TaskRegistry::new(
            self.tasks
                .iter()
                .map(|t| TaskSpec {
                    task_id: t.task_id.clone(),
                    kind: if t.num_classes == 2 {
                        TaskKind::Binary
                    } else {
                        TaskKind::Multiclass
                    },
                    num_classes: t.num_classes,
                    loss_weight: 1.0,
                    cohort_tag: "synthetic".into(),
                })
                .collect(),
        )
    }
}

/// Concept direction `index` for a concept seed: a random unit vector scaled
/// to `norm`. Depends only on its arguments, not on how many concepts exist.
pub fn concept_vector(concept_seed: u64, index: usize, d_in: usize, norm: f64) -> Vec<f64> {
    let mut rng = stream(concept_seed, &[tag::SYNTH, CONCEPTS, index as u64]);
    let v: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / len * norm).collect()
}

/// A generated cohort with its generating ground truth.
#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub cohort: Cohort,
    /// (slide_id, task_id) → instance indices carrying that task's concept.
    pub signal: BTreeMap<(String, String), Vec<usize>>,
    /// Concept vectors keyed by concept index.
    pub concepts: BTreeMap<usize, Vec<f64>>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let (n, per, d) = (cfg.n_slides, cfg.instances_per_slide, cfg.d_in);

    let concepts: BTreeMap<usize, Vec<f64>> = cfg
        .tasks
        .iter()
        .flat_map(|t| t.concepts.iter().copied())
        .map(|c| (c, concept_vector(cfg.concept_seed(), c, d, cfg.concept_norm)))
        .collect();

    // Balanced labels: class = position mod C after a per-task shuffle.
    let labels: Vec<Vec<usize>> = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let mut l: Vec<usize> = (0..n).map(|i| i % t.num_classes).collect();
            l.shuffle(&mut stream(cfg.seed, &[tag::SYNTH, LABELS, ti as u64]));
            l
        })
        .collect();

    let mut patient_of = Vec::with_capacity(n);
    let mut prng = stream(cfg.seed, &[tag::SYNTH, PATIENTS]);
    let mut p = 0;
    while patient_of.len() < n {
        let k = prng.random_range(1..=cfg.max_slides_per_patient);
        for _ in 0..k.min(n - patient_of.len()) {
            patient_of.push(p);
        }
        p += 1;
    }

    let grid = (per as f64).sqrt().ceil() as usize;
    let coords: Vec<(u32, u32)> = (0..per)
        .map(|i| ((i % grid) as u32 * PATCH_SIZE, (i / grid) as u32 * PATCH_SIZE))
        .collect();
    let k_signal = cfg.signal_count();

    let mut slides = Vec::with_capacity(n);
    let mut signal = BTreeMap::new();
    for i in 0..n {
        let slide_id = format!("S{i:05}");
        let mut rng = stream(cfg.seed, &[tag::SYNTH, SLIDES, i as u64]);
        let mut x: Vec<f64> = (0..per * d)
            .map(|_| cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut slide_labels = BTreeMap::new();
        for (ti, t) in cfg.tasks.iter().enumerate() {
            let class = labels[ti][i];
            slide_labels.insert(t.task_id.clone(), class);
            if class == 0 || k_signal == 0 {
                continue;
            }
            let c = &concepts[&t.concepts[class - 1]];
            let mut idx = index::sample(&mut rng, per, k_signal).into_vec();
            idx.sort_unstable();
            for &k in &idx {
                for (v, s) in x[k * d..(k + 1) * d].iter_mut().zip(c) {
                    *v += s;
                }
            }
            signal.insert((slide_id.clone(), t.task_id.clone()), idx);
        }
        let m = FeatureMatrix::new(per, d, x.iter().map(|&v| v as f32).collect())?
            .with_coords(coords.clone())?;
        slides.push(Slide {
            record: SlideRecord {
                slide_id: slide_id.clone(),
                patient_id: format!("P{:05}", patient_of[i]),
                feature_file: FeatureStore::relative_path(&slide_id),
                labels: slide_labels,
            },
            features: m.to_tensor(),
            coords: m.coords,
        });
    }
    Ok(SynthCohort {
        config: cfg.clone(),
        cohort: Cohort::new(registry, slides)?,
        signal,
        concepts,
    })
}

impl SynthCohort {
    pub fn manifest(&self, base_dir: &Path) -> Manifest {
        Manifest {
            records: self.cohort.slides.iter().map(|s| s.record.clone()).collect(),
            registry: self.cohort.registry.clone(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    /// Writes `manifest.csv`, `tasks.toml`, `signal.csv` and `features/`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let store = FeatureStore::new(dir);
        for s in &self.cohort.slides {
            let values = s.features.values().iter().map(|&v| v as f32).collect();
            let mut m = FeatureMatrix::new(s.features.rows(), s.features.cols(), values)?;
            if let Some(c) = &s.coords {
                m = m.with_coords(c.clone())?;
            }
            store.write(s.slide_id(), &m)?;
        }
        let path = dir.join("manifest.csv");
        self.manifest(dir).write(&path)?;
        let mut text = String::from("slide_id,task_id,instance_index\n");
        for ((slide, task), idx) in &self.signal {
            for k in idx {
                text.push_str(&format!("{slide},{task},{k}\n"));
            }
        }
        let sig = dir.join("signal.csv");
        std::fs::write(&sig, text).map_err(|e| Error::io(&sig, e))?;
        Ok(path)
    }

    pub fn signal_instances(&self, slide_id: &str, task_id: &str) -> &[usize] {
        self.signal
            .get(&(slide_id.to_string(), task_id.to_string()))
            .map_or(&[], Vec::as_slice)
    }
}

/// Reads a `signal.csv` written by [`SynthCohort::write`].
pub fn read_signal(path: &Path) -> Result<BTreeMap<(String, String), Vec<usize>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let k = row[2]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad instance index `{}`", path.display(), &row[2])))?;
        out.entry((row[0].to_string(), row[1].to_string())).or_default().push(k);
    }
    Ok(out)
}

/// Generator-aware oracle score for one slide: the number of instances whose
/// projection onto `concept` exceeds half its length. Background projections
/// are centred at 0 and shifted ones at `|c|`, so the count estimates how many
/// instances carry the concept. Uses no learned parameters.
pub fn presence_count(features: &crate::tensor::DenseTensor, concept: &[f64]) -> f64 {
    let norm = concept.iter().map(|c| c * c).sum::<f64>().sqrt();
    (0..features.rows())
        .filter(|&i| {
            let proj: f64 = features.row(i).iter().zip(concept).map(|(x, c)| x * c).sum::<f64>() / norm;
            proj > 0.5 * norm
        })
        .count() as f64
}
