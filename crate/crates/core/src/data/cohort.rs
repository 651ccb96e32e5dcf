use std::collections::HashMap;

use super::features::read_features;
use super::manifest::{Manifest, SlideRecord};
use super::registry::TaskRegistry;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// One slide with its features promoted to `f64`.
#[derive(Clone, Debug)]
pub struct Slide {
    pub record: SlideRecord,
    /// `[N × D]`
    pub features: DenseTensor,
    pub coords: Option<Vec<(u32, u32)>>,
}

impl Slide {
    pub fn slide_id(&self) -> &str {
        &self.record.slide_id
    }

    pub fn instances(&self) -> usize {
        self.features.rows()
    }

    pub fn label(&self, task_id: &str) -> Option<usize> {
        self.record.labels.get(task_id).copied()
    }
}

/// A fully loaded cohort, ready for training.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub registry: TaskRegistry,
    pub slides: Vec<Slide>,
    index: HashMap<String, usize>,
}

impl Cohort {
    pub fn new(registry: TaskRegistry, slides: Vec<Slide>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut width = None;
        for (i, s) in slides.iter().enumerate() {
            if index.insert(s.record.slide_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate slide `{}`", s.slide_id())));
            }
            match width {
                None => width = Some(s.features.cols()),
                Some(d) if d != s.features.cols() => {
                    return Err(Error::Data(format!(
                        "slide `{}` has width {}, expected {d}",
                        s.slide_id(),
                        s.features.cols()
                    )))
                }
                _ => {}
            }
        }
        Ok(Cohort {
            registry,
            slides,
            index,
        })
    }

    /// Reads every slide of a parsed manifest.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let slides = manifest
            .records
            .iter()
            .map(|r| {
                let m = read_features(&manifest.feature_path(r))?;
                Ok(Slide {
                    record: r.clone(),
                    features: m.to_tensor(),
                    coords: m.coords,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.registry.clone(), slides)
    }

    pub fn index_of(&self, slide_id: &str) -> Option<usize> {
        self.index.get(slide_id).copied()
    }

    pub fn slide(&self, slide_id: &str) -> Option<&Slide> {
        self.index_of(slide_id).map(|i| &self.slides[i])
    }

    pub fn input_width(&self) -> Option<usize> {
        self.slides.first().map(|s| s.features.cols())
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }
}
