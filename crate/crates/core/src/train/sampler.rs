use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Slide;
use crate::error::{Error, Result};
use crate::rng::{name_hash, stream, tag, StreamRng};
use crate::tensor::DenseTensor;

/// Instances drawn from one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub patient_id: String,
    /// `[N × D]`
    pub features: DenseTensor,
    /// Source row of each bag instance within the slide.
    pub instance_index: Vec<usize>,
    pub coords: Option<Vec<(u32, u32)>>,
    pub labels: BTreeMap<String, usize>,
}

impl Bag {
    /// The whole slide, in stored order.
    pub fn from_slide(slide: &Slide) -> Bag {
        Bag {
            slide_id: slide.record.slide_id.clone(),
            patient_id: slide.record.patient_id.clone(),
            features: slide.features.clone(),
            instance_index: (0..slide.instances()).collect(),
            coords: slide.coords.clone(),
            labels: slide.record.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.instance_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_index.is_empty()
    }

    pub fn label(&self, task_id: &str) -> Result<usize> {
        self.labels.get(task_id).copied().ok_or_else(|| {
            Error::Data(format!("slide `{}` has no label for task `{task_id}`", self.slide_id))
        })
    }

    fn select(&self, idx: &[usize]) -> Result<Bag> {
        let d = self.features.cols();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.features.row(i));
        }
        Ok(Bag {
            slide_id: self.slide_id.clone(),
            patient_id: self.patient_id.clone(),
            features: DenseTensor::matrix(idx.len(), d, values)?,
            instance_index: idx.iter().map(|&i| self.instance_index[i]).collect(),
            coords: self.coords.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            labels: self.labels.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Val,
}

/// Draws a bag from `slide`.
///
/// Train: size uniform in `[min, max]`, without replacement, falling back to
/// draws with replacement when the slide is too small. Val: exactly `max`
/// instances sorted by source index, with the same fallback.
pub fn sample_bag<R: Rng + ?Sized>(
    slide: &Slide,
    size_range: (usize, usize),
    mode: SampleMode,
    rng: &mut R,
) -> Result<Bag> {
    let (min, max) = size_range;
    if min == 0 || min > max {
        return Err(Error::Config(format!("bag size range [{min}, {max}] is invalid")));
    }
    let n = slide.instances();
    if n == 0 {
        return Err(Error::Data(format!("slide `{}` has no instances", slide.slide_id())));
    }
    let size = match mode {
        SampleMode::Train => rng.random_range(min..=max),
        SampleMode::Val => max,
    };
    let mut idx = if n >= size {
        index::sample(rng, n, size).into_vec()
    } else {
        (0..size).map(|_| rng.random_range(0..n)).collect()
    };
    if mode == SampleMode::Val {
        idx.sort_unstable();
    }
    Bag::from_slide(slide).select(&idx)
}

/// The epoch-independent stream used for a slide's validation bag.
pub fn val_rng(seed: u64, slide_id: &str) -> StreamRng {
    stream(seed, &[tag::VALIDATION, name_hash(slide_id)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub feature_jitter_sigma: f64,
    pub instance_drop_p: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            feature_jitter_sigma: 0.05,
            instance_drop_p: 0.05,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            feature_jitter_sigma: 0.0,
            instance_drop_p: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feature_jitter_sigma >= 0.0 && self.feature_jitter_sigma.is_finite())
            || !(0.0..1.0).contains(&self.instance_drop_p)
        {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Feature-space augmentation: each instance is dropped with probability
/// `instance_drop_p` (at least one always survives), then every surviving
/// feature receives independent `N(0, σ²)` jitter.
pub fn augment_bag<R: Rng + ?Sized>(bag: &Bag, cfg: &AugmentConfig, rng: &mut R) -> Result<Bag> {
    if !cfg.enabled {
        return Ok(bag.clone());
    }
    let mut out = if cfg.instance_drop_p > 0.0 {
        let mut keep: Vec<usize> = (0..bag.len())
            .filter(|_| rng.random::<f64>() >= cfg.instance_drop_p)
            .collect();
        if keep.is_empty() {
            keep.push(rng.random_range(0..bag.len()));
        }
        bag.select(&keep)?
    } else {
        bag.clone()
    };
    if cfg.feature_jitter_sigma > 0.0 {
        for v in out.features.values_mut() {
            *v += cfg.feature_jitter_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SlideRecord;

    fn slide(n: usize) -> Slide {
        Slide {
            record: SlideRecord {
                slide_id: "s".into(),
                patient_id: "p".into(),
                feature_file: "f".into(),
                labels: BTreeMap::new(),
            },
            features: DenseTensor::matrix(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap(),
            coords: None,
        }
    }

    #[test]
    fn val_bag_of_exact_size_is_whole_slide_in_order() {
        let s = slide(128);
        let a = sample_bag(&s, (64, 128), SampleMode::Val, &mut val_rng(1, "s")).unwrap();
        let b = sample_bag(&s, (64, 128), SampleMode::Val, &mut val_rng(1, "s")).unwrap();
        assert_eq!(a.instance_index, (0..128).collect::<Vec<_>>());
        assert_eq!(a, b);
    }

    #[test]
    fn small_slide_is_drawn_with_replacement() {
        let s = slide(10);
        let mut r = stream(3, &[]);
        let b = sample_bag(&s, (64, 64), SampleMode::Train, &mut r).unwrap();
        assert_eq!(b.len(), 64);
        assert!(b.instance_index.iter().all(|&i| i < 10));
        assert_eq!(b.features.row(5), s.features.row(b.instance_index[5]));
    }

    #[test]
    fn disabled_or_zero_augmentation_is_identity() {
        let s = slide(20);
        let b = Bag::from_slide(&s);
        let mut r = stream(0, &[]);
        let cfg = AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        };
        assert_eq!(augment_bag(&b, &cfg, &mut r).unwrap(), b);
        let zero = AugmentConfig {
            feature_jitter_sigma: 0.0,
            instance_drop_p: 0.0,
            enabled: true,
        };
        assert_eq!(augment_bag(&b, &zero, &mut r).unwrap(), b);
    }

    #[test]
    fn drop_never_empties_a_bag() {
        let b = Bag::from_slide(&slide(1));
        let cfg = AugmentConfig {
            feature_jitter_sigma: 0.0,
            instance_drop_p: 0.99,
            enabled: true,
        };
        for s in 0..50 {
            assert_eq!(augment_bag(&b, &cfg, &mut stream(s, &[])).unwrap().len(), 1);
        }
    }
}
