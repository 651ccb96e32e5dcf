//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use tcv2_core::data::{Split, TaskRegistry, TaskSpec};
use tcv2_core::model::{Activation, EncoderConfig, HeadInit, ModelConfig, MultiTaskModel};
use tcv2_core::pooling::AttentionPoolParams;
use tcv2_core::rng::StreamRng;
use tcv2_core::tensor::{DenseTensor, Mode, ParamStore, Tape};
use tcv2_core::train::Bag;

/// Attention pooling written as explicit scalar loops.
/// Returns the slide vector and the per-head weights.
pub fn scalar_attention_pool(store: &ParamStore, p: &AttentionPoolParams, bag: &DenseTensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d, da, heads) = (bag.rows(), p.dim(), p.att_dim(), p.heads());
    let mut joined = Vec::with_capacity(heads * d);
    let mut all_w = Vec::with_capacity(heads);
    for h in 0..heads {
        let v = store.value(p.score_matrix(h)).values();
        let w = store.value(p.score_vector(h)).values();
        let mut scores = vec![0.0; n];
        for k in 0..n {
            let mut s = 0.0;
            for a in 0..da {
                let mut pre = 0.0;
                for j in 0..d {
                    pre += v[a * d + j] * bag.at(k, j);
                }
                s += w[a] * pre.tanh();
            }
            scores[k] = s;
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..n {
                acc += alpha[k] * bag.at(k, j);
            }
            joined.push(acc);
        }
        all_w.push(alpha);
    }
    let wo = store.value(p.output_projection()).values();
    let hd = heads * d;
    let slide = (0..d)
        .map(|i| (0..hd).map(|j| wo[i * hd + j] * joined[j]).sum())
        .collect();
    (slide, all_w)
}

/// Pairwise AUC: each positive/negative pair scores 1, 1/2 on ties.
pub fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice_wins += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_wins as f64 / 2.0 / pairs as f64
}

/// Quadratic kappa via weighted agreement: `(p_o − p_e) / (1 − p_e)` with
/// agreement weights `1 − (i − j)² / (C − 1)²`.
pub fn kappa_oracle(pred: &[usize], truth: &[usize], c: usize) -> f64 {
    let n = pred.len() as f64;
    let mut conf = vec![vec![0.0; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[t][p] += 1.0;
    }
    let mut row = vec![0.0; c];
    let mut col = vec![0.0; c];
    for i in 0..c {
        for j in 0..c {
            row[i] += conf[i][j];
            col[j] += conf[i][j];
        }
    }
    let agree = |i: usize, j: usize| 1.0 - ((i as f64 - j as f64) / (c as f64 - 1.0)).powi(2);
    let mut po = 0.0;
    let mut pe = 0.0;
    for i in 0..c {
        for j in 0..c {
            po += agree(i, j) * conf[i][j] / n;
            pe += agree(i, j) * row[i] * col[j] / (n * n);
        }
    }
    (po - pe) / (1.0 - pe)
}

/// Every (held-out task, training task, slide) triple, by exhaustive search.
pub fn brute_coherence(assign: &BTreeMap<String, BTreeMap<String, Split>>) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    let slides: BTreeSet<&String> = assign.values().flat_map(|m| m.keys()).collect();
    for s in slides {
        for (a, ma) in assign {
            for (b, mb) in assign {
                let held = matches!(ma.get(s), Some(Split::Val) | Some(Split::Test));
                if a != b && held && mb.get(s) == Some(&Split::Train) {
                    out.insert((a.clone(), b.clone(), s.clone()));
                }
            }
        }
    }
    out
}

pub fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> DenseTensor {
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// A small random tanh model with uniformly initialized heads.
pub fn random_model(rng: &mut StreamRng, tasks: Vec<TaskSpec>, d_in: usize, d: usize) -> MultiTaskModel {
    let hidden = rng.random_range(2..=8);
    let mut cfg = ModelConfig::new(EncoderConfig {
        input_width: d_in,
        hidden_widths: vec![hidden],
        output_width: d,
        activation: Activation::Tanh,
    });
    cfg.att_dim = rng.random_range(2..=8);
    cfg.head_init = HeadInit::Uniform;
    MultiTaskModel::new(cfg, TaskRegistry::new(tasks).unwrap(), rng.random()).unwrap()
}

pub fn bag_with_labels(features: DenseTensor, labels: &[(&str, usize)]) -> Bag {
    let n = features.rows();
    Bag {
        slide_id: "s".into(),
        patient_id: "p".into(),
        features,
        instance_index: (0..n).collect(),
        coords: None,
        labels: labels.iter().map(|(t, l)| (t.to_string(), *l)).collect(),
    }
}

/// Sum over tasks of cross-entropy in train mode, with dropout masks drawn
/// from a fresh copy of `rng`.
pub fn model_loss(model: &MultiTaskModel, bag: &DenseTensor, targets: &[(&str, usize)], rng: &StreamRng) -> f64 {
    let mut r = rng.clone();
    let mut tape = Tape::new();
    let x = tape.constant(bag.clone());
    let mut total = 0.0;
    for (t, y) in targets {
        let out = model.forward_tape(&mut tape, t, x, Mode::Train, &mut r).unwrap();
        let ce = tape.cross_entropy_logits(out.logits, &[*y]).unwrap();
        total += tape.value(ce).item();
    }
    total
}

/// Analytic gradients of [`model_loss`], one tensor per parameter.
pub fn model_grads(model: &mut MultiTaskModel, bag: &DenseTensor, targets: &[(&str, usize)], rng: &StreamRng) -> Vec<DenseTensor> {
    let mut r = rng.clone();
    let mut tape = Tape::new();
    let x = tape.constant(bag.clone());
    let mut total = None;
    for (t, y) in targets {
        let out = model.forward_tape(&mut tape, t, x, Mode::Train, &mut r).unwrap();
        let ce = tape.cross_entropy_logits(out.logits, &[*y]).unwrap();
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce).unwrap(),
        });
    }
    model.store_mut().zero_grad();
    tape.backward(total.unwrap(), model.store_mut()).unwrap();
    let g = model.store().iter().map(|p| p.grad().clone()).collect();
    model.store_mut().zero_grad();
    g
}

/// Central differences of [`model_loss`] for every parameter element.
pub fn numeric_grads(model: &mut MultiTaskModel, bag: &DenseTensor, targets: &[(&str, usize)], rng: &StreamRng, h: f64) -> Vec<DenseTensor> {
    let ids: Vec<_> = model.store().ids().collect();
    ids.into_iter()
        .map(|id| {
            let n = model.store().value(id).numel();
            let mut g = vec![0.0; n];
            for (i, slot) in g.iter_mut().enumerate() {
                let orig = model.store().value(id).values()[i];
                model.store_mut().get_mut(id).value_mut().values_mut()[i] = orig + h;
                let plus = model_loss(model, bag, targets, rng);
                model.store_mut().get_mut(id).value_mut().values_mut()[i] = orig - h;
                let minus = model_loss(model, bag, targets, rng);
                model.store_mut().get_mut(id).value_mut().values_mut()[i] = orig;
                *slot = (plus - minus) / (2.0 * h);
            }
            DenseTensor::new(model.store().value(id).dims(), g).unwrap()
        })
        .collect()
}

/// Logits of `task` for `bag` in eval mode, by scalar loops over the stored
/// parameters.
pub fn scalar_model_logits(model: &MultiTaskModel, task: &str, bag: &DenseTensor) -> Vec<f64> {
    let store = model.store();
    let value = |id: &str| store.value(store.lookup(id).unwrap());
    let layers = model.config().encoder.hidden_widths.len() + 1;
    let mut h: Vec<Vec<f64>> = (0..bag.rows()).map(|k| bag.row(k).to_vec()).collect();
    for i in 0..layers {
        let w = value(&format!("encoder.layer{i}.weight"));
        let b = value(&format!("encoder.layer{i}.bias"));
        let (out, inp) = (w.dims()[0], w.dims()[1]);
        h = h
            .iter()
            .map(|x| {
                (0..out)
                    .map(|o| {
                        let z = b.values()[o] + (0..inp).map(|j| w.values()[o * inp + j] * x[j]).sum::<f64>();
                        match (i + 1 < layers, model.config().encoder.activation) {
                            (false, _) => z,
                            (true, Activation::Tanh) => z.tanh(),
                            (true, Activation::Relu) => z.max(0.0),
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let encoded = DenseTensor::from_rows(&h).unwrap();
    let (slide, _) = scalar_attention_pool(store, model.pool(), &encoded);
    let w = value(&format!("head.{task}.weight"));
    let b = value(&format!("head.{task}.bias"));
    let d = slide.len();
    (0..w.dims()[0])
        .map(|c| b.values()[c] + (0..d).map(|j| w.values()[c * d + j] * slide[j]).sum::<f64>())
        .collect()
}
