use crate::error::{Error, Result};

fn undefined(msg: impl Into<String>) -> Error {
    Error::MetricUndefined(msg.into())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(undefined("empty input"));
    }
    Ok(())
}

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half. Labels are 0 or 1.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("AUC label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain {
            op: "auc",
            detail: "NaN score".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(undefined("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, with tied groups sharing their mid-rank.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += mid2 * pos;
        i = j + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (p * q) as f64)
}

/// Macro average of one-vs-rest AUCs over classes that have both positive and
/// negative examples. `probs[i]` holds the class scores of sample `i`.
pub fn macro_auc_ovr(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if num_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        return auc(&s, labels);
    }
    let mut total = 0.0;
    let mut n = 0;
    for k in 0..num_classes {
        let bin: Vec<usize> = labels.iter().map(|&l| usize::from(l == k)).collect();
        let pos = bin.iter().sum::<usize>();
        if pos == 0 || pos == bin.len() {
            continue;
        }
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        total += auc(&s, &bin)?;
        n += 1;
    }
    if n == 0 {
        return Err(undefined("no class has both positives and negatives"));
    }
    Ok(total / n as f64)
}

fn check_classes(values: &[usize], num_classes: usize) -> Result<()> {
    match values.iter().find(|&&v| v >= num_classes) {
        Some(v) => Err(Error::Label {
            row: values.iter().position(|x| x == v).unwrap(),
            label: *v,
            classes: num_classes,
        }),
        None => Ok(()),
    }
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    check_classes(pred, num_classes)?;
    check_classes(truth, num_classes)?;
    let mut hit = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        hit[t] += usize::from(p == t);
    }
    let recalls: Vec<f64> = (0..num_classes)
        .filter(|&k| support[k] > 0)
        .map(|k| hit[k] as f64 / support[k] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Cohen's kappa with quadratic weights `(i − j)² / (C − 1)²`.
pub fn quadratic_kappa(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    if num_classes < 2 {
        return Err(Error::Contract("kappa needs at least two classes".into()));
    }
    check_classes(pred, num_classes)?;
    check_classes(truth, num_classes)?;
    let c = num_classes;
    let mut observed = vec![0.0; c * c];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * c + p] += 1.0;
    }
    let n = pred.len() as f64;
    let rows: Vec<f64> = (0..c).map(|i| (0..c).map(|j| observed[i * c + j]).sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| (0..c).map(|i| observed[i * c + j]).sum()).collect();
    let denom = ((c - 1) * (c - 1)) as f64;
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64) - (j as f64)).powi(2) / denom;
            wo += w * observed[i * c + j];
            we += w * rows[i] * cols[j] / n;
        }
    }
    if we == 0.0 {
        return Err(undefined("zero expected disagreement"));
    }
    Ok(1.0 - wo / we)
}

/// Index of the largest value; the first wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Cross-entropy of one logit vector against class `target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.0, 0.1, 0.9, 1.0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn balanced_accuracy_fixtures() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        // Recalls 1.0, 0.5, 0.0.
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 0, 1, 0, 0, 1];
        assert_eq!(balanced_accuracy(&pred, &truth, 3).unwrap(), 0.5);
        assert!(balanced_accuracy(&[], &[], 2).is_err());
    }

    #[test]
    fn kappa_fixtures() {
        assert_eq!(quadratic_kappa(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(), 1.0);
        // Truth and prediction independent: each pair of classes appears once.
        let truth = [0, 0, 1, 1];
        let pred = [0, 1, 0, 1];
        assert!(quadratic_kappa(&pred, &truth, 2).unwrap().abs() < 1e-12);
        assert!(matches!(quadratic_kappa(&[1, 1], &[1, 1], 3), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn helpers() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((cross_entropy(&[0.0, 0.0], 1) - 2f64.ln()).abs() < 1e-15);
    }
}
