//! Classification and regression metrics.
//!
//! Macro-F1 convention: a class absent from both predictions and labels is
//! skipped; any other class scores `2 TP / (2 TP + FP + FN)`, which is 0
//! when it has no predicted or no actual positives.

use serde::Serialize;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "prediction/label length mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    assert_eq!(preds.len(), labels.len(), "prediction/label length mismatch");
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

/// Pearson correlation; 0 when either series is constant or empty.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "series length mismatch");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainMetrics {
    pub domain_id: u32,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Metrics over a collection of domains; each domain is one group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub worst_case_accuracy: f64,
    pub pearson_r: Option<f64>,
    pub worst_case_pearson_r: Option<f64>,
    pub per_domain: Vec<DomainMetrics>,
    pub n_samples: usize,
}

impl Metrics {
    /// Pools per-domain predictions: accuracy and macro-F1 over all samples,
    /// worst case over domains.
    pub fn from_domains(parts: &[(u32, Vec<usize>, Vec<usize>)], num_classes: usize) -> Self {
        let mut all_p = Vec::new();
        let mut all_l = Vec::new();
        let mut per_domain = Vec::with_capacity(parts.len());
        for (id, p, l) in parts {
            per_domain.push(DomainMetrics {
                domain_id: *id,
                n: p.len(),
                accuracy: accuracy(p, l),
                macro_f1: macro_f1(p, l, num_classes),
            });
            all_p.extend_from_slice(p);
            all_l.extend_from_slice(l);
        }
        let worst = per_domain.iter().map(|d| d.accuracy).fold(f64::INFINITY, f64::min);
        Self {
            accuracy: accuracy(&all_p, &all_l),
            macro_f1: macro_f1(&all_p, &all_l, num_classes),
            worst_case_accuracy: if per_domain.is_empty() { 0.0 } else { worst },
            pearson_r: None,
            worst_case_pearson_r: None,
            per_domain,
            n_samples: all_p.len(),
        }
    }

    /// Regression metrics: Pearson r over pooled samples and the minimum over domains.
    pub fn from_regression(parts: &[(u32, Vec<f64>, Vec<f64>)]) -> Self {
        let mut all_p = Vec::new();
        let mut all_t = Vec::new();
        let mut worst = f64::INFINITY;
        for (_, p, t) in parts {
            worst = worst.min(pearson(p, t));
            all_p.extend_from_slice(p);
            all_t.extend_from_slice(t);
        }
        Self {
            accuracy: 0.0,
            macro_f1: 0.0,
            worst_case_accuracy: 0.0,
            pearson_r: Some(pearson(&all_p, &all_t)),
            worst_case_pearson_r: Some(if parts.is_empty() { 0.0 } else { worst }),
            per_domain: Vec::new(),
            n_samples: all_p.len(),
        }
    }
}
