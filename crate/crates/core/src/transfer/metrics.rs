//! Evaluation metrics: top-1 accuracy, macro mAP and mIoU.

use crate::error::{Error, Result};

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    (0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best })
}

pub fn top1_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::config(format!("top-1 needs matching non-empty inputs ({} vs {})", scores.len(), labels.len())));
    }
    let hits = scores.iter().zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision of one class: `sum_n (R_n - R_{n-1}) P_n` over the
/// distinct score thresholds, highest first. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(positive[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

/// Macro average of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::config("mAP needs matching non-empty inputs"));
    }
    let k = scores[0].len();
    if scores.iter().any(|s| s.len() != k) || labels.iter().any(|l| l.len() != k) {
        return Err(Error::config("mAP inputs have inconsistent class counts"));
    }
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let p: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            average_precision(&s, &p)
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::config("mAP undefined: no class has a positive label"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Mean IoU over classes that occur in the ground truth.
    pub fn mean_iou(&self) -> Result<f64> {
        let k = self.classes;
        let mut ious = Vec::new();
        for c in 0..k {
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            if gt == 0 {
                continue;
            }
            let tp = self.get(c, c);
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
            ious.push(tp as f64 / (gt + fp) as f64);
        }
        if ious.is_empty() {
            return Err(Error::config("mIoU undefined on empty ground truth"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::config("mIoU needs equally long prediction and truth"));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::config(format!("class index outside 0..{classes}")));
        }
        cm.add(t, p);
    }
    cm.mean_iou()
}
