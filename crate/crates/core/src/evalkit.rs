//! Metrics, stratified splitting and early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PATIENCE: usize = 15;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("labels must be 0 or 1, got {l}")));
    }
    Ok(())
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("AUC over NaN scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative samples"
        )));
    }
    // Walk tie blocks in ascending order; each positive beats every negative
    // below its block and half of those inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let block = &idx[i..j];
        let pos = block.iter().filter(|&&k| labels[k] == 1).count();
        let neg = block.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Accuracy and positive-class F1 with predictions `score ≥ threshold`.
pub fn acc_f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Data("accuracy over an empty set".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / scores.len() as f64;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((acc, f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let auc = auc(scores, labels)?;
        let (acc, f1) = acc_f1(scores, labels, threshold)?;
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            auc,
            acc,
            f1,
            n_pos,
            n_neg: labels.len() - n_pos,
            threshold,
        })
    }
}

pub const EVAL_HEADER: &str = "split,auc,acc,f1,n_pos,n_neg";

pub fn write_eval_csv<W: Write>(out: &mut W, rows: &[(&str, &EvalReport)]) -> std::io::Result<()> {
    writeln!(out, "{EVAL_HEADER}")?;
    for (split, r) in rows {
        writeln!(out, "{split},{},{},{},{},{}", r.auc, r.acc, r.f1, r.n_pos, r.n_neg)?;
    }
    Ok(())
}

/// Index sets of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffle and cut by `ratios`; indices within each part are sorted.
pub fn stratified_split(labels: &[u8], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 5 {
            return Err(Error::Data(format!(
                "class {class} has {} samples; stratified splitting needs at least 5",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_train = (a * n).round() as usize;
        let n_val = ((b * n).round() as usize).min(members.len() - n_train);
        split.train.extend_from_slice(&members[..n_train]);
        split.val.extend_from_slice(&members[n_train..n_train + n_val]);
        split.test.extend_from_slice(&members[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Tracks the best validation accuracy; epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub patience: usize,
    pub epochs_since_best: usize,
    pub epoch: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_val_acc: f64::NEG_INFINITY,
            best_epoch: 0,
            patience,
            epochs_since_best: 0,
            epoch: 0,
        }
    }

    /// Records one epoch; returns `(improved, should_stop)`.
    pub fn update(&mut self, val_acc: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = val_acc > self.best_val_acc;
        if improved {
            self.best_val_acc = val_acc;
            self.best_epoch = self.epoch;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        (improved, self.epochs_since_best >= self.patience)
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(DEFAULT_PATIENCE)
    }
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
