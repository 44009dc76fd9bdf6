//! AUC and per-request GAUC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Mann-Whitney AUC with tie-averaged ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            op: "auc score".into(),
            index: i,
        });
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaucReport {
    pub gauc: f64,
    /// Requests with both labels present.
    pub scored: usize,
    /// Requests skipped for lacking a positive or a negative.
    pub skipped: usize,
}

/// Impression-weighted mean of per-request AUCs.
pub fn gauc(scores: &[f64], labels: &[u8], request_ids: &[u64]) -> Result<GaucReport> {
    if scores.len() != labels.len() || scores.len() != request_ids.len() {
        return Err(Error::invalid("gauc: scores, labels and request ids differ in length"));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &r) in request_ids.iter().enumerate() {
        groups.entry(r).or_default().push(i);
    }
    let (mut num, mut den) = (0.0, 0.0);
    let (mut scored, mut skipped) = (0, 0);
    for idx in groups.values() {
        let pos = idx.iter().filter(|&&i| labels[i] != 0).count();
        if pos == 0 || pos == idx.len() {
            skipped += 1;
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        num += auc(&s, &l)? * idx.len() as f64;
        den += idx.len() as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::invalid(format!("gauc: no scorable request ({skipped} skipped)")));
    }
    Ok(GaucReport {
        gauc: num / den,
        scored,
        skipped,
    })
}
