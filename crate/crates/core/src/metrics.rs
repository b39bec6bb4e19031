//! Word error rate and average precision.

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

/// Word-level minimal-cost alignment counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Levenshtein alignment at word level with unit costs. Ties prefer
/// substitution over a deletion+insertion pair, then deletion over
/// insertion, so the breakdown is deterministic.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r = normalize(reference);
    let h = normalize(hypothesis);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    if rw.is_empty() {
        return Err(Error::data("empty reference: word error rate undefined"));
    }
    let (n, m) = (rw.len(), hw.len());
    let mut cost = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        cost[at(i, 0)] = i;
    }
    for j in 0..=m {
        cost[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[at(i - 1, j - 1)] + usize::from(rw[i - 1] != hw[j - 1]);
            let del = cost[at(i - 1, j)] + 1;
            let ins = cost[at(i, j - 1)] + 1;
            cost[at(i, j)] = sub.min(del).min(ins);
        }
    }
    // backtrack, diagonal first on ties
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diag = cost[at(i - 1, j - 1)] + usize::from(rw[i - 1] != hw[j - 1]);
            if diag == cost[at(i, j)] {
                if rw[i - 1] != hw[j - 1] {
                    s += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[at(i - 1, j)] + 1 == cost[at(i, j)] {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        substitutions: s,
        deletions: d,
        insertions: ins,
        ref_words: n,
        wer: (s + d + ins) as f64 / n as f64,
    })
}

/// Non-interpolated average precision: mean of precision at each positive,
/// ranked by descending score with ties broken by input index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data(format!(
            "scores len {} != labels len {}",
            scores.len(),
            labels.len()
        )));
    }
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 {
        return Err(Error::data("no positive labels: average precision undefined"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / total_pos as f64)
}

/// Mean AP over groups (each group scored independently).
pub fn mean_ap(groups: &[(Vec<f64>, Vec<u8>)]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::data("no groups for mean AP"));
    }
    let mut sum = 0.0;
    for (scores, labels) in groups {
        sum += average_precision(scores, labels)?;
    }
    Ok(sum / groups.len() as f64)
}
