//! Similarity scoring against gold judgements and label agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rate::cosine_pair;
use crate::store::{EmbeddingMatrix, GoldScores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// 1-based ranks, tied values sharing the mean of the positions they span.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "spearman of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("spearman needs at least two values".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite input to spearman".into()));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
        .ok_or_else(|| Error::DegenerateInput("constant input to spearman".into()))
}

/// Cosine per gold pair, ranked against the gold scores.
pub fn sts_score(vectors: &EmbeddingMatrix, gold: &GoldScores) -> Result<EvalResult> {
    gold.validate(vectors.count())?;
    let z = vectors.to_f64();
    let mut predicted = Vec::with_capacity(gold.len());
    for r in &gold.records {
        predicted.push(cosine_pair(z.column(r.a), z.column(r.b)).map_err(|_| {
            Error::ZeroVector {
                column: if z.column(r.a).iter().all(|v| *v == 0.0) { r.a } else { r.b },
            }
        })?);
    }
    let scores: Vec<f64> = gold.records.iter().map(|r| r.score).collect();
    Ok(EvalResult {
        metric: "spearman".into(),
        value: spearman(&predicted, &scores)?,
        n: gold.len(),
    })
}

/// Largest label count for which agreement is solved exactly.
pub const EXACT_MATCHING_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub value: f64,
    /// False when too many labels forced greedy matching.
    pub exact: bool,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::BTreeMap::new();
    for l in labels {
        let next = map.len();
        map.entry(*l).or_insert(next);
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

/// Best one-to-one assignment of rows to columns (`rows ≤ cols ≤ 16`) by
/// dynamic programming over subsets of used columns.
fn max_assignment(table: &[Vec<usize>], cols: usize) -> usize {
    let mut dp = vec![None::<usize>; 1 << cols];
    dp[0] = Some(0);
    for row in table {
        let mut next = vec![None::<usize>; 1 << cols];
        for (mask, value) in dp.iter().enumerate() {
            let Some(v) = value else { continue };
            for (c, gain) in row.iter().enumerate() {
                if mask & (1 << c) != 0 {
                    continue;
                }
                let m = mask | (1 << c);
                let cand = v + gain;
                if next[m].map_or(true, |cur| cand > cur) {
                    next[m] = Some(cand);
                }
            }
        }
        dp = next;
    }
    dp.into_iter().flatten().max().unwrap_or(0)
}

fn greedy_assignment(table: &[Vec<usize>]) -> usize {
    let mut cells: Vec<(usize, usize, usize)> = table
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (*v, r, c)))
        .collect();
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_r = vec![false; table.len()];
    let mut used_c = vec![false; table.first().map_or(0, |r| r.len())];
    let mut total = 0;
    for (v, r, c) in cells {
        if !used_r[r] && !used_c[c] {
            used_r[r] = true;
            used_c[c] = true;
            total += v;
        }
    }
    total
}

/// Agreement between two labelings, maximized over one-to-one renamings.
pub fn cluster_agreement(pred: &[usize], truth: &[usize]) -> Result<Agreement> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted labels vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput("empty labelings".into()));
    }
    let (p, np) = compact(pred);
    let (t, nt) = compact(truth);
    // rows = smaller side
    let (rows, cols, swap) = if np <= nt { (np, nt, false) } else { (nt, np, true) };
    let mut table = vec![vec![0usize; cols]; rows];
    for (a, b) in p.iter().zip(&t) {
        let (r, c) = if swap { (*b, *a) } else { (*a, *b) };
        table[r][c] += 1;
    }
    let exact = cols <= EXACT_MATCHING_LIMIT;
    let matched = if exact {
        max_assignment(&table, cols)
    } else {
        greedy_assignment(&table)
    };
    Ok(Agreement {
        value: matched as f64 / pred.len() as f64,
        exact,
    })
}
