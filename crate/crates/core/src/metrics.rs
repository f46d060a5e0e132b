//! Clustering error under label permutation, and bias/variance of
//! replicated vector estimates.

use crate::error::{Error, Result};

/// Largest number of clusters accepted by [`misclassification`].
pub const MAX_PERMUTATION_CLUSTERS: usize = 8;

/// Minimum number of disagreements over all relabelings of `pred`, with the
/// achieving map `perm[pred_label] = true_label`. The first permutation in
/// lexicographic order wins ties.
pub fn misclassification(pred: &[usize], truth: &[usize], m: usize) -> Result<(usize, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::input(format!("{} predicted labels for {} true labels", pred.len(), truth.len())));
    }
    if m == 0 || m > MAX_PERMUTATION_CLUSTERS {
        return Err(Error::input(format!(
            "permutation matching supports 1..={MAX_PERMUTATION_CLUSTERS} clusters, got {m}"
        )));
    }
    if let Some(l) = pred.iter().chain(truth).find(|&&l| l >= m) {
        return Err(Error::input(format!("label {l} out of range for {m} clusters")));
    }
    let mut confusion = vec![vec![0usize; m]; m];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = (usize::MAX, perm.clone());
    loop {
        let agree: usize = perm.iter().enumerate().map(|(p, &t)| confusion[p][t]).sum();
        let errors = pred.len() - agree;
        if errors < best.0 {
            best = (errors, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Squared bias `||mean - truth||^2` and total variance
/// `sum_j var_j` (divisor `R - 1`).
pub fn bias_variance(estimates: &[Vec<f64>], truth: &[f64]) -> Result<(f64, f64)> {
    let r = estimates.len();
    if r < 2 {
        return Err(Error::input(format!("bias/variance needs at least 2 estimates, got {r}")));
    }
    if estimates.iter().any(|e| e.len() != truth.len()) {
        return Err(Error::input("estimate length differs from truth length"));
    }
    let mut bias = 0.0;
    let mut var = 0.0;
    for (k, t) in truth.iter().enumerate() {
        let mean = estimates.iter().map(|e| e[k]).sum::<f64>() / r as f64;
        bias += (mean - t).powi(2);
        var += estimates.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    }
    Ok((bias, var))
}

/// Average ranks, ties sharing the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    correlation(&ranks(x), &ranks(y))
}
