//! Liveness metrics and two-sample discrepancy.
//!
//! Labels are 1 for live (positive) and 0 for spoof. A sample is accepted
//! as live when its score is at least the threshold.

use super::{PipelineError, Result};
use crate::tensor::kernels::gemm;

fn check(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(PipelineError::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PipelineError::Invalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PipelineError::Invalid("metrics need both live and spoof samples".into()));
    }
    Ok((pos, neg))
}

/// Fraction of live/spoof pairs ordered correctly, ties counting ½.
/// Computed from the rank sum after sorting.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Tied block shares the mean of ranks i+1..=j+1.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mean_rank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// (FAR, FRR) when accepting `score ≥ threshold`.
pub fn error_rates(scores: &[f64], labels: &[usize], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = check(scores, labels)?;
    let mut false_accept = 0;
    let mut false_reject = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (l == 1, s >= threshold) {
            (false, true) => false_accept += 1,
            (true, false) => false_reject += 1,
            _ => {}
        }
    }
    Ok((false_accept as f64 / neg as f64, false_reject as f64 / pos as f64))
}

pub fn hter(far: f64, frr: f64) -> f64 {
    (far + frr) / 2.0
}

/// ROC points `(FAR, TPR)` for every distinct threshold, from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Threshold among the observed scores (plus +∞) minimizing |FAR − FRR|;
/// the smallest such threshold wins ties.
pub fn eer_threshold(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check(scores, labels)?;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::INFINITY, candidates[0]);
    for &t in &candidates {
        let (far, frr) = error_rates(scores, labels, t)?;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Linear,
    /// Gaussian kernel `exp(−‖x−y‖² / 2σ²)` with σ the median pairwise
    /// distance of the pooled sample.
    RbfMedian,
    /// Gaussian kernel with a fixed bandwidth σ (stored as bits).
    Rbf(u64),
}

impl Kernel {
    pub fn rbf(sigma: f64) -> Self {
        Kernel::Rbf(sigma.to_bits())
    }
}

/// Gram matrix of the rows of `a` (n×d) against the rows of `b` (m×d).
fn gram(a: &[f64], n: usize, b: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    gemm(n, d, m, a, false, b, true, &mut out, false);
    out
}

/// Squared maximum mean discrepancy between row sets `x` (m×d) and `y`
/// (n×d), unbiased. Equal-sized sets use the paired form, which vanishes
/// exactly for identical sets.
pub fn mmd(x: &[f64], y: &[f64], d: usize, kernel: Kernel) -> Result<f64> {
    if d == 0 || x.len() % d != 0 || y.len() % d != 0 {
        return Err(PipelineError::Invalid(format!("feature length not a multiple of {d}")));
    }
    let (m, n) = (x.len() / d, y.len() / d);
    if m < 2 || n < 2 {
        return Err(PipelineError::Invalid("mmd needs at least two samples per set".into()));
    }
    let xx = gram(x, m, x, m, d);
    let yy = gram(y, n, y, n, d);
    let xy = gram(x, m, y, n, d);
    let sq_x: Vec<f64> = (0..m).map(|i| xx[i * m + i]).collect();
    let sq_y: Vec<f64> = (0..n).map(|i| yy[i * n + i]).collect();
    let dist = |dot: f64, a: f64, b: f64| (a + b - 2.0 * dot).max(0.0);
    let sigma2 = match kernel {
        Kernel::Linear => 0.0,
        Kernel::Rbf(bits) => f64::from_bits(bits).powi(2),
        Kernel::RbfMedian => {
            let mut dists = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    dists.push(dist(xx[i * m + j], sq_x[i], sq_x[j]));
                }
                for j in 0..n {
                    dists.push(dist(xy[i * n + j], sq_x[i], sq_y[j]));
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    dists.push(dist(yy[i * n + j], sq_y[i], sq_y[j]));
                }
            }
            dists.sort_by(f64::total_cmp);
            let med = dists[dists.len() / 2].sqrt();
            if med > 0.0 {
                med * med
            } else {
                1.0
            }
        }
    };
    let k = |dot: f64, a: f64, b: f64| match kernel {
        Kernel::Linear => dot,
        _ => (-dist(dot, a, b) / (2.0 * sigma2)).exp(),
    };
    let kxx = |i: usize, j: usize| k(xx[i * m + j], sq_x[i], sq_x[j]);
    let kyy = |i: usize, j: usize| k(yy[i * n + j], sq_y[i], sq_y[j]);
    let kxy = |i: usize, j: usize| k(xy[i * n + j], sq_x[i], sq_y[j]);
    if m == n {
        let mut sum = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sum += kxx(i, j) + kyy(i, j) - kxy(i, j) - kxy(j, i);
                }
            }
        }
        return Ok(sum / (m * (m - 1)) as f64);
    }
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sxx += kxx(i, j);
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                syy += kyy(i, j);
            }
        }
    }
    let sxy: f64 = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| kxy(i, j)).sum();
    Ok(sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Direct pair enumeration.
    fn auc_pairs(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let l = [1, 1, 0, 0];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8, 0.2], &l).unwrap(), 0.5);
        assert_eq!(auc_pairs(&[0.9, 0.1, 0.8, 0.2], &l), 0.5);
        assert_eq!(roc_auc(&[0.4; 4], &l).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pair_enumeration() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..50 {
            let n = 2 + rng.below(30);
            let mut labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(8) as f64) / 8.0).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            assert!((a - auc_pairs(&scores, &labels)).abs() < 1e-12);
            let inverted: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
            assert!((roc_auc(&scores, &inverted).unwrap() - (1.0 - a)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            assert_eq!(roc_auc(&warped, &labels).unwrap(), a);
        }
    }

    #[test]
    fn hter_examples() {
        let l = [1, 1, 0, 0];
        let s = [0.9, 0.8, 0.3, 0.1];
        let t = eer_threshold(&s, &l).unwrap();
        let (far, frr) = error_rates(&s, &l, t).unwrap();
        assert_eq!(hter(far, frr), 0.0);
        assert!((hter(0.2, 0.1) - 0.15).abs() < 1e-15);
        // 5 spoofs, 10 lives: threshold 0.5 accepts one spoof, rejects one live.
        let mut scores = vec![0.6, 0.1, 0.2, 0.3, 0.4];
        let mut labels = vec![0; 5];
        scores.extend([0.4, 0.7, 0.8, 0.9, 0.95, 0.6, 0.65, 0.75, 0.85, 0.99]);
        labels.extend([1; 10]);
        let (far, frr) = error_rates(&scores, &labels, 0.5).unwrap();
        assert!((far - 0.2).abs() < 1e-15 && (frr - 0.1).abs() < 1e-15);
    }

    #[test]
    fn roc_is_monotone() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..100 {
            let n = 4 + rng.below(40);
            let mut labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let roc = roc_curve(&scores, &labels).unwrap();
            assert_eq!(roc[0], (0.0, 0.0));
            assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
            for w in roc.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn hter_at_eer_close_to_eer() {
        let mut rng = SplitMix64::new(3);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.gaussian(l as f64, 1.0)).collect();
        let t = eer_threshold(&scores, &labels).unwrap();
        let (far, frr) = error_rates(&scores, &labels, t).unwrap();
        // One ROC step is 1/100 for each rate.
        assert!((far - frr).abs() <= 0.01 + 1e-12);
    }

    #[test]
    fn mmd_examples() {
        let mut rng = SplitMix64::new(4);
        let x: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        for k in [Kernel::Linear, Kernel::RbfMedian] {
            assert!(mmd(&x, &x, 3, k).unwrap().abs() < 1e-9);
        }
        let c = [0.5, -1.0, 2.0];
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + c[i % 3]).collect();
        let expected: f64 = c.iter().map(|v| v * v).sum();
        assert!((mmd(&x, &y, 3, Kernel::Linear).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn mmd_rbf_hand_expansion() {
        // 1-D, x = {0, 1}, y = {2, 4}, σ = 1.
        let k = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0).exp();
        let (x, y) = ([0.0, 1.0], [2.0, 4.0]);
        let h = |i: usize, j: usize| k(x[i], x[j]) + k(y[i], y[j]) - k(x[i], y[j]) - k(x[j], y[i]);
        let expected = (h(0, 1) + h(1, 0)) / 2.0;
        let got = mmd(&x, &y, 1, Kernel::rbf(1.0)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        // Unequal sizes use the general unbiased form.
        let y3 = [2.0, 4.0, 3.0];
        let sxx = 2.0 * k(0.0, 1.0) / 2.0;
        let syy = 2.0 * (k(2.0, 4.0) + k(2.0, 3.0) + k(4.0, 3.0)) / 6.0;
        let sxy: f64 = x.iter().flat_map(|a| y3.iter().map(move |b| k(*a, *b))).sum::<f64>() / 6.0;
        let got = mmd(&x, &y3, 1, Kernel::rbf(1.0)).unwrap();
        assert!((got - (sxx + syy - 2.0 * sxy)).abs() < 1e-12);
    }
}
