//! Ranking and threshold metrics for binary scores.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite { index });
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // Walk from the lowest score up, counting negatives already passed.
    let mut concordant = 0.0;
    let mut neg_below = 0usize;
    for g in tie_groups(scores).iter().rev() {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        let n = g.len() - p;
        concordant += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

/// Average precision: for each distinct threshold, precision times the recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        seen += g.len();
        ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

/// One operating point per distinct score, highest first.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// (false positive rate, true positive rate) from (0, 0) to (1, 1); the
/// trapezoid area under it equals `roc_auc`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut out = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        fp += g.len() - p;
        out.push(CurvePoint {
            threshold: scores[g[0]],
            x: fp as f64 / neg as f64,
            y: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

/// (recall, precision) per distinct threshold; the step sum
/// `Σ Δrecall · precision` equals `pr_auc`.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut out = Vec::new();
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        seen += g.len();
        out.push(CurvePoint {
            threshold: scores[g[0]],
            x: tp as f64 / pos as f64,
            y: tp as f64 / seen as f64,
        });
    }
    Ok(out)
}

/// Fraction of samples where `score >= threshold` agrees with the label; NaN when empty.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    assert_eq!(scores.len(), labels.len(), "accuracy: one label per score");
    if scores.is_empty() {
        return f64::NAN;
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    correct as f64 / scores.len() as f64
}

/// Mean binary cross-entropy with probabilities clipped to `[eps, 1−eps]`.
pub fn bce(probs: &[f64], labels: &[u8], eps: f64) -> f64 {
    assert_eq!(probs.len(), labels.len(), "bce: one label per probability");
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(eps, 1.0 - eps);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Fraction of `scores` strictly above each threshold.
pub fn exceedance_curve(scores: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = scores.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| scores.iter().filter(|&&s| s > t).count() as f64 / n)
        .collect()
}

/// `points` evenly spaced thresholds from 0 to the largest score.
pub fn threshold_grid(scores: &[f64], points: usize) -> Vec<f64> {
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    let points = points.max(2);
    (0..points)
        .map(|i| if i == points - 1 { max } else { max * i as f64 / (points - 1) as f64 })
        .collect()
}
