//! Verification metrics over scored trials: equal-error rate and DET points
//! from the ROC convex hull, and the log-LR cost Cllr in bits.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ScoreSet, TrialKey, TrialList};
use crate::error::{Error, Result};

/// Trial scores split by key.
#[derive(Debug, Clone)]
pub struct LabeledScores {
    target_scores: Vec<f64>,
    impostor_scores: Vec<f64>,
}

impl LabeledScores {
    pub fn new(target_scores: Vec<f64>, impostor_scores: Vec<f64>) -> Result<Self> {
        if target_scores.is_empty() || impostor_scores.is_empty() {
            return Err(Error::data(
                "need at least one target and one impostor trial",
            ));
        }
        if target_scores
            .iter()
            .chain(&impostor_scores)
            .any(|s| !s.is_finite())
        {
            return Err(Error::data("scores must be finite"));
        }
        Ok(LabeledScores {
            target_scores,
            impostor_scores,
        })
    }

    /// Joins a score set with the trial keys, row by row.
    pub fn from_trials(scores: &ScoreSet, trials: &TrialList) -> Result<Self> {
        if scores.len() != trials.len() {
            return Err(Error::data(format!(
                "{} scores for {} trials",
                scores.len(),
                trials.len()
            )));
        }
        let mut targets = Vec::new();
        let mut impostors = Vec::new();
        for (s, t) in scores.scores().iter().zip(trials.trials()) {
            if s.enroll_id != t.enroll_id || s.test_id != t.test_id {
                return Err(Error::data(format!(
                    "score row ({}, {}) does not match trial ({}, {})",
                    s.enroll_id, s.test_id, t.enroll_id, t.test_id
                )));
            }
            match t.key {
                TrialKey::Target => targets.push(s.log_lr),
                TrialKey::Impostor => impostors.push(s.log_lr),
                TrialKey::Unknown => {
                    return Err(Error::data(format!(
                        "trial ({}, {}) has no target/impostor key",
                        t.enroll_id, t.test_id
                    )))
                }
            }
        }
        LabeledScores::new(targets, impostors)
    }

    pub fn n_targets(&self) -> usize {
        self.target_scores.len()
    }

    pub fn n_impostors(&self) -> usize {
        self.impostor_scores.len()
    }

    pub fn target_scores(&self) -> &[f64] {
        &self.target_scores
    }

    pub fn impostor_scores(&self) -> &[f64] {
        &self.impostor_scores
    }
}

/// ROC operating points swept over the distinct score values, then reduced to
/// the lower convex hull (the optimal achievable miss/false-alarm frontier).
/// Points run from (0, 1) toward (1, 0) with `p_miss` strictly decreasing.
fn roc_hull(labeled: &LabeledScores) -> Vec<(f64, f64)> {
    let n_t = labeled.n_targets() as f64;
    let n_i = labeled.n_impostors() as f64;

    // sweep thresholds downward; a trial scoring exactly at the threshold is
    // rejected, so each distinct value moves the accepted counts as a group
    let mut all: Vec<(f64, bool)> = labeled
        .target_scores
        .iter()
        .map(|&s| (s, true))
        .chain(labeled.impostor_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut points = vec![(0.0, 1.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_i, 1.0 - tp as f64 / n_t));
    }

    // Pareto filter: keep only strict improvements in miss as fa grows
    let mut frontier = Vec::with_capacity(points.len());
    let mut best_miss = f64::INFINITY;
    for p in points {
        if p.1 < best_miss {
            best_miss = p.1;
            frontier.push(p);
        }
    }

    // lower convex hull by monotone chain
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(frontier.len());
    for p in frontier {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull
}

/// Equal-error rate: the crossing of the ROC hull with the `miss == fa`
/// diagonal, linearly interpolated.
pub fn eer(labeled: &LabeledScores) -> f64 {
    let hull = roc_hull(labeled);
    let mut prev: Option<(f64, f64)> = None;
    for &(fa, miss) in &hull {
        if miss <= fa {
            return match prev {
                None => miss.max(0.0),
                Some((f1, m1)) => {
                    let num = m1 - f1;
                    let den = (m1 - f1) - (miss - fa);
                    let t = if den == 0.0 { 0.0 } else { num / den };
                    f1 + t * (fa - f1)
                }
            };
        }
        prev = Some((fa, miss));
    }
    // miss stays above fa everywhere except at (1, 0), which is on every sweep
    0.5
}

/// One DET curve point; probit values are computed after clamping the rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub p_fa: f64,
    pub p_miss: f64,
    pub probit_fa: f64,
    pub probit_miss: f64,
}

/// Inverse standard normal CDF.
pub fn probit(p: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(p)
}

/// DET points along the ROC hull, downsampled to at most `n_points` while
/// keeping both endpoints. Rates are clamped to `[1/(2n), 1 - 1/(2n)]` of the
/// respective trial counts before the probit transform.
pub fn det_points(labeled: &LabeledScores, n_points: usize) -> Result<Vec<DetPoint>> {
    if n_points < 2 {
        return Err(Error::invalid_arg("need at least two DET points"));
    }
    let hull = roc_hull(labeled);
    let clamp = |p: f64, n: usize| {
        let lo = 1.0 / (2.0 * n as f64);
        p.max(lo).min(1.0 - lo)
    };
    let pick: Vec<usize> = if hull.len() <= n_points {
        (0..hull.len()).collect()
    } else {
        (0..n_points)
            .map(|k| (k as f64 / (n_points - 1) as f64 * (hull.len() - 1) as f64).round() as usize)
            .collect()
    };
    Ok(pick
        .into_iter()
        .map(|i| {
            let (fa, miss) = hull[i];
            let cfa = clamp(fa, labeled.n_impostors());
            let cmiss = clamp(miss, labeled.n_targets());
            DetPoint {
                p_fa: fa,
                p_miss: miss,
                probit_fa: probit(cfa),
                probit_miss: probit(cmiss),
            }
        })
        .collect())
}

/// Numerically safe `ln(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-LR cost in bits. Scores must be natural-log likelihood ratios.
pub fn cllr(labeled: &LabeledScores) -> f64 {
    let mean_t = labeled
        .target_scores
        .iter()
        .map(|&s| softplus(-s))
        .sum::<f64>()
        / labeled.n_targets() as f64;
    let mean_i = labeled
        .impostor_scores
        .iter()
        .map(|&s| softplus(s))
        .sum::<f64>()
        / labeled.n_impostors() as f64;
    (mean_t + mean_i) / (2.0 * std::f64::consts::LN_2)
}

/// Verification summary with the (clamped) DET polyline.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub eer: f64,
    pub cllr: f64,
    pub det: Vec<DetPoint>,
    pub n_target: usize,
    pub n_impostor: usize,
}

pub fn evaluate(labeled: &LabeledScores, n_det_points: usize) -> Result<EvalReport> {
    Ok(EvalReport {
        eer: eer(labeled),
        cllr: cllr(labeled),
        det: det_points(labeled, n_det_points)?,
        n_target: labeled.n_targets(),
        n_impostor: labeled.n_impostors(),
    })
}
