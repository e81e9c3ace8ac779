//! Affine score calibration trained with a prior-weighted logistic objective,
//! plus by-speaker cross-validated application.

use std::collections::BTreeSet;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{ScoreSet, TrialKey, TrialList, TrialScore};
use crate::error::{Error, Result};
use crate::metrics::softplus;

/// Affine transform `s' = a * s + b` mapping raw scores to log-LRs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibrator {
    pub a: f64,
    pub b: f64,
}

impl Calibrator {
    pub fn apply(&self, score: f64) -> f64 {
        self.a * score + self.b
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Prior-weighted logistic loss of calibrated scores treated as posterior
/// log-odds at effective prior `prior`.
pub fn logistic_loss(
    targets: &[f64],
    impostors: &[f64],
    cal: &Calibrator,
    prior: f64,
) -> f64 {
    let tau = logit(prior);
    let mean_t = targets
        .iter()
        .map(|&s| softplus(-(cal.apply(s) + tau)))
        .sum::<f64>()
        / targets.len() as f64;
    let mean_i = impostors
        .iter()
        .map(|&s| softplus(cal.apply(s) + tau))
        .sum::<f64>()
        / impostors.len() as f64;
    prior * mean_t + (1.0 - prior) * mean_i
}

/// Fits the affine calibration by Newton descent on the convex logistic
/// objective, to gradient norm below 1e-8. Degenerate inputs (every score
/// identical) yield the flat calibrator `a = 0`, with a warning; the offset
/// then lands where the prior-weighted objective is minimized.
pub fn calibrate_fit(targets: &[f64], impostors: &[f64], prior: f64) -> Result<Calibrator> {
    if targets.is_empty() || impostors.is_empty() {
        return Err(Error::data("calibration needs both target and impostor scores"));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::invalid_arg(format!("prior {prior} must be inside (0, 1)")));
    }
    let all_min = targets
        .iter()
        .chain(impostors)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let all_max = targets
        .iter()
        .chain(impostors)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if all_max - all_min < 1e-12 {
        log::warn!("all scores identical; calibration degenerates to a flat transform");
        return Ok(Calibrator { a: 0.0, b: 0.0 });
    }

    let tau = logit(prior);
    let w_t = prior / targets.len() as f64;
    let w_i = (1.0 - prior) / impostors.len() as f64;
    let mut cal = Calibrator { a: 1.0, b: 0.0 };
    let mut loss = logistic_loss(targets, impostors, &cal, prior);

    for _ in 0..200 {
        // gradient and Hessian of the weighted objective in (a, b)
        let mut g = [0.0f64; 2];
        let mut h = [[0.0f64; 2]; 2];
        for &s in targets {
            let t = cal.apply(s) + tau;
            let p = sigmoid(-t);
            g[0] -= w_t * p * s;
            g[1] -= w_t * p;
            let curv = w_t * p * (1.0 - p);
            h[0][0] += curv * s * s;
            h[0][1] += curv * s;
            h[1][1] += curv;
        }
        for &s in impostors {
            let t = cal.apply(s) + tau;
            let p = sigmoid(t);
            g[0] += w_i * p * s;
            g[1] += w_i * p;
            let curv = w_i * p * (1.0 - p);
            h[0][0] += curv * s * s;
            h[0][1] += curv * s;
            h[1][1] += curv;
        }
        let grad_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if grad_norm < 1e-8 {
            break;
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let (mut da, mut db) = if det.abs() > 1e-300 {
            (
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(h[0][0] * g[1] - h[0][1] * g[0]) / det,
            )
        } else {
            (-g[0], -g[1])
        };
        // damped step: halve until the loss does not increase
        let mut accepted = false;
        for _ in 0..60 {
            let trial = Calibrator {
                a: cal.a + da,
                b: cal.b + db,
            };
            let trial_loss = logistic_loss(targets, impostors, &trial, prior);
            if trial_loss <= loss {
                cal = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if cal.a < 0.0 {
        log::warn!("calibration fit a negative scale ({}); scores rank inversely", cal.a);
    }
    Ok(cal)
}

/// Result of cross-validated calibration: calibrated scores for the kept
/// trials (in the input order), the per-split calibrators, and the indices of
/// the kept trials in the original list.
#[derive(Debug, Clone)]
pub struct CvCalibration {
    pub scores: ScoreSet,
    pub calibrators: Vec<Calibrator>,
    pub kept: Vec<usize>,
}

/// By-speaker cross-validated calibration. Speakers are shuffled with the
/// seed and dealt into `n_splits` disjoint sets; a trial whose sides fall in
/// the same split is calibrated by the model trained on the within-split
/// trials of the other splits, and trials crossing splits are dropped.
pub fn cv_calibrate(
    scores: &ScoreSet,
    trials: &TrialList,
    trial_speakers: &[(String, String)],
    n_splits: usize,
    seed: u64,
    prior: f64,
) -> Result<CvCalibration> {
    if n_splits < 2 {
        return Err(Error::invalid_arg("need at least two splits"));
    }
    if scores.len() != trials.len() || trial_speakers.len() != trials.len() {
        return Err(Error::data("scores, trials and speaker pairs must align"));
    }

    let speaker_set: BTreeSet<&str> = trial_speakers
        .iter()
        .flat_map(|(e, t)| [e.as_str(), t.as_str()])
        .collect();
    let mut speakers: Vec<&str> = speaker_set.into_iter().collect();
    let mut rng = StdRng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let split_of = |name: &str| {
        speakers
            .iter()
            .position(|&s| s == name)
            .expect("speaker present")
            % n_splits
    };
    let speaker_split: std::collections::HashMap<&str, usize> = speakers
        .iter()
        .map(|&s| (s, split_of(s)))
        .collect();

    // keep within-split trials only
    let mut kept: Vec<usize> = Vec::new();
    let mut split_of_trial: Vec<usize> = Vec::new();
    for (i, (e, t)) in trial_speakers.iter().enumerate() {
        let ke = speaker_split[e.as_str()];
        let kt = speaker_split[t.as_str()];
        if ke == kt {
            kept.push(i);
            split_of_trial.push(ke);
        }
    }

    let mut calibrators = Vec::with_capacity(n_splits);
    for k in 0..n_splits {
        let mut t_scores = Vec::new();
        let mut i_scores = Vec::new();
        for (&idx, &split) in kept.iter().zip(&split_of_trial) {
            if split == k {
                continue;
            }
            let s = scores.scores()[idx].log_lr;
            match trials.trials()[idx].key {
                TrialKey::Target => t_scores.push(s),
                TrialKey::Impostor => i_scores.push(s),
                TrialKey::Unknown => {
                    return Err(Error::data(
                        "cross-validated calibration needs target/impostor keys on every kept trial",
                    ))
                }
            }
        }
        if t_scores.is_empty() || i_scores.is_empty() {
            return Err(Error::data(format!(
                "calibration training pool for split {k} is missing a class"
            )));
        }
        calibrators.push(calibrate_fit(&t_scores, &i_scores, prior)?);
    }

    let calibrated: Vec<TrialScore> = kept
        .iter()
        .zip(&split_of_trial)
        .map(|(&idx, &split)| {
            let row = &scores.scores()[idx];
            TrialScore {
                enroll_id: row.enroll_id.clone(),
                test_id: row.test_id.clone(),
                log_lr: calibrators[split].apply(row.log_lr),
            }
        })
        .collect();
    Ok(CvCalibration {
        scores: ScoreSet::new(calibrated)?,
        calibrators,
        kept,
    })
}
