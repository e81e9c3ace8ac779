//! Seeded synthetic data: models drawn from configurable magnitudes, datasets
//! drawn from the joint generative equations, and balanced trial lists over
//! target/impostor and same/cross-condition cells.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CondTag, LabelIndex, LabeledDataset, PldaParams, Trial, TrialKey, TrialList};
use crate::error::{Error, Result};
use crate::linalg::sym_pd_cholesky;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleCount {
    Fixed { count: usize },
    Uniform { min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Isotropic { variance: f64 },
    Diagonal { min_variance: f64, max_variance: f64 },
}

/// How monolingual speakers are attached to conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionAssignment {
    /// Sampled from the condition shares.
    #[default]
    Skewed,
    /// Speaker `s` takes condition `s mod n_conditions`.
    RoundRobin,
}

/// Population shape for a synthetic scenario. `bilingual_fraction = 0` is the
/// single-condition-per-speaker scenario; bilingual speakers record condition
/// 0 plus one other condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub r_y: usize,
    pub r_x: usize,
    pub n_speakers: usize,
    pub n_conditions: usize,
    pub samples_per_pair: SampleCount,
    pub bilingual_fraction: f64,
    /// Relative share of each condition among monolingual speakers;
    /// uniform when absent.
    #[serde(default)]
    pub condition_skew: Option<Vec<f64>>,
    #[serde(default)]
    pub condition_assignment: ConditionAssignment,
    pub speaker_scale: f64,
    pub condition_scale: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.r_y == 0 || self.n_speakers == 0 || self.n_conditions == 0 {
            return Err(Error::invalid_arg("dim, r_y, n_speakers and n_conditions must be positive"));
        }
        if self.r_y > self.dim || self.r_x > self.dim {
            return Err(Error::invalid_arg("ranks cannot exceed the dimension"));
        }
        if !(0.0..=1.0).contains(&self.bilingual_fraction) {
            return Err(Error::invalid_arg("bilingual_fraction must be in [0, 1]"));
        }
        if self.bilingual_fraction > 0.0 && self.n_conditions < 2 {
            return Err(Error::invalid_arg("bilingual speakers need at least two conditions"));
        }
        if let Some(skew) = &self.condition_skew {
            if skew.len() != self.n_conditions {
                return Err(Error::invalid_arg("condition_skew length must equal n_conditions"));
            }
            if skew.iter().any(|&w| !(w.is_finite() && w >= 0.0)) || skew.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid_arg("condition_skew must be nonnegative with positive sum"));
            }
        }
        match self.samples_per_pair {
            SampleCount::Fixed { count: 0 } => {
                return Err(Error::invalid_arg("samples per pair must be positive"))
            }
            SampleCount::Uniform { min, max } if min == 0 || min > max => {
                return Err(Error::invalid_arg("uniform sample count needs 0 < min <= max"))
            }
            _ => {}
        }
        match self.noise {
            NoiseSpec::Isotropic { variance } if variance <= 0.0 => {
                return Err(Error::invalid_arg("noise variance must be positive"))
            }
            NoiseSpec::Diagonal { min_variance, max_variance }
                if min_variance <= 0.0 || min_variance > max_variance =>
            {
                return Err(Error::invalid_arg("diagonal noise needs 0 < min <= max"))
            }
            _ => {}
        }
        Ok(())
    }
}

fn orthonormal_columns(rng: &mut StdRng, rows: usize, cols: usize) -> DMatrix<f64> {
    if cols == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let raw = DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng));
    let q = raw.qr().q();
    q.columns(0, cols).clone_owned()
}

/// Draws a ground-truth model: random mean, orthonormal loadings scaled by
/// the configured magnitudes, noise precision from the noise spec.
pub fn gen_model(config: &ScenarioConfig, seed: u64) -> Result<PldaParams> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mu = DVector::from_fn(config.dim, |_, _| normal.sample(&mut rng));
    let v = orthonormal_columns(&mut rng, config.dim, config.r_y) * config.speaker_scale;
    let u = orthonormal_columns(&mut rng, config.dim, config.r_x) * config.condition_scale;
    let mut d = DMatrix::zeros(config.dim, config.dim);
    match config.noise {
        NoiseSpec::Isotropic { variance } => {
            for i in 0..config.dim {
                d[(i, i)] = 1.0 / variance;
            }
        }
        NoiseSpec::Diagonal { min_variance, max_variance } => {
            for i in 0..config.dim {
                let var = if min_variance == max_variance {
                    min_variance
                } else {
                    rng.random_range(min_variance..max_variance)
                };
                d[(i, i)] = 1.0 / var;
            }
        }
    }
    PldaParams::new(mu, v, u, d, true)
}

/// Standardizes draws (columns) to exact zero mean and identity covariance,
/// when there are enough of them. Keeps desk-scale recovery experiments from
/// being dominated by the sampling noise of a handful of latent draws.
fn standardize_columns(draws: &mut DMatrix<f64>) {
    let (dim, n) = (draws.nrows(), draws.ncols());
    if dim == 0 || n < dim + 2 {
        return;
    }
    let mean = draws.column_mean();
    for mut c in draws.column_iter_mut() {
        c -= &mean;
    }
    let cov = &*draws * draws.transpose() / n as f64;
    if let Ok(chol) = sym_pd_cholesky(&cov) {
        let l_inv = chol.l().try_inverse().expect("triangular inverse");
        *draws = l_inv * &*draws;
    }
}

fn weighted_draw(rng: &mut StdRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random_range(0.0..total);
    for (c, &w) in weights.iter().enumerate() {
        if draw < w {
            return c;
        }
        draw -= w;
    }
    weights.len() - 1
}

/// Draws a dataset from the generative equations: one speaker factor per
/// speaker, one condition factor per condition (shared by all its samples),
/// independent noise per sample.
pub fn gen_dataset(model: &PldaParams, config: &ScenarioConfig) -> Result<LabeledDataset> {
    config.validate()?;
    if model.dim() != config.dim || model.r_y() != config.r_y || model.r_x() != config.r_x {
        return Err(Error::invalid_arg("model shape disagrees with the scenario config"));
    }
    let mut rng = StdRng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let weights: Vec<f64> = config
        .condition_skew
        .clone()
        .unwrap_or_else(|| vec![1.0; config.n_conditions]);

    // speaker -> conditions
    let n_bilingual = (config.bilingual_fraction * config.n_speakers as f64).round() as usize;
    let mut speaker_conditions: Vec<Vec<usize>> = Vec::with_capacity(config.n_speakers);
    for s in 0..config.n_speakers {
        if s < n_bilingual {
            // condition 0 plus one other, weighted by the remaining shares
            let other = 1 + weighted_draw(&mut rng, &weights[1..]);
            speaker_conditions.push(vec![0, other]);
        } else {
            let c = match config.condition_assignment {
                ConditionAssignment::RoundRobin => s % config.n_conditions,
                ConditionAssignment::Skewed => weighted_draw(&mut rng, &weights),
            };
            speaker_conditions.push(vec![c]);
        }
    }

    let mut y = DMatrix::from_fn(config.r_y, config.n_speakers, |_, _| normal.sample(&mut rng));
    let mut x = DMatrix::from_fn(config.r_x, config.n_conditions, |_, _| normal.sample(&mut rng));
    standardize_columns(&mut y);
    standardize_columns(&mut x);

    let noise_sd: Vec<f64> = (0..config.dim)
        .map(|i| (1.0 / model.d()[(i, i)]).sqrt())
        .collect();

    let mut cols = Vec::new();
    let mut ids = Vec::new();
    let mut speakers = Vec::new();
    let mut conditions = Vec::new();
    for (s, conds) in speaker_conditions.iter().enumerate() {
        for &c in conds {
            let count = match config.samples_per_pair {
                SampleCount::Fixed { count } => count,
                SampleCount::Uniform { min, max } => rng.random_range(min..=max),
            };
            for k in 0..count {
                let mut m = model.mu() + model.v() * y.column(s) + model.u() * x.column(c);
                for i in 0..config.dim {
                    m[i] += normal.sample(&mut rng) * noise_sd[i];
                }
                cols.push(m);
                ids.push(format!("spk{s}_c{c}_{k}"));
                speakers.push(format!("spk{s}"));
                conditions.push(format!("cond{c}"));
            }
        }
    }
    let speakers_ref: Vec<&str> = speakers.iter().map(|s| s.as_str()).collect();
    let conditions_ref: Vec<&str> = conditions.iter().map(|s| s.as_str()).collect();
    LabeledDataset::new(
        DMatrix::from_columns(&cols),
        ids,
        LabelIndex::from_names(&speakers_ref),
        Some(LabelIndex::from_names(&conditions_ref)),
    )
}

/// Draws a train split and a held-out test split that share the same
/// condition factors (the condition offsets are properties of the population,
/// not of the split). The train split follows the configured bilingual
/// fraction; test speakers always record two conditions when the scenario has
/// more than one, so cross-condition trials exist.
pub fn gen_train_test(
    model: &PldaParams,
    config: &ScenarioConfig,
    n_test_speakers: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    if n_test_speakers == 0 {
        return Err(Error::invalid_arg("need at least one test speaker"));
    }
    if model.dim() != config.dim || model.r_y() != config.r_y || model.r_x() != config.r_x {
        return Err(Error::invalid_arg("model shape disagrees with the scenario config"));
    }
    let mut rng = StdRng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let weights: Vec<f64> = config
        .condition_skew
        .clone()
        .unwrap_or_else(|| vec![1.0; config.n_conditions]);

    let n_bilingual = (config.bilingual_fraction * config.n_speakers as f64).round() as usize;
    let mut train_conditions = Vec::with_capacity(config.n_speakers);
    for s in 0..config.n_speakers {
        if s < n_bilingual {
            let other = 1 + weighted_draw(&mut rng, &weights[1..]);
            train_conditions.push(vec![0, other]);
        } else {
            let c = match config.condition_assignment {
                ConditionAssignment::RoundRobin => s % config.n_conditions,
                ConditionAssignment::Skewed => weighted_draw(&mut rng, &weights),
            };
            train_conditions.push(vec![c]);
        }
    }
    let mut test_conditions = Vec::with_capacity(n_test_speakers);
    for _ in 0..n_test_speakers {
        if config.n_conditions > 1 {
            let other = 1 + weighted_draw(&mut rng, &weights[1..]);
            test_conditions.push(vec![0, other]);
        } else {
            test_conditions.push(vec![0]);
        }
    }

    let n_total = config.n_speakers + n_test_speakers;
    let mut y = DMatrix::from_fn(config.r_y, n_total, |_, _| normal.sample(&mut rng));
    let mut x = DMatrix::from_fn(config.r_x, config.n_conditions, |_, _| normal.sample(&mut rng));
    standardize_columns(&mut y);
    standardize_columns(&mut x);

    let noise_sd: Vec<f64> = (0..config.dim)
        .map(|i| (1.0 / model.d()[(i, i)]).sqrt())
        .collect();
    let emit = |rng: &mut StdRng,
                    prefix: &str,
                    speaker_conditions: &[Vec<usize>],
                    y_offset: usize|
     -> Result<LabeledDataset> {
        let mut cols = Vec::new();
        let mut ids = Vec::new();
        let mut speakers = Vec::new();
        let mut conditions = Vec::new();
        for (s, conds) in speaker_conditions.iter().enumerate() {
            for &c in conds {
                let count = match config.samples_per_pair {
                    SampleCount::Fixed { count } => count,
                    SampleCount::Uniform { min, max } => rng.random_range(min..=max),
                };
                for k in 0..count {
                    let mut m =
                        model.mu() + model.v() * y.column(y_offset + s) + model.u() * x.column(c);
                    for i in 0..config.dim {
                        m[i] += normal.sample(rng) * noise_sd[i];
                    }
                    cols.push(m);
                    ids.push(format!("{prefix}{s}_c{c}_{k}"));
                    speakers.push(format!("{prefix}{s}"));
                    conditions.push(format!("cond{c}"));
                }
            }
        }
        let speakers_ref: Vec<&str> = speakers.iter().map(|s| s.as_str()).collect();
        let conditions_ref: Vec<&str> = conditions.iter().map(|s| s.as_str()).collect();
        LabeledDataset::new(
            DMatrix::from_columns(&cols),
            ids,
            LabelIndex::from_names(&speakers_ref),
            Some(LabelIndex::from_names(&conditions_ref)),
        )
    };
    let train = emit(&mut rng, "spk", &train_conditions, 0)?;
    let test = emit(&mut rng, "tspk", &test_conditions, config.n_speakers)?;
    Ok((train, test))
}

/// Keeps one randomly chosen condition per speaker, mirroring the derivation
/// of a single-condition training set from a full one.
pub fn derive_single_condition(dataset: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let conditions = dataset.require_conditions()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let groups = crate::standard::group_by_label(
        dataset.speakers().assignments(),
        dataset.n_speakers(),
    );
    for members in &groups {
        let mut conds: Vec<usize> = members
            .iter()
            .map(|&i| conditions.assignments()[i])
            .collect();
        conds.sort_unstable();
        conds.dedup();
        let chosen = conds[rng.random_range(0..conds.len())];
        keep.extend(
            members
                .iter()
                .copied()
                .filter(|&i| conditions.assignments()[i] == chosen),
        );
    }
    keep.sort_unstable();
    dataset.subset(&keep)
}

/// Requested number of trials for each of the four cells
/// {target, impostor} x {same-condition, cross-condition}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub per_cell: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Cell {
    TargetSame,
    TargetCross,
    ImpostorSame,
    ImpostorCross,
}

const CELLS: [Cell; 4] = [
    Cell::TargetSame,
    Cell::TargetCross,
    Cell::ImpostorSame,
    Cell::ImpostorCross,
];

fn classify(s1: usize, s2: usize, c1: usize, c2: usize) -> Cell {
    match (s1 == s2, c1 == c2) {
        (true, true) => Cell::TargetSame,
        (true, false) => Cell::TargetCross,
        (false, true) => Cell::ImpostorSame,
        (false, false) => Cell::ImpostorCross,
    }
}

/// Draws a balanced trial list: equal counts of the four cells, truncated to
/// the scarcest cell's availability. No self-trials, no repeated pairs.
pub fn gen_trials(
    dataset: &LabeledDataset,
    balance: &BalanceSpec,
    seed: u64,
) -> Result<TrialList> {
    if balance.per_cell == 0 {
        return Err(Error::invalid_arg("per_cell must be positive"));
    }
    let conditions = dataset.require_conditions()?;
    let speakers = dataset.speakers().assignments();
    let conds = conditions.assignments();
    let n = dataset.len();
    // with one condition the cross cells cannot exist; balance the two key
    // cells instead
    let single_condition = conditions.n_classes() == 1;

    // cell availabilities from per-(speaker, condition) counts
    let mut pair_counts: std::collections::HashMap<(usize, usize), usize> =
        std::collections::HashMap::new();
    for i in 0..n {
        *pair_counts.entry((speakers[i], conds[i])).or_insert(0) += 1;
    }
    let mut per_speaker: Vec<Vec<(usize, usize)>> = vec![Vec::new(); dataset.n_speakers()];
    let mut per_condition_total = vec![0usize; conditions.n_classes()];
    for (&(s, c), &k) in &pair_counts {
        per_speaker[s].push((c, k));
        per_condition_total[c] += k;
    }
    let mut avail_t_same = 0usize;
    let mut avail_t_cross = 0usize;
    for pairs in &per_speaker {
        for (i, &(_, k1)) in pairs.iter().enumerate() {
            avail_t_same += k1 * (k1 - 1) / 2;
            for &(_, k2) in &pairs[i + 1..] {
                avail_t_cross += k1 * k2;
            }
        }
    }
    let mut avail_i_same = 0usize;
    for (c, &total) in per_condition_total.iter().enumerate() {
        let mut same_speaker_pairs = 0usize;
        for pairs in &per_speaker {
            for &(pc, k) in pairs {
                if pc == c {
                    same_speaker_pairs += k * (k - 1) / 2;
                }
            }
        }
        avail_i_same += total * (total - 1) / 2 - same_speaker_pairs;
    }
    let total_pairs = n * (n - 1) / 2;
    let avail_i_cross = total_pairs - avail_t_same - avail_t_cross - avail_i_same;

    let (active, availability): (Vec<Cell>, Vec<usize>) = if single_condition {
        (
            vec![Cell::TargetSame, Cell::ImpostorSame],
            vec![avail_t_same, avail_i_same],
        )
    } else {
        (
            CELLS.to_vec(),
            vec![avail_t_same, avail_t_cross, avail_i_same, avail_i_cross],
        )
    };
    let effective = availability
        .iter()
        .copied()
        .min()
        .unwrap()
        .min(balance.per_cell);
    if effective == 0 {
        return Err(Error::data(format!(
            "a trial cell is empty (availability {availability:?})"
        )));
    }
    if effective < balance.per_cell {
        log::warn!(
            "requested {} trials per cell but scarcest cell has {effective}; truncating all cells",
            balance.per_cell
        );
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let mut chosen: HashSet<(usize, usize)> = HashSet::new();
    let mut cell_fill: std::collections::HashMap<Cell, Vec<(usize, usize)>> =
        active.iter().map(|&c| (c, Vec::new())).collect();

    // enumerate scarce cells exactly, draw plentiful cells by rejection
    for (idx, &cell) in active.iter().enumerate() {
        if availability[idx] > 4 * effective {
            continue;
        }
        let mut pool: Vec<(usize, usize)> = Vec::with_capacity(availability[idx]);
        for i in 0..n {
            for j in (i + 1)..n {
                if classify(speakers[i], speakers[j], conds[i], conds[j]) == cell {
                    pool.push((i, j));
                }
            }
        }
        pool.shuffle(&mut rng);
        for &p in pool.iter().take(effective) {
            chosen.insert(p);
            cell_fill.get_mut(&cell).unwrap().push(p);
        }
    }
    let mut remaining: usize = active
        .iter()
        .map(|c| effective - cell_fill[c].len())
        .sum();
    while remaining > 0 {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if chosen.contains(&key) {
            continue;
        }
        let cell = classify(speakers[i], speakers[j], conds[i], conds[j]);
        let Some(fill) = cell_fill.get_mut(&cell) else {
            continue;
        };
        if fill.len() >= effective {
            continue;
        }
        chosen.insert(key);
        fill.push(key);
        remaining -= 1;
    }

    let ids = dataset.sample_ids();
    let mut trials = Vec::with_capacity(active.len() * effective);
    for &cell in &active {
        let (key, tag) = match cell {
            Cell::TargetSame => (TrialKey::Target, CondTag::Same),
            Cell::TargetCross => (TrialKey::Target, CondTag::Cross),
            Cell::ImpostorSame => (TrialKey::Impostor, CondTag::Same),
            Cell::ImpostorCross => (TrialKey::Impostor, CondTag::Cross),
        };
        for &(i, j) in &cell_fill[&cell] {
            trials.push(Trial {
                enroll_id: ids[i].clone(),
                test_id: ids[j].clone(),
                key,
                cond: tag,
            });
        }
    }
    TrialList::new(trials)
}
