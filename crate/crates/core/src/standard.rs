//! Simplified and full PLDA: EM training with random or smart initialization,
//! marginal likelihood, and likelihood-ratio scoring for single-sample trials.
//!
//! Simplified PLDA has no channel subspace (the noise term takes a full
//! covariance); full PLDA adds a per-sample channel factor and constrains the
//! noise precision to be diagonal.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{LabeledDataset, PldaParams, ScoreSet, TrialList, TrialScore};
use crate::error::{Error, Result};
use crate::linalg::{
    between_class_covariance, chol_logdet, sym_pd_cholesky, symmetric_eigen_desc, symmetrize,
    within_class_covariance, LN_2PI,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PldaVariant {
    Splda,
    Fplda,
}

/// Groups sample indices by class label.
pub(crate) fn group_by_label(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        groups[c].push(i);
    }
    groups
}

fn centered_vectors(dataset: &LabeledDataset, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut m = dataset.vectors().clone();
    for mut col in m.column_iter_mut() {
        col -= mu;
    }
    m
}

/// Random initialization: identity noise precision, loadings drawn from
/// N(0, 0.01^2), zero mean. Deterministic for a given seed.
pub fn init_random(dim: usize, r_y: usize, r_x: usize, seed: u64) -> Result<PldaParams> {
    let mut rng = StdRng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.01).expect("valid normal");
    let mut fill = |rows: usize, cols: usize| {
        let mut m = DMatrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m[(i, j)] = dist.sample(&mut rng);
            }
        }
        m
    };
    let v = fill(dim, r_y);
    let u = fill(dim, r_x);
    PldaParams::new(DVector::zeros(dim), v, u, DMatrix::identity(dim, dim), true)
}

/// Closed-form loading from the top eigenpairs of the between-class
/// covariance (`loading loading^T` is its best rank-`rank` approximation),
/// plus the pooled within-class covariance.
pub(crate) fn class_structure_init(
    vectors: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    rank: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n_classes < 2 {
        return Err(Error::data("need at least two classes for smart initialization"));
    }
    if rank == 0 || rank > n_classes - 1 || rank > vectors.nrows() {
        return Err(Error::invalid_arg(format!(
            "rank {rank} must be in 1..={} (classes - 1, capped by dimension {})",
            (n_classes - 1).min(vectors.nrows()),
            vectors.nrows()
        )));
    }
    let between = between_class_covariance(vectors, labels, n_classes);
    let within = within_class_covariance(vectors, labels, n_classes)?;
    let (vals, vecs) = symmetric_eigen_desc(&between);
    let mut loading = DMatrix::zeros(vectors.nrows(), rank);
    for j in 0..rank {
        if !(vals[j].is_finite() && vals[j] > 0.0) {
            return Err(Error::numerical(format!(
                "between-class covariance is rank deficient at rank {} (eigenvalue {})",
                j + 1,
                vals[j]
            )));
        }
        loading.set_column(j, &(vecs.column(j) * vals[j].sqrt()));
    }
    Ok((loading, within))
}

/// Smart initialization for simplified PLDA: the speaker loading spans the
/// top between-speaker eigendirections and the noise precision is the inverse
/// within-speaker covariance.
pub fn init_smart_splda(dataset: &LabeledDataset, r_y: usize) -> Result<PldaParams> {
    let (v, within) = class_structure_init(
        dataset.vectors(),
        dataset.speakers().assignments(),
        dataset.n_speakers(),
        r_y,
    )?;
    let d = symmetrize(&sym_pd_cholesky(&within)?.inverse());
    let mu = dataset.vectors().column_mean();
    PldaParams::new(mu, v, DMatrix::zeros(dataset.dim(), 0), d, false)
}

pub(crate) struct Moments {
    /// sum over samples of posterior second moments of the stacked factors
    pub(crate) r_tt: DMatrix<f64>,
    /// sum over samples of data times posterior factor means
    pub(crate) c_mt: DMatrix<f64>,
}

fn posterior_moments_splda(
    params: &PldaParams,
    centered: &DMatrix<f64>,
    groups: &[Vec<usize>],
) -> Result<Moments> {
    let r_y = params.r_y();
    let vt_d = params.v().transpose() * params.d();
    let vt_d_v = symmetrize(&(&vt_d * params.v()));
    let mut r_tt = DMatrix::zeros(r_y, r_y);
    let mut c_mt = DMatrix::zeros(params.dim(), r_y);
    for members in groups {
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mut f = DVector::zeros(params.dim());
        for &i in members {
            f += centered.column(i);
        }
        let precision = DMatrix::identity(r_y, r_y) + &vt_d_v * n;
        let chol = sym_pd_cholesky(&precision)?;
        let b = &vt_d * &f;
        let mean = chol.solve(&b);
        let cov = chol.inverse();
        r_tt += (cov + &mean * mean.transpose()) * n;
        c_mt += f * mean.transpose();
    }
    Ok(Moments { r_tt, c_mt })
}

fn posterior_moments_fplda(
    params: &PldaParams,
    centered: &DMatrix<f64>,
    groups: &[Vec<usize>],
) -> Result<Moments> {
    let (r_y, r_x) = (params.r_y(), params.r_x());
    let dim = params.dim();
    let vt_d = params.v().transpose() * params.d();
    let ut_d = params.u().transpose() * params.d();
    let vt_d_v = symmetrize(&(&vt_d * params.v()));
    let g = DMatrix::identity(r_x, r_x) + symmetrize(&(&ut_d * params.u()));
    let chol_g = sym_pd_cholesky(&g)?;
    let g_inv = chol_g.inverse();
    let f_cross = &vt_d * params.u();
    let fgi = &f_cross * &g_inv;

    let mut r_yy = DMatrix::zeros(r_y, r_y);
    let mut r_yx = DMatrix::zeros(r_y, r_x);
    let mut r_xx = DMatrix::zeros(r_x, r_x);
    let mut c_my = DMatrix::zeros(dim, r_y);
    let mut c_mx = DMatrix::zeros(dim, r_x);

    for members in groups {
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mut f = DVector::zeros(dim);
        for &i in members {
            f += centered.column(i);
        }
        let p_y = DMatrix::identity(r_y, r_y) + &vt_d_v * n;
        let s_y = symmetrize(&(&p_y - &fgi * f_cross.transpose() * n));
        let chol_sy = sym_pd_cholesky(&s_y)?;
        let cov_y = chol_sy.inverse();

        let b_y = &vt_d * &f;
        let sum_bx = &ut_d * &f;
        let y_mean = chol_sy.solve(&(&b_y - &fgi * &sum_bx));

        // shared across the speaker's samples
        let cov_yx = -&cov_y * &fgi;
        let cov_x = &g_inv + fgi.transpose() * &cov_y * &fgi;

        let mut sum_x = DVector::zeros(r_x);
        for &i in members {
            let b_xi = &ut_d * centered.column(i);
            let x_mean = chol_g.solve(&(&b_xi - f_cross.transpose() * &y_mean));
            sum_x += &x_mean;
            r_xx += &x_mean * x_mean.transpose();
            c_mx += centered.column(i) * x_mean.transpose();
        }
        r_yy += (&cov_y + &y_mean * y_mean.transpose()) * n;
        r_yx += &cov_yx * n + &y_mean * sum_x.transpose();
        r_xx += &cov_x * n;
        c_my += f * y_mean.transpose();
    }

    let mut r_tt = DMatrix::zeros(r_y + r_x, r_y + r_x);
    r_tt.view_mut((0, 0), (r_y, r_y)).copy_from(&r_yy);
    r_tt.view_mut((0, r_y), (r_y, r_x)).copy_from(&r_yx);
    r_tt.view_mut((r_y, 0), (r_x, r_y)).copy_from(&r_yx.transpose());
    r_tt.view_mut((r_y, r_y), (r_x, r_x)).copy_from(&r_xx);
    let mut c_mt = DMatrix::zeros(dim, r_y + r_x);
    c_mt.view_mut((0, 0), (dim, r_y)).copy_from(&c_my);
    c_mt.view_mut((0, r_y), (dim, r_x)).copy_from(&c_mx);
    Ok(Moments { r_tt, c_mt })
}

/// One closed-form update of the loadings and noise from accumulated
/// posterior moments. `c_mm` is the centered data scatter.
pub(crate) fn maximize_loadings(
    moments: &Moments,
    c_mm: &DMatrix<f64>,
    n_samples: usize,
    d_diagonal: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let chol = sym_pd_cholesky(&symmetrize(&moments.r_tt)).map_err(|_| {
        Error::numerical("rank-deficient normal equations in the loading update")
    })?;
    // T = C_mt R_tt^-1  via  R_tt T^T = C_mt^T
    let t = chol.solve(&moments.c_mt.transpose()).transpose();
    let residual = symmetrize(&((c_mm - &t * moments.c_mt.transpose()) / n_samples as f64));
    let d = if d_diagonal {
        let mut d = DMatrix::zeros(residual.nrows(), residual.ncols());
        for i in 0..residual.nrows() {
            let var = residual[(i, i)];
            if !(var.is_finite() && var > 0.0) {
                return Err(Error::numerical(format!(
                    "non-positive residual variance at coordinate {i}"
                )));
            }
            d[(i, i)] = 1.0 / var;
        }
        d
    } else {
        symmetrize(&sym_pd_cholesky(&residual)?.inverse())
    };
    Ok((t, d))
}

fn em_iterate(
    params: &PldaParams,
    variant: PldaVariant,
    centered: &DMatrix<f64>,
    groups: &[Vec<usize>],
    c_mm: &DMatrix<f64>,
    d_diagonal: bool,
) -> Result<PldaParams> {
    let moments = match variant {
        PldaVariant::Splda => posterior_moments_splda(params, centered, groups)?,
        PldaVariant::Fplda => posterior_moments_fplda(params, centered, groups)?,
    };
    let (t, d) = maximize_loadings(&moments, c_mm, centered.ncols(), d_diagonal)?;
    let r_y = params.r_y();
    let v = t.columns(0, r_y).clone_owned();
    let u = t.columns(r_y, params.r_x()).clone_owned();
    PldaParams::new(params.mu().clone(), v, u, d, d_diagonal)
}

/// EM training. The mean is set once to the global training mean before the
/// first iteration and never re-estimated; with `n_iters == 0` the
/// initialization is returned unchanged. The returned trace holds the marginal
/// log-likelihood of the initialization followed by one entry per iteration.
pub fn em_fit(
    dataset: &LabeledDataset,
    init: &PldaParams,
    variant: PldaVariant,
    n_iters: usize,
    d_diagonal: bool,
) -> Result<(PldaParams, Vec<f64>)> {
    if init.dim() != dataset.dim() {
        return Err(Error::data(format!(
            "model dimension {} does not match dataset dimension {}",
            init.dim(),
            dataset.dim()
        )));
    }
    match variant {
        PldaVariant::Splda if init.r_x() != 0 => {
            return Err(Error::invalid_arg("simplified PLDA requires channel rank 0"));
        }
        PldaVariant::Fplda if init.r_x() == 0 => {
            return Err(Error::invalid_arg("full PLDA requires channel rank >= 1"));
        }
        PldaVariant::Fplda if !d_diagonal => {
            return Err(Error::invalid_arg("full PLDA requires a diagonal noise precision"));
        }
        _ => {}
    }

    let mut params = init.clone();
    let mut trace = vec![marginal_loglik(&params, dataset, variant)?];
    if n_iters == 0 {
        return Ok((params, trace));
    }

    let mu = dataset.vectors().column_mean();
    params = PldaParams::new(
        mu.clone(),
        params.v().clone(),
        params.u().clone(),
        params.d().clone(),
        params.d_diagonal(),
    )?;
    let centered = centered_vectors(dataset, &mu);
    let c_mm = symmetrize(&(&centered * centered.transpose()));
    let groups = group_by_label(dataset.speakers().assignments(), dataset.n_speakers());

    for _ in 0..n_iters {
        params = em_iterate(&params, variant, &centered, &groups, &c_mm, d_diagonal)?;
        let ll = marginal_loglik(&params, dataset, variant)?;
        if !ll.is_finite() {
            return Err(Error::numerical("non-finite log-likelihood during EM"));
        }
        trace.push(ll);
    }
    Ok((params, trace))
}

/// Exact marginal log-likelihood of the dataset: per speaker, the stacked
/// samples are jointly Gaussian with cross-covariance `V V^T` and
/// within-covariance `V V^T + U U^T + D^-1`. Evaluated through the speaker
/// factor posterior rather than by materializing stacked covariances.
pub fn marginal_loglik(
    params: &PldaParams,
    dataset: &LabeledDataset,
    variant: PldaVariant,
) -> Result<f64> {
    if params.dim() != dataset.dim() {
        return Err(Error::data(format!(
            "model dimension {} does not match dataset dimension {}",
            params.dim(),
            dataset.dim()
        )));
    }
    // effective within-speaker precision: D for simplified, (U U^T + D^-1)^-1 for full
    let (lambda_v, logdet_lambda, quad_sum, f_by_speaker): (DMatrix<f64>, f64, f64, Vec<DVector<f64>>);
    let centered = centered_vectors(dataset, params.mu());
    let groups = group_by_label(dataset.speakers().assignments(), dataset.n_speakers());
    match variant {
        PldaVariant::Splda => {
            if params.r_x() != 0 {
                return Err(Error::invalid_arg("simplified PLDA requires channel rank 0"));
            }
            let chol_d = sym_pd_cholesky(params.d())?;
            lambda_v = params.d() * params.v();
            logdet_lambda = chol_logdet(&chol_d);
            quad_sum = (params.d() * &centered).dot(&centered);
            f_by_speaker = groups
                .iter()
                .map(|members| {
                    let mut f = DVector::zeros(params.dim());
                    for &i in members {
                        f += centered.column(i);
                    }
                    f
                })
                .collect();
        }
        PldaVariant::Fplda => {
            let within = symmetrize(
                &(params.u() * params.u().transpose() + params.noise_covariance()?),
            );
            let chol_w = sym_pd_cholesky(&within)?;
            lambda_v = chol_w.solve(params.v());
            logdet_lambda = -chol_logdet(&chol_w);
            quad_sum = chol_w.solve(&centered).dot(&centered);
            f_by_speaker = groups
                .iter()
                .map(|members| {
                    let mut f = DVector::zeros(params.dim());
                    for &i in members {
                        f += centered.column(i);
                    }
                    f
                })
                .collect();
        }
    }

    let r_y = params.r_y();
    let vt_lambda_v = symmetrize(&(params.v().transpose() * &lambda_v));
    let n_total = dataset.len() as f64;
    let mut ll = -0.5 * n_total * params.dim() as f64 * LN_2PI + 0.5 * n_total * logdet_lambda
        - 0.5 * quad_sum;
    for (members, f) in groups.iter().zip(&f_by_speaker) {
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let precision = DMatrix::identity(r_y, r_y) + &vt_lambda_v * n;
        let chol = sym_pd_cholesky(&precision)?;
        let b = lambda_v.transpose() * f;
        ll += -0.5 * chol_logdet(&chol) + 0.5 * b.dot(&chol.solve(&b));
    }
    Ok(ll)
}

/// Precomputed factorizations for single-sample trial scoring; per-trial cost
/// is two triangular solves.
pub struct StandardScorer {
    mu: DVector<f64>,
    chol_single: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    chol_joint: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    dim: usize,
}

impl StandardScorer {
    pub fn new(params: &PldaParams) -> Result<Self> {
        let dim = params.dim();
        let vvt = params.v() * params.v().transpose();
        let total = symmetrize(
            &(&vvt + params.u() * params.u().transpose() + params.noise_covariance()?),
        );
        let mut joint = DMatrix::zeros(2 * dim, 2 * dim);
        joint.view_mut((0, 0), (dim, dim)).copy_from(&total);
        joint.view_mut((dim, dim), (dim, dim)).copy_from(&total);
        joint.view_mut((0, dim), (dim, dim)).copy_from(&vvt);
        joint.view_mut((dim, 0), (dim, dim)).copy_from(&vvt.transpose());
        Ok(StandardScorer {
            mu: params.mu().clone(),
            chol_single: sym_pd_cholesky(&total)?,
            chol_joint: sym_pd_cholesky(&joint)?,
            dim,
        })
    }

    /// log LR between same-speaker and different-speaker hypotheses.
    pub fn score_pair(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> f64 {
        let e = enroll - &self.mu;
        let t = test - &self.mu;
        let mut stacked = DVector::zeros(2 * self.dim);
        stacked.rows_mut(0, self.dim).copy_from(&e);
        stacked.rows_mut(self.dim, self.dim).copy_from(&t);
        let joint = crate::linalg::mvn_logpdf_centered(&self.chol_joint, &stacked);
        let marg_e = crate::linalg::mvn_logpdf_centered(&self.chol_single, &e);
        let marg_t = crate::linalg::mvn_logpdf_centered(&self.chol_single, &t);
        joint - marg_e - marg_t
    }
}

pub(crate) fn resolve_trial_columns(
    enroll: &LabeledDataset,
    test: &LabeledDataset,
    trials: &TrialList,
) -> Result<Vec<(usize, usize)>> {
    let e_idx = enroll.id_lookup();
    let t_idx = test.id_lookup();
    trials
        .trials()
        .iter()
        .map(|t| {
            let e = *e_idx
                .get(t.enroll_id.as_str())
                .ok_or_else(|| Error::data(format!("unknown enroll id '{}'", t.enroll_id)))?;
            let x = *t_idx
                .get(t.test_id.as_str())
                .ok_or_else(|| Error::data(format!("unknown test id '{}'", t.test_id)))?;
            Ok((e, x))
        })
        .collect()
}

/// Scores every trial with the same-speaker versus different-speaker
/// likelihood ratio. Works for both simplified and full PLDA parameters.
pub fn score_trials(
    params: &PldaParams,
    enroll: &LabeledDataset,
    test: &LabeledDataset,
    trials: &TrialList,
) -> Result<ScoreSet> {
    if enroll.dim() != params.dim() || test.dim() != params.dim() {
        return Err(Error::data("enroll/test dimension does not match the model"));
    }
    let scorer = StandardScorer::new(params)?;
    let columns = resolve_trial_columns(enroll, test, trials)?;
    let scores: Vec<TrialScore> = trials
        .trials()
        .par_iter()
        .zip(columns.par_iter())
        .map(|(t, &(ei, ti))| {
            let log_lr = scorer.score_pair(
                &enroll.vectors().column(ei).clone_owned(),
                &test.vectors().column(ti).clone_owned(),
            );
            TrialScore {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                log_lr,
            }
        })
        .collect();
    ScoreSet::new(scores)
}
