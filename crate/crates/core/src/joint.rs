//! Joint PLDA: the channel variable is tied across all samples that share a
//! condition label, so every speaker and condition factor is coupled through
//! one joint Gaussian posterior. Training solves that posterior exactly with
//! a block elimination that exploits the bipartite speaker-condition
//! structure; scoring marginalizes the likelihood ratio over same-condition /
//! different-condition hypotheses.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::data::{CondTag, LabeledDataset, PldaParams, ScoreSet, TrialList, TrialScore};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, mvn_logpdf_centered, sym_pd_cholesky, symmetrize, LN_2PI};
use crate::standard::{class_structure_init, group_by_label, maximize_loadings, resolve_trial_columns, Moments};

/// Same-condition prior probabilities under each speaker hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionPriors {
    p_sc_given_ss: f64,
    p_sc_given_ds: f64,
}

impl ConditionPriors {
    pub fn new(p_sc_given_ss: f64, p_sc_given_ds: f64) -> Result<Self> {
        for (name, p) in [("p_sc_given_ss", p_sc_given_ss), ("p_sc_given_ds", p_sc_given_ds)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid_arg(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(ConditionPriors {
            p_sc_given_ss,
            p_sc_given_ds,
        })
    }

    pub fn p_sc_given_ss(&self) -> f64 {
        self.p_sc_given_ss
    }

    pub fn p_sc_given_ds(&self) -> f64 {
        self.p_sc_given_ds
    }
}

impl Default for ConditionPriors {
    fn default() -> Self {
        ConditionPriors {
            p_sc_given_ss: 0.5,
            p_sc_given_ds: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JpldaFitOptions {
    pub n_iters: usize,
    pub d_diagonal: bool,
    /// Guard on the joint latent system size `S*R_y + C*R_x`.
    pub max_unknowns: usize,
}

impl Default for JpldaFitOptions {
    fn default() -> Self {
        JpldaFitOptions {
            n_iters: 1,
            d_diagonal: false,
            max_unknowns: 2_000_000,
        }
    }
}

/// Closed-form starting point: fit a condition-labeled loading on the raw
/// vectors, remove the per-condition offsets it explains, then fit a
/// speaker-labeled loading on the residual.
pub fn jplda_init_smart(
    dataset: &LabeledDataset,
    r_y: usize,
    r_x: usize,
    d_diagonal: bool,
) -> Result<PldaParams> {
    let dim = dataset.dim();
    let mu = dataset.vectors().column_mean();

    let (u, residual_vectors) = if r_x == 0 {
        (DMatrix::zeros(dim, 0), dataset.vectors().clone())
    } else {
        let conditions = dataset.require_conditions()?;
        let cond_labels = conditions.assignments();
        let n_cond = conditions.n_classes();
        let (v_c, w_c) = class_structure_init(dataset.vectors(), cond_labels, n_cond, r_x)?;
        let d_c = symmetrize(&sym_pd_cholesky(&w_c)?.inverse());

        // MAP condition latents, identical for samples sharing a condition
        let vt_d = v_c.transpose() * &d_c;
        let vt_d_v = symmetrize(&(&vt_d * &v_c));
        let groups = group_by_label(cond_labels, n_cond);
        let mut latents = Vec::with_capacity(n_cond);
        for members in &groups {
            let n = members.len() as f64;
            let mut f = DVector::zeros(dim);
            for &i in members {
                f += dataset.vectors().column(i) - &mu;
            }
            let precision = DMatrix::identity(r_x, r_x) + &vt_d_v * n;
            let chol = sym_pd_cholesky(&precision)?;
            latents.push(chol.solve(&(&vt_d * f)));
        }

        let mut residual = dataset.vectors().clone();
        for (i, &c) in cond_labels.iter().enumerate() {
            let mut col = residual.column_mut(i);
            col -= &v_c * &latents[c];
        }
        (v_c, residual)
    };

    let (v, w_s) = class_structure_init(
        &residual_vectors,
        dataset.speakers().assignments(),
        dataset.n_speakers(),
        r_y,
    )?;
    let d_full = symmetrize(&sym_pd_cholesky(&w_s)?.inverse());
    let d = if d_diagonal {
        DMatrix::from_diagonal(&d_full.diagonal())
    } else {
        d_full
    };
    PldaParams::new(mu, v, u, d, d_diagonal)
}

/// Sample bookkeeping shared by the E-step and the likelihood.
struct JointLayout {
    speaker_groups: Vec<Vec<usize>>,
    cond_counts: Vec<usize>,
    /// per speaker: sorted (condition, count) pairs
    links: Vec<Vec<(usize, usize)>>,
    /// per-speaker and per-condition sums of centered vectors
    f_s: Vec<DVector<f64>>,
    g_c: Vec<DVector<f64>>,
    centered: DMatrix<f64>,
}

fn joint_layout(dataset: &LabeledDataset, mu: &DVector<f64>, r_x: usize) -> Result<JointLayout> {
    let dim = dataset.dim();
    let n_speakers = dataset.n_speakers();
    let cond_labels: Vec<usize> = if r_x == 0 {
        vec![0; dataset.len()]
    } else {
        dataset.require_conditions()?.assignments().to_vec()
    };
    let n_conditions = if r_x == 0 {
        1
    } else {
        dataset.require_conditions()?.n_classes()
    };

    let mut centered = dataset.vectors().clone();
    for mut col in centered.column_iter_mut() {
        col -= mu;
    }

    let speaker_groups = group_by_label(dataset.speakers().assignments(), n_speakers);
    let mut cond_counts = vec![0usize; n_conditions];
    let mut g_c = vec![DVector::zeros(dim); n_conditions];
    for (i, &c) in cond_labels.iter().enumerate() {
        cond_counts[c] += 1;
        g_c[c] += centered.column(i);
    }

    let mut links = Vec::with_capacity(n_speakers);
    let mut f_s = Vec::with_capacity(n_speakers);
    for members in &speaker_groups {
        let mut f = DVector::zeros(dim);
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &i in members {
            f += centered.column(i);
            *counts.entry(cond_labels[i]).or_insert(0) += 1;
        }
        let mut pairs: Vec<(usize, usize)> = counts.into_iter().collect();
        pairs.sort_unstable();
        links.push(pairs);
        f_s.push(f);
    }
    Ok(JointLayout {
        speaker_groups,
        cond_counts,
        links,
        f_s,
        g_c,
        centered,
    })
}

/// Per-speaker factor blocks, cached by sample count (the precision
/// `I + n V^T D V` depends on the speaker only through `n`).
struct SpeakerBlocks {
    by_count: HashMap<usize, SpeakerBlock>,
}

struct SpeakerBlock {
    chol: Cholesky<f64, Dyn>,
    inv: DMatrix<f64>,
    /// `A^-1 F` where `F = V^T D U`
    e: DMatrix<f64>,
    /// `F^T A^-1 F`
    t: DMatrix<f64>,
    logdet: f64,
}

fn speaker_blocks(
    layout: &JointLayout,
    vt_d_v: &DMatrix<f64>,
    f_cross: &DMatrix<f64>,
    r_y: usize,
) -> Result<SpeakerBlocks> {
    let mut by_count = HashMap::new();
    for members in &layout.speaker_groups {
        let n = members.len();
        if n == 0 || by_count.contains_key(&n) {
            continue;
        }
        let precision = DMatrix::identity(r_y, r_y) + vt_d_v * n as f64;
        let chol = sym_pd_cholesky(&precision)?;
        let inv = chol.inverse();
        let e = chol.solve(f_cross);
        let t = f_cross.transpose() * &e;
        let logdet = chol_logdet(&chol);
        by_count.insert(
            n,
            SpeakerBlock {
                chol,
                inv,
                e,
                t,
                logdet,
            },
        );
    }
    Ok(SpeakerBlocks { by_count })
}

struct EStep {
    loglik: f64,
    y_means: Vec<DVector<f64>>,
    x_means: Vec<DVector<f64>>,
    /// full posterior covariance of the stacked condition factors
    cov_x: DMatrix<f64>,
}

/// Exact joint posterior over all speaker and condition factors, via a Schur
/// complement on the (small) condition side: the speaker side is
/// block-diagonal and eliminated analytically.
fn e_step(params: &PldaParams, layout: &JointLayout) -> Result<EStep> {
    let (r_y, r_x) = (params.r_y(), params.r_x());
    let n_speakers = layout.speaker_groups.len();
    let n_conditions = layout.cond_counts.len();
    let cx = n_conditions * r_x;

    let chol_d = sym_pd_cholesky(params.d())?;
    let vt_d = params.v().transpose() * params.d();
    let ut_d = params.u().transpose() * params.d();
    let vt_d_v = symmetrize(&(&vt_d * params.v()));
    let ut_d_u = symmetrize(&(&ut_d * params.u()));
    let f_cross = &vt_d * params.u();

    let blocks = speaker_blocks(layout, &vt_d_v, &f_cross, r_y)?;

    let b_y: Vec<DVector<f64>> = layout.f_s.iter().map(|f| &vt_d * f).collect();
    let b_x: Vec<DVector<f64>> = layout.g_c.iter().map(|g| &ut_d * g).collect();

    // Schur complement on the condition side and its right-hand side
    let mut s_x = DMatrix::zeros(cx, cx);
    for (c, &n_c) in layout.cond_counts.iter().enumerate() {
        let block = DMatrix::identity(r_x, r_x) + &ut_d_u * n_c as f64;
        s_x.view_mut((c * r_x, c * r_x), (r_x, r_x)).copy_from(&block);
    }
    let mut h = DVector::zeros(cx);
    for (c, b_x_c) in b_x.iter().enumerate() {
        h.rows_mut(c * r_x, r_x).copy_from(b_x_c);
    }
    let mut w_s = Vec::with_capacity(n_speakers);
    for (s, b_y_s) in b_y.iter().enumerate() {
        let n = layout.speaker_groups[s].len();
        if n == 0 {
            w_s.push(DVector::zeros(r_y));
            continue;
        }
        let block = &blocks.by_count[&n];
        let w = block.chol.solve(b_y_s);
        let ftw = f_cross.transpose() * &w;
        for &(c, n_sc) in &layout.links[s] {
            let mut rows = h.rows_mut(c * r_x, r_x);
            rows -= &ftw * n_sc as f64;
            for &(c2, n_sc2) in &layout.links[s] {
                let mut view = s_x.view_mut((c * r_x, c2 * r_x), (r_x, r_x));
                view -= &block.t * (n_sc * n_sc2) as f64;
            }
        }
        w_s.push(w);
    }

    let (x_stacked, cov_x, logdet_sx) = if cx > 0 {
        let chol_sx = sym_pd_cholesky(&symmetrize(&s_x))?;
        let x = chol_sx.solve(&h);
        let cov = chol_sx.inverse();
        let ld = chol_logdet(&chol_sx);
        (x, cov, ld)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
    };
    let x_means: Vec<DVector<f64>> = (0..n_conditions)
        .map(|c| x_stacked.rows(c * r_x, r_x).clone_owned())
        .collect();

    let mut y_means = Vec::with_capacity(n_speakers);
    let mut logdet_py = 0.0;
    for (s, w) in w_s.iter().enumerate() {
        let n = layout.speaker_groups[s].len();
        if n == 0 {
            y_means.push(DVector::zeros(r_y));
            continue;
        }
        let block = &blocks.by_count[&n];
        logdet_py += block.logdet;
        let mut linked_x = DVector::zeros(r_x);
        for &(c, n_sc) in &layout.links[s] {
            linked_x += &x_means[c] * n_sc as f64;
        }
        y_means.push(w - block.chol.solve(&(&f_cross * linked_x)));
    }

    // marginal log-likelihood through the posterior normalizer
    let n_total = layout.centered.ncols() as f64;
    let dim = params.dim() as f64;
    let quad = (params.d() * &layout.centered).dot(&layout.centered);
    let mut ll = -0.5 * n_total * dim * LN_2PI + 0.5 * n_total * chol_logdet(&chol_d) - 0.5 * quad;
    ll += -0.5 * (logdet_py + logdet_sx);
    for (s, b_y_s) in b_y.iter().enumerate() {
        if !layout.speaker_groups[s].is_empty() {
            ll += 0.5 * b_y_s.dot(&y_means[s]);
        }
    }
    for (b_x_c, x_mean) in b_x.iter().zip(&x_means) {
        ll += 0.5 * b_x_c.dot(x_mean);
    }

    Ok(EStep {
        loglik: ll,
        y_means,
        x_means,
        cov_x,
    })
}

fn accumulate_moments(
    params: &PldaParams,
    layout: &JointLayout,
    estep: &EStep,
) -> Result<Moments> {
    let (r_y, r_x) = (params.r_y(), params.r_x());
    let dim = params.dim();
    let vt_d = params.v().transpose() * params.d();
    let vt_d_v = symmetrize(&(&vt_d * params.v()));
    let f_cross = &vt_d * params.u();
    let blocks = speaker_blocks(layout, &vt_d_v, &f_cross, r_y)?;

    let mut r_yy = DMatrix::zeros(r_y, r_y);
    let mut r_yx = DMatrix::zeros(r_y, r_x);
    let mut r_xx = DMatrix::zeros(r_x, r_x);
    let mut c_my = DMatrix::zeros(dim, r_y);
    let mut c_mx = DMatrix::zeros(dim, r_x);

    for (c, &n_c) in layout.cond_counts.iter().enumerate() {
        let cov_cc = estep.cov_x.view((c * r_x, c * r_x), (r_x, r_x)).clone_owned();
        let x = &estep.x_means[c];
        r_xx += (cov_cc + x * x.transpose()) * n_c as f64;
        c_mx += &layout.g_c[c] * x.transpose();
    }

    for (s, members) in layout.speaker_groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let block = &blocks.by_count[&n];
        let y = &estep.y_means[s];

        // K = sum over linked condition pairs of n_sc n_sc' Cov(x_c, x_c')
        let mut k = DMatrix::zeros(r_x, r_x);
        for &(c1, n1) in &layout.links[s] {
            for &(c2, n2) in &layout.links[s] {
                let cov = estep.cov_x.view((c1 * r_x, c2 * r_x), (r_x, r_x));
                k += cov * (n1 * n2) as f64;
            }
        }
        let cov_y = &block.inv + &block.e * k * block.e.transpose();
        r_yy += (cov_y + y * y.transpose()) * n as f64;
        c_my += &layout.f_s[s] * y.transpose();

        for &(c, n_sc) in &layout.links[s] {
            // Cov(y_s, x_c) = -A^-1 F * sum_{c'} n_sc' Cov(x_c', x_c)
            let mut m = DMatrix::zeros(r_x, r_x);
            for &(c2, n2) in &layout.links[s] {
                m += estep.cov_x.view((c2 * r_x, c * r_x), (r_x, r_x)) * n2 as f64;
            }
            let cov_yx = -(&block.e * m);
            r_yx += (cov_yx + y * estep.x_means[c].transpose()) * n_sc as f64;
        }
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

fn check_unknowns(dataset: &LabeledDataset, r_y: usize, r_x: usize, cap: usize) -> Result<()> {
    let n_conditions = if r_x == 0 {
        0
    } else {
        dataset.require_conditions()?.n_classes()
    };
    let unknowns = dataset.n_speakers() * r_y + n_conditions * r_x;
    if unknowns > cap {
        return Err(Error::invalid_arg(format!(
            "joint latent system has {unknowns} unknowns, above the cap of {cap}"
        )));
    }
    Ok(())
}

/// EM for the joint model. The mean is fixed to the global training mean
/// before the first iteration; each E-step solves the exact coupled posterior
/// over all speaker and condition factors.
pub fn jplda_em_fit(
    dataset: &LabeledDataset,
    init: &PldaParams,
    opts: &JpldaFitOptions,
) -> Result<(PldaParams, Vec<f64>)> {
    if init.dim() != dataset.dim() {
        return Err(Error::data(format!(
            "model dimension {} does not match dataset dimension {}",
            init.dim(),
            dataset.dim()
        )));
    }
    check_unknowns(dataset, init.r_y(), init.r_x(), opts.max_unknowns)?;

    let mut params = init.clone();
    let mut trace = vec![jplda_marginal_loglik(&params, dataset)?];
    if opts.n_iters == 0 {
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
    let layout = joint_layout(dataset, &mu, params.r_x())?;
    let c_mm = symmetrize(&(&layout.centered * layout.centered.transpose()));

    for _ in 0..opts.n_iters {
        let estep = e_step(&params, &layout)?;
        let moments = accumulate_moments(&params, &layout, &estep)?;
        let (t, d) = maximize_loadings(&moments, &c_mm, dataset.len(), opts.d_diagonal)?;
        let v = t.columns(0, params.r_y()).clone_owned();
        let u = t.columns(params.r_y(), params.r_x()).clone_owned();
        params = PldaParams::new(mu.clone(), v, u, d, opts.d_diagonal)?;
        let ll = e_step(&params, &layout)?.loglik;
        if !ll.is_finite() {
            return Err(Error::numerical("non-finite log-likelihood during EM"));
        }
        trace.push(ll);
    }
    Ok((params, trace))
}

/// Exact log-density of the whole dataset under the joint model, computed
/// through the block posterior rather than the stacked covariance.
pub fn jplda_marginal_loglik(params: &PldaParams, dataset: &LabeledDataset) -> Result<f64> {
    if params.dim() != dataset.dim() {
        return Err(Error::data("model dimension does not match dataset"));
    }
    let layout = joint_layout(dataset, params.mu(), params.r_x())?;
    Ok(e_step(params, &layout)?.loglik)
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Precomputed factorizations for the four speaker/condition hypothesis
/// combinations of a single-sample trial.
pub struct JointScorer {
    mu: DVector<f64>,
    dim: usize,
    chol_single: Cholesky<f64, Dyn>,
    chol_ss_sc: Cholesky<f64, Dyn>,
    chol_ss_dc: Cholesky<f64, Dyn>,
    chol_ds_sc: Cholesky<f64, Dyn>,
}

/// The four per-hypothesis log-likelihoods of one trial.
#[derive(Debug, Clone, Copy)]
pub struct HypothesisLogliks {
    pub ss_sc: f64,
    pub ss_dc: f64,
    pub ds_sc: f64,
    pub ds_dc: f64,
}

impl JointScorer {
    pub fn new(params: &PldaParams) -> Result<Self> {
        let dim = params.dim();
        let vvt = params.v() * params.v().transpose();
        let uut = params.u() * params.u().transpose();
        let total = symmetrize(&(&vvt + &uut + params.noise_covariance()?));
        let joint = |off: &DMatrix<f64>| {
            let mut m = DMatrix::zeros(2 * dim, 2 * dim);
            m.view_mut((0, 0), (dim, dim)).copy_from(&total);
            m.view_mut((dim, dim), (dim, dim)).copy_from(&total);
            m.view_mut((0, dim), (dim, dim)).copy_from(off);
            m.view_mut((dim, 0), (dim, dim)).copy_from(&off.transpose());
            m
        };
        Ok(JointScorer {
            mu: params.mu().clone(),
            dim,
            chol_single: sym_pd_cholesky(&total)?,
            chol_ss_sc: sym_pd_cholesky(&joint(&symmetrize(&(&vvt + &uut))))?,
            chol_ss_dc: sym_pd_cholesky(&joint(&symmetrize(&vvt)))?,
            chol_ds_sc: sym_pd_cholesky(&joint(&symmetrize(&uut)))?,
        })
    }

    pub fn hypothesis_logliks(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> HypothesisLogliks {
        let e = enroll - &self.mu;
        let t = test - &self.mu;
        let mut stacked = DVector::zeros(2 * self.dim);
        stacked.rows_mut(0, self.dim).copy_from(&e);
        stacked.rows_mut(self.dim, self.dim).copy_from(&t);
        let marg = mvn_logpdf_centered(&self.chol_single, &e)
            + mvn_logpdf_centered(&self.chol_single, &t);
        HypothesisLogliks {
            ss_sc: mvn_logpdf_centered(&self.chol_ss_sc, &stacked),
            ss_dc: mvn_logpdf_centered(&self.chol_ss_dc, &stacked),
            ds_sc: mvn_logpdf_centered(&self.chol_ds_sc, &stacked),
            ds_dc: marg,
        }
    }

    /// log LR marginalized over the condition hypotheses with the given priors.
    pub fn score_pair(
        &self,
        enroll: &DVector<f64>,
        test: &DVector<f64>,
        priors: &ConditionPriors,
    ) -> f64 {
        let h = self.hypothesis_logliks(enroll, test);
        mix(h.ss_sc, h.ss_dc, priors.p_sc_given_ss) - mix(h.ds_sc, h.ds_dc, priors.p_sc_given_ds)
    }

    /// log LR with the condition hypothesis fixed (same or different).
    pub fn score_pair_known_condition(
        &self,
        enroll: &DVector<f64>,
        test: &DVector<f64>,
        same_condition: bool,
    ) -> f64 {
        let h = self.hypothesis_logliks(enroll, test);
        if same_condition {
            h.ss_sc - h.ds_sc
        } else {
            h.ss_dc - h.ds_dc
        }
    }
}

/// Mixture of two log-likelihoods with weight `p` on the first.
fn mix(log_a: f64, log_b: f64, p: f64) -> f64 {
    if p == 1.0 {
        log_a
    } else if p == 0.0 {
        log_b
    } else {
        logsumexp2(p.ln() + log_a, (1.0 - p).ln() + log_b)
    }
}

/// Scores trials, marginalizing over the condition hypotheses. With
/// `known_condition` set, each trial must carry a same/cross tag and the
/// corresponding prior is fixed to 1 or 0.
pub fn jplda_score(
    params: &PldaParams,
    enroll: &LabeledDataset,
    test: &LabeledDataset,
    trials: &TrialList,
    priors: &ConditionPriors,
    known_condition: bool,
) -> Result<ScoreSet> {
    if enroll.dim() != params.dim() || test.dim() != params.dim() {
        return Err(Error::data("enroll/test dimension does not match the model"));
    }
    if known_condition {
        if let Some(bad) = trials.trials().iter().find(|t| t.cond == CondTag::Unknown) {
            return Err(Error::data(format!(
                "known-condition scoring needs a same/cross tag on every trial; ({}, {}) has none",
                bad.enroll_id, bad.test_id
            )));
        }
    }
    let scorer = JointScorer::new(params)?;
    let columns = resolve_trial_columns(enroll, test, trials)?;
    let scores: Vec<TrialScore> = trials
        .trials()
        .par_iter()
        .zip(columns.par_iter())
        .map(|(t, &(ei, ti))| {
            let e = enroll.vectors().column(ei).clone_owned();
            let x = test.vectors().column(ti).clone_owned();
            let log_lr = if known_condition {
                scorer.score_pair_known_condition(&e, &x, t.cond == CondTag::Same)
            } else {
                scorer.score_pair(&e, &x, priors)
            };
            TrialScore {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                log_lr,
            }
        })
        .collect();
    ScoreSet::new(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelIndex;
    use crate::oracle;
    use crate::standard::{em_fit, init_random, marginal_loglik, PldaVariant, StandardScorer};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn joint_dataset(seed: u64, n_speakers: usize, n_conditions: usize, per_cell: usize) -> LabeledDataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let dim = 6;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let v = DMatrix::from_fn(dim, 2, |_, _| rng.random_range(-1.0..1.0)) * 1.3;
        let u = DMatrix::from_fn(dim, 1, |_, _| rng.random_range(-1.0..1.0)) * 1.1;
        let xs: Vec<DVector<f64>> = (0..n_conditions)
            .map(|_| DVector::from_fn(1, |_, _| normal.sample(&mut rng)))
            .collect();
        let mut cols = Vec::new();
        let mut speakers = Vec::new();
        let mut conds = Vec::new();
        for s in 0..n_speakers {
            let y = DVector::from_fn(2, |_, _| normal.sample(&mut rng));
            for (c, x) in xs.iter().enumerate() {
                for _ in 0..per_cell {
                    let z = DVector::from_fn(dim, |_, _| normal.sample(&mut rng) * 0.5);
                    cols.push(&v * &y + &u * x + z);
                    speakers.push(format!("spk{s}"));
                    conds.push(format!("cond{c}"));
                }
            }
        }
        let ids: Vec<String> = (0..cols.len()).map(|i| format!("s{i}")).collect();
        let speakers_ref: Vec<&str> = speakers.iter().map(|s| s.as_str()).collect();
        let conds_ref: Vec<&str> = conds.iter().map(|s| s.as_str()).collect();
        LabeledDataset::new(
            DMatrix::from_columns(&cols),
            ids,
            LabelIndex::from_names(&speakers_ref),
            Some(LabelIndex::from_names(&conds_ref)),
        )
        .unwrap()
    }

    #[test]
    fn priors_outside_unit_interval_rejected() {
        assert!(ConditionPriors::new(-0.1, 0.5).is_err());
        assert!(ConditionPriors::new(0.5, 1.1).is_err());
        assert!(ConditionPriors::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn smart_init_requires_enough_conditions() {
        let ds = joint_dataset(1, 12, 3, 2);
        // r_x = 3 needs at least 4 conditions
        assert!(jplda_init_smart(&ds, 2, 3, false).is_err());
        assert!(jplda_init_smart(&ds, 2, 2, false).is_ok());
    }

    #[test]
    fn smart_init_rejects_single_condition() {
        let ds = joint_dataset(2, 12, 1, 3);
        assert!(jplda_init_smart(&ds, 2, 1, false).is_err());
    }

    #[test]
    fn single_sample_standard_normal() {
        let mu = DVector::zeros(2);
        let p = PldaParams::new(
            mu,
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 0),
            DMatrix::identity(2, 2),
            false,
        )
        .unwrap();
        let ds = LabeledDataset::new(
            DMatrix::zeros(2, 1),
            vec!["a".into()],
            LabelIndex::from_names(&["x"]),
            Some(LabelIndex::from_names(&["c"])),
        )
        .unwrap();
        let ll = jplda_marginal_loglik(&p, &ds).unwrap();
        assert_relative_eq!(ll, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn loglik_matches_dense_oracle() {
        let ds = joint_dataset(3, 3, 2, 3);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let fast = jplda_marginal_loglik(&init, &ds).unwrap();

        let joint = oracle::build_joint_tied_condition(
            &init,
            ds.speakers().assignments(),
            ds.conditions().unwrap().assignments(),
        )
        .unwrap();
        let mut stacked = DVector::zeros(ds.dim() * ds.len());
        for i in 0..ds.len() {
            stacked
                .rows_mut(i * ds.dim(), ds.dim())
                .copy_from(&ds.vectors().column(i));
        }
        let dense = oracle::logpdf(&joint, &stacked).unwrap();
        assert_relative_eq!(fast, dense, max_relative = 1e-8);
    }

    #[test]
    fn duplicated_dataset_with_fresh_labels_doubles_loglik() {
        let ds = joint_dataset(4, 4, 2, 2);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let single = jplda_marginal_loglik(&init, &ds).unwrap();

        let mut cols = Vec::new();
        let mut ids = Vec::new();
        let mut speakers = Vec::new();
        let mut conds = Vec::new();
        for copy in 0..2 {
            for i in 0..ds.len() {
                cols.push(ds.vectors().column(i).clone_owned());
                ids.push(format!("c{copy}_{}", ds.sample_ids()[i]));
                let spk = ds.speakers().name(ds.speakers().assignments()[i]);
                let cnd = ds
                    .conditions()
                    .unwrap()
                    .name(ds.conditions().unwrap().assignments()[i]);
                speakers.push(format!("c{copy}_{spk}"));
                conds.push(format!("c{copy}_{cnd}"));
            }
        }
        let speakers_ref: Vec<&str> = speakers.iter().map(|s| s.as_str()).collect();
        let conds_ref: Vec<&str> = conds.iter().map(|s| s.as_str()).collect();
        let doubled = LabeledDataset::new(
            DMatrix::from_columns(&cols),
            ids,
            LabelIndex::from_names(&speakers_ref),
            Some(LabelIndex::from_names(&conds_ref)),
        )
        .unwrap();
        let two = jplda_marginal_loglik(&init, &doubled).unwrap();
        assert_relative_eq!(two, 2.0 * single, max_relative = 1e-12);
    }

    #[test]
    fn em_improves_from_smart_init() {
        let ds = joint_dataset(5, 30, 3, 2);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let (_, trace) = jplda_em_fit(
            &ds,
            &init,
            &JpldaFitOptions {
                n_iters: 3,
                d_diagonal: false,
                ..Default::default()
            },
        )
        .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "trace decreased: {w:?}");
        }
    }

    #[test]
    fn zero_channel_rank_reduces_to_simple_plda() {
        let ds = joint_dataset(6, 25, 2, 2);
        let init = init_random(6, 2, 0, 9).unwrap();
        let opts = JpldaFitOptions {
            n_iters: 4,
            d_diagonal: false,
            ..Default::default()
        };
        let (joint_fit, joint_trace) = jplda_em_fit(&ds, &init, &opts).unwrap();
        let (simple_fit, simple_trace) = em_fit(&ds, &init, PldaVariant::Splda, 4, false).unwrap();
        for (a, b) in joint_trace.iter().zip(&simple_trace) {
            assert_relative_eq!(a, b, max_relative = 1e-8);
        }
        assert_relative_eq!(joint_fit.v(), simple_fit.v(), max_relative = 1e-6);
        assert_relative_eq!(
            jplda_marginal_loglik(&joint_fit, &ds).unwrap(),
            marginal_loglik(&simple_fit, &ds, PldaVariant::Splda).unwrap(),
            max_relative = 1e-8
        );
    }

    #[test]
    fn zero_channel_loading_makes_scores_prior_independent() {
        let ds = joint_dataset(7, 25, 2, 2);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let p = PldaParams::new(
            init.mu().clone(),
            init.v().clone(),
            DMatrix::zeros(6, 1),
            init.d().clone(),
            false,
        )
        .unwrap();
        let scorer = JointScorer::new(&p).unwrap();
        let sp = PldaParams::new(
            init.mu().clone(),
            init.v().clone(),
            DMatrix::zeros(6, 0),
            init.d().clone(),
            false,
        )
        .unwrap();
        let sscorer = StandardScorer::new(&sp).unwrap();
        let e = DVector::from_fn(6, |i, _| 0.2 * i as f64 - 0.5);
        let t = DVector::from_fn(6, |i, _| -0.3 * i as f64 + 0.4);
        let reference = sscorer.score_pair(&e, &t);
        for p_val in [0.0, 0.25, 0.5, 1.0] {
            let priors = ConditionPriors::new(p_val, p_val).unwrap();
            let s = scorer.score_pair(&e, &t, &priors);
            assert_relative_eq!(s, reference, max_relative = 1e-10, epsilon = 1e-10);
        }
    }

    #[test]
    fn extreme_priors_match_pure_hypothesis_scores() {
        let ds = joint_dataset(8, 25, 3, 2);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let scorer = JointScorer::new(&init).unwrap();
        let e = DVector::from_fn(6, |i, _| 0.1 * i as f64);
        let t = DVector::from_fn(6, |i, _| 0.2 - 0.1 * i as f64);
        let h = scorer.hypothesis_logliks(&e, &t);

        let all_same = scorer.score_pair(&e, &t, &ConditionPriors::new(1.0, 1.0).unwrap());
        assert_relative_eq!(all_same, h.ss_sc - h.ds_sc, max_relative = 1e-12);
        let all_diff = scorer.score_pair(&e, &t, &ConditionPriors::new(0.0, 0.0).unwrap());
        assert_relative_eq!(all_diff, h.ss_dc - h.ds_dc, max_relative = 1e-12);
        assert!((all_same - all_diff).abs() > 1e-6, "priors had no effect");

        // each hypothesis likelihood matches the dense oracle
        for (fast, (ss, sc)) in [
            (h.ss_sc, (true, true)),
            (h.ss_dc, (true, false)),
            (h.ds_sc, (false, true)),
            (h.ds_dc, (false, false)),
        ] {
            let reference = oracle::trial_loglik(
                &init,
                &e,
                &t,
                oracle::TrialHypothesis {
                    same_speaker: ss,
                    same_condition: sc,
                },
            )
            .unwrap();
            assert_relative_eq!(fast, reference, max_relative = 1e-8);
        }
    }

    #[test]
    fn score_is_monotone_in_the_same_speaker_prior() {
        let ds = joint_dataset(12, 25, 3, 2);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let scorer = JointScorer::new(&init).unwrap();
        let e = DVector::from_fn(6, |i, _| 0.15 * i as f64 - 0.2);
        let t = DVector::from_fn(6, |i, _| 0.4 - 0.2 * i as f64);
        let p_ds = 0.4;
        let scores: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&p| scorer.score_pair(&e, &t, &ConditionPriors::new(p, p_ds).unwrap()))
            .collect();
        let h = scorer.hypothesis_logliks(&e, &t);
        let increasing = h.ss_sc > h.ss_dc;
        for w in scores.windows(2) {
            if increasing {
                assert!(w[1] >= w[0] - 1e-12, "not monotone: {scores:?}");
            } else {
                assert!(w[1] <= w[0] + 1e-12, "not monotone: {scores:?}");
            }
        }
    }

    #[test]
    fn condition_rank_boundary_at_many_conditions() {
        // rank 16 needs 17 distinct conditions; 16 conditions must fail
        let build = |n_conditions: usize| {
            let mut rng = StdRng::seed_from_u64(77);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let dim = 18;
            let mut cols = Vec::new();
            let mut speakers = Vec::new();
            let mut conds = Vec::new();
            for s in 0..60 {
                for k in 0..2 {
                    let c = (2 * s + k) % n_conditions;
                    cols.push(DVector::from_fn(dim, |_, _| normal.sample(&mut rng)));
                    speakers.push(format!("spk{s}"));
                    conds.push(format!("cond{c}"));
                }
            }
            let ids: Vec<String> = (0..cols.len()).map(|i| format!("s{i}")).collect();
            let speakers_ref: Vec<&str> = speakers.iter().map(|s| s.as_str()).collect();
            let conds_ref: Vec<&str> = conds.iter().map(|s| s.as_str()).collect();
            LabeledDataset::new(
                DMatrix::from_columns(&cols),
                ids,
                LabelIndex::from_names(&speakers_ref),
                Some(LabelIndex::from_names(&conds_ref)),
            )
            .unwrap()
        };
        assert!(jplda_init_smart(&build(17), 2, 16, false).is_ok());
        assert!(jplda_init_smart(&build(16), 2, 16, false).is_err());
    }

    #[test]
    fn score_symmetry() {
        let ds = joint_dataset(9, 25, 3, 2);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let scorer = JointScorer::new(&init).unwrap();
        let e = DVector::from_fn(6, |i, _| (i as f64 * 0.7).sin());
        let t = DVector::from_fn(6, |i, _| (i as f64 * 0.3).cos());
        let priors = ConditionPriors::new(0.3, 0.6).unwrap();
        let ab = scorer.score_pair(&e, &t, &priors);
        let ba = scorer.score_pair(&t, &e, &priors);
        assert!((ab - ba).abs() < 1e-10);
    }

    /// The block-eliminated posterior (means, covariance blocks, accumulated
    /// moments) against a dense solve of the full latent system.
    #[test]
    fn block_posterior_matches_dense_solve() {
        let ds = joint_dataset(14, 4, 3, 2);
        let params = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let (r_y, r_x) = (params.r_y(), params.r_x());
        let layout = joint_layout(&ds, params.mu(), r_x).unwrap();
        let estep = e_step(&params, &layout).unwrap();

        let n_speakers = layout.speaker_groups.len();
        let n_conditions = layout.cond_counts.len();
        let total = n_speakers * r_y + n_conditions * r_x;
        let vt_d = params.v().transpose() * params.d();
        let ut_d = params.u().transpose() * params.d();
        let f_cross = &vt_d * params.u();

        // dense precision and right-hand side of the full latent system
        let mut p = DMatrix::zeros(total, total);
        let mut b = DVector::zeros(total);
        for s in 0..n_speakers {
            let n_s = layout.speaker_groups[s].len() as f64;
            let block = DMatrix::identity(r_y, r_y) + &vt_d * params.v() * n_s;
            p.view_mut((s * r_y, s * r_y), (r_y, r_y)).copy_from(&block);
            b.rows_mut(s * r_y, r_y).copy_from(&(&vt_d * &layout.f_s[s]));
            for &(c, n_sc) in &layout.links[s] {
                let col = n_speakers * r_y + c * r_x;
                p.view_mut((s * r_y, col), (r_y, r_x))
                    .copy_from(&(&f_cross * n_sc as f64));
                p.view_mut((col, s * r_y), (r_x, r_y))
                    .copy_from(&(f_cross.transpose() * n_sc as f64));
            }
        }
        for c in 0..n_conditions {
            let n_c = layout.cond_counts[c] as f64;
            let row = n_speakers * r_y + c * r_x;
            let block = DMatrix::identity(r_x, r_x) + &ut_d * params.u() * n_c;
            p.view_mut((row, row), (r_x, r_x)).copy_from(&block);
            b.rows_mut(row, r_x).copy_from(&(&ut_d * &layout.g_c[c]));
        }
        let cov = p.clone().try_inverse().unwrap();
        let mean = &cov * &b;

        for s in 0..n_speakers {
            let dense = mean.rows(s * r_y, r_y).clone_owned();
            assert_relative_eq!(estep.y_means[s], dense, epsilon = 1e-10, max_relative = 1e-8);
        }
        for c in 0..n_conditions {
            let row = n_speakers * r_y + c * r_x;
            let dense = mean.rows(row, r_x).clone_owned();
            assert_relative_eq!(estep.x_means[c], dense, epsilon = 1e-10, max_relative = 1e-8);
            for c2 in 0..n_conditions {
                let col = n_speakers * r_y + c2 * r_x;
                let dense_cov = cov.view((row, col), (r_x, r_x)).clone_owned();
                let fast_cov = estep.cov_x.view((c * r_x, c2 * r_x), (r_x, r_x)).clone_owned();
                assert_relative_eq!(fast_cov, dense_cov, epsilon = 1e-10, max_relative = 1e-8);
            }
        }

        // accumulated second moments against the dense covariance blocks
        let moments = accumulate_moments(&params, &layout, &estep).unwrap();
        let mut r_yy = DMatrix::zeros(r_y, r_y);
        let mut r_yx = DMatrix::zeros(r_y, r_x);
        let mut r_xx = DMatrix::zeros(r_x, r_x);
        for s in 0..n_speakers {
            let n_s = layout.speaker_groups[s].len() as f64;
            let cov_yy = cov.view((s * r_y, s * r_y), (r_y, r_y)).clone_owned();
            let y = mean.rows(s * r_y, r_y).clone_owned();
            r_yy += (cov_yy + &y * y.transpose()) * n_s;
            for &(c, n_sc) in &layout.links[s] {
                let col = n_speakers * r_y + c * r_x;
                let cov_yx = cov.view((s * r_y, col), (r_y, r_x)).clone_owned();
                let x = mean.rows(col, r_x).clone_owned();
                r_yx += (cov_yx + &y * x.transpose()) * n_sc as f64;
            }
        }
        for c in 0..n_conditions {
            let row = n_speakers * r_y + c * r_x;
            let n_c = layout.cond_counts[c] as f64;
            let cov_xx = cov.view((row, row), (r_x, r_x)).clone_owned();
            let x = mean.rows(row, r_x).clone_owned();
            r_xx += (cov_xx + &x * x.transpose()) * n_c;
        }
        let fast_yy = moments.r_tt.view((0, 0), (r_y, r_y)).clone_owned();
        let fast_yx = moments.r_tt.view((0, r_y), (r_y, r_x)).clone_owned();
        let fast_xx = moments.r_tt.view((r_y, r_y), (r_x, r_x)).clone_owned();
        assert_relative_eq!(fast_yy, r_yy, epsilon = 1e-8, max_relative = 1e-8);
        assert_relative_eq!(fast_yx, r_yx, epsilon = 1e-8, max_relative = 1e-8);
        assert_relative_eq!(fast_xx, r_xx, epsilon = 1e-8, max_relative = 1e-8);
    }

    #[test]
    fn latent_system_cap_enforced() {
        let ds = joint_dataset(10, 10, 2, 1);
        let init = jplda_init_smart(&ds, 2, 1, false).unwrap();
        let opts = JpldaFitOptions {
            n_iters: 1,
            d_diagonal: false,
            max_unknowns: 5,
        };
        assert!(jplda_em_fit(&ds, &init, &opts).is_err());
    }
}
