//! Tied mixture of PLDA components: one simplified PLDA model per condition
//! group with the speaker variable shared across components. Components are
//! known at training and scoring time.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{LabeledDataset, PldaParams, ScoreSet, TiedPldaParams, TrialList, TrialScore};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, sym_pd_cholesky, symmetrize, LN_2PI};
use crate::standard::{class_structure_init, group_by_label, resolve_trial_columns};

/// Component index for every sample, via the condition-name map.
fn sample_components(
    dataset: &LabeledDataset,
    map: &BTreeMap<String, usize>,
    n_components: usize,
) -> Result<Vec<usize>> {
    let conditions = dataset.require_conditions()?;
    conditions
        .assignments()
        .iter()
        .map(|&c| {
            let name = conditions.name(c);
            let k = *map
                .get(name)
                .ok_or_else(|| Error::data(format!("condition '{name}' has no mixture component")))?;
            if k >= n_components {
                return Err(Error::invalid_arg(format!(
                    "condition '{name}' maps to component {k}, but only {n_components} exist"
                )));
            }
            Ok(k)
        })
        .collect()
}

struct TiedLayout {
    components: Vec<usize>,
    component_members: Vec<Vec<usize>>,
    speaker_groups: Vec<Vec<usize>>,
    means: Vec<DVector<f64>>,
    /// per-sample vectors centered at their component mean
    centered: DMatrix<f64>,
}

fn layout(
    dataset: &LabeledDataset,
    map: &BTreeMap<String, usize>,
    n_components: usize,
    means: Option<Vec<DVector<f64>>>,
) -> Result<TiedLayout> {
    let components = sample_components(dataset, map, n_components)?;
    let component_members = group_by_label(&components, n_components);
    if means.is_none() {
        // fitting needs data in every component; likelihood evaluation does not
        for (k, members) in component_members.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::data(format!("component {k} has no training samples")));
            }
        }
    }
    let means = match means {
        Some(m) => m,
        None => component_members
            .iter()
            .map(|members| {
                let mut mu = DVector::zeros(dataset.dim());
                for &i in members {
                    mu += dataset.vectors().column(i);
                }
                mu / members.len() as f64
            })
            .collect(),
    };
    let mut centered = dataset.vectors().clone();
    for (i, &k) in components.iter().enumerate() {
        let mut col = centered.column_mut(i);
        col -= &means[k];
    }
    Ok(TiedLayout {
        components,
        component_members,
        speaker_groups: group_by_label(dataset.speakers().assignments(), dataset.n_speakers()),
        means,
        centered,
    })
}

fn component_speaker_count(layout: &TiedLayout, k: usize, speakers: &[usize]) -> usize {
    let mut seen = std::collections::HashSet::new();
    for &i in &layout.component_members[k] {
        seen.insert(speakers[i]);
    }
    seen.len()
}

/// Trains a tied mixture by EM. Per-component means are fixed to the
/// component data means; initialization is the per-component closed-form
/// start on each component's own samples. The trace holds the marginal
/// log-likelihood of the initialization plus one entry per iteration.
pub fn tplda_fit(
    dataset: &LabeledDataset,
    component_map: &BTreeMap<String, usize>,
    r_y: usize,
    n_iters: usize,
    d_diagonal: bool,
) -> Result<(TiedPldaParams, Vec<f64>)> {
    let n_components = component_map
        .values()
        .max()
        .map(|&k| k + 1)
        .ok_or_else(|| Error::invalid_arg("component map is empty"))?;
    let lay = layout(dataset, component_map, n_components, None)?;
    let speakers = dataset.speakers().assignments();

    // per-component closed-form initialization on the component's own data
    let mut components = Vec::with_capacity(n_components);
    for k in 0..n_components {
        let n_spk = component_speaker_count(&lay, k, speakers);
        if n_spk < 2 {
            return Err(Error::data(format!(
                "component {k} has {n_spk} speaker(s); need at least 2"
            )));
        }
        let sub = dataset.subset(&lay.component_members[k])?;
        let (v, within) = class_structure_init(
            sub.vectors(),
            sub.speakers().assignments(),
            sub.n_speakers(),
            r_y,
        )?;
        let d = symmetrize(&sym_pd_cholesky(&within)?.inverse());
        components.push(PldaParams::new(
            lay.means[k].clone(),
            v,
            DMatrix::zeros(dataset.dim(), 0),
            d,
            false,
        )?);
    }
    let mut model = TiedPldaParams::new(components, component_map.clone())?;

    let mut trace = vec![loglik_internal(&model, &lay)?];
    for _ in 0..n_iters {
        model = em_iterate(&model, &lay, r_y, d_diagonal)?;
        let ll = loglik_internal(&model, &lay)?;
        if !ll.is_finite() {
            return Err(Error::numerical("non-finite log-likelihood during EM"));
        }
        trace.push(ll);
    }
    Ok((model, trace))
}

fn em_iterate(
    model: &TiedPldaParams,
    lay: &TiedLayout,
    r_y: usize,
    d_diagonal: bool,
) -> Result<TiedPldaParams> {
    let n_components = model.n_components();
    let dim = model.dim();
    let vt_d: Vec<DMatrix<f64>> = (0..n_components)
        .map(|k| model.component(k).v().transpose() * model.component(k).d())
        .collect();
    let vt_d_v: Vec<DMatrix<f64>> = (0..n_components)
        .map(|k| symmetrize(&(&vt_d[k] * model.component(k).v())))
        .collect();

    let mut r_yy = vec![DMatrix::zeros(r_y, r_y); n_components];
    let mut c_my = vec![DMatrix::zeros(dim, r_y); n_components];

    for members in &lay.speaker_groups {
        if members.is_empty() {
            continue;
        }
        // speaker sums split by component
        let mut f: Vec<Option<DVector<f64>>> = vec![None; n_components];
        let mut counts = vec![0usize; n_components];
        for &i in members {
            let k = lay.components[i];
            let slot = f[k].get_or_insert_with(|| DVector::zeros(dim));
            *slot += lay.centered.column(i);
            counts[k] += 1;
        }
        let mut precision = DMatrix::identity(r_y, r_y);
        let mut b = DVector::zeros(r_y);
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                precision += &vt_d_v[k] * count as f64;
                b += &vt_d[k] * f[k].as_ref().unwrap();
            }
        }
        let chol = sym_pd_cholesky(&precision)?;
        let mean = chol.solve(&b);
        let second_moment = chol.inverse() + &mean * mean.transpose();
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                r_yy[k] += &second_moment * count as f64;
                c_my[k] += f[k].as_ref().unwrap() * mean.transpose();
            }
        }
    }

    let mut components = Vec::with_capacity(n_components);
    for k in 0..n_components {
        let chol = sym_pd_cholesky(&symmetrize(&r_yy[k])).map_err(|_| {
            Error::numerical(format!("rank-deficient normal equations for component {k}"))
        })?;
        let v = chol.solve(&c_my[k].transpose()).transpose();
        let mut c_mm = DMatrix::zeros(dim, dim);
        for &i in &lay.component_members[k] {
            let col = lay.centered.column(i);
            c_mm.ger(1.0, &col, &col, 1.0);
        }
        let n_k = lay.component_members[k].len() as f64;
        let residual = symmetrize(&((c_mm - &v * c_my[k].transpose()) / n_k));
        let d = if d_diagonal {
            let mut d = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                let var = residual[(i, i)];
                if !(var.is_finite() && var > 0.0) {
                    return Err(Error::numerical(format!(
                        "non-positive residual variance in component {k}"
                    )));
                }
                d[(i, i)] = 1.0 / var;
            }
            d
        } else {
            symmetrize(&sym_pd_cholesky(&residual)?.inverse())
        };
        components.push(PldaParams::new(
            lay.means[k].clone(),
            v,
            DMatrix::zeros(dim, 0),
            d,
            d_diagonal,
        )?);
    }
    TiedPldaParams::new(components, model.condition_to_component().clone())
}

fn loglik_internal(model: &TiedPldaParams, lay: &TiedLayout) -> Result<f64> {
    let n_components = model.n_components();
    let r_y = model.r_y();
    let dim = model.dim();
    let chol_d: Vec<_> = (0..n_components)
        .map(|k| sym_pd_cholesky(model.component(k).d()))
        .collect::<Result<_>>()?;
    let vt_d: Vec<DMatrix<f64>> = (0..n_components)
        .map(|k| model.component(k).v().transpose() * model.component(k).d())
        .collect();
    let vt_d_v: Vec<DMatrix<f64>> = (0..n_components)
        .map(|k| symmetrize(&(&vt_d[k] * model.component(k).v())))
        .collect();

    let mut ll = 0.0;
    for (k, members) in lay.component_members.iter().enumerate() {
        let n_k = members.len() as f64;
        ll += -0.5 * n_k * dim as f64 * LN_2PI + 0.5 * n_k * chol_logdet(&chol_d[k]);
        for &i in members {
            let col = lay.centered.column(i).clone_owned();
            ll -= 0.5 * (model.component(k).d() * &col).dot(&col);
        }
    }
    for members in &lay.speaker_groups {
        if members.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; n_components];
        let mut b = DVector::zeros(r_y);
        for &i in members {
            let k = lay.components[i];
            counts[k] += 1;
            b += &vt_d[k] * lay.centered.column(i);
        }
        let mut precision = DMatrix::identity(r_y, r_y);
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                precision += &vt_d_v[k] * count as f64;
            }
        }
        let chol = sym_pd_cholesky(&precision)?;
        ll += -0.5 * chol_logdet(&chol) + 0.5 * b.dot(&chol.solve(&b));
    }
    Ok(ll)
}

/// Marginal log-likelihood of a dataset under a tied mixture, with the
/// speaker variable shared across components.
pub fn tplda_marginal_loglik(model: &TiedPldaParams, dataset: &LabeledDataset) -> Result<f64> {
    if model.dim() != dataset.dim() {
        return Err(Error::data("model dimension does not match dataset"));
    }
    let means = (0..model.n_components())
        .map(|k| model.component(k).mu().clone())
        .collect();
    let lay = layout(
        dataset,
        model.condition_to_component(),
        model.n_components(),
        Some(means),
    )?;
    loglik_internal(model, &lay)
}

/// Precomputed per-component and per-component-pair factorizations for
/// single-sample trial scoring with known components.
pub struct TiedScorer {
    model: TiedPldaParams,
    chol_single: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    chol_joint: Vec<Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
}

impl TiedScorer {
    pub fn new(model: &TiedPldaParams) -> Result<Self> {
        let k_n = model.n_components();
        let dim = model.dim();
        let totals: Vec<DMatrix<f64>> = (0..k_n)
            .map(|k| {
                let c = model.component(k);
                Ok(symmetrize(
                    &(c.v() * c.v().transpose() + c.noise_covariance()?),
                ))
            })
            .collect::<Result<_>>()?;
        let chol_single = totals
            .iter()
            .map(sym_pd_cholesky)
            .collect::<Result<Vec<_>>>()?;
        let mut chol_joint = Vec::with_capacity(k_n);
        for ke in 0..k_n {
            let mut row = Vec::with_capacity(k_n);
            for kt in 0..k_n {
                let cross = model.component(ke).v() * model.component(kt).v().transpose();
                let mut joint = DMatrix::zeros(2 * dim, 2 * dim);
                joint.view_mut((0, 0), (dim, dim)).copy_from(&totals[ke]);
                joint.view_mut((dim, dim), (dim, dim)).copy_from(&totals[kt]);
                joint.view_mut((0, dim), (dim, dim)).copy_from(&cross);
                joint
                    .view_mut((dim, 0), (dim, dim))
                    .copy_from(&cross.transpose());
                row.push(sym_pd_cholesky(&joint)?);
            }
            chol_joint.push(row);
        }
        Ok(TiedScorer {
            model: model.clone(),
            chol_single,
            chol_joint,
        })
    }

    /// log LR for a trial whose sides come from components `(ke, kt)`.
    pub fn score_pair(
        &self,
        enroll: &DVector<f64>,
        test: &DVector<f64>,
        ke: usize,
        kt: usize,
    ) -> Result<f64> {
        let k_n = self.model.n_components();
        if ke >= k_n || kt >= k_n {
            return Err(Error::invalid_arg(format!(
                "unknown component pair ({ke}, {kt}); model has {k_n}"
            )));
        }
        let dim = self.model.dim();
        let e = enroll - self.model.component(ke).mu();
        let t = test - self.model.component(kt).mu();
        let mut stacked = DVector::zeros(2 * dim);
        stacked.rows_mut(0, dim).copy_from(&e);
        stacked.rows_mut(dim, dim).copy_from(&t);
        let joint = crate::linalg::mvn_logpdf_centered(&self.chol_joint[ke][kt], &stacked);
        let marg_e = crate::linalg::mvn_logpdf_centered(&self.chol_single[ke], &e);
        let marg_t = crate::linalg::mvn_logpdf_centered(&self.chol_single[kt], &t);
        Ok(joint - marg_e - marg_t)
    }
}

/// Scores trials with components resolved from each side's condition label.
pub fn tplda_score(
    model: &TiedPldaParams,
    enroll: &LabeledDataset,
    test: &LabeledDataset,
    trials: &TrialList,
) -> Result<ScoreSet> {
    if enroll.dim() != model.dim() || test.dim() != model.dim() {
        return Err(Error::data("enroll/test dimension does not match the model"));
    }
    let e_comp = sample_components(enroll, model.condition_to_component(), model.n_components())?;
    let t_comp = sample_components(test, model.condition_to_component(), model.n_components())?;
    let scorer = TiedScorer::new(model)?;
    let columns = resolve_trial_columns(enroll, test, trials)?;
    let scores: Vec<TrialScore> = trials
        .trials()
        .par_iter()
        .zip(columns.par_iter())
        .map(|(t, &(ei, ti))| {
            let log_lr = scorer.score_pair(
                &enroll.vectors().column(ei).clone_owned(),
                &test.vectors().column(ti).clone_owned(),
                e_comp[ei],
                t_comp[ti],
            )?;
            Ok(TrialScore {
                enroll_id: t.enroll_id.clone(),
                test_id: t.test_id.clone(),
                log_lr,
            })
        })
        .collect::<Result<_>>()?;
    ScoreSet::new(scores)
}
