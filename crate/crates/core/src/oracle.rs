//! Brute-force reference likelihoods. Builds the explicit joint covariance
//! over a set of samples under any model variant and tying hypothesis, then
//! evaluates the multivariate normal log-density directly. Deliberately dense
//! and factorization-shortcut-free so the fast paths can be checked against it.

use nalgebra::{DMatrix, DVector};

use crate::data::{PldaParams, TiedPldaParams};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, sym_pd_cholesky, LN_2PI};

/// Hard cap on the stacked dimension; the oracle is meant for small inputs.
pub const MAX_STACKED_DIM: usize = 5000;

/// Explicit stacked mean and covariance over `n` samples.
#[derive(Debug, Clone)]
pub struct StackedGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Speaker/condition hypothesis for a two-sample trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialHypothesis {
    pub same_speaker: bool,
    pub same_condition: bool,
}

fn check_cap(n: usize, dim: usize) -> Result<()> {
    if n * dim > MAX_STACKED_DIM {
        return Err(Error::invalid_arg(format!(
            "stacked dimension {} exceeds oracle cap {MAX_STACKED_DIM}",
            n * dim
        )));
    }
    Ok(())
}

fn inverse_noise(params: &PldaParams) -> Result<DMatrix<f64>> {
    params
        .d()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("noise precision is singular"))
}

fn block_assign(cov: &mut DMatrix<f64>, i: usize, j: usize, dim: usize, block: &DMatrix<f64>) {
    let mut view = cov.view_mut((i * dim, j * dim), (dim, dim));
    view += block;
}

/// Joint Gaussian for samples under a single-component model where the
/// channel variable is independent per sample: blocks
/// `[s_i=s_j] V V^T + [i=j] (U U^T + D^-1)`.
pub fn build_joint_standard(
    params: &PldaParams,
    speakers: &[usize],
) -> Result<StackedGaussian> {
    let n = speakers.len();
    let dim = params.dim();
    check_cap(n, dim)?;
    let vvt = params.v() * params.v().transpose();
    let within = params.u() * params.u().transpose() + inverse_noise(params)?;
    let mut cov = DMatrix::zeros(n * dim, n * dim);
    for i in 0..n {
        block_assign(&mut cov, i, i, dim, &within);
        for j in 0..n {
            if speakers[i] == speakers[j] {
                block_assign(&mut cov, i, j, dim, &vvt);
            }
        }
    }
    let mut mean = DVector::zeros(n * dim);
    for i in 0..n {
        mean.rows_mut(i * dim, dim).copy_from(params.mu());
    }
    Ok(StackedGaussian { mean, cov })
}

/// Joint Gaussian with the channel variable tied by condition label: blocks
/// `[s_i=s_j] V V^T + [c_i=c_j] U U^T + [i=j] D^-1`.
pub fn build_joint_tied_condition(
    params: &PldaParams,
    speakers: &[usize],
    conditions: &[usize],
) -> Result<StackedGaussian> {
    let n = speakers.len();
    if conditions.len() != n {
        return Err(Error::invalid_arg("speaker and condition labels must align"));
    }
    let dim = params.dim();
    check_cap(n, dim)?;
    let vvt = params.v() * params.v().transpose();
    let uut = params.u() * params.u().transpose();
    let noise = inverse_noise(params)?;
    let mut cov = DMatrix::zeros(n * dim, n * dim);
    for i in 0..n {
        block_assign(&mut cov, i, i, dim, &noise);
        for j in 0..n {
            if speakers[i] == speakers[j] {
                block_assign(&mut cov, i, j, dim, &vvt);
            }
            if conditions[i] == conditions[j] {
                block_assign(&mut cov, i, j, dim, &uut);
            }
        }
    }
    let mut mean = DVector::zeros(n * dim);
    for i in 0..n {
        mean.rows_mut(i * dim, dim).copy_from(params.mu());
    }
    Ok(StackedGaussian { mean, cov })
}

/// Joint Gaussian for a tied mixture with known per-sample components:
/// blocks `[s_i=s_j] V_{d_i} V_{d_j}^T + [i=j] D_{d_i}^-1`, means per component.
pub fn build_joint_tied_mixture(
    model: &TiedPldaParams,
    speakers: &[usize],
    components: &[usize],
) -> Result<StackedGaussian> {
    let n = speakers.len();
    if components.len() != n {
        return Err(Error::invalid_arg("speaker and component labels must align"));
    }
    let dim = model.dim();
    check_cap(n, dim)?;
    for &k in components {
        if k >= model.n_components() {
            return Err(Error::invalid_arg(format!("unknown component {k}")));
        }
    }
    let mut cov = DMatrix::zeros(n * dim, n * dim);
    for (i, &ki) in components.iter().enumerate() {
        let noise = inverse_noise(model.component(ki))?;
        block_assign(&mut cov, i, i, dim, &noise);
        for (j, &kj) in components.iter().enumerate() {
            if speakers[i] == speakers[j] {
                let cross = model.component(ki).v() * model.component(kj).v().transpose();
                block_assign(&mut cov, i, j, dim, &cross);
            }
        }
    }
    let mut mean = DVector::zeros(n * dim);
    for (i, &k) in components.iter().enumerate() {
        mean.rows_mut(i * dim, dim).copy_from(model.component(k).mu());
    }
    Ok(StackedGaussian { mean, cov })
}

/// Exact multivariate normal log-density.
pub fn logpdf(g: &StackedGaussian, x: &DVector<f64>) -> Result<f64> {
    if x.len() != g.mean.len() {
        return Err(Error::invalid_arg(format!(
            "stacked vector has length {}, expected {}",
            x.len(),
            g.mean.len()
        )));
    }
    let chol = sym_pd_cholesky(&g.cov)?;
    let centered = x - &g.mean;
    let quad = centered.dot(&chol.solve(&centered));
    Ok(-0.5 * (g.mean.len() as f64 * LN_2PI + chol_logdet(&chol) + quad))
}

/// log p(e, t | hypothesis) for a single-sample trial under a single-component
/// model. Condition tying only matters for models with a channel subspace.
pub fn trial_loglik(
    params: &PldaParams,
    enroll: &DVector<f64>,
    test: &DVector<f64>,
    hyp: TrialHypothesis,
) -> Result<f64> {
    let speakers = if hyp.same_speaker { [0, 0] } else { [0, 1] };
    let conditions = if hyp.same_condition { [0, 0] } else { [0, 1] };
    let joint = build_joint_tied_condition(params, &speakers, &conditions)?;
    let mut x = DVector::zeros(2 * params.dim());
    x.rows_mut(0, params.dim()).copy_from(enroll);
    x.rows_mut(params.dim(), params.dim()).copy_from(test);
    logpdf(&joint, &x)
}

/// log p(e, t | same/different speaker) for a tied mixture with known
/// per-side components.
pub fn trial_loglik_tied(
    model: &TiedPldaParams,
    enroll: &DVector<f64>,
    test: &DVector<f64>,
    components: (usize, usize),
    same_speaker: bool,
) -> Result<f64> {
    let speakers = if same_speaker { [0, 0] } else { [0, 1] };
    let joint = build_joint_tied_mixture(model, &speakers, &[components.0, components.1])?;
    let dim = model.dim();
    let mut x = DVector::zeros(2 * dim);
    x.rows_mut(0, dim).copy_from(enroll);
    x.rows_mut(dim, dim).copy_from(test);
    logpdf(&joint, &x)
}
