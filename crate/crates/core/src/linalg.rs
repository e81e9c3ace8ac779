//! Shared dense linear algebra: guarded Cholesky factorizations, symmetric and
//! generalized symmetric eigensolves, and class scatter statistics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Cholesky of a symmetric positive-definite matrix.
///
/// On failure retries once with a `1e-10 * trace` ridge on the diagonal,
/// then errors. No other jitter is ever applied.
pub fn sym_pd_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    debug_assert_eq!(m.nrows(), m.ncols());
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let tr = m.trace();
    if !(tr.is_finite() && tr > 0.0) {
        return Err(Error::numerical(format!(
            "matrix is not positive definite (trace {tr})"
        )));
    }
    let mut ridged = m.clone();
    let eps = 1e-10 * tr;
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += eps;
    }
    Cholesky::new(ridged).ok_or_else(|| {
        Error::numerical("matrix is not positive definite even after ridge retry".to_string())
    })
}

/// log det of the factored matrix.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Multivariate normal log-density for a centered vector given the Cholesky
/// factor of the covariance.
pub fn mvn_logpdf_centered(chol: &Cholesky<f64, Dyn>, centered: &DVector<f64>) -> f64 {
    let n = centered.len() as f64;
    let solved = chol.solve(centered);
    let quad = centered.dot(&solved);
    -0.5 * (n * LN_2PI + chol_logdet(chol) + quad)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Column signs are fixed so the largest-magnitude entry of
/// each eigenvector is positive.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("non-finite eigenvalue")
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (pos, &src) in order.iter().enumerate() {
        vectors.set_column(pos, &eig.eigenvectors.column(src));
    }
    fix_column_signs(&mut vectors);
    (values, vectors)
}

/// Flips eigenvector columns so each one's largest-magnitude entry is positive.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Solves the generalized symmetric eigenproblem `B q = lambda W q` for
/// symmetric `B` and positive-definite `W`, returning eigenvalues in
/// descending order with the matching (unnormalized) eigenvectors as columns.
///
/// Reduction: with `W = L L^T`, the problem becomes the standard symmetric
/// eigenproblem for `L^-1 B L^-T`, and `q = L^-T u`.
pub fn generalized_symmetric_eigen(
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = sym_pd_cholesky(w)?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular Cholesky factor".to_string()))?;
    let reduced = &linv * symmetrize(b) * linv.transpose();
    let (values, u) = symmetric_eigen_desc(&reduced);
    let mut q = linv.transpose() * u;
    fix_column_signs(&mut q);
    Ok((values, q))
}

/// Per-class means of column-vector samples. `labels[i]` indexes the class of
/// column `i`; classes must be dense in `0..n_classes`.
pub fn class_means(
    vectors: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
) -> (DMatrix<f64>, Vec<usize>) {
    let mut means = DMatrix::zeros(vectors.nrows(), n_classes);
    let mut counts = vec![0usize; n_classes];
    for (i, &c) in labels.iter().enumerate() {
        let mut col = means.column_mut(c);
        col += vectors.column(i);
        counts[c] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            means.column_mut(c).scale_mut(1.0 / count as f64);
        }
    }
    (means, counts)
}

/// Pooled within-class covariance with the unbiased `N - S` divisor.
/// Errors when every class has a single sample.
pub fn within_class_covariance(
    vectors: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<DMatrix<f64>> {
    let n = vectors.ncols();
    if n <= n_classes {
        return Err(Error::data(
            "within-class covariance undefined: need at least one class with two samples"
                .to_string(),
        ));
    }
    let (means, _) = class_means(vectors, labels, n_classes);
    let dim = vectors.nrows();
    let mut scatter = DMatrix::zeros(dim, dim);
    for (i, &c) in labels.iter().enumerate() {
        let d = vectors.column(i) - means.column(c);
        scatter.ger(1.0, &d, &d, 1.0);
    }
    Ok(symmetrize(&(scatter / (n - n_classes) as f64)))
}

/// Covariance of the class means around their unweighted average, divisor `S`.
pub fn between_class_covariance(
    vectors: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
) -> DMatrix<f64> {
    let (means, _) = class_means(vectors, labels, n_classes);
    let grand = means.column_mean();
    let dim = vectors.nrows();
    let mut scatter = DMatrix::zeros(dim, dim);
    for c in 0..n_classes {
        let d = means.column(c) - &grand;
        scatter.ger(1.0, &d, &d, 1.0);
    }
    symmetrize(&(scatter / n_classes as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logdet_matches_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = sym_pd_cholesky(&m).unwrap();
        assert_relative_eq!(chol_logdet(&chol), (11.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn standard_normal_logpdf() {
        let chol = sym_pd_cholesky(&DMatrix::identity(1, 1)).unwrap();
        let x = DVector::from_element(1, 0.0);
        assert_relative_eq!(
            mvn_logpdf_centered(&chol, &x),
            -0.9189385332046727,
            max_relative = 1e-12
        );
    }

    #[test]
    fn eigen_descending_and_sign_fixed() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 5.0]);
        let (vals, vecs) = symmetric_eigen_desc(&m);
        assert_relative_eq!(vals[0], 5.0, max_relative = 1e-12);
        assert_relative_eq!(vals[1], 1.0, max_relative = 1e-12);
        assert!(vecs[(1, 0)] > 0.0);
        assert!(vecs[(0, 1)] > 0.0);
    }

    #[test]
    fn generalized_eigen_reduces_to_standard_for_identity_w() {
        let b = DMatrix::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let w = DMatrix::identity(3, 3);
        let (gen_vals, _) = generalized_symmetric_eigen(&b, &w).unwrap();
        let (std_vals, _) = symmetric_eigen_desc(&b);
        for i in 0..3 {
            assert_relative_eq!(gen_vals[i], std_vals[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn generalized_eigen_satisfies_pencil_equation() {
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let (vals, q) = generalized_symmetric_eigen(&b, &w).unwrap();
        for j in 0..2 {
            let lhs = &b * q.column(j);
            let rhs = &w * q.column(j) * vals[j];
            assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn within_class_single_sample_per_class_errors() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(within_class_covariance(&v, &[0, 1], 2).is_err());
    }

    #[test]
    fn scatter_matrices_on_axis_separated_classes() {
        // class 0 at x = -1, class 1 at x = +1, within-class spread on y only
        let v = DMatrix::from_columns(&[
            DVector::from_vec(vec![-1.0, 0.5]),
            DVector::from_vec(vec![-1.0, -0.5]),
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::from_vec(vec![1.0, -0.5]),
        ]);
        let labels = [0, 0, 1, 1];
        let b = between_class_covariance(&v, &labels, 2);
        let w = within_class_covariance(&v, &labels, 2).unwrap();
        assert_relative_eq!(b[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(b[(1, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(w[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(w[(1, 1)], 0.5, max_relative = 1e-12);
    }
}
