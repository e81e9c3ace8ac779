//! Front-end transform applied to vectors before PLDA: a multiclass LDA
//! projection fit on speaker labels, then centering at the training mean and
//! length normalization. Fit once on training data and frozen.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{
    between_class_covariance, fix_column_signs, generalized_symmetric_eigen,
    within_class_covariance,
};

/// LDA projection plus the projected training mean. Applying the pipeline
/// yields unit-norm vectors (or the zero vector for inputs that project onto
/// the stored mean).
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessPipeline {
    /// input_dim x output_dim; columns are discriminant directions
    lda: DMatrix<f64>,
    /// mean of the projected training data
    mean: DVector<f64>,
}

impl PreprocessPipeline {
    pub fn input_dim(&self) -> usize {
        self.lda.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.ncols()
    }

    pub fn lda(&self) -> &DMatrix<f64> {
        &self.lda
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Transforms one vector: project, center, length-normalize.
    pub fn apply_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::data(format!(
                "input dimension {} does not match pipeline input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let projected = self.lda.transpose() * x - &self.mean;
        let norm = projected.norm();
        if norm == 0.0 {
            log::warn!("vector projects onto the training mean; emitting the zero vector");
            return Ok(projected);
        }
        Ok(projected / norm)
    }

    /// Transforms every column of a sample matrix.
    pub fn apply_matrix(&self, vectors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.output_dim(), vectors.ncols());
        for i in 0..vectors.ncols() {
            let y = self.apply_vector(&vectors.column(i).clone_owned())?;
            out.set_column(i, &y);
        }
        Ok(out)
    }

    /// Transforms a dataset, keeping ids and labels.
    pub fn apply(&self, dataset: &LabeledDataset) -> Result<LabeledDataset> {
        dataset.with_vectors(self.apply_matrix(dataset.vectors())?)
    }
}

/// Fits the LDA directions from the generalized eigenproblem
/// `B q = lambda W q` over speaker scatter matrices, keeping the `output_dim`
/// largest eigenvalues. The within-class scatter always receives a
/// `1e-6 * trace(W) / dim` ridge before the solve; columns are normalized to
/// unit Euclidean norm with the largest-magnitude entry positive.
pub fn fit_lda(dataset: &LabeledDataset, output_dim: usize) -> Result<PreprocessPipeline> {
    let dim = dataset.dim();
    let n_speakers = dataset.n_speakers();
    if n_speakers < 2 {
        return Err(Error::data("LDA needs at least two speakers"));
    }
    let max_reduced = dim.min(n_speakers - 1);
    if output_dim == 0 || (output_dim > max_reduced && output_dim != dim) {
        return Err(Error::invalid_arg(format!(
            "LDA dimension {output_dim} must be in 1..={max_reduced} or exactly {dim} (no reduction)"
        )));
    }

    let labels = dataset.speakers().assignments();
    let between = between_class_covariance(dataset.vectors(), labels, n_speakers);
    let mut within = within_class_covariance(dataset.vectors(), labels, n_speakers)?;
    let ridge = 1e-6 * within.trace() / dim as f64;
    for i in 0..dim {
        within[(i, i)] += ridge;
    }

    let (_, q) = generalized_symmetric_eigen(&between, &within)
        .map_err(|_| Error::numerical("within-class scatter is singular even after ridge"))?;
    let mut lda = q.columns(0, output_dim).clone_owned();
    for mut col in lda.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::numerical("degenerate LDA direction"));
        }
        col /= norm;
    }
    fix_column_signs(&mut lda);

    let projected = lda.transpose() * dataset.vectors();
    let mean = projected.column_mean();
    Ok(PreprocessPipeline { lda, mean })
}

#[derive(Serialize, Deserialize)]
struct PipelineJson {
    input_dim: usize,
    output_dim: usize,
    lda: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

pub fn write_pipeline(pipeline: &PreprocessPipeline, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = PipelineJson {
        input_dim: pipeline.input_dim(),
        output_dim: pipeline.output_dim(),
        lda: (0..pipeline.lda.nrows())
            .map(|i| (0..pipeline.lda.ncols()).map(|j| pipeline.lda[(i, j)]).collect())
            .collect(),
        mean: pipeline.mean.iter().copied().collect(),
    };
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), &json)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_pipeline(path: impl AsRef<Path>) -> Result<PreprocessPipeline> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let json: PipelineJson = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if json.lda.len() != json.input_dim
        || json.lda.iter().any(|r| r.len() != json.output_dim)
        || json.mean.len() != json.output_dim
    {
        return Err(Error::data("pipeline file shapes disagree with declared dims"));
    }
    let lda = DMatrix::from_fn(json.input_dim, json.output_dim, |i, j| json.lda[i][j]);
    Ok(PreprocessPipeline {
        lda,
        mean: DVector::from_vec(json.mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelIndex;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dataset(cols: Vec<DVector<f64>>, speakers: Vec<&str>) -> LabeledDataset {
        let ids: Vec<String> = (0..cols.len()).map(|i| format!("s{i}")).collect();
        LabeledDataset::new(
            DMatrix::from_columns(&cols),
            ids,
            LabelIndex::from_names(&speakers),
            None,
        )
        .unwrap()
    }

    fn random_dataset(seed: u64, dim: usize, n_speakers: usize, per_speaker: usize) -> LabeledDataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut cols = Vec::new();
        let mut speakers = Vec::new();
        let offsets: Vec<DVector<f64>> = (0..n_speakers)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        for (s, off) in offsets.iter().enumerate() {
            for _ in 0..per_speaker {
                cols.push(off + DVector::from_fn(dim, |_, _| rng.random_range(-0.5..0.5)));
                speakers.push(format!("spk{s}"));
            }
        }
        let speakers_ref: Vec<&str> = speakers.iter().map(|s| s.as_str()).collect();
        let ids: Vec<String> = (0..cols.len()).map(|i| format!("s{i}")).collect();
        LabeledDataset::new(
            DMatrix::from_columns(&cols),
            ids,
            LabelIndex::from_names(&speakers_ref),
            None,
        )
        .unwrap()
    }

    #[test]
    fn axis_aligned_two_speaker_projection() {
        // speakers separated along axis 0, uncorrelated within-class noise
        let jit0 = [0.2, -0.2, 0.1, -0.1];
        let jit1 = [0.1, 0.1, -0.1, -0.1];
        let mut cols = Vec::new();
        let mut speakers = Vec::new();
        for (k, name) in [(-2.0, "a"), (2.0, "b")] {
            for i in 0..jit0.len() {
                cols.push(DVector::from_vec(vec![k + jit0[i], jit1[i]]));
                speakers.push(name);
            }
        }
        let ds = dataset(cols, speakers);
        let p = fit_lda(&ds, 1).unwrap();
        let dir = p.lda().column(0);
        assert!(dir[0].abs() > 0.999, "direction {dir:?}");
        assert!(dir[1].abs() < 1e-8, "direction {dir:?}");
    }

    #[test]
    fn unit_norm_arithmetic_with_identity_projection() {
        let pipeline = PreprocessPipeline {
            lda: DMatrix::identity(2, 2),
            mean: DVector::zeros(2),
        };
        let out = pipeline.apply_vector(&DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_relative_eq!(out[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn input_at_mean_maps_to_zero() {
        let pipeline = PreprocessPipeline {
            lda: DMatrix::identity(2, 2),
            mean: DVector::from_vec(vec![1.0, -2.0]),
        };
        let out = pipeline.apply_vector(&DVector::from_vec(vec![1.0, -2.0])).unwrap();
        assert_eq!(out, DVector::zeros(2));
    }

    #[test]
    fn outputs_are_unit_norm() {
        let ds = random_dataset(1, 5, 4, 6);
        let pipeline = fit_lda(&ds, 3).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
            let y = pipeline.apply_vector(&x).unwrap();
            let n = y.norm();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-9, "norm {n}");
        }
    }

    #[test]
    fn full_dimension_keeps_rank() {
        let ds = random_dataset(3, 4, 3, 8);
        // output_dim = input dim is legal even though speakers - 1 < dim
        let pipeline = fit_lda(&ds, 4).unwrap();
        let out = pipeline.apply(&ds).unwrap();
        let svd = out.vectors().clone().svd(false, false);
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-9).count();
        assert_eq!(rank, 4);
    }

    #[test]
    fn dimension_limits_enforced() {
        let ds = random_dataset(4, 5, 3, 4);
        assert!(fit_lda(&ds, 2).is_ok());
        assert!(fit_lda(&ds, 3).is_err()); // > speakers - 1 but not full dim
        assert!(fit_lda(&ds, 5).is_ok()); // full dimension allowed
        assert!(fit_lda(&ds, 6).is_err());
        assert!(fit_lda(&ds, 0).is_err());
    }

    #[test]
    fn top_generalized_eigenvalue_matches_brute_force() {
        let ds = random_dataset(5, 5, 4, 6);
        let labels = ds.speakers().assignments();
        let b = between_class_covariance(ds.vectors(), labels, 4);
        let mut w = within_class_covariance(ds.vectors(), labels, 4).unwrap();
        let ridge = 1e-6 * w.trace() / 5.0;
        for i in 0..5 {
            w[(i, i)] += ridge;
        }
        // brute force: eigenvalues of W^-1 B via a plain dense solve
        let winv_b = w.clone().try_inverse().unwrap() * &b;
        let mut brute: Vec<f64> = winv_b
            .complex_eigenvalues()
            .iter()
            .map(|c| c.re)
            .collect();
        brute.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let (vals, _) = generalized_symmetric_eigen(&b, &w).unwrap();
        assert_relative_eq!(vals[0], brute[0], epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn eigenvalues_invariant_under_orthogonal_reembedding() {
        let ds = random_dataset(6, 4, 5, 6);
        let labels = ds.speakers().assignments();
        let mut rng = StdRng::seed_from_u64(7);
        let raw = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let rotated = ds.with_vectors(&q * ds.vectors()).unwrap();

        let spectrum = |d: &LabeledDataset| {
            let b = between_class_covariance(d.vectors(), labels, 5);
            let mut w = within_class_covariance(d.vectors(), labels, 5).unwrap();
            let ridge = 1e-6 * w.trace() / 4.0;
            for i in 0..4 {
                w[(i, i)] += ridge;
            }
            generalized_symmetric_eigen(&b, &w).unwrap().0
        };
        let a = spectrum(&ds);
        let bvals = spectrum(&rotated);
        for i in 0..4 {
            assert_relative_eq!(a[i], bvals[i], epsilon = 1e-9, max_relative = 1e-7);
        }
    }

    #[test]
    fn pipeline_json_round_trip() {
        let ds = random_dataset(8, 5, 4, 5);
        let pipeline = fit_lda(&ds, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_pipeline(&pipeline, &path).unwrap();
        let back = read_pipeline(&path).unwrap();
        assert_eq!(pipeline, back);
    }
}
