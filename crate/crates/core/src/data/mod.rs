//! Domain types shared by every back-end: labeled vector datasets, model
//! parameter sets, trial lists and score sets, plus their file formats.

mod model_json;
mod tsv;

pub use model_json::{read_model, write_model};
pub use tsv::{
    read_dataset, read_scores, read_trials, write_dataset, write_scores, write_trials,
};

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense string-to-index labeling in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelIndex {
    names: Vec<String>,
    assignments: Vec<usize>,
}

impl LabelIndex {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut uniq = Vec::new();
        let mut assignments = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let idx = *seen.entry(n.to_string()).or_insert_with(|| {
                uniq.push(n.to_string());
                uniq.len() - 1
            });
            assignments.push(idx);
        }
        LabelIndex {
            names: uniq,
            assignments,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Fixed-length sample vectors with per-sample speaker labels and optional
/// per-sample condition labels. Samples are the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    vectors: DMatrix<f64>,
    sample_ids: Vec<String>,
    speakers: LabelIndex,
    conditions: Option<LabelIndex>,
}

impl LabeledDataset {
    pub fn new(
        vectors: DMatrix<f64>,
        sample_ids: Vec<String>,
        speakers: LabelIndex,
        conditions: Option<LabelIndex>,
    ) -> Result<Self> {
        let n = vectors.ncols();
        if n == 0 || vectors.nrows() == 0 {
            return Err(Error::data("dataset must contain at least one sample"));
        }
        if sample_ids.len() != n || speakers.assignments().len() != n {
            return Err(Error::data("sample ids, labels and vectors must agree in length"));
        }
        if let Some(c) = &conditions {
            if c.assignments().len() != n {
                return Err(Error::data("condition labels must cover every sample"));
            }
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("dataset contains non-finite values"));
        }
        let mut seen = HashMap::new();
        for (i, id) in sample_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), i) {
                return Err(Error::data(format!(
                    "duplicate sample id '{id}' (samples {prev} and {i})"
                )));
            }
        }
        Ok(LabeledDataset {
            vectors,
            sample_ids,
            speakers,
            conditions,
        })
    }

    /// Sample dimension.
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn speakers(&self) -> &LabelIndex {
        &self.speakers
    }

    pub fn conditions(&self) -> Option<&LabelIndex> {
        self.conditions.as_ref()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.n_classes()
    }

    /// Condition labels, or an error for back-ends that require them.
    pub fn require_conditions(&self) -> Result<&LabelIndex> {
        self.conditions
            .as_ref()
            .ok_or_else(|| Error::data("dataset has no condition labels"))
    }

    /// Map from sample id to column index.
    pub fn id_lookup(&self) -> HashMap<&str, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// New dataset restricted to the given columns (labels re-indexed densely,
    /// first-appearance order preserved).
    pub fn subset(&self, keep: &[usize]) -> Result<LabeledDataset> {
        let cols: Vec<_> = keep.iter().map(|&i| self.vectors.column(i)).collect();
        let vectors = DMatrix::from_columns(&cols);
        let sample_ids = keep.iter().map(|&i| self.sample_ids[i].clone()).collect();
        let speakers = LabelIndex::from_names(
            &keep
                .iter()
                .map(|&i| self.speakers.name(self.speakers.assignments()[i]))
                .collect::<Vec<_>>(),
        );
        let conditions = self.conditions.as_ref().map(|c| {
            LabelIndex::from_names(
                &keep
                    .iter()
                    .map(|&i| c.name(c.assignments()[i]))
                    .collect::<Vec<_>>(),
            )
        });
        LabeledDataset::new(vectors, sample_ids, speakers, conditions)
    }

    /// Replace the vectors (e.g. after preprocessing); labels carry over.
    pub fn with_vectors(&self, vectors: DMatrix<f64>) -> Result<LabeledDataset> {
        if vectors.ncols() != self.len() {
            return Err(Error::data("replacement vectors must keep the sample count"));
        }
        LabeledDataset::new(
            vectors,
            self.sample_ids.clone(),
            self.speakers.clone(),
            self.conditions.clone(),
        )
    }
}

/// Parameters of a single PLDA component: noise is parameterized by its
/// precision `d` (never the covariance), with an optional diagonal constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaParams {
    mu: DVector<f64>,
    v: DMatrix<f64>,
    u: DMatrix<f64>,
    d: DMatrix<f64>,
    d_diagonal: bool,
}

impl PldaParams {
    pub fn new(
        mu: DVector<f64>,
        v: DMatrix<f64>,
        u: DMatrix<f64>,
        d: DMatrix<f64>,
        d_diagonal: bool,
    ) -> Result<Self> {
        let dim = mu.len();
        if dim == 0 {
            return Err(Error::invalid_arg("sample dimension must be at least 1"));
        }
        if v.nrows() != dim || u.nrows() != dim || d.nrows() != dim || d.ncols() != dim {
            return Err(Error::invalid_arg(format!(
                "parameter shapes disagree with dimension {dim}: V {}x{}, U {}x{}, D {}x{}",
                v.nrows(),
                v.ncols(),
                u.nrows(),
                u.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        if v.ncols() == 0 || v.ncols() > dim {
            return Err(Error::invalid_arg(format!(
                "speaker rank {} must be in 1..={dim}",
                v.ncols()
            )));
        }
        if u.ncols() > dim {
            return Err(Error::invalid_arg(format!(
                "channel rank {} must be at most {dim}",
                u.ncols()
            )));
        }
        let params = PldaParams {
            mu,
            v,
            u,
            d,
            d_diagonal,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.d;
        let dim = d.nrows();
        for i in 0..dim {
            for j in 0..i {
                if (d[(i, j)] - d[(j, i)]).abs() > 1e-9 * d[(i, i)].abs().max(1.0) {
                    return Err(Error::invalid_arg("noise precision must be symmetric"));
                }
                if self.d_diagonal && (d[(i, j)] != 0.0 || d[(j, i)] != 0.0) {
                    return Err(Error::invalid_arg(
                        "diagonal flag set but noise precision has off-diagonal entries",
                    ));
                }
            }
        }
        if self.mu.iter().any(|v| !v.is_finite())
            || self.v.iter().any(|v| !v.is_finite())
            || self.u.iter().any(|v| !v.is_finite())
            || d.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid_arg("model parameters contain non-finite values"));
        }
        crate::linalg::sym_pd_cholesky(d)
            .map_err(|_| Error::invalid_arg("noise precision must be positive definite"))?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn r_y(&self) -> usize {
        self.v.ncols()
    }

    pub fn r_x(&self) -> usize {
        self.u.ncols()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Noise precision.
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn d_diagonal(&self) -> bool {
        self.d_diagonal
    }

    /// Noise covariance `D^-1`.
    pub fn noise_covariance(&self) -> Result<DMatrix<f64>> {
        if self.d_diagonal {
            let mut cov = DMatrix::zeros(self.dim(), self.dim());
            for i in 0..self.dim() {
                cov[(i, i)] = 1.0 / self.d[(i, i)];
            }
            Ok(cov)
        } else {
            let chol = crate::linalg::sym_pd_cholesky(&self.d)?;
            Ok(chol.inverse())
        }
    }
}

/// Mixture of PLDA components sharing one speaker variable; conditions are
/// routed to components by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedPldaParams {
    components: Vec<PldaParams>,
    condition_to_component: BTreeMap<String, usize>,
}

impl TiedPldaParams {
    pub fn new(
        components: Vec<PldaParams>,
        condition_to_component: BTreeMap<String, usize>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid_arg("tied model needs at least one component"));
        }
        let dim = components[0].dim();
        let r_y = components[0].r_y();
        for (k, c) in components.iter().enumerate() {
            if c.dim() != dim || c.r_y() != r_y {
                return Err(Error::invalid_arg(format!(
                    "component {k} disagrees in dimension or speaker rank"
                )));
            }
        }
        for (name, &k) in &condition_to_component {
            if k >= components.len() {
                return Err(Error::invalid_arg(format!(
                    "condition '{name}' maps to missing component {k}"
                )));
            }
        }
        Ok(TiedPldaParams {
            components,
            condition_to_component,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, k: usize) -> &PldaParams {
        &self.components[k]
    }

    pub fn components(&self) -> &[PldaParams] {
        &self.components
    }

    pub fn condition_to_component(&self) -> &BTreeMap<String, usize> {
        &self.condition_to_component
    }

    pub fn component_of_condition(&self, name: &str) -> Result<usize> {
        self.condition_to_component
            .get(name)
            .copied()
            .ok_or_else(|| Error::data(format!("condition '{name}' has no mixture component")))
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn r_y(&self) -> usize {
        self.components[0].r_y()
    }
}

/// A trained model of any variant, as persisted to model JSON.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Splda(PldaParams),
    Fplda(PldaParams),
    Tplda(TiedPldaParams),
    Jplda(PldaParams),
}

impl Model {
    pub fn variant_name(&self) -> &'static str {
        match self {
            Model::Splda(_) => "splda",
            Model::Fplda(_) => "fplda",
            Model::Tplda(_) => "tplda",
            Model::Jplda(_) => "jplda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialKey {
    Target,
    Impostor,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CondTag {
    Same,
    Cross,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub key: TrialKey,
    pub cond: CondTag,
}

/// Enroll/test pairs with optional target and same/cross-condition keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, t) in trials.iter().enumerate() {
            let k = (t.enroll_id.as_str(), t.test_id.as_str());
            if let Some(prev) = seen.insert(k, i) {
                return Err(Error::data(format!(
                    "duplicate trial ({}, {}) at rows {prev} and {i}",
                    t.enroll_id, t.test_id
                )));
            }
        }
        Ok(TrialList { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub log_lr: f64,
}

/// Per-trial natural-log likelihood ratios, one row per trial.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    scores: Vec<TrialScore>,
}

impl ScoreSet {
    pub fn new(scores: Vec<TrialScore>) -> Result<Self> {
        for s in &scores {
            if !s.log_lr.is_finite() {
                return Err(Error::data(format!(
                    "non-finite score for trial ({}, {})",
                    s.enroll_id, s.test_id
                )));
            }
        }
        Ok(ScoreSet { scores })
    }

    pub fn scores(&self) -> &[TrialScore] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.log_lr).collect()
    }
}
