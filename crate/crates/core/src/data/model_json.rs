//! Model persistence. JSON schema: `variant`, `ry`, `rx`, `d_diagonal`,
//! `mu`, `V`, `U`, `D` for the single-component variants; tied models carry a
//! `components` array plus a `condition_to_component` map instead.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Model, PldaParams, TiedPldaParams};

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str, ncols: usize) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::data(format!(
                "{what}: row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    ry: usize,
    rx: usize,
    d_diagonal: bool,
    mu: Vec<f64>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
}

impl ComponentJson {
    fn from_params(p: &PldaParams) -> Self {
        ComponentJson {
            ry: p.r_y(),
            rx: p.r_x(),
            d_diagonal: p.d_diagonal(),
            mu: p.mu().iter().copied().collect(),
            v: matrix_to_rows(p.v()),
            u: matrix_to_rows(p.u()),
            d: matrix_to_rows(p.d()),
        }
    }

    fn into_params(self) -> Result<PldaParams> {
        let dim = self.mu.len();
        let v = rows_to_matrix(&self.v, "V", self.ry)?;
        let u = rows_to_matrix(&self.u, "U", self.rx)?;
        let d = rows_to_matrix(&self.d, "D", dim)?;
        if v.nrows() != dim || u.nrows() != dim || d.nrows() != dim {
            return Err(Error::data(format!(
                "stored matrices disagree with mu dimension {dim}"
            )));
        }
        PldaParams::new(DVector::from_vec(self.mu), v, u, d, self.d_diagonal)
            .map_err(|e| Error::data(format!("invalid stored model: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    variant: String,
    ry: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rx: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_diagonal: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<Vec<f64>>,
    #[serde(rename = "V", skip_serializing_if = "Option::is_none")]
    v: Option<Vec<Vec<f64>>>,
    #[serde(rename = "U", skip_serializing_if = "Option::is_none")]
    u: Option<Vec<Vec<f64>>>,
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    d: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<Vec<ComponentJson>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    condition_to_component: Option<BTreeMap<String, usize>>,
}

fn single_to_json(variant: &str, p: &PldaParams) -> ModelJson {
    let c = ComponentJson::from_params(p);
    ModelJson {
        variant: variant.to_string(),
        ry: c.ry,
        rx: Some(c.rx),
        d_diagonal: Some(c.d_diagonal),
        mu: Some(c.mu),
        v: Some(c.v),
        u: Some(c.u),
        d: Some(c.d),
        components: None,
        condition_to_component: None,
    }
}

fn single_from_json(j: ModelJson) -> Result<PldaParams> {
    let c = ComponentJson {
        ry: j.ry,
        rx: j.rx.ok_or_else(|| Error::data("model file missing 'rx'"))?,
        d_diagonal: j
            .d_diagonal
            .ok_or_else(|| Error::data("model file missing 'd_diagonal'"))?,
        mu: j.mu.ok_or_else(|| Error::data("model file missing 'mu'"))?,
        v: j.v.ok_or_else(|| Error::data("model file missing 'V'"))?,
        u: j.u.ok_or_else(|| Error::data("model file missing 'U'"))?,
        d: j.d.ok_or_else(|| Error::data("model file missing 'D'"))?,
    };
    c.into_params()
}

pub fn write_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = match model {
        Model::Splda(p) => single_to_json("splda", p),
        Model::Fplda(p) => single_to_json("fplda", p),
        Model::Jplda(p) => single_to_json("jplda", p),
        Model::Tplda(t) => ModelJson {
            variant: "tplda".to_string(),
            ry: t.r_y(),
            rx: None,
            d_diagonal: None,
            mu: None,
            v: None,
            u: None,
            d: None,
            components: Some(t.components().iter().map(ComponentJson::from_params).collect()),
            condition_to_component: Some(t.condition_to_component().clone()),
        },
    };
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), &json)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let json: ModelJson = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    match json.variant.as_str() {
        "splda" => {
            let p = single_from_json(json)?;
            if p.r_x() != 0 {
                return Err(Error::data("splda model must have channel rank 0"));
            }
            Ok(Model::Splda(p))
        }
        "fplda" => Ok(Model::Fplda(single_from_json(json)?)),
        "jplda" => Ok(Model::Jplda(single_from_json(json)?)),
        "tplda" => {
            let comps = json
                .components
                .ok_or_else(|| Error::data("tplda model file missing 'components'"))?;
            let map = json
                .condition_to_component
                .ok_or_else(|| Error::data("tplda model file missing 'condition_to_component'"))?;
            let declared_ry = json.ry;
            let components: Vec<PldaParams> = comps
                .into_iter()
                .map(ComponentJson::into_params)
                .collect::<Result<_>>()?;
            if components.iter().any(|c| c.r_y() != declared_ry) {
                return Err(Error::data("component speaker rank disagrees with declared 'ry'"));
            }
            Ok(Model::Tplda(TiedPldaParams::new(components, map)?))
        }
        other => Err(Error::data(format!("unknown model variant '{other}'"))),
    }
}
