//! On-disk JSON formats for systems, objectives and keys, with strict
//! validation on load.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{Isomorphism, SampleInfo, Scenario};
use crate::objective::ControlObjective;
use crate::sysmodel::BarePlant;

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("{what}: matrix must not be empty")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Parse(format!("{what}: matrix needs columns")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{what}: ragged rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parse(format!("{what}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn from_vec(v: &[f64], what: &str) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse(format!("{what}: non-finite entry")));
    }
    Ok(DVector::from_column_slice(v))
}

/// Plant description: `{"A": [[..]], "B": [[..]], "C": [[..]], "c": [..], "d": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub c_offset: Vec<f64>,
    pub d_offset: Vec<f64>,
}

// the JSON keys for the offsets are lowercase "c" and "d"
impl SystemFile {
    pub fn from_plant(plant: &BarePlant) -> Self {
        Self {
            a: to_rows(&plant.a),
            b: to_rows(&plant.b),
            c: to_rows(&plant.c),
            c_offset: plant.c_const.iter().copied().collect(),
            d_offset: plant.d_const.iter().copied().collect(),
        }
    }

    pub fn into_plant(&self) -> Result<BarePlant> {
        BarePlant::new(
            from_rows(&self.a, "A")?,
            from_rows(&self.b, "B")?,
            from_rows(&self.c, "C")?,
            from_vec(&self.c_offset, "c")?,
            from_vec(&self.d_offset, "d")?,
        )
    }
}

pub fn system_to_json(plant: &BarePlant) -> Result<String> {
    let f = SystemFile::from_plant(plant);
    let wire = serde_json::json!({
        "A": f.a,
        "B": f.b,
        "C": f.c,
        "c": f.c_offset,
        "d": f.d_offset,
    });
    Ok(serde_json::to_string_pretty(&wire)?)
}

pub fn system_from_json(text: &str) -> Result<BarePlant> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let get = |key: &str| -> Result<serde_json::Value> {
        v.get(key)
            .cloned()
            .ok_or_else(|| Error::Parse(format!("system file missing field {key}")))
    };
    let file = SystemFile {
        a: serde_json::from_value(get("A")?)?,
        b: serde_json::from_value(get("B")?)?,
        c: serde_json::from_value(get("C")?)?,
        c_offset: serde_json::from_value(get("c")?)?,
        d_offset: serde_json::from_value(get("d")?)?,
    };
    file.into_plant()
}

/// Objective description:
/// `{"M": [[..]], "D": [[..]], "x_ref": [[..]], "u_ref": [[..]], "N": int}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveFile {
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    pub x_ref: Vec<Vec<f64>>,
    pub u_ref: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub horizon: usize,
}

impl ObjectiveFile {
    pub fn from_objective(obj: &ControlObjective) -> Self {
        Self {
            m: to_rows(obj.cost_matrix()),
            d: to_rows(obj.constraints()),
            x_ref: obj.x_ref().iter().map(|x| x.iter().copied().collect()).collect(),
            u_ref: obj.u_ref().iter().map(|u| u.iter().copied().collect()).collect(),
            horizon: obj.horizon(),
        }
    }

    pub fn into_objective(&self) -> Result<ControlObjective> {
        let m = from_rows(&self.m, "M")?;
        let eta = m.ncols();
        let d = if self.d.is_empty() {
            DMatrix::zeros(0, eta)
        } else {
            from_rows(&self.d, "D")?
        };
        let x_ref = self
            .x_ref
            .iter()
            .map(|r| from_vec(r, "x_ref"))
            .collect::<Result<Vec<_>>>()?;
        let u_ref = self
            .u_ref
            .iter()
            .map(|r| from_vec(r, "u_ref"))
            .collect::<Result<Vec<_>>>()?;
        ControlObjective::new(m, x_ref, u_ref, d, self.horizon)
    }
}

pub fn objective_to_json(obj: &ControlObjective) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ObjectiveFile::from_objective(obj))?)
}

pub fn objective_from_json(text: &str) -> Result<ControlObjective> {
    let file: ObjectiveFile = serde_json::from_str(text)?;
    file.into_objective()
}

/// Key file: the isomorphism quadruple plus sampling provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFile {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    pub scenario: u8,
    pub seed: u64,
    pub condition_number: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_point_residual: Option<f64>,
    #[serde(default)]
    pub identity_fallback: bool,
}

impl KeyFile {
    pub fn from_parts(iso: &Isomorphism, scenario: Scenario, seed: u64, info: &SampleInfo) -> Self {
        Self {
            p: to_rows(iso.p()),
            f: to_rows(iso.f()),
            g: to_rows(iso.g()),
            s: to_rows(iso.s()),
            scenario: scenario.index(),
            seed,
            condition_number: info.condition_number,
            fixed_point_residual: info.fixed_point_residual,
            identity_fallback: info.identity_fallback,
        }
    }

    pub fn into_isomorphism(&self) -> Result<Isomorphism> {
        Isomorphism::new(
            from_rows(&self.p, "P")?,
            from_rows(&self.f, "F")?,
            from_rows(&self.g, "G")?,
            from_rows(&self.s, "S")?,
        )
    }
}

pub fn key_to_json(key: &KeyFile) -> Result<String> {
    Ok(serde_json::to_string_pretty(key)?)
}

pub fn key_from_json(text: &str) -> Result<KeyFile> {
    Ok(serde_json::from_str(text)?)
}
