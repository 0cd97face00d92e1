//! Trial-style tabular data: the [`Dataset`] container, CSV ingestion with
//! dummy coding, and design-matrix construction with treatment interactions
//! and optional standardization.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subjects with covariates, a binary treatment and a binary outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    treatment: Vec<u8>,
    outcome: Vec<u8>,
    column_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        covariates: DMatrix<f64>,
        treatment: Vec<u8>,
        outcome: Vec<u8>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        for len in [treatment.len(), outcome.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        if column_names.len() != covariates.ncols() {
            return Err(Error::LengthMismatch {
                expected: covariates.ncols(),
                actual: column_names.len(),
            });
        }
        for (name, values) in [("treatment", &treatment), ("outcome", &outcome)] {
            if let Some(row) = values.iter().position(|&v| v > 1) {
                return Err(Error::NonBinary {
                    row,
                    column: name.into(),
                    value: values[row].to_string(),
                });
            }
        }
        for (j, col) in covariates.column_iter().enumerate() {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row,
                    column: column_names[j].clone(),
                });
            }
        }
        Ok(Dataset {
            covariates,
            treatment,
            outcome,
            column_names,
        })
    }

    /// Dataset with generic column names `x1..xp`.
    pub fn from_parts(covariates: DMatrix<f64>, treatment: Vec<u8>, outcome: Vec<u8>) -> Result<Self> {
        let names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(covariates, treatment, outcome, names)
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[u8] {
        &self.outcome
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn outcome_f64(&self) -> Vec<f64> {
        self.outcome.iter().map(|&y| f64::from(y)).collect()
    }

    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment.iter().map(|&a| f64::from(a)).collect()
    }

    /// Rows of one treatment arm, in original order.
    pub fn arm_rows(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatment[i] == arm).collect()
    }

    /// New dataset built from the given rows (repeats allowed, order kept).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let covariates = self.covariates.select_rows(rows.iter());
        let treatment = rows.iter().map(|&i| self.treatment[i]).collect();
        let outcome = rows.iter().map(|&i| self.outcome[i]).collect();
        Dataset::new(covariates, treatment, outcome, self.column_names.clone())
    }
}

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub treatment: String,
    pub outcome: String,
    /// Covariate columns in model order; `None` uses every other column in file order.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Columns forced to be dummy coded even when their values parse as numbers.
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl Schema {
    pub fn new(treatment: &str, outcome: &str) -> Self {
        Schema {
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates: None,
            categorical: Vec::new(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// How one source column became one or more covariate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateEncoding {
    Numeric { name: String },
    /// Dummy coded; `levels[0]` is the reference level.
    Categorical { name: String, levels: Vec<String> },
}

impl CovariateEncoding {
    fn source(&self) -> &str {
        match self {
            CovariateEncoding::Numeric { name } | CovariateEncoding::Categorical { name, .. } => name,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty()
        || t.eq_ignore_ascii_case("na")
        || t.eq_ignore_ascii_case("n/a")
        || t.eq_ignore_ascii_case("nan")
}

fn parse_binary(cell: &str, row: usize, column: &str) -> Result<u8> {
    let t = cell.trim();
    match t.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(Error::NonBinary {
            row,
            column: column.into(),
            value: t.into(),
        }),
    }
}

struct RawTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(RawTable { headers, rows })
}

impl RawTable {
    fn index_of(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("column `{name}` not in header")))
    }

    fn column(&self, idx: usize) -> impl Iterator<Item = (usize, &str)> {
        self.rows.iter().enumerate().map(move |(r, row)| (r, row[idx].as_str()))
    }

    fn check_missing(&self, idx: usize) -> Result<()> {
        for (row, cell) in self.column(idx) {
            if is_missing(cell) {
                return Err(Error::MissingValue {
                    row,
                    column: self.headers[idx].clone(),
                });
            }
        }
        Ok(())
    }
}

/// Covariate matrix plus expanded column names, following `encodings`.
fn encode_covariates(table: &RawTable, encodings: &[CovariateEncoding]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = table.rows.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for enc in encodings {
        let idx = table.index_of(enc.source())?;
        table.check_missing(idx)?;
        match enc {
            CovariateEncoding::Numeric { name } => {
                let mut col = Vec::with_capacity(n);
                for (row, cell) in table.column(idx) {
                    let v: f64 = cell.trim().parse().map_err(|_| {
                        Error::SchemaMismatch(format!("non-numeric value `{cell}` in numeric column `{name}`"))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            row,
                            column: name.clone(),
                        });
                    }
                    col.push(v);
                }
                columns.push(col);
                names.push(name.clone());
            }
            CovariateEncoding::Categorical { name, levels } => {
                let lookup: HashMap<&str, usize> =
                    levels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
                let mut dummies = vec![vec![0.0; n]; levels.len().saturating_sub(1)];
                for (row, cell) in table.column(idx) {
                    let level = *lookup.get(cell.trim()).ok_or_else(|| {
                        Error::SchemaMismatch(format!("unknown level `{cell}` in column `{name}`"))
                    })?;
                    if level > 0 {
                        dummies[level - 1][row] = 1.0;
                    }
                }
                for (k, col) in dummies.into_iter().enumerate() {
                    names.push(format!("{name}_{}", levels[k + 1]));
                    columns.push(col);
                }
            }
        }
    }
    let p = columns.len();
    let matrix = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    Ok((matrix, names))
}

/// Reads a dataset from CSV text and reports the covariate encoding used.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<(Dataset, Vec<CovariateEncoding>)> {
    let table = read_table(reader)?;
    if table.rows.is_empty() {
        return Err(Error::InvalidData("file has no data rows".into()));
    }
    if let Some(r) = table.rows.iter().position(|row| row.len() != table.headers.len()) {
        return Err(Error::SchemaMismatch(format!("row {r} has the wrong number of fields")));
    }
    let t_idx = table.index_of(&schema.treatment)?;
    let y_idx = table.index_of(&schema.outcome)?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => table
            .headers
            .iter()
            .filter(|h| **h != schema.treatment && **h != schema.outcome)
            .cloned()
            .collect(),
    };
    for name in &schema.categorical {
        if !covariate_names.contains(name) {
            return Err(Error::SchemaMismatch(format!("categorical column `{name}` is not a covariate")));
        }
    }

    let parse_arm = |idx: usize| -> Result<Vec<u8>> {
        table.check_missing(idx)?;
        table
            .column(idx)
            .map(|(row, cell)| parse_binary(cell, row, &table.headers[idx]))
            .collect()
    };
    let treatment = parse_arm(t_idx)?;
    let outcome = parse_arm(y_idx)?;

    let mut encodings = Vec::with_capacity(covariate_names.len());
    for name in &covariate_names {
        if *name == schema.treatment || *name == schema.outcome {
            return Err(Error::SchemaMismatch(format!("`{name}` used as covariate and as treatment/outcome")));
        }
        let idx = table.index_of(name)?;
        table.check_missing(idx)?;
        let numeric = table.column(idx).all(|(_, c)| c.trim().parse::<f64>().is_ok());
        if numeric && !schema.categorical.contains(name) {
            encodings.push(CovariateEncoding::Numeric { name: name.clone() });
        } else {
            let mut levels: Vec<String> = Vec::new();
            for (_, cell) in table.column(idx) {
                let l = cell.trim();
                if !levels.iter().any(|x| x == l) {
                    levels.push(l.to_string());
                }
            }
            encodings.push(CovariateEncoding::Categorical {
                name: name.clone(),
                levels,
            });
        }
    }
    let (covariates, names) = encode_covariates(&table, &encodings)?;
    Ok((Dataset::new(covariates, treatment, outcome, names)?, encodings))
}

/// Reads only the covariates of a CSV, applying a previously recorded encoding.
pub fn read_covariates<R: Read>(reader: R, encodings: &[CovariateEncoding]) -> Result<DMatrix<f64>> {
    let table = read_table(reader)?;
    Ok(encode_covariates(&table, encodings)?.0)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    Ok(read_csv(File::open(path)?, schema)?.0)
}

pub fn load_csv_with_encoding(path: impl AsRef<Path>, schema: &Schema) -> Result<(Dataset, Vec<CovariateEncoding>)> {
    read_csv(File::open(path)?, schema)
}

/// Writes covariates, then `treatment`, then `outcome`.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = data.column_names.iter().map(String::as_str).collect();
    header.extend(["treatment", "outcome"]);
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..data.p()).map(|j| data.covariates[(i, j)].to_string()).collect();
        rec.push(data.treatment[i].to_string());
        rec.push(data.outcome[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(data, File::create(path)?)
}

/// Which covariates enter the model and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub main_columns: Vec<usize>,
    /// Must be a subset of `main_columns`.
    pub interaction_columns: Vec<usize>,
    pub include_treatment: bool,
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
}

impl DesignSpec {
    /// Main effects for all `p` covariates plus treatment.
    pub fn homogeneous(p: usize) -> Self {
        DesignSpec {
            main_columns: (0..p).collect(),
            interaction_columns: Vec::new(),
            include_treatment: true,
            standardize: true,
            offset: None,
        }
    }

    /// Main effects and treatment interactions for all `p` covariates.
    pub fn full_interaction(p: usize) -> Self {
        DesignSpec {
            interaction_columns: (0..p).collect(),
            ..Self::homogeneous(p)
        }
    }

    /// Main effects only, no treatment column.
    pub fn mains_only(p: usize) -> Self {
        DesignSpec {
            include_treatment: false,
            ..Self::homogeneous(p)
        }
    }

    pub fn n_columns(&self) -> usize {
        1 + usize::from(self.include_treatment) + self.main_columns.len() + self.interaction_columns.len()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        for &j in self.main_columns.iter().chain(&self.interaction_columns) {
            if j >= p {
                return Err(Error::IndexOutOfRange { index: j, len: p });
            }
        }
        for &k in &self.interaction_columns {
            if !self.main_columns.contains(&k) || !self.include_treatment {
                return Err(Error::HierarchyViolation(k));
            }
        }
        Ok(())
    }

    /// Column roles in design order.
    pub fn roles(&self) -> Vec<ColumnRole> {
        let mut roles = vec![ColumnRole::Intercept];
        if self.include_treatment {
            roles.push(ColumnRole::Treatment);
        }
        roles.extend(self.main_columns.iter().map(|&j| ColumnRole::Main(j)));
        roles.extend(self.interaction_columns.iter().map(|&j| ColumnRole::Interaction(j)));
        roles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnRole {
    Intercept,
    Treatment,
    /// Main effect of covariate index.
    Main(usize),
    /// Treatment times covariate index.
    Interaction(usize),
}

impl ColumnRole {
    pub fn is_intercept(self) -> bool {
        matches!(self, ColumnRole::Intercept)
    }
}

/// Affine map applied to one design column: `stored = (raw - mean) / sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: f64,
    pub sd: f64,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling { mean: 0.0, sd: 1.0 };
}

/// Assembled model matrix `[1 | A | X_main | A*X_int]`.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    roles: Vec<ColumnRole>,
    scaling: Vec<Scaling>,
    offset: Option<Vec<f64>>,
    spec: DesignSpec,
}

/// Builds the raw (unstandardized) columns for `spec` with the given treatment values.
pub(crate) fn raw_columns(covariates: &DMatrix<f64>, treatment: &[f64], spec: &DesignSpec) -> DMatrix<f64> {
    let n = covariates.nrows();
    let roles = spec.roles();
    let mut x = DMatrix::zeros(n, roles.len());
    for (c, role) in roles.iter().enumerate() {
        let mut col = x.column_mut(c);
        match *role {
            ColumnRole::Intercept => col.fill(1.0),
            ColumnRole::Treatment => col.copy_from_slice(treatment),
            ColumnRole::Main(j) => col.copy_from(&covariates.column(j)),
            ColumnRole::Interaction(j) => {
                for i in 0..n {
                    col[i] = treatment[i] * covariates[(i, j)];
                }
            }
        }
    }
    x
}

pub fn build_design(data: &Dataset, spec: &DesignSpec) -> Result<DesignMatrix> {
    spec.validate(data.p())?;
    if let Some(off) = &spec.offset {
        if off.len() != data.n() {
            return Err(Error::LengthMismatch {
                expected: data.n(),
                actual: off.len(),
            });
        }
        if let Some(row) = off.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row,
                column: "offset".into(),
            });
        }
    }
    let mut x = raw_columns(data.covariates(), &data.treatment_f64(), spec);
    let roles = spec.roles();
    let n = x.nrows() as f64;
    let mut scaling = vec![Scaling::IDENTITY; roles.len()];
    if spec.standardize {
        for (c, role) in roles.iter().enumerate() {
            if role.is_intercept() {
                continue;
            }
            let mut col = x.column_mut(c);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            // constant columns are left untouched
            if sd <= 1e-12 * mean.abs().max(1.0) {
                continue;
            }
            col.apply(|v| *v = (*v - mean) / sd);
            scaling[c] = Scaling { mean, sd };
        }
    }
    Ok(DesignMatrix {
        x,
        roles,
        scaling,
        offset: spec.offset.clone(),
        spec: spec.clone(),
    })
}

impl DesignMatrix {
    /// Wraps an already assembled matrix; columns are taken as stored (no scaling).
    pub fn from_raw(x: DMatrix<f64>, spec: DesignSpec) -> Result<Self> {
        let roles = spec.roles();
        if roles.len() != x.ncols() {
            return Err(Error::LengthMismatch {
                expected: roles.len(),
                actual: x.ncols(),
            });
        }
        Ok(DesignMatrix {
            scaling: vec![Scaling::IDENTITY; roles.len()],
            offset: spec.offset.clone(),
            x,
            roles,
            spec,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn scaling(&self) -> &[Scaling] {
        &self.scaling
    }

    pub fn offset(&self) -> Option<&[f64]> {
        self.offset.as_deref()
    }

    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// The design with standardization undone.
    pub fn unstandardized(&self) -> DMatrix<f64> {
        let mut raw = self.x.clone();
        for (c, s) in self.scaling.iter().enumerate() {
            raw.column_mut(c).apply(|v| *v = *v * s.sd + s.mean);
        }
        raw
    }

    /// Subset of rows; scaling records are kept, so coefficients stay on the
    /// same standardized scale.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            x: self.x.select_rows(rows.iter()),
            roles: self.roles.clone(),
            scaling: self.scaling.clone(),
            offset: self.offset.as_ref().map(|o| rows.iter().map(|&i| o[i]).collect()),
            spec: DesignSpec {
                offset: None,
                ..self.spec.clone()
            },
        }
    }

    /// Linear predictor `X beta + offset` on the stored scale.
    pub fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut eta = &self.x * beta;
        if let Some(off) = &self.offset {
            for (e, o) in eta.iter_mut().zip(off) {
                *e += o;
            }
        }
        eta
    }
}

/// Fitted coefficients on the raw covariate scale, aligned with a [`DesignSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta0: f64,
    pub beta_t: Option<f64>,
    /// One per `main_columns` entry.
    pub beta_m: Vec<f64>,
    /// One per `interaction_columns` entry.
    pub beta_z: Vec<f64>,
}

impl Coefficients {
    /// Splits a design-ordered vector according to `roles`.
    pub fn from_vector(beta: &[f64], roles: &[ColumnRole]) -> Result<Self> {
        if beta.len() != roles.len() {
            return Err(Error::LengthMismatch {
                expected: roles.len(),
                actual: beta.len(),
            });
        }
        let mut c = Coefficients {
            beta0: 0.0,
            beta_t: None,
            beta_m: Vec::new(),
            beta_z: Vec::new(),
        };
        for (b, role) in beta.iter().zip(roles) {
            match role {
                ColumnRole::Intercept => c.beta0 = *b,
                ColumnRole::Treatment => c.beta_t = Some(*b),
                ColumnRole::Main(_) => c.beta_m.push(*b),
                ColumnRole::Interaction(_) => c.beta_z.push(*b),
            }
        }
        Ok(c)
    }

    /// Design-ordered vector `[beta0, beta_t?, beta_m.., beta_z..]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.beta0];
        v.extend(self.beta_t);
        v.extend(&self.beta_m);
        v.extend(&self.beta_z);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Linear predictor for new covariate rows with the given treatment values.
    pub fn linear_predictor(
        &self,
        covariates: &DMatrix<f64>,
        treatment: &[f64],
        spec: &DesignSpec,
        offset: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let n = covariates.nrows();
        if treatment.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: treatment.len(),
            });
        }
        spec.validate(covariates.ncols())?;
        if self.beta_m.len() != spec.main_columns.len()
            || self.beta_z.len() != spec.interaction_columns.len()
            || self.beta_t.is_some() != spec.include_treatment
        {
            return Err(Error::LengthMismatch {
                expected: spec.n_columns(),
                actual: self.to_vector().len(),
            });
        }
        let bt = self.beta_t.unwrap_or(0.0);
        let mut eta = vec![self.beta0; n];
        for (i, e) in eta.iter_mut().enumerate() {
            let a = treatment[i];
            *e += bt * a;
            for (b, &j) in self.beta_m.iter().zip(&spec.main_columns) {
                *e += b * covariates[(i, j)];
            }
            for (b, &j) in self.beta_z.iter().zip(&spec.interaction_columns) {
                *e += b * a * covariates[(i, j)];
            }
            if let Some(off) = offset {
                *e += off[i];
            }
        }
        Ok(eta)
    }
}

/// Maps a coefficient vector fitted on a standardized design back to the raw scale.
pub fn unstandardize_coefficients(beta_std: &[f64], scaling: &[Scaling], roles: &[ColumnRole]) -> Result<Coefficients> {
    if beta_std.len() != scaling.len() {
        return Err(Error::LengthMismatch {
            expected: scaling.len(),
            actual: beta_std.len(),
        });
    }
    let intercept = roles.iter().position(|r| r.is_intercept());
    let mut raw = beta_std.to_vec();
    let mut shift = 0.0;
    for (c, s) in scaling.iter().enumerate() {
        if Some(c) == intercept {
            continue;
        }
        raw[c] = beta_std[c] / s.sd;
        shift += raw[c] * s.mean;
    }
    if let Some(c0) = intercept {
        raw[c0] -= shift;
    }
    Coefficients::from_vector(&raw, roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 4.0 - 1.0);
        let a = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let y = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        Dataset::from_parts(x, a, y).unwrap()
    }

    #[test]
    fn loads_simple_file() {
        let text = "a,y,age\n0,1,3.5\n1,0,2\n1,1,-1\n";
        let (d, enc) = read_csv(text.as_bytes(), &Schema::new("a", "y")).unwrap();
        assert_eq!((d.n(), d.p()), (3, 1));
        assert_eq!(d.treatment(), &[0, 1, 1]);
        assert_eq!(d.outcome(), &[1, 0, 1]);
        assert_eq!(d.covariates()[(2, 0)], -1.0);
        assert_eq!(enc, vec![CovariateEncoding::Numeric { name: "age".into() }]);
    }

    #[test]
    fn non_binary_outcome_is_rejected() {
        let text = "a,y,age\n0,1,3.5\n1,2,2\n";
        let err = read_csv(text.as_bytes(), &Schema::new("a", "y")).unwrap_err();
        assert!(matches!(err, Error::NonBinary { row: 1, .. }), "{err:?}");
    }

    #[test]
    fn missing_cells_are_rejected() {
        for cell in ["", "NA", "nan"] {
            let text = format!("a,y,age\n0,1,{cell}\n1,0,2\n");
            let err = read_csv(text.as_bytes(), &Schema::new("a", "y")).unwrap_err();
            assert!(matches!(err, Error::MissingValue { row: 0, .. }), "{err:?}");
        }
    }

    #[test]
    fn unknown_column_is_schema_mismatch() {
        let mut schema = Schema::new("a", "y");
        schema.covariates = Some(vec!["weight".into()]);
        let err = read_csv("a,y,age\n0,1,1\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn three_level_categorical_dummies() {
        // levels first observed in order: mid, low, high
        let text = "a,y,grade\n0,0,mid\n1,1,low\n0,1,high\n1,0,mid\n0,0,low\n";
        let (d, enc) = read_csv(text.as_bytes(), &Schema::new("a", "y")).unwrap();
        assert_eq!(d.p(), 2);
        assert_eq!(d.column_names(), &["grade_low", "grade_high"]);
        let expected = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(d.covariates()[(i, 0)], row[0]);
            assert_eq!(d.covariates()[(i, 1)], row[1]);
        }
        match &enc[0] {
            CovariateEncoding::Categorical { levels, .. } => assert_eq!(levels, &["mid", "low", "high"]),
            e => panic!("{e:?}"),
        }
        // the recorded encoding reproduces the dummies on new data
        let x = read_covariates("grade\nhigh\nmid\n".as_bytes(), &enc).unwrap();
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(x.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn forced_categorical_numeric_column() {
        let mut schema = Schema::new("a", "y");
        schema.categorical = vec!["site".into()];
        let (d, _) = read_csv("a,y,site\n0,0,2\n1,1,1\n0,1,2\n".as_bytes(), &schema).unwrap();
        assert_eq!(d.column_names(), &["site_1"]);
        assert_eq!(d.covariates().column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = random_dataset(40, 3, 7);
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let (back, _) = read_csv(buf.as_slice(), &Schema::new("treatment", "outcome")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn design_without_interactions_is_plain_assembly() {
        let d = random_dataset(10, 3, 1);
        let spec = DesignSpec {
            standardize: false,
            ..DesignSpec::homogeneous(3)
        };
        let dm = build_design(&d, &spec).unwrap();
        assert_eq!(dm.ncols(), 5);
        for i in 0..10 {
            assert_eq!(dm.matrix()[(i, 0)], 1.0);
            assert_eq!(dm.matrix()[(i, 1)], f64::from(d.treatment()[i]));
            for j in 0..3 {
                assert_eq!(dm.matrix()[(i, 2 + j)], d.covariates()[(i, j)]);
            }
        }
    }

    #[test]
    fn full_interaction_column_count_and_products() {
        let p = 4;
        let d = random_dataset(12, p, 2);
        let spec = DesignSpec {
            standardize: false,
            ..DesignSpec::full_interaction(p)
        };
        let dm = build_design(&d, &spec).unwrap();
        assert_eq!(dm.ncols(), 2 + 2 * p);
        for i in 0..12 {
            for j in 0..p {
                let a = f64::from(d.treatment()[i]);
                assert_eq!(dm.matrix()[(i, 2 + p + j)], a * d.covariates()[(i, j)]);
            }
        }
    }

    #[test]
    fn design_errors() {
        let d = random_dataset(5, 2, 3);
        let mut spec = DesignSpec::homogeneous(2);
        spec.main_columns = vec![0, 5];
        assert!(matches!(build_design(&d, &spec), Err(Error::IndexOutOfRange { index: 5, .. })));
        let mut spec = DesignSpec::homogeneous(2);
        spec.main_columns = vec![0];
        spec.interaction_columns = vec![1];
        assert!(matches!(build_design(&d, &spec), Err(Error::HierarchyViolation(1))));
        let mut spec = DesignSpec::full_interaction(2);
        spec.include_treatment = false;
        assert!(matches!(build_design(&d, &spec), Err(Error::HierarchyViolation(_))));
        let mut spec = DesignSpec::homogeneous(2);
        spec.offset = Some(vec![0.0; 4]);
        assert!(matches!(build_design(&d, &spec), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn standardized_columns_have_unit_scale_and_round_trip() {
        let d = random_dataset(200, 5, 4);
        let spec = DesignSpec::full_interaction(5);
        let dm = build_design(&d, &spec).unwrap();
        let n = 200.0;
        for c in 1..dm.ncols() {
            let col = dm.matrix().column(c);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        }
        let raw = raw_columns(d.covariates(), &d.treatment_f64(), &spec);
        let back = dm.unstandardized();
        assert!((back - raw).amax() < 1e-12);
    }

    #[test]
    fn offset_passes_through() {
        let d = random_dataset(6, 1, 5);
        let off = vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0];
        let spec = DesignSpec {
            offset: Some(off.clone()),
            ..DesignSpec::homogeneous(1)
        };
        let dm = build_design(&d, &spec).unwrap();
        assert_eq!(dm.offset().unwrap(), off.as_slice());
    }

    #[test]
    fn identity_scaling_leaves_coefficients() {
        let roles = DesignSpec::homogeneous(2).roles();
        let beta = [0.3, -1.0, 2.0, 0.5];
        let c = unstandardize_coefficients(&beta, &[Scaling::IDENTITY; 4], &roles).unwrap();
        assert_eq!(c.to_vector(), beta.to_vec());
        assert!(matches!(
            unstandardize_coefficients(&beta[..3], &[Scaling::IDENTITY; 4], &roles),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn single_column_unstandardize_algebra() {
        let (m, s) = (2.5, 4.0);
        let roles = DesignSpec::mains_only(1).roles();
        let scaling = [Scaling::IDENTITY, Scaling { mean: m, sd: s }];
        let (b0, b1) = (-0.7, 1.3);
        let c = unstandardize_coefficients(&[b0, b1], &scaling, &roles).unwrap();
        assert!((c.beta_m[0] - b1 / s).abs() < 1e-15);
        assert!((c.beta0 - (b0 - b1 * m / s)).abs() < 1e-15);
        // numeric check at a few raw points
        for x in [-3.0, 0.0, 2.5, 10.0] {
            let std_eta = b0 + b1 * (x - m) / s;
            let raw_eta = c.beta0 + c.beta_m[0] * x;
            assert!((std_eta - raw_eta).abs() < 1e-12);
        }
    }

    #[test]
    fn unstandardize_preserves_linear_predictor() {
        let d = random_dataset(50, 5, 6);
        let spec = DesignSpec::full_interaction(5);
        let dm = build_design(&d, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let beta = DVector::from_fn(dm.ncols(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let c = unstandardize_coefficients(beta.as_slice(), dm.scaling(), dm.roles()).unwrap();
        let std_eta = dm.linear_predictor(&beta);
        let raw_eta = c
            .linear_predictor(d.covariates(), &d.treatment_f64(), &spec, None)
            .unwrap();
        for (a, b) in std_eta.iter().zip(&raw_eta) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_dataset_construction() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(Dataset::from_parts(x.clone(), vec![0, 3], vec![0, 1]).is_err());
        assert!(Dataset::from_parts(x.clone(), vec![0], vec![0, 1]).is_err());
        let bad = DMatrix::from_element(2, 1, f64::NAN);
        assert!(matches!(
            Dataset::from_parts(bad, vec![0, 1], vec![0, 1]),
            Err(Error::NonFinite { .. })
        ));
    }
}
