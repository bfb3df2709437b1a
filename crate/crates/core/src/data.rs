//! Typed observations: covariates split by distributional role, the response,
//! exposure and claim-count weights, plus regression design matrices and CSV I/O.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;

/// How a covariate's marginal distribution is modeled within each component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateRole {
    Gaussian,
    Lognormal,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub role: CovariateRole,
    /// Ordered category labels; only used by discrete covariates. The first is the reference level.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl CovariateSpec {
    pub fn gaussian(name: impl Into<String>) -> Self {
        Self { name: name.into(), role: CovariateRole::Gaussian, levels: Vec::new() }
    }

    pub fn lognormal(name: impl Into<String>) -> Self {
        Self { name: name.into(), role: CovariateRole::Lognormal, levels: Vec::new() }
    }

    pub fn discrete<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            role: CovariateRole::Discrete,
            levels: levels.into_iter().map(Into::into).collect(),
        }
    }
}

/// Names of the non-covariate columns, kept so a dataset can be written back out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub response: String,
    pub exposure: Option<String>,
    pub claim_weights: Option<String>,
}

/// Immutable observation table.
///
/// Continuous covariates are stored by role in `n x p` blocks (`gaussian`,
/// `lognormal`); discrete covariates hold a zero-based level index per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    covariates: Vec<CovariateSpec>,
    slot: Vec<usize>,
    gaussian: DMatrix<f64>,
    lognormal: DMatrix<f64>,
    log_lognormal: DMatrix<f64>,
    discrete: Vec<Vec<usize>>,
    response: Vec<f64>,
    exposure: Vec<f64>,
    claim_weights: Vec<f64>,
    columns: ColumnNames,
}

enum ColumnData {
    Real(Vec<f64>),
    Levels(Vec<usize>),
}

/// Incremental constructor for [`Dataset`]; all validation happens in [`DatasetBuilder::build`].
#[derive(Default)]
pub struct DatasetBuilder {
    covariates: Vec<(CovariateSpec, ColumnData)>,
    response: Option<(String, Vec<f64>)>,
    exposure: Option<(String, Vec<f64>)>,
    claim_weights: Option<(String, Vec<f64>)>,
}

impl DatasetBuilder {
    pub fn gaussian(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.covariates.push((CovariateSpec::gaussian(name), ColumnData::Real(values)));
        self
    }

    pub fn lognormal(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.covariates.push((CovariateSpec::lognormal(name), ColumnData::Real(values)));
        self
    }

    /// Adds a discrete covariate; `indices` are zero-based positions into `levels`.
    pub fn discrete<S: Into<String>>(
        mut self,
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
        indices: Vec<usize>,
    ) -> Self {
        self.covariates.push((CovariateSpec::discrete(name, levels), ColumnData::Levels(indices)));
        self
    }

    pub fn covariate_real(mut self, spec: CovariateSpec, values: Vec<f64>) -> Self {
        self.covariates.push((spec, ColumnData::Real(values)));
        self
    }

    pub fn response(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.response = Some((name.into(), values));
        self
    }

    pub fn exposure(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.exposure = Some((name.into(), values));
        self
    }

    pub fn claim_weights(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.claim_weights = Some((name.into(), values));
        self
    }

    pub fn build(self) -> Result<Dataset, DataError> {
        let (response_name, response) = self.response.ok_or(DataError::NoResponse)?;
        let n = response.len();
        let mut seen = HashSet::new();
        seen.insert(response_name.clone());
        for (row, &y) in response.iter().enumerate() {
            if !y.is_finite() {
                return Err(DataError::NonFinite { name: response_name, row, value: y });
            }
        }

        let check_len = |name: &str, got: usize| {
            if got != n {
                Err(DataError::LengthMismatch { name: name.to_string(), got, expected: n })
            } else {
                Ok(())
            }
        };

        let mut exposure_name = None;
        let exposure = match self.exposure {
            Some((name, values)) => {
                check_len(&name, values.len())?;
                for (row, &e) in values.iter().enumerate() {
                    if !(e > 0.0) || !e.is_finite() {
                        return Err(DataError::NonPositive { name, row, value: e });
                    }
                }
                if !seen.insert(name.clone()) {
                    return Err(DataError::DuplicateName(name));
                }
                exposure_name = Some(name);
                values
            }
            None => vec![1.0; n],
        };

        let mut weight_name = None;
        let claim_weights = match self.claim_weights {
            Some((name, values)) => {
                check_len(&name, values.len())?;
                for (row, &w) in values.iter().enumerate() {
                    if !(w >= 0.0) || !w.is_finite() {
                        return Err(DataError::NonFinite { name, row, value: w });
                    }
                }
                if !seen.insert(name.clone()) {
                    return Err(DataError::DuplicateName(name));
                }
                weight_name = Some(name);
                values
            }
            None => vec![1.0; n],
        };

        let mut covariates = Vec::with_capacity(self.covariates.len());
        let mut slot = Vec::with_capacity(self.covariates.len());
        let mut gauss_cols: Vec<Vec<f64>> = Vec::new();
        let mut logn_cols: Vec<Vec<f64>> = Vec::new();
        let mut discrete = Vec::new();
        for (spec, data) in self.covariates {
            if !seen.insert(spec.name.clone()) {
                return Err(DataError::DuplicateName(spec.name));
            }
            match (spec.role, data) {
                (CovariateRole::Gaussian, ColumnData::Real(v)) => {
                    check_len(&spec.name, v.len())?;
                    for (row, &x) in v.iter().enumerate() {
                        if !x.is_finite() {
                            return Err(DataError::NonFinite { name: spec.name, row, value: x });
                        }
                    }
                    slot.push(gauss_cols.len());
                    gauss_cols.push(v);
                }
                (CovariateRole::Lognormal, ColumnData::Real(v)) => {
                    check_len(&spec.name, v.len())?;
                    for (row, &x) in v.iter().enumerate() {
                        if !(x > 0.0) || !x.is_finite() {
                            return Err(DataError::NonPositive { name: spec.name, row, value: x });
                        }
                    }
                    slot.push(logn_cols.len());
                    logn_cols.push(v);
                }
                (CovariateRole::Discrete, ColumnData::Levels(idx)) => {
                    check_len(&spec.name, idx.len())?;
                    let distinct: HashSet<&String> = spec.levels.iter().collect();
                    if spec.levels.len() < 2 || distinct.len() != spec.levels.len() {
                        return Err(DataError::TooFewLevels(spec.name));
                    }
                    let levels = spec.levels.len();
                    if let Some((row, &index)) = idx.iter().enumerate().find(|(_, &i)| i >= levels) {
                        return Err(DataError::LevelOutOfRange { name: spec.name, row, index, levels });
                    }
                    slot.push(discrete.len());
                    discrete.push(idx);
                }
                (_, _) => {
                    return Err(DataError::Schema(format!(
                        "covariate `{}` data does not match its role",
                        spec.name
                    )))
                }
            }
            covariates.push(spec);
        }

        let gaussian = columns_to_matrix(n, &gauss_cols);
        let lognormal = columns_to_matrix(n, &logn_cols);
        let log_lognormal = lognormal.map(f64::ln);
        Ok(Dataset {
            covariates,
            slot,
            gaussian,
            lognormal,
            log_lognormal,
            discrete,
            response,
            exposure,
            claim_weights,
            columns: ColumnNames {
                response: response_name,
                exposure: exposure_name,
                claim_weights: weight_name,
            },
        })
    }
}

fn columns_to_matrix(n: usize, cols: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// A single covariate's values, borrowed from a dataset.
pub enum CovariateValues<'a> {
    Real(Vec<f64>),
    Levels(&'a [usize]),
}

impl Dataset {
    pub fn builder() -> DatasetBuilder {
        DatasetBuilder::default()
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn covariates(&self) -> &[CovariateSpec] {
        &self.covariates
    }

    /// Looks a covariate up by name, returning its spec and position within its role block.
    pub fn covariate(&self, name: &str) -> Option<(&CovariateSpec, usize)> {
        self.covariates
            .iter()
            .zip(&self.slot)
            .find(|(c, _)| c.name == name)
            .map(|(c, &s)| (c, s))
    }

    pub fn covariate_values(&self, name: &str) -> Option<CovariateValues<'_>> {
        let (spec, slot) = self.covariate(name)?;
        Some(match spec.role {
            CovariateRole::Gaussian => CovariateValues::Real(self.gaussian.column(slot).iter().copied().collect()),
            CovariateRole::Lognormal => CovariateValues::Real(self.lognormal.column(slot).iter().copied().collect()),
            CovariateRole::Discrete => CovariateValues::Levels(&self.discrete[slot]),
        })
    }

    /// `n x p_T` block of Gaussian-role covariates.
    pub fn gaussian(&self) -> &DMatrix<f64> {
        &self.gaussian
    }

    /// `n x p_U` block of log-normal-role covariates on their observed (positive) scale.
    pub fn lognormal(&self) -> &DMatrix<f64> {
        &self.lognormal
    }

    /// Elementwise natural log of [`Dataset::lognormal`].
    pub fn log_lognormal(&self) -> &DMatrix<f64> {
        &self.log_lognormal
    }

    /// Zero-based level index per row, one vector per discrete covariate.
    pub fn discrete(&self) -> &[Vec<usize>] {
        &self.discrete
    }

    /// Level counts `c_r` of the discrete covariates, in block order.
    pub fn discrete_levels(&self) -> Vec<usize> {
        self.covariates
            .iter()
            .filter(|c| c.role == CovariateRole::Discrete)
            .map(|c| c.levels.len())
            .collect()
    }

    pub fn p_gaussian(&self) -> usize {
        self.gaussian.ncols()
    }

    pub fn p_lognormal(&self) -> usize {
        self.lognormal.ncols()
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    pub fn claim_weights(&self) -> &[f64] {
        &self.claim_weights
    }

    pub fn column_names(&self) -> &ColumnNames {
        &self.columns
    }

    /// Copy with the response replaced (used to dichotomize counts).
    pub fn with_response(&self, response: Vec<f64>) -> Result<Dataset, DataError> {
        if response.len() != self.n() {
            return Err(DataError::LengthMismatch {
                name: self.columns.response.clone(),
                got: response.len(),
                expected: self.n(),
            });
        }
        let mut out = self.clone();
        out.response = response;
        Ok(out)
    }

    /// Copy in which every log-normal covariate is re-declared Gaussian on its observed scale.
    pub fn with_all_gaussian(&self) -> Dataset {
        self.rebuild(|spec| {
            if spec.role == CovariateRole::Lognormal {
                CovariateSpec::gaussian(spec.name.clone())
            } else {
                spec.clone()
            }
        })
    }

    fn rebuild(&self, map_spec: impl Fn(&CovariateSpec) -> CovariateSpec) -> Dataset {
        let mut b = Dataset::builder().response(self.columns.response.clone(), self.response.clone());
        if let Some(name) = &self.columns.exposure {
            b = b.exposure(name.clone(), self.exposure.clone());
        }
        if let Some(name) = &self.columns.claim_weights {
            b = b.claim_weights(name.clone(), self.claim_weights.clone());
        }
        for spec in &self.covariates {
            let new_spec = map_spec(spec);
            b = match self.covariate_values(&spec.name).expect("own covariate") {
                CovariateValues::Real(v) => b.covariate_real(new_spec, v),
                CovariateValues::Levels(idx) => b.discrete(new_spec.name, new_spec.levels, idx.to_vec()),
            };
        }
        b.build().expect("rebuilding a valid dataset")
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut b = Dataset::builder().response(self.columns.response.clone(), pick(&self.response));
        if let Some(name) = &self.columns.exposure {
            b = b.exposure(name.clone(), pick(&self.exposure));
        }
        if let Some(name) = &self.columns.claim_weights {
            b = b.claim_weights(name.clone(), pick(&self.claim_weights));
        }
        for spec in &self.covariates {
            b = match self.covariate_values(&spec.name).expect("own covariate") {
                CovariateValues::Real(v) => b.covariate_real(spec.clone(), pick(&v)),
                CovariateValues::Levels(idx) => {
                    b.discrete(spec.name.clone(), spec.levels.clone(), rows.iter().map(|&i| idx[i]).collect())
                }
            };
        }
        b.build().expect("subset of a valid dataset")
    }

    /// SHA-256 over the dataset's values and covariate declarations.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.covariates {
            h.update(c.name.as_bytes());
            h.update([c.role as u8]);
            for l in &c.levels {
                h.update(l.as_bytes());
                h.update([0u8]);
            }
        }
        for block in [&self.gaussian, &self.lognormal] {
            for v in block.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for col in &self.discrete {
            for &v in col {
                h.update((v as u64).to_le_bytes());
            }
        }
        for v in self.response.iter().chain(&self.exposure).chain(&self.claim_weights) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Schema that reads back what [`Dataset::write_csv`] emits.
    pub fn schema(&self) -> Schema {
        let mut columns: Vec<ColumnSchema> = self
            .covariates
            .iter()
            .map(|c| ColumnSchema {
                name: c.name.clone(),
                role: match c.role {
                    CovariateRole::Gaussian => ColumnRole::Gaussian,
                    CovariateRole::Lognormal => ColumnRole::Lognormal,
                    CovariateRole::Discrete => ColumnRole::Discrete,
                },
                levels: c.levels.clone(),
                breaks: Vec::new(),
            })
            .collect();
        columns.push(ColumnSchema::simple(&self.columns.response, ColumnRole::Response));
        if let Some(e) = &self.columns.exposure {
            columns.push(ColumnSchema::simple(e, ColumnRole::Exposure));
        }
        if let Some(w) = &self.columns.claim_weights {
            columns.push(ColumnSchema::simple(w, ColumnRole::Weight));
        }
        Schema { columns }
    }

    /// Writes an RFC-4180 CSV with covariates first, then response, exposure and weights.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.covariates.iter().map(|c| c.name.clone()).collect();
        header.push(self.columns.response.clone());
        header.extend(self.columns.exposure.iter().cloned());
        header.extend(self.columns.claim_weights.iter().cloned());
        w.write_record(&header)?;
        let values: Vec<CovariateValues<'_>> = self
            .covariates
            .iter()
            .map(|c| self.covariate_values(&c.name).expect("own covariate"))
            .collect();
        for i in 0..self.n() {
            let mut rec = Vec::with_capacity(header.len());
            for (c, v) in self.covariates.iter().zip(&values) {
                rec.push(match v {
                    CovariateValues::Real(x) => x[i].to_string(),
                    CovariateValues::Levels(idx) => c.levels[idx[i]].clone(),
                });
            }
            rec.push(self.response[i].to_string());
            if self.columns.exposure.is_some() {
                rec.push(self.exposure[i].to_string());
            }
            if self.columns.claim_weights.is_some() {
                rec.push(self.claim_weights[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Regression design `x~ = [1, x]`: intercept column followed by the selected terms.
///
/// Stored row-major since every consumer walks it row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    data: Vec<f64>,
    nrows: usize,
    ncols: usize,
    names: Vec<String>,
}

impl DesignMatrix {
    pub fn from_rows(rows: &[Vec<f64>], names: Vec<String>) -> Self {
        let ncols = names.len();
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "row width must match column names");
            data.extend_from_slice(r);
        }
        Self { data, nrows: rows.len(), ncols, names }
    }

    /// Intercept-only design with `n` rows.
    pub fn intercept(n: usize) -> Self {
        Self { data: vec![1.0; n], nrows: n, ncols: 1, names: vec![INTERCEPT.to_string()] }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.ncols.max(1))
    }

    /// Linear predictor `x~_i . beta`.
    pub fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nrows, self.ncols, &self.data)
    }

    pub fn subset(&self, rows: &[usize]) -> DesignMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.ncols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        DesignMatrix { data, nrows: rows.len(), ncols: self.ncols, names: self.names.clone() }
    }
}

pub const INTERCEPT: &str = "(Intercept)";

/// Splits a selection entry into `(covariate name, log-transform flag)`.
/// `log(x)` enters `ln x` into the design; a bare name enters the observed value.
pub fn parse_term(term: &str) -> (&str, bool) {
    let t = term.trim();
    match t.strip_prefix("log(").and_then(|r| r.strip_suffix(')')) {
        Some(inner) => (inner.trim(), true),
        None => (t, false),
    }
}

/// Builds the design matrix for `selection`, in selection order. Discrete covariates
/// contribute `c_r - 1` dummy columns with the first declared level as reference.
pub fn build_design<S: AsRef<str>>(dataset: &Dataset, selection: &[S]) -> Result<DesignMatrix, DataError> {
    let n = dataset.n();
    let mut names = vec![INTERCEPT.to_string()];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for term in selection {
        let (name, log) = parse_term(term.as_ref());
        let (spec, _) = dataset
            .covariate(name)
            .ok_or_else(|| DataError::UnknownCovariate(name.to_string()))?;
        match dataset.covariate_values(name).expect("covariate exists") {
            CovariateValues::Real(mut v) => {
                if log {
                    if v.iter().any(|&x| !(x > 0.0)) {
                        return Err(DataError::LogOfNonPositive(name.to_string()));
                    }
                    v.iter_mut().for_each(|x| *x = x.ln());
                    names.push(format!("log({name})"));
                } else {
                    names.push(name.to_string());
                }
                columns.push(v);
            }
            CovariateValues::Levels(idx) => {
                if log {
                    return Err(DataError::Schema(format!("cannot take log of discrete covariate `{name}`")));
                }
                let levels = spec.levels.len();
                if let Some((row, &index)) = idx.iter().enumerate().find(|(_, &i)| i >= levels) {
                    return Err(DataError::LevelOutOfRange { name: name.to_string(), row, index, levels });
                }
                for (s, level) in spec.levels.iter().enumerate().skip(1) {
                    names.push(format!("{name}:{level}"));
                    columns.push(idx.iter().map(|&i| if i == s { 1.0 } else { 0.0 }).collect());
                }
            }
        }
    }
    let ncols = names.len();
    let mut data = Vec::with_capacity(n * ncols);
    for i in 0..n {
        data.push(1.0);
        for c in &columns {
            data.push(c[i]);
        }
    }
    Ok(DesignMatrix { data, nrows: n, ncols, names })
}

// ---------------------------------------------------------------------------
// CSV schema
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Gaussian,
    Lognormal,
    Discrete,
    Response,
    Exposure,
    Weight,
    Id,
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub role: ColumnRole,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    /// Numeric cut points `b_0 < b_1 < ... < b_m` that bin a numeric column into the
    /// levels `[b_0,b_1)`, ..., `[b_{m-1},b_m)`, `b_m+`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub breaks: Vec<f64>,
}

impl ColumnSchema {
    fn simple(name: &str, role: ColumnRole) -> Self {
        Self { name: name.to_string(), role, levels: Vec::new(), breaks: Vec::new() }
    }

    /// Effective level labels, generated from `breaks` when present.
    pub fn level_labels(&self) -> Vec<String> {
        if self.breaks.is_empty() {
            return self.levels.clone();
        }
        let b = &self.breaks;
        let mut out: Vec<String> = b.windows(2).map(|w| format!("[{},{})", w[0], w[1])).collect();
        out.push(format!("{}+", b[b.len() - 1]));
        out
    }

    fn bin(&self, x: f64) -> Option<usize> {
        if !(x >= self.breaks[0]) {
            return None;
        }
        Some(self.breaks.iter().rposition(|&b| x >= b).expect("x >= first break"))
    }
}

/// Column-to-role mapping for CSV input, written as a TOML document of
/// `[[column]]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "column")]
    pub columns: Vec<ColumnSchema>,
}

impl Schema {
    pub fn from_toml_str(s: &str) -> Result<Self, DataError> {
        let schema: Schema = toml::from_str(s).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut names = HashSet::new();
        let mut counts = [0usize; 3];
        for c in &self.columns {
            if !names.insert(&c.name) {
                return Err(DataError::DuplicateName(c.name.clone()));
            }
            match c.role {
                ColumnRole::Response => counts[0] += 1,
                ColumnRole::Exposure => counts[1] += 1,
                ColumnRole::Weight => counts[2] += 1,
                ColumnRole::Discrete => {
                    if !c.breaks.is_empty() {
                        if !c.levels.is_empty() {
                            return Err(DataError::Schema(format!("`{}`: give levels or breaks, not both", c.name)));
                        }
                        if c.breaks.windows(2).any(|w| !(w[0] < w[1])) {
                            return Err(DataError::Schema(format!("`{}`: breaks must increase", c.name)));
                        }
                    }
                    let labels = c.level_labels();
                    let distinct: HashSet<&String> = labels.iter().collect();
                    if labels.len() < 2 || distinct.len() != labels.len() {
                        return Err(DataError::TooFewLevels(c.name.clone()));
                    }
                }
                _ => {}
            }
        }
        if counts[0] != 1 {
            return Err(DataError::Schema(format!("expected exactly one response column, found {}", counts[0])));
        }
        if counts[1] > 1 || counts[2] > 1 {
            return Err(DataError::Schema("at most one exposure and one weight column".into()));
        }
        Ok(())
    }

    /// Number of columns with a recognized role (every declared column).
    pub fn recognized_roles(&self) -> usize {
        self.columns.len()
    }
}

/// Reads a CSV file against a schema.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads CSV records against a schema. Row numbers in errors are 1-based data rows
/// (the header is not counted).
pub fn read_csv<R: Read>(input: R, schema: &Schema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let pos = header
            .iter()
            .position(|h| h == c.name)
            .ok_or_else(|| DataError::MissingColumn(c.name.clone()))?;
        positions.push(pos);
    }

    enum Acc {
        Real(Vec<f64>),
        Levels(Vec<usize>),
        Skip,
    }
    let labels: Vec<Vec<String>> = schema.columns.iter().map(|c| c.level_labels()).collect();
    let mut acc: Vec<Acc> = schema
        .columns
        .iter()
        .map(|c| match c.role {
            ColumnRole::Id | ColumnRole::Ignore => Acc::Skip,
            ColumnRole::Discrete => Acc::Levels(Vec::new()),
            _ => Acc::Real(Vec::new()),
        })
        .collect();

    let mut missing = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let mut row_missing = false;
        for (j, c) in schema.columns.iter().enumerate() {
            let cell = record.get(positions[j]).unwrap_or("");
            match &mut acc[j] {
                Acc::Skip => {}
                Acc::Real(v) => {
                    if cell.is_empty() {
                        match c.role {
                            ColumnRole::Exposure | ColumnRole::Weight => v.push(1.0),
                            _ => {
                                row_missing = true;
                                v.push(f64::NAN);
                            }
                        }
                        continue;
                    }
                    let x: f64 = cell.parse().map_err(|_| DataError::Unparseable {
                        name: c.name.clone(),
                        row,
                        value: cell.to_string(),
                    })?;
                    if !x.is_finite() {
                        return Err(DataError::NonFinite { name: c.name.clone(), row, value: x });
                    }
                    if matches!(c.role, ColumnRole::Lognormal | ColumnRole::Exposure) && !(x > 0.0) {
                        return Err(DataError::NonPositive { name: c.name.clone(), row, value: x });
                    }
                    v.push(x);
                }
                Acc::Levels(v) => {
                    if cell.is_empty() {
                        row_missing = true;
                        v.push(0);
                        continue;
                    }
                    let idx = if c.breaks.is_empty() {
                        labels[j].iter().position(|l| l == cell)
                    } else {
                        let x: f64 = cell.parse().map_err(|_| DataError::Unparseable {
                            name: c.name.clone(),
                            row,
                            value: cell.to_string(),
                        })?;
                        c.bin(x)
                    };
                    let idx = idx.ok_or_else(|| DataError::UnknownLevel {
                        name: c.name.clone(),
                        row,
                        level: cell.to_string(),
                    })?;
                    v.push(idx);
                }
            }
        }
        if row_missing {
            missing.push(row);
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingFields { rows: missing });
    }

    let mut b = Dataset::builder();
    for ((c, a), lab) in schema.columns.iter().zip(acc).zip(labels) {
        b = match (c.role, a) {
            (ColumnRole::Gaussian, Acc::Real(v)) => b.gaussian(c.name.clone(), v),
            (ColumnRole::Lognormal, Acc::Real(v)) => b.lognormal(c.name.clone(), v),
            (ColumnRole::Discrete, Acc::Levels(v)) => b.discrete(c.name.clone(), lab, v),
            (ColumnRole::Response, Acc::Real(v)) => b.response(c.name.clone(), v),
            (ColumnRole::Exposure, Acc::Real(v)) => b.exposure(c.name.clone(), v),
            (ColumnRole::Weight, Acc::Real(v)) => b.claim_weights(c.name.clone(), v),
            _ => b,
        };
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::builder()
            .gaussian("x", vec![2.0, 3.0])
            .discrete("d", ["a", "b", "c"], vec![0, 2])
            .lognormal("u", vec![1.0, std::f64::consts::E])
            .response("y", vec![0.0, 1.0])
            .build()
            .unwrap()
    }

    #[test]
    fn design_prepends_intercept() {
        let d = build_design(&tiny(), &["x"]).unwrap();
        assert_eq!(d.row(0), &[1.0, 2.0]);
        assert_eq!(d.row(1), &[1.0, 3.0]);
    }

    #[test]
    fn design_uses_first_level_as_reference() {
        let d = build_design(&tiny(), &["d"]).unwrap();
        assert_eq!(d.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(d.row(1), &[1.0, 0.0, 1.0]);
        assert_eq!(d.names(), &["(Intercept)", "d:b", "d:c"]);
    }

    #[test]
    fn empty_selection_is_intercept_only() {
        let sel: [&str; 0] = [];
        let d = build_design(&tiny(), &sel).unwrap();
        assert_eq!(d.ncols(), 1);
        assert!(d.rows().all(|r| r == [1.0]));
    }

    #[test]
    fn log_term_transforms_values() {
        let d = build_design(&tiny(), &["log(u)"]).unwrap();
        assert!((d.row(1)[1] - 1.0).abs() < 1e-15);
        assert_eq!(d.names()[1], "log(u)");
    }

    #[test]
    fn unknown_covariate_is_rejected() {
        assert!(matches!(build_design(&tiny(), &["nope"]), Err(DataError::UnknownCovariate(_))));
    }

    #[test]
    fn builder_rejects_bad_values() {
        let r = Dataset::builder().lognormal("u", vec![1.0, 0.0]).response("y", vec![0.0, 0.0]).build();
        assert!(matches!(r, Err(DataError::NonPositive { row: 1, .. })));
        let r = Dataset::builder().discrete("d", ["a"], vec![0]).response("y", vec![0.0]).build();
        assert!(matches!(r, Err(DataError::TooFewLevels(_))));
        let r = Dataset::builder().discrete("d", ["a", "b"], vec![2]).response("y", vec![0.0]).build();
        assert!(matches!(r, Err(DataError::LevelOutOfRange { .. })));
        let r = Dataset::builder().exposure("e", vec![0.0]).response("y", vec![0.0]).build();
        assert!(matches!(r, Err(DataError::NonPositive { .. })));
    }

    #[test]
    fn defaults_for_exposure_and_weights() {
        let d = tiny();
        assert_eq!(d.exposure(), &[1.0, 1.0]);
        assert_eq!(d.claim_weights(), &[1.0, 1.0]);
    }

    #[test]
    fn all_gaussian_moves_lognormal_block() {
        let g = tiny().with_all_gaussian();
        assert_eq!(g.p_lognormal(), 0);
        assert_eq!(g.p_gaussian(), 2);
        assert_eq!(g.gaussian()[(1, 1)], std::f64::consts::E);
    }

    #[test]
    fn breaks_bin_numeric_values() {
        let schema = Schema::from_toml_str(
            r#"
            [[column]]
            name = "age"
            role = "discrete"
            breaks = [18, 23, 27]
            [[column]]
            name = "y"
            role = "response"
            "#,
        )
        .unwrap();
        let ds = read_csv("age,y\n18,0\n26.5,1\n40,0\n".as_bytes(), &schema).unwrap();
        assert_eq!(ds.discrete()[0], vec![0, 1, 2]);
        assert_eq!(ds.covariates()[0].levels, vec!["[18,23)", "[23,27)", "27+"]);
        let err = read_csv("age,y\n10,0\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, DataError::UnknownLevel { row: 1, .. }));
    }
}
