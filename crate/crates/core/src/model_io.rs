//! The JSON model document written by `fit` and read back by `classify` and `lrtest`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CovariateSpec;
use crate::em::GcwmModel;
use crate::error::Error;
use crate::selection::{info_criteria, InfoCriteria, SelectionRow};

pub const FORMAT: &str = "gcwm-model/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    /// `cwm`, `gcwm` or `zi-gcwm`.
    pub kind: String,
    pub seed: u64,
    /// Covariates as fitted (after any role override).
    pub covariates: Vec<CovariateSpec>,
    /// SHA-256 of the fitted dataset.
    pub data_fingerprint: String,
    pub criteria: InfoCriteria,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection_table: Vec<SelectionRow>,
    pub model: GcwmModel,
    /// Manifest file (relative to the document) describing the run that wrote it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl ModelDocument {
    pub fn new(
        kind: &str,
        seed: u64,
        covariates: Vec<CovariateSpec>,
        data_fingerprint: String,
        model: GcwmModel,
        selection_table: Vec<SelectionRow>,
    ) -> Self {
        Self {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            seed,
            covariates,
            data_fingerprint,
            criteria: info_criteria(&model),
            selection_table,
            model,
            manifest: None,
        }
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        if doc.format != FORMAT {
            return Err(crate::error::DataError::Schema(format!("unsupported model document format `{}`", doc.format)).into());
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
