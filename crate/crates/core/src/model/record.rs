use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsaObs {
    /// Years since diagnosis.
    pub time: f64,
    /// Log-transformed biomarker value.
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiopsyObs {
    pub time: f64,
    /// 1 when the biopsy showed grade reclassification.
    pub result: u8,
}

/// One patient's observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub id: String,
    pub age_std: f64,
    #[serde(default)]
    pub psa: Vec<PsaObs>,
    #[serde(default)]
    pub biopsies: Vec<BiopsyObs>,
    #[serde(default)]
    pub observed_class: Option<u8>,
}

/// Observations accrued by an existing patient after the store was fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationBlock {
    #[serde(default)]
    pub psa: Vec<PsaObs>,
    #[serde(default)]
    pub biopsies: Vec<BiopsyObs>,
}

fn check_times<I: Iterator<Item = f64>>(what: &str, after: f64, times: I) -> Result<()> {
    let mut last = after;
    for t in times {
        if !t.is_finite() || t < 0.0 {
            return invalid(format!("{what} time {t} must be finite and non-negative"));
        }
        if t < last {
            return invalid(format!(
                "{what} times must be nondecreasing ({t} after {last})"
            ));
        }
        last = t;
    }
    Ok(())
}

impl PatientRecord {
    pub fn empty(id: impl Into<String>, age_std: f64) -> Self {
        Self {
            id: id.into(),
            age_std,
            psa: Vec::new(),
            biopsies: Vec::new(),
            observed_class: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.age_std.is_finite() {
            return invalid(format!("patient {}: age_std must be finite", self.id));
        }
        check_times("psa", 0.0, self.psa.iter().map(|o| o.time))?;
        check_times("biopsy", 0.0, self.biopsies.iter().map(|o| o.time))?;
        if self.psa.iter().any(|o| !o.value.is_finite()) {
            return invalid(format!("patient {}: psa values must be finite", self.id));
        }
        if self.biopsies.iter().any(|o| o.result > 1) {
            return invalid(format!(
                "patient {}: biopsy results must be 0 or 1",
                self.id
            ));
        }
        if matches!(self.observed_class, Some(c) if c > 1) {
            return invalid(format!(
                "patient {}: observed_class must be 0 or 1",
                self.id
            ));
        }
        Ok(())
    }

    pub fn last_psa_time(&self) -> f64 {
        self.psa.last().map_or(0.0, |o| o.time)
    }

    pub fn last_biopsy_time(&self) -> f64 {
        self.biopsies.last().map_or(0.0, |o| o.time)
    }

    /// Returns a copy extended with `block`, checking that the new
    /// observations do not precede existing ones.
    pub fn extended(&self, block: &ObservationBlock) -> Result<Self> {
        block.validate_after(self)?;
        let mut out = self.clone();
        out.psa.extend_from_slice(&block.psa);
        out.biopsies.extend_from_slice(&block.biopsies);
        Ok(out)
    }
}

impl ObservationBlock {
    pub fn is_empty(&self) -> bool {
        self.psa.is_empty() && self.biopsies.is_empty()
    }

    pub fn validate_after(&self, record: &PatientRecord) -> Result<()> {
        check_times(
            "new psa",
            record.last_psa_time(),
            self.psa.iter().map(|o| o.time),
        )?;
        check_times(
            "new biopsy",
            record.last_biopsy_time(),
            self.biopsies.iter().map(|o| o.time),
        )?;
        if self.psa.iter().any(|o| !o.value.is_finite()) {
            return invalid("new psa values must be finite");
        }
        if self.biopsies.iter().any(|o| o.result > 1) {
            return invalid("new biopsy results must be 0 or 1");
        }
        Ok(())
    }

    /// The block viewed as a standalone record (no class label) for the
    /// given patient covariates.
    pub fn as_record(&self, id: &str, age_std: f64) -> PatientRecord {
        PatientRecord {
            id: id.to_owned(),
            age_std,
            psa: self.psa.clone(),
            biopsies: self.biopsies.clone(),
            observed_class: None,
        }
    }
}
