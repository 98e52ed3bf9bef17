use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, LabStats, PatientRecord, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabReplacement {
    Zero,
    #[default]
    TrainingMean,
}

/// How removed features are replaced. Codes always become PAD and visit
/// times are never touched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub lab_replacement: LabReplacement,
    /// Replacement value per lab index, resolved from the training set.
    pub lab_values: Vec<f64>,
}

impl MaskPolicy {
    pub fn new(lab_replacement: LabReplacement, stats: &LabStats) -> Self {
        let lab_values = match lab_replacement {
            LabReplacement::Zero => vec![0.0; stats.n_labs()],
            LabReplacement::TrainingMean => stats.mean.clone(),
        };
        Self { lab_replacement, lab_values }
    }

    pub fn lab_value(&self, index: usize) -> f64 {
        self.lab_values.get(index).copied().unwrap_or(0.0)
    }
}

/// Copy of `record` with the listed feature positions replaced by their
/// baseline values.
pub fn mask(record: &PatientRecord, remove: &[usize], policy: &MaskPolicy) -> Result<PatientRecord> {
    let positions = record.feature_positions();
    let mut out = record.clone();
    for &p in remove {
        let fp = positions.get(p).ok_or(Error::PositionOutOfRange { position: p, len: positions.len() })?;
        let visit = &mut out.visits[fp.visit];
        match fp.kind {
            FeatureKind::Code { slot } => visit.codes[slot] = PAD,
            FeatureKind::Lab { index } => visit.labs[index] = policy.lab_value(index),
        }
    }
    Ok(out)
}

/// Removes every position where `keep` is false.
pub(crate) fn mask_complement(record: &PatientRecord, keep: &[bool], policy: &MaskPolicy) -> Result<PatientRecord> {
    let remove: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect();
    mask(record, &remove, policy)
}
