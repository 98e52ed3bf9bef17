use serde::{Deserialize, Serialize};

use super::metrics::{composite_score, RecordFaithfulness};
use crate::error::{Error, Result};

/// Aggregate faithfulness of one method on one (model, task) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub method: String,
    pub model: String,
    pub task: String,
    /// Mean over records of the k-grid-averaged probability drop.
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    /// `comprehensiveness · (1 - sufficiency)` of the two means above.
    pub composite: f64,
    /// Attribution wall time only, in seconds.
    pub runtime_per_record: f64,
    pub n_records: usize,
    pub k_grid: Vec<f64>,
}

impl FaithfulnessReport {
    pub fn from_records(
        method: &str,
        model: &str,
        task: &str,
        records: &[RecordFaithfulness],
        runtime_per_record: f64,
        k_grid: &[f64],
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidConfig(format!("no records to report for {method}/{model}/{task}")));
        }
        let n = records.len() as f64;
        let comprehensiveness = records.iter().map(|r| r.comprehensiveness).sum::<f64>() / n;
        let sufficiency = records.iter().map(|r| r.sufficiency).sum::<f64>() / n;
        Ok(Self {
            method: method.to_string(),
            model: model.to_string(),
            task: task.to_string(),
            comprehensiveness,
            sufficiency,
            composite: composite_score(comprehensiveness, sufficiency),
            runtime_per_record,
            n_records: records.len(),
            k_grid: k_grid.to_vec(),
        })
    }

    /// Attribution time for `population` records at the measured rate.
    pub fn extrapolated_hours(&self, population: usize) -> f64 {
        extrapolate_hours(self.runtime_per_record, population)
    }
}

pub fn extrapolate_hours(seconds_per_record: f64, population: usize) -> f64 {
    seconds_per_record * population as f64 / 3600.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_is_product_of_means() {
        let recs = [
            RecordFaithfulness { comprehensiveness: 0.6, sufficiency: 0.1, class: 1 },
            RecordFaithfulness { comprehensiveness: 0.4, sufficiency: 0.3, class: 0 },
        ];
        let r = FaithfulnessReport::from_records("ig", "transformer", "mortality", &recs, 0.01, &[0.1]).unwrap();
        assert!((r.comprehensiveness - 0.5).abs() < 1e-15);
        assert!((r.sufficiency - 0.2).abs() < 1e-15);
        assert_eq!(r.composite, r.comprehensiveness * (1.0 - r.sufficiency));
        assert!(FaithfulnessReport::from_records("ig", "t", "m", &[], 0.0, &[0.1]).is_err());
    }

    #[test]
    fn extrapolation_arithmetic() {
        let h = extrapolate_hours(0.1, 137_778);
        assert!((h - 3.8272).abs() < 1e-3);
    }
}
