use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{mask, AttributionMap, MaskPolicy};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::model::Model;

/// Fractions of the record's positions removed (or kept) per evaluation.
pub const DEFAULT_K_GRID: [f64; 5] = [0.01, 0.05, 0.10, 0.20, 0.50];

pub fn validate_k_grid(k_grid: &[f64]) -> Result<()> {
    if k_grid.is_empty() {
        return Err(Error::InvalidConfig("k-grid is empty".into()));
    }
    if let Some(k) = k_grid.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
        return Err(Error::InvalidConfig(format!("k-grid fraction {k} outside (0, 1]")));
    }
    Ok(())
}

/// `max(1, ⌈k·d⌉)`, capped at `d`.
pub fn top_count(k: f64, d: usize) -> usize {
    if d == 0 {
        return 0;
    }
    // k·d can land a hair above an integer (0.1 · 30 = 3.0000000000000004)
    ((k * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Per-record metric values, each averaged over the k-grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordFaithfulness {
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    /// The model's predicted class on the unmasked record.
    pub class: usize,
}

impl RecordFaithfulness {
    pub fn composite(&self) -> f64 {
        composite_score(self.comprehensiveness, self.sufficiency)
    }
}

pub fn composite_score(comprehensiveness: f64, sufficiency: f64) -> f64 {
    comprehensiveness * (1.0 - sufficiency)
}

/// Comprehensiveness and sufficiency of `map` for the model's predicted
/// class, sharing the unmasked forward pass.
pub fn evaluate_record(
    model: &Model,
    record: &PatientRecord,
    map: &AttributionMap,
    k_grid: &[f64],
    policy: &MaskPolicy,
) -> Result<RecordFaithfulness> {
    validate_k_grid(k_grid)?;
    map.check_aligned(record)?;
    let probs = model.predict_proba(record)?;
    let class = crate::model::argmax(&probs);
    let p = probs[class];
    let d = record.n_positions();
    let ranking = map.ranking();

    let mut comp = 0.0;
    let mut suff = 0.0;
    for &k in k_grid {
        let n = top_count(k, d);
        let top = &ranking[..n];
        let removed = mask(record, top, policy)?;
        comp += p - model.predict_proba(&removed)?[class];
        let rest = &ranking[n..];
        suff += if rest.is_empty() { 0.0 } else { p - model.predict_proba(&mask(record, rest, policy)?)?[class] };
    }
    let len = k_grid.len() as f64;
    Ok(RecordFaithfulness { comprehensiveness: comp / len, sufficiency: suff / len, class })
}

pub fn comprehensiveness(
    model: &Model,
    record: &PatientRecord,
    map: &AttributionMap,
    k_grid: &[f64],
    policy: &MaskPolicy,
) -> Result<f64> {
    Ok(evaluate_record(model, record, map, k_grid, policy)?.comprehensiveness)
}

pub fn sufficiency(
    model: &Model,
    record: &PatientRecord,
    map: &AttributionMap,
    k_grid: &[f64],
    policy: &MaskPolicy,
) -> Result<f64> {
    Ok(evaluate_record(model, record, map, k_grid, policy)?.sufficiency)
}

/// [`evaluate_record`] over aligned slices, in parallel, in input order.
pub fn evaluate_records(
    model: &Model,
    records: &[PatientRecord],
    maps: &[AttributionMap],
    k_grid: &[f64],
    policy: &MaskPolicy,
) -> Result<Vec<RecordFaithfulness>> {
    if records.len() != maps.len() {
        return Err(Error::Shape {
            op: "faithfulness",
            detail: format!("{} records but {} attribution maps", records.len(), maps.len()),
        });
    }
    records
        .par_iter()
        .zip(maps.par_iter())
        .map(|(r, m)| evaluate_record(model, r, m, k_grid, policy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_count_rounds_up_with_floor_of_one() {
        assert_eq!(top_count(0.01, 30), 1);
        assert_eq!(top_count(0.05, 30), 2);
        assert_eq!(top_count(0.10, 30), 3);
        assert_eq!(top_count(0.5, 31), 16);
        assert_eq!(top_count(1.0, 7), 7);
        assert_eq!(top_count(0.2, 0), 0);
    }

    #[test]
    fn composite_arithmetic() {
        assert!((composite_score(0.5, 0.2) - 0.4).abs() < 1e-15);
        assert_eq!(composite_score(0.9, 1.0), 0.0);
        assert_eq!(composite_score(0.0, 0.3), 0.0);
    }

    #[test]
    fn k_grid_checks() {
        assert!(validate_k_grid(&DEFAULT_K_GRID).is_ok());
        assert!(validate_k_grid(&[]).is_err());
        assert!(validate_k_grid(&[0.0]).is_err());
        assert!(validate_k_grid(&[1.5]).is_err());
    }
}
