use serde::{Deserialize, Serialize};

/// Code index reserved for padding / removed codes. Its embedding is zero.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub codes: Vec<usize>,
    pub labs: Vec<f64>,
    /// Hours since the previous visit (0 for the first one).
    pub delta_t: f64,
}

impl Visit {
    /// A padding visit carries no codes and no measurements and is ignored
    /// by every model.
    pub fn is_padding(&self) -> bool {
        self.codes.is_empty() && self.labs.is_empty()
    }

    pub fn padding() -> Self {
        Self { codes: Vec::new(), labs: Vec::new(), delta_t: 0.0 }
    }
}

/// Ordered visit sequence of one patient with its class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub visits: Vec<Visit>,
    pub label: usize,
    /// Generator-only: positions that carry the planted signal.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ground_truth_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Code { slot: usize },
    Lab { index: usize },
}

/// One attribution unit: a code slot or a lab value inside a visit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeaturePosition {
    pub visit: usize,
    pub kind: FeatureKind,
}

impl PatientRecord {
    /// Feature positions in canonical order: visit by visit, codes before labs.
    pub fn feature_positions(&self) -> Vec<FeaturePosition> {
        let mut out = Vec::with_capacity(self.n_positions());
        for (v, visit) in self.visits.iter().enumerate() {
            out.extend((0..visit.codes.len()).map(|slot| FeaturePosition { visit: v, kind: FeatureKind::Code { slot } }));
            out.extend((0..visit.labs.len()).map(|index| FeaturePosition { visit: v, kind: FeatureKind::Lab { index } }));
        }
        out
    }

    pub fn n_positions(&self) -> usize {
        self.visits.iter().map(|v| v.codes.len() + v.labs.len()).sum()
    }

    /// Number of non-padding visits.
    pub fn n_active_visits(&self) -> usize {
        self.visits.iter().filter(|v| !v.is_padding()).count()
    }

    pub fn max_code(&self) -> Option<usize> {
        self.visits.iter().flat_map(|v| v.codes.iter().copied()).max()
    }
}

/// Per-lab training statistics used for normalisation and as the removal
/// baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LabStats {
    pub fn identity(n_labs: usize) -> Self {
        Self { mean: vec![0.0; n_labs], std: vec![1.0; n_labs] }
    }

    pub fn from_records(records: &[PatientRecord], n_labs: usize) -> Self {
        let mut sum = vec![0.0; n_labs];
        let mut sq = vec![0.0; n_labs];
        let mut count = vec![0usize; n_labs];
        for visit in records.iter().flat_map(|r| &r.visits) {
            for (i, &v) in visit.labs.iter().enumerate().take(n_labs) {
                sum[i] += v;
                sq[i] += v * v;
                count[i] += 1;
            }
        }
        let mut mean = vec![0.0; n_labs];
        let mut std = vec![1.0; n_labs];
        for i in 0..n_labs {
            if count[i] > 0 {
                let n = count[i] as f64;
                mean[i] = sum[i] / n;
                let var = (sq[i] / n - mean[i] * mean[i]).max(0.0);
                std[i] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Self { mean, std }
    }

    pub fn n_labs(&self) -> usize {
        self.mean.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> PatientRecord {
        PatientRecord {
            visits: vec![
                Visit { codes: vec![3, 4], labs: vec![1.0, 2.0], delta_t: 0.0 },
                Visit { codes: vec![5], labs: vec![3.0, 4.0], delta_t: 12.0 },
            ],
            label: 1,
            ground_truth_mask: Vec::new(),
        }
    }

    #[test]
    fn positions_are_codes_then_labs_per_visit() {
        let r = record();
        let pos = r.feature_positions();
        assert_eq!(pos.len(), 7);
        assert_eq!(r.n_positions(), 7);
        assert_eq!(pos[0], FeaturePosition { visit: 0, kind: FeatureKind::Code { slot: 0 } });
        assert_eq!(pos[2], FeaturePosition { visit: 0, kind: FeatureKind::Lab { index: 0 } });
        assert_eq!(pos[4], FeaturePosition { visit: 1, kind: FeatureKind::Code { slot: 0 } });
        assert_eq!(pos[6], FeaturePosition { visit: 1, kind: FeatureKind::Lab { index: 1 } });
    }

    #[test]
    fn padding_visits_have_no_positions() {
        let mut r = record();
        r.visits.push(Visit::padding());
        assert_eq!(r.n_positions(), 7);
        assert_eq!(r.n_active_visits(), 2);
    }

    #[test]
    fn lab_stats() {
        let s = LabStats::from_records(&[record()], 2);
        assert_eq!(s.mean, vec![2.0, 3.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
    }
}
