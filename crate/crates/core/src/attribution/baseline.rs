use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::MaskPolicy;
use super::{AttributionMap, Method};
use crate::data::synth::{in_window_positions, in_window_rule_lab};
use crate::data::{FeatureKind, PatientRecord, TaskSpec};

/// I.i.d. `U[0, 1]` scores; the chance floor every method is compared to.
pub fn random_baseline(record: &PatientRecord, target_class: usize, seed: u64) -> AttributionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..record.n_positions()).map(|_| rng.random::<f64>()).collect();
    AttributionMap::new(Method::Random, target_class, scores)
        .with_meta("forward_passes", 0.0)
        .with_meta("backward_passes", 0.0)
}

/// Scores read off the generator's planted rule.
///
/// For a positive target the planted evidence scores 1 and everything else
/// 0. For the negative class the score follows what the rule read inside
/// its window: evidence scores -1, codes that were checked and are not
/// drivers score 0.5, and rule-lab values score by how far removing them
/// (replacing with the policy value) moves the lab towards the threshold,
/// in standard deviations squashed into `(-0.5, 0.5)`. Positions outside
/// the window score 0.
pub fn oracle_attribution(
    task: &TaskSpec,
    record: &PatientRecord,
    target_class: usize,
    policy: &MaskPolicy,
) -> AttributionMap {
    let n = record.n_positions();
    let marked = |i: usize| record.ground_truth_mask.get(i).copied().unwrap_or(false);
    let scores = if target_class != 0 {
        (0..n).map(|i| if marked(i) { 1.0 } else { 0.0 }).collect()
    } else {
        let lab = task.lab_rule.lab_index;
        let sd = task.schema.lab_stds[lab];
        let replacement = policy.lab_value(lab);
        let values = in_window_rule_lab(task, record);
        let window = in_window_positions(task, record);
        let positions = record.feature_positions();
        (0..n)
            .map(|i| {
                if marked(i) {
                    -1.0
                } else if let Some(value) = values[i] {
                    let shift = (replacement - value) / sd;
                    0.5 * shift / (1.0 + shift.abs())
                } else if window[i] && matches!(positions[i].kind, FeatureKind::Code { .. }) {
                    0.5
                } else {
                    0.0
                }
            })
            .collect()
    };
    AttributionMap::new(Method::Oracle, target_class, scores)
        .with_meta("forward_passes", 0.0)
        .with_meta("backward_passes", 0.0)
}
