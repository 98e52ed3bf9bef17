//! Synthetic visit sequences with a planted, known labelling rule.
//!
//! Each task plants evidence in the last `window` visits: a driver code and
//! a lab value above its threshold. The rule class of a record is the class
//! of the most recent in-window driver code, provided an in-window lab
//! crossing is also present, and 0 otherwise.
//!
//! Labels are drawn first from the class prior. A positive record carries
//! full evidence with probability `1 - ε` and partial evidence (driver or
//! lab only) otherwise. A negative record carries full evidence with
//! probability `ε·p / (1 - p)`, so that `P(label ≠ rule | rule positive) = ε`,
//! and partial decoy evidence with probability `decoy_rate`. Older visits
//! may carry out-of-window decoys which the rule ignores.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::record::{FeatureKind, PatientRecord, Visit};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    Mortality,
    Dka,
    Los,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Mortality, TaskName::Dka, TaskName::Los];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Mortality => "mortality",
            TaskName::Dka => "dka",
            TaskName::Los => "los",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mortality" | "mortality-like" => Ok(TaskName::Mortality),
            "dka" | "dka-like" => Ok(TaskName::Dka),
            "los" | "los-like" => Ok(TaskName::Los),
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabThresholdRule {
    pub lab_index: usize,
    /// A value strictly above this counts as a crossing.
    pub threshold: f64,
}

/// Shape of the generated records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSchema {
    /// Includes the PAD code at index 0.
    pub vocab_size: usize,
    pub lab_means: Vec<f64>,
    pub lab_stds: Vec<f64>,
    pub min_visits: usize,
    pub max_visits: usize,
    pub max_codes_per_visit: usize,
    pub mean_gap_hours: f64,
}

impl RecordSchema {
    pub fn n_labs(&self) -> usize {
        self.lab_means.len()
    }
}

impl Default for RecordSchema {
    fn default() -> Self {
        Self {
            vocab_size: 120,
            // glucose, creatinine, lactate, bicarbonate
            lab_means: vec![120.0, 1.1, 1.6, 24.0],
            lab_stds: vec![25.0, 0.3, 0.5, 3.0],
            min_visits: 3,
            max_visits: 20,
            max_codes_per_visit: 3,
            mean_gap_hours: 24.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub n_classes: usize,
    /// Prevalence of all non-zero classes together.
    pub positive_rate: f64,
    /// Driver code groups; group `g` plants class `g + 1`.
    pub driver_codes: Vec<Vec<usize>>,
    pub lab_rule: LabThresholdRule,
    pub label_noise: f64,
    pub window: usize,
    pub decoy_rate: f64,
    pub out_of_window_decoy_rate: f64,
    pub schema: RecordSchema,
}

impl TaskSpec {
    pub fn new(name: TaskName) -> Self {
        let schema = RecordSchema::default();
        let crossing = |lab: usize| LabThresholdRule {
            lab_index: lab,
            threshold: schema.lab_means[lab] + 2.0 * schema.lab_stds[lab],
        };
        let (n_classes, positive_rate, driver_codes, lab_rule) = match name {
            TaskName::Mortality => (2, 0.10, vec![vec![11, 23, 37, 41, 59]], crossing(2)),
            TaskName::Dka => (2, 0.005, vec![vec![7, 19, 31, 53]], crossing(0)),
            TaskName::Los => (
                5,
                0.5,
                vec![vec![13, 29], vec![43, 61], vec![67, 71], vec![83, 97]],
                crossing(1),
            ),
        };
        Self {
            name,
            n_classes,
            positive_rate,
            driver_codes,
            lab_rule,
            label_noise: 0.02,
            window: 8,
            decoy_rate: 0.1,
            out_of_window_decoy_rate: 0.3,
            schema,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.positive_rate > 0.0 && self.positive_rate <= 0.5) {
            return bad(format!("positive rate {} outside (0, 0.5]", self.positive_rate));
        }
        if self.driver_codes.is_empty() || self.driver_codes.iter().any(Vec::is_empty) {
            return bad("driver codes must be nonempty".into());
        }
        if self.driver_codes.len() != self.n_classes - 1 {
            return bad(format!("{} driver groups for {} classes", self.driver_codes.len(), self.n_classes));
        }
        if self.driver_codes.iter().flatten().any(|&c| c == 0 || c >= self.schema.vocab_size) {
            return bad("driver codes must be valid non-PAD codes".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label noise {} outside [0, 0.5)", self.label_noise));
        }
        if self.lab_rule.lab_index >= self.schema.n_labs() {
            return bad("lab rule index outside the lab panel".into());
        }
        if self.window == 0 || self.schema.min_visits == 0 || self.schema.min_visits > self.schema.max_visits {
            return bad("invalid window or visit range".into());
        }
        if self.schema.lab_means.len() != self.schema.lab_stds.len() {
            return bad("lab means and stds differ in length".into());
        }
        Ok(())
    }

    pub fn driver_group(&self, code: usize) -> Option<usize> {
        self.driver_codes.iter().position(|g| g.contains(&code))
    }

    fn window_start(&self, n_visits: usize) -> usize {
        n_visits.saturating_sub(self.window)
    }

    /// Class implied by the planted rule, read directly off the record.
    pub fn rule_class(&self, record: &PatientRecord) -> usize {
        let ev = self.evidence(record);
        match (ev.latest_driver_group, ev.crossing_positions.is_empty()) {
            (Some(g), false) => g + 1,
            _ => 0,
        }
    }

    fn evidence(&self, record: &PatientRecord) -> Evidence {
        let start = self.window_start(record.visits.len());
        let mut ev = Evidence::default();
        let mut pos = 0;
        for (v, visit) in record.visits.iter().enumerate() {
            for &code in &visit.codes {
                if v >= start {
                    if let Some(g) = self.driver_group(code) {
                        ev.latest_driver_group = Some(g);
                        ev.driver_positions.push(pos);
                    }
                }
                pos += 1;
            }
            for (i, &value) in visit.labs.iter().enumerate() {
                if v >= start && i == self.lab_rule.lab_index && value > self.lab_rule.threshold {
                    ev.crossing_positions.push(pos);
                }
                pos += 1;
            }
        }
        ev
    }

    /// Closed-form `P(label != 0 | record)` for the generator, which only
    /// depends on whether the record shows full, partial or no evidence.
    pub fn bayes_positive_probability(&self, record: &PatientRecord) -> f64 {
        let p = self.positive_rate;
        let eps = self.label_noise;
        let neg_full = eps * p / (1.0 - p);
        let ev = self.evidence(record);
        let has_driver = !ev.driver_positions.is_empty();
        let has_crossing = !ev.crossing_positions.is_empty();
        match (has_driver, has_crossing) {
            (true, true) => p * (1.0 - eps) / (p * (1.0 - eps) + (1.0 - p) * neg_full),
            (false, false) => 0.0,
            _ => {
                let pos = p * eps;
                let neg = (1.0 - p) * (1.0 - neg_full) * self.decoy_rate;
                pos / (pos + neg)
            }
        }
    }

    fn class_prior(&self, rng: &mut ChaCha8Rng) -> usize {
        if rng.random::<f64>() < self.positive_rate {
            1 + rng.random_range(0..self.n_classes - 1)
        } else {
            0
        }
    }
}

#[derive(Default)]
struct Evidence {
    latest_driver_group: Option<usize>,
    driver_positions: Vec<usize>,
    crossing_positions: Vec<usize>,
}

enum Plan {
    None,
    Full(usize),
    DriverOnly(usize),
    CrossingOnly,
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// Generates `n` records; record `i` depends only on `(task, seed, i)`.
pub fn generate(task: &TaskSpec, n_samples: usize, seed: u64) -> Result<Vec<PatientRecord>> {
    task.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n-samples must be positive".into()));
    }
    (0..n_samples).map(|i| generate_one(task, seed, i as u64)).collect()
}

pub fn generate_one(task: &TaskSpec, seed: u64, index: u64) -> Result<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let schema = &task.schema;
    let n_labs = schema.n_labs();
    let drivers: Vec<usize> = task.driver_codes.iter().flatten().copied().collect();
    let background: Vec<usize> = (1..schema.vocab_size).filter(|c| !drivers.contains(c)).collect();
    let gap = Exp::new(1.0 / schema.mean_gap_hours).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let lab_dists: Vec<Normal<f64>> = schema
        .lab_means
        .iter()
        .zip(&schema.lab_stds)
        .map(|(m, s)| Normal::new(*m, *s).map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect::<Result<_>>()?;
    let rule_lab = task.lab_rule.lab_index;
    let threshold = task.lab_rule.threshold;
    let rule_std = schema.lab_stds[rule_lab];

    let n_visits = rng.random_range(schema.min_visits..=schema.max_visits);
    let label = task.class_prior(&mut rng);
    let n_pos_classes = task.n_classes - 1;
    let p = task.positive_rate;

    let plan = if label > 0 {
        if rng.random::<f64>() < 1.0 - task.label_noise {
            Plan::Full(label - 1)
        } else if rng.random::<bool>() {
            Plan::DriverOnly(label - 1)
        } else {
            Plan::CrossingOnly
        }
    } else {
        let u: f64 = rng.random();
        let full = task.label_noise * p / (1.0 - p);
        if u < full {
            Plan::Full(rng.random_range(0..n_pos_classes))
        } else if u < full + task.decoy_rate {
            if rng.random::<bool>() {
                Plan::DriverOnly(rng.random_range(0..n_pos_classes))
            } else {
                Plan::CrossingOnly
            }
        } else {
            Plan::None
        }
    };

    let mut visits = Vec::with_capacity(n_visits);
    for v in 0..n_visits {
        let delta_t = if v == 0 { 0.0 } else { round_to(gap.sample(&mut rng), 2) };
        let n_codes = rng.random_range(1..=schema.max_codes_per_visit);
        let codes = (0..n_codes)
            .map(|_| {
                // rank-skewed sampling: squaring a uniform favours low ranks
                let u: f64 = rng.random();
                background[((u * u) * background.len() as f64) as usize]
            })
            .collect();
        let labs = (0..n_labs)
            .map(|i| {
                let mut value = lab_dists[i].sample(&mut rng);
                if i == rule_lab {
                    value = value.min(threshold - 0.25 * rule_std);
                }
                round_to(value, 3)
            })
            .collect();
        visits.push(Visit { codes, labs, delta_t });
    }

    let start = task.window_start(n_visits);
    let plant_driver = |visits: &mut Vec<Visit>, rng: &mut ChaCha8Rng, group: usize, lo: usize, hi: usize| {
        let v = rng.random_range(lo..hi);
        let code = *task.driver_codes[group].choose(rng).expect("nonempty group");
        let slot = rng.random_range(0..visits[v].codes.len());
        visits[v].codes[slot] = code;
    };
    let plant_crossing = |visits: &mut Vec<Visit>, rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
        let v = rng.random_range(lo..hi);
        visits[v].labs[rule_lab] = round_to(threshold + rng.random_range(0.5..3.0) * rule_std, 3);
    };

    if start > 0 && rng.random::<f64>() < task.out_of_window_decoy_rate {
        let group = rng.random_range(0..n_pos_classes);
        plant_driver(&mut visits, &mut rng, group, 0, start);
        plant_crossing(&mut visits, &mut rng, 0, start);
    }
    match plan {
        Plan::None => {}
        Plan::Full(group) => {
            plant_driver(&mut visits, &mut rng, group, start, n_visits);
            plant_crossing(&mut visits, &mut rng, start, n_visits);
        }
        Plan::DriverOnly(group) => plant_driver(&mut visits, &mut rng, group, start, n_visits),
        Plan::CrossingOnly => plant_crossing(&mut visits, &mut rng, start, n_visits),
    }

    let mut record = PatientRecord { visits, label, ground_truth_mask: Vec::new() };
    record.ground_truth_mask = ground_truth_mask(task, &record);
    Ok(record)
}

/// Marks the in-window driver codes and in-window lab crossings, the
/// positions the rule reads to reach its decision.
pub fn ground_truth_mask(task: &TaskSpec, record: &PatientRecord) -> Vec<bool> {
    let ev = task.evidence(record);
    let mut mask = vec![false; record.n_positions()];
    for p in ev.driver_positions.iter().chain(&ev.crossing_positions) {
        mask[*p] = true;
    }
    mask
}

/// Value of the rule lab at every in-window rule-lab position, `None`
/// elsewhere.
pub fn in_window_rule_lab(task: &TaskSpec, record: &PatientRecord) -> Vec<Option<f64>> {
    let start = task.window_start(record.visits.len());
    record
        .feature_positions()
        .into_iter()
        .map(|fp| match fp.kind {
            FeatureKind::Lab { index } if fp.visit >= start && index == task.lab_rule.lab_index => {
                Some(record.visits[fp.visit].labs[index])
            }
            _ => None,
        })
        .collect()
}

/// Positions inside the rule's window of most recent visits.
pub fn in_window_positions(task: &TaskSpec, record: &PatientRecord) -> Vec<bool> {
    let start = task.window_start(record.visits.len());
    record.feature_positions().into_iter().map(|fp| fp.visit >= start).collect()
}

/// Whether a position is a lab crossing or driver code according to `task`.
pub fn is_rule_feature(task: &TaskSpec, record: &PatientRecord, position: usize) -> bool {
    let positions = record.feature_positions();
    let fp = positions[position];
    let visit = &record.visits[fp.visit];
    match fp.kind {
        FeatureKind::Code { slot } => task.driver_group(visit.codes[slot]).is_some(),
        FeatureKind::Lab { index } => index == task.lab_rule.lab_index && visit.labs[index] > task.lab_rule.threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dka_prevalence_within_binomial_band() {
        let task = TaskSpec::new(TaskName::Dka);
        let records = generate(&task, 10_000, 42).unwrap();
        let positives = records.iter().filter(|r| r.label == 1).count();
        assert!((20..=80).contains(&positives), "{positives} positives");
    }

    #[test]
    fn generation_is_deterministic_and_shardable() {
        let task = TaskSpec::new(TaskName::Mortality);
        let a = generate(&task, 50, 9).unwrap();
        let b = generate(&task, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_one(&task, 9, 37).unwrap(), a[37]);
        assert_ne!(generate(&task, 50, 10).unwrap(), a);
    }

    #[test]
    fn records_respect_schema() {
        for name in TaskName::ALL {
            let task = TaskSpec::new(name);
            for r in generate(&task, 300, 1).unwrap() {
                assert!(r.visits.len() >= task.schema.min_visits && r.visits.len() <= task.schema.max_visits);
                assert!(r.visits.iter().all(|v| v.delta_t >= 0.0));
                assert!(r.visits.iter().all(|v| v.labs.len() == task.schema.n_labs()));
                assert!(r.label < task.n_classes);
                assert_eq!(r.ground_truth_mask.len(), r.n_positions());
                let marked = r.ground_truth_mask.iter().filter(|m| **m).count();
                if r.label > 0 {
                    assert!(marked >= 1);
                }
                assert!(marked as f64 <= 0.2 * r.n_positions() as f64);
            }
        }
    }

    #[test]
    fn no_evidence_means_negative() {
        let task = TaskSpec::new(TaskName::Mortality);
        let records = generate(&task, 5_000, 3).unwrap();
        let clean: Vec<_> = records.iter().filter(|r| r.ground_truth_mask.iter().all(|m| !m)).collect();
        assert!(clean.len() > 3_000);
        let negative = clean.iter().filter(|r| r.label == 0).count() as f64 / clean.len() as f64;
        assert!(negative >= 1.0 - task.label_noise, "{negative}");
    }

    #[test]
    fn mask_marks_only_rule_features() {
        let task = TaskSpec::new(TaskName::Los);
        for r in generate(&task, 200, 5).unwrap() {
            for (i, m) in r.ground_truth_mask.iter().enumerate() {
                if *m {
                    assert!(is_rule_feature(&task, &r, i));
                }
            }
        }
    }

    #[test]
    fn invalid_task_settings_are_rejected() {
        let mut task = TaskSpec::new(TaskName::Mortality);
        task.positive_rate = 0.7;
        assert!(generate(&task, 10, 0).is_err());
        let task = TaskSpec::new(TaskName::Mortality);
        assert!(generate(&task, 0, 0).is_err());
    }
}
