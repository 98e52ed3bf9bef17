use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::FaithfulnessReport;
use crate::attribution::Method;
use crate::error::{Error, Result};
use crate::model::Architecture;

/// Pairwise head-to-head counts over (model, task) pairs.
///
/// `wins[i][j]` counts pairs where method `i` has the strictly higher
/// composite; exact ties land in `ties[i][j]` and count for neither side.
/// `denominators[i][j]` is the number of pairs both methods apply to.
/// Diagonal cells are zero and rendered empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub methods: Vec<String>,
    pub wins: Vec<Vec<usize>>,
    pub ties: Vec<Vec<usize>>,
    pub denominators: Vec<Vec<usize>>,
}

impl WinMatrix {
    /// Builds the matrix for `methods` over `pairs` of (model, task).
    ///
    /// Every (method, model, task) triple with `applies(method, model)` must
    /// have exactly one report; the error lists every absent triple.
    pub fn build(
        reports: &[FaithfulnessReport],
        methods: &[String],
        pairs: &[(String, String)],
        applies: impl Fn(&str, &str) -> bool,
    ) -> Result<Self> {
        if methods.is_empty() {
            return Err(Error::InvalidConfig("win matrix needs at least one method".into()));
        }
        let mut scores: BTreeMap<(&str, &str, &str), f64> = BTreeMap::new();
        for r in reports {
            if scores.insert((&r.method, &r.model, &r.task), r.composite).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate report for {}/{}/{}",
                    r.method, r.model, r.task
                )));
            }
        }
        let mut missing = Vec::new();
        for m in methods {
            for (model, task) in pairs {
                if applies(m, model) && !scores.contains_key(&(m.as_str(), model.as_str(), task.as_str())) {
                    missing.push(format!("({m}, {model}, {task})"));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing.join(", ")));
        }

        let k = methods.len();
        let mut wins = vec![vec![0; k]; k];
        let mut ties = vec![vec![0; k]; k];
        let mut denominators = vec![vec![0; k]; k];
        for (model, task) in pairs {
            for i in 0..k {
                for j in 0..k {
                    if i == j || !applies(&methods[i], model) || !applies(&methods[j], model) {
                        continue;
                    }
                    let a = scores[&(methods[i].as_str(), model.as_str(), task.as_str())];
                    let b = scores[&(methods[j].as_str(), model.as_str(), task.as_str())];
                    denominators[i][j] += 1;
                    if a > b {
                        wins[i][j] += 1;
                    } else if a == b {
                        ties[i][j] += 1;
                    }
                }
            }
        }
        Ok(Self { methods: methods.to_vec(), wins, ties, denominators })
    }

    /// `"wins/denominator"`, or `None` on the diagonal.
    pub fn cell(&self, i: usize, j: usize) -> Option<String> {
        (i != j).then(|| format!("{}/{}", self.wins[i][j], self.denominators[i][j]))
    }

    /// Row method against column method, one cell per pair of methods.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| |");
        for m in &self.methods {
            let _ = write!(out, " {m} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.methods.len()));
        out.push('\n');
        for (i, m) in self.methods.iter().enumerate() {
            let _ = write!(out, "| {m} |");
            for j in 0..self.methods.len() {
                let _ = write!(out, " {} |", self.cell(i, j).unwrap_or_default());
            }
            out.push('\n');
        }
        out
    }
}

/// Win matrix over every (model, task) pair present in `reports`, with
/// methods in benchmark order and Chefer restricted to attention models.
pub fn win_matrix(reports: &[FaithfulnessReport]) -> Result<WinMatrix> {
    let rank = |m: &str| m.parse::<Method>().map(|m| m as usize).unwrap_or(usize::MAX);
    let mut methods: Vec<String> = reports.iter().map(|r| r.method.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    methods.sort_by(|a, b| rank(a).cmp(&rank(b)).then(a.cmp(b)));
    let pairs: Vec<(String, String)> =
        reports.iter().map(|r| (r.model.clone(), r.task.clone())).collect::<BTreeSet<_>>().into_iter().collect();
    WinMatrix::build(reports, &methods, &pairs, method_applies)
}

/// Applicability by name; unknown names are treated as applicable.
pub fn method_applies(method: &str, model: &str) -> bool {
    match (method.parse::<Method>(), model.parse::<Architecture>()) {
        (Ok(Method::Chefer), Ok(arch)) => arch.has_attention(),
        _ => true,
    }
}
