//! Attribution methods and the shared feature-masking machinery.
//!
//! Every method returns an [`AttributionMap`] with one score per feature
//! position of the record (see [`PatientRecord::feature_positions`]).

mod baseline;
mod chefer;
mod gradient;
mod kernel_shap;
mod lime;
mod linalg;
mod mask;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PatientRecord, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{GateFlags, Model};

pub use baseline::{oracle_attribution, random_baseline};
pub use chefer::{chefer, rollout};
pub use gradient::{deeplift, gim, gradient_x_input, integrated_gradients};
pub use kernel_shap::{
    brute_force_shapley, kernel_shap, kernel_shap_values, shapley_kernel_weight, KernelWeight, ShapMode,
    ShapSettings, ShapValues,
};
pub use lime::{lime, lime_values, LimeSettings, LimeValues};
pub use mask::{mask, LabReplacement, MaskPolicy};

/// Per-position importance scores for one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub scores: Vec<f64>,
    pub target_class: usize,
    pub method: String,
    /// Method diagnostics such as pass counts or residuals.
    #[serde(default)]
    pub meta: BTreeMap<String, f64>,
}

impl AttributionMap {
    pub fn new(method: Method, target_class: usize, scores: Vec<f64>) -> Self {
        Self { scores, target_class, method: method.as_str().to_string(), meta: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn check_aligned(&self, record: &PatientRecord) -> Result<()> {
        let expected = record.n_positions();
        if self.scores.len() != expected {
            return Err(Error::MisalignedAttribution { got: self.scores.len(), expected });
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "attribution" });
        }
        Ok(())
    }

    /// Position indices ordered by descending score; ties go to the lower
    /// index first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    KernelShap,
    Lime,
    IntegratedGradients,
    Deeplift,
    Gim,
    GradientXInput,
    Chefer,
    Random,
    Oracle,
}

impl Method {
    /// The benchmark grid: six attribution methods plus the random floor.
    pub const BENCHMARK: [Method; 7] = [
        Method::KernelShap,
        Method::Lime,
        Method::IntegratedGradients,
        Method::Deeplift,
        Method::Gim,
        Method::Chefer,
        Method::Random,
    ];

    pub const ALL: [Method; 9] = [
        Method::KernelShap,
        Method::Lime,
        Method::IntegratedGradients,
        Method::Deeplift,
        Method::Gim,
        Method::GradientXInput,
        Method::Chefer,
        Method::Random,
        Method::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::KernelShap => "kernel-shap",
            Method::Lime => "lime",
            Method::IntegratedGradients => "integrated-gradients",
            Method::Deeplift => "deeplift",
            Method::Gim => "gim",
            Method::GradientXInput => "gradient-x-input",
            Method::Chefer => "chefer",
            Method::Random => "random",
            Method::Oracle => "oracle",
        }
    }

    pub fn is_gradient_based(self) -> bool {
        matches!(
            self,
            Method::IntegratedGradients | Method::Deeplift | Method::Gim | Method::GradientXInput | Method::Chefer
        )
    }

    pub fn applies_to(self, model: &Model) -> bool {
        self != Method::Chefer || model.architecture().has_attention()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .or(match s {
                "shap" => Some(Method::KernelShap),
                "ig" => Some(Method::IntegratedGradients),
                "gxi" => Some(Method::GradientXInput),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

/// Settings shared by the attribution dispatcher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    pub ig_steps: usize,
    pub gim_temperature: f64,
    pub gim_gates: GateSettings,
    pub lime: LimeSettings,
    pub shap: ShapSettings,
}

/// Serializable mirror of [`GateFlags`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSettings {
    pub update: bool,
    pub reset: bool,
}

impl From<GateSettings> for GateFlags {
    fn from(g: GateSettings) -> Self {
        GateFlags { update: g.update, reset: g.reset }
    }
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            ig_steps: 50,
            gim_temperature: crate::autodiff::DEFAULT_GIM_TEMPERATURE,
            gim_gates: GateSettings::default(),
            lime: LimeSettings::default(),
            shap: ShapSettings::default(),
        }
    }
}

/// Everything a method may need besides the model and record.
#[derive(Clone, Copy, Debug)]
pub struct AttributionContext<'a> {
    pub policy: &'a MaskPolicy,
    pub settings: &'a MethodSettings,
    /// Only the oracle reads the task.
    pub task: Option<&'a TaskSpec>,
    /// Seed for the stochastic methods, usually derived per record.
    pub seed: u64,
}

/// Runs `method` on one record.
pub fn attribute(
    method: Method,
    model: &Model,
    record: &PatientRecord,
    target_class: usize,
    ctx: &AttributionContext<'_>,
) -> Result<AttributionMap> {
    let s = ctx.settings;
    match method {
        Method::KernelShap => kernel_shap(model, record, target_class, ctx.policy, &s.shap, ctx.seed),
        Method::Lime => lime(model, record, target_class, ctx.policy, &s.lime, ctx.seed),
        Method::IntegratedGradients => integrated_gradients(model, record, target_class, ctx.policy, s.ig_steps),
        Method::Deeplift => deeplift(model, record, target_class, ctx.policy),
        Method::Gim => gim(model, record, target_class, ctx.policy, s.gim_temperature, s.gim_gates.into()),
        Method::GradientXInput => gradient_x_input(model, record, target_class, ctx.policy),
        Method::Chefer => chefer(model, record, target_class),
        Method::Random => Ok(random_baseline(record, target_class, ctx.seed)),
        Method::Oracle => {
            let task = ctx
                .task
                .ok_or_else(|| Error::InvalidConfig("oracle attribution needs the generating task".into()))?;
            Ok(oracle_attribution(task, record, target_class, ctx.policy))
        }
    }
}
