//! Gradient-based attributions over the model's input leaves.
//!
//! The reference input replaces every code embedding with the PAD
//! embedding (zero) and every lab with the mask policy's value. Scores
//! are elementwise `multiplier ⊙ (x - x0)` summed over each position's
//! slice of the input leaves, so they add up across positions.

use crate::autodiff::{BackwardPolicy, NodeId, ReferenceActivations, Tensor};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, GateFlags, InputLeaf, Model, PreparedRecord};

use super::mask::MaskPolicy;
use super::{AttributionMap, Method};

struct Endpoints {
    prepared: PreparedRecord,
    codes: Tensor,
    labs: Tensor,
    base_codes: Tensor,
    base_labs: Tensor,
}

impl Endpoints {
    fn new(model: &Model, record: &PatientRecord, policy: &MaskPolicy) -> Result<Self> {
        let prepared = model.prepare(record)?;
        if policy.lab_values.len() != model.config.n_labs {
            return Err(Error::Shape {
                op: "baseline",
                detail: format!("{} lab replacements for {} labs", policy.lab_values.len(), model.config.n_labs),
            });
        }
        let codes = model.code_vectors(&prepared);
        let labs = prepared.labs.clone();
        let (base_codes, base_labs) = model.baseline_inputs(&prepared, &policy.lab_values);
        Ok(Self { prepared, codes, labs, base_codes, base_labs })
    }

    fn interpolate(&self, alpha: f64) -> (Tensor, Tensor) {
        let lerp = |x: &Tensor, x0: &Tensor| {
            let data = x.data().iter().zip(x0.data()).map(|(a, b)| b + alpha * (a - b)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape as the endpoint")
        };
        (lerp(&self.codes, &self.base_codes), lerp(&self.labs, &self.base_labs))
    }

    /// Sums `multiplier ⊙ (x - x0)` over each position's leaf range.
    fn scores(&self, leaves: &[InputLeaf], code_leaf: Option<NodeId>, code_mult: &[f64], lab_mult: &[f64]) -> Vec<f64> {
        leaves
            .iter()
            .map(|leaf| {
                let (mult, x, x0) = if Some(leaf.node) == code_leaf {
                    (code_mult, self.codes.data(), self.base_codes.data())
                } else {
                    (lab_mult, self.labs.data(), self.base_labs.data())
                };
                (leaf.offset..leaf.offset + leaf.len).map(|j| mult[j] * (x[j] - x0[j])).sum()
            })
            .collect()
    }
}

/// Target probability and input-leaf multipliers from one backward pass.
struct Pass {
    value: f64,
    code_mult: Vec<f64>,
    lab_mult: Vec<f64>,
    leaves: Vec<InputLeaf>,
    code_leaf: Option<NodeId>,
}

fn gradient_pass(
    model: &Model,
    ep: &Endpoints,
    codes: Tensor,
    labs: Tensor,
    target: usize,
    policy: &BackwardPolicy<'_>,
    options: ForwardOptions,
) -> Result<Pass> {
    let mut trace = model.forward_inputs(&ep.prepared, codes, labs, options)?;
    let out = trace.probability_node(target)?;
    let value = trace.tape.value(out).data()[0];
    let grads = trace.tape.backward(out, policy)?;
    let take = |leaf: Option<NodeId>| leaf.map(|id| grads.wrt_or_zeros(id, &trace.tape).into_data()).unwrap_or_default();
    Ok(Pass {
        value,
        code_mult: take(trace.code_leaf),
        lab_mult: take(trace.lab_leaf),
        leaves: trace.input_leaves.clone(),
        code_leaf: trace.code_leaf,
    })
}

fn forward_value(model: &Model, ep: &Endpoints, codes: Tensor, labs: Tensor, target: usize) -> Result<f64> {
    let trace = model.forward_inputs(&ep.prepared, codes, labs, ForwardOptions::default())?;
    Ok(trace.probabilities()[target])
}

fn check_target(model: &Model, target: usize) -> Result<()> {
    if target >= model.n_classes() {
        return Err(Error::InvalidConfig(format!("target class {target} outside {} classes", model.n_classes())));
    }
    Ok(())
}

/// Integrated Gradients with the midpoint Riemann rule over `steps` points.
pub fn integrated_gradients(
    model: &Model,
    record: &PatientRecord,
    target_class: usize,
    policy: &MaskPolicy,
    steps: usize,
) -> Result<AttributionMap> {
    check_target(model, target_class)?;
    if steps == 0 {
        return Err(Error::InvalidConfig("integrated gradients needs at least one step".into()));
    }
    let ep = Endpoints::new(model, record, policy)?;
    let f_x = forward_value(model, &ep, ep.codes.clone(), ep.labs.clone(), target_class)?;
    let f_0 = forward_value(model, &ep, ep.base_codes.clone(), ep.base_labs.clone(), target_class)?;

    let backward = BackwardPolicy::standard().inputs_only();
    let mut code_acc = vec![0.0; ep.codes.numel()];
    let mut lab_acc = vec![0.0; ep.labs.numel()];
    let mut leaves = Vec::new();
    let mut code_leaf = None;
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let (c, l) = ep.interpolate(alpha);
        let pass = gradient_pass(model, &ep, c, l, target_class, &backward, ForwardOptions::default())?;
        code_acc.iter_mut().zip(&pass.code_mult).for_each(|(a, g)| *a += g);
        lab_acc.iter_mut().zip(&pass.lab_mult).for_each(|(a, g)| *a += g);
        leaves = pass.leaves;
        code_leaf = pass.code_leaf;
    }
    let inv = 1.0 / steps as f64;
    code_acc.iter_mut().for_each(|g| *g *= inv);
    lab_acc.iter_mut().for_each(|g| *g *= inv);
    let scores = ep.scores(&leaves, code_leaf, &code_acc, &lab_acc);
    let total = full_sum(&ep, &code_acc, &lab_acc);
    let delta = f_x - f_0;
    Ok(AttributionMap::new(Method::IntegratedGradients, target_class, scores)
        .with_meta("steps", steps as f64)
        .with_meta("delta", delta)
        .with_meta("completeness_residual", (total - delta).abs())
        .with_meta("forward_passes", (steps + 2) as f64)
        .with_meta("backward_passes", steps as f64))
}

/// `Σ mult ⊙ (x - x0)` over every input element, including elements that
/// belong to no position (there are none for well-formed records).
fn full_sum(ep: &Endpoints, code_mult: &[f64], lab_mult: &[f64]) -> f64 {
    let part = |m: &[f64], x: &Tensor, x0: &Tensor| -> f64 {
        m.iter().zip(x.data().iter().zip(x0.data())).map(|(g, (a, b))| g * (a - b)).sum()
    };
    part(code_mult, &ep.codes, &ep.base_codes) + part(lab_mult, &ep.labs, &ep.base_labs)
}

/// DeepLIFT-Rescale: one reference pass, one target pass, one backward.
pub fn deeplift(model: &Model, record: &PatientRecord, target_class: usize, policy: &MaskPolicy) -> Result<AttributionMap> {
    check_target(model, target_class)?;
    let ep = Endpoints::new(model, record, policy)?;
    let mut reference = model.forward_inputs(&ep.prepared, ep.base_codes.clone(), ep.base_labs.clone(), ForwardOptions::default())?;
    let ref_out = reference.probability_node(target_class)?;
    let f_0 = reference.tape.value(ref_out).data()[0];
    let activations = ReferenceActivations::capture(&reference.tape);
    drop(reference);

    let backward = BackwardPolicy::deeplift(&activations).inputs_only();
    let pass = gradient_pass(model, &ep, ep.codes.clone(), ep.labs.clone(), target_class, &backward, ForwardOptions::default())?;
    let scores = ep.scores(&pass.leaves, pass.code_leaf, &pass.code_mult, &pass.lab_mult);
    let total = full_sum(&ep, &pass.code_mult, &pass.lab_mult);
    let delta = pass.value - f_0;
    Ok(AttributionMap::new(Method::Deeplift, target_class, scores)
        .with_meta("delta", delta)
        .with_meta("summation_residual", (total - delta).abs())
        .with_meta("forward_passes", 2.0)
        .with_meta("backward_passes", 1.0))
}

/// GIM-modified gradient times input difference.
pub fn gim(
    model: &Model,
    record: &PatientRecord,
    target_class: usize,
    policy: &MaskPolicy,
    temperature: f64,
    gates: GateFlags,
) -> Result<AttributionMap> {
    check_target(model, target_class)?;
    let ep = Endpoints::new(model, record, policy)?;
    let backward = BackwardPolicy::gim(temperature).inputs_only();
    let options = ForwardOptions { gates, ..Default::default() };
    let pass = gradient_pass(model, &ep, ep.codes.clone(), ep.labs.clone(), target_class, &backward, options)?;
    let scores = ep.scores(&pass.leaves, pass.code_leaf, &pass.code_mult, &pass.lab_mult);
    Ok(AttributionMap::new(Method::Gim, target_class, scores)
        .with_meta("temperature", temperature)
        .with_meta("forward_passes", 1.0)
        .with_meta("backward_passes", 1.0))
}

/// Plain gradient times input difference.
pub fn gradient_x_input(model: &Model, record: &PatientRecord, target_class: usize, policy: &MaskPolicy) -> Result<AttributionMap> {
    check_target(model, target_class)?;
    let ep = Endpoints::new(model, record, policy)?;
    let backward = BackwardPolicy::standard().inputs_only();
    let pass = gradient_pass(model, &ep, ep.codes.clone(), ep.labs.clone(), target_class, &backward, ForwardOptions::default())?;
    let scores = ep.scores(&pass.leaves, pass.code_leaf, &pass.code_mult, &pass.lab_mult);
    Ok(AttributionMap::new(Method::GradientXInput, target_class, scores)
        .with_meta("forward_passes", 1.0)
        .with_meta("backward_passes", 1.0))
}
