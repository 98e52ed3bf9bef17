//! Reverse sweep over a [`Tape`] with three propagation rules.
//!
//! * `Standard` is ordinary reverse-mode differentiation.
//! * `DeepLiftRescale` propagates multipliers `Δy / Δx` against a reference
//!   pass recorded on an identically shaped tape. Elementwise nonlinearities
//!   use the rescale rule; bilinear ops (`mul`, `matmul` of two activations)
//!   use the average-of-operands split, and softmax / layer-norm are
//!   decomposed into exp, reciprocal, square and products so that the
//!   summation-to-delta identity holds exactly for every supported op.
//! * `Gim` re-evaluates attention softmax Jacobians at `logits / T`, treats
//!   layer-norm statistics as constants and routes products only through
//!   the non-gate operand when a gate is flagged. All other ops are standard.
//!   With `T = 1` the softmax and layer-norm rules are disabled, so GIM
//!   without gate flags collapses to the standard gradient.

use super::tape::{
    broadcast_kind, softmax_rows, transpose, Axis, GateOperand, LeafKind, Op, OpKind, Saved,
    SoftmaxRole, Tape,
};
use super::tensor::{matmul_nt_acc, matmul_tn_acc, Tensor};
use super::NodeId;
use crate::error::{Error, Result};

/// Default temperature for the GIM softmax rule.
pub const DEFAULT_GIM_TEMPERATURE: f64 = 2.0;
/// Below this `|Δx|` the rescale multiplier falls back to the local gradient.
pub const DEFAULT_NEAR_ZERO_DELTA: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    Standard,
    DeepLiftRescale,
    Gim,
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardPolicy<'r> {
    pub mode: BackwardMode,
    pub gim_temperature: f64,
    pub reference: Option<&'r ReferenceActivations>,
    pub near_zero_delta_threshold: f64,
    /// When false, parameter leaves are treated like constants and no
    /// gradient is accumulated for them.
    pub param_gradients: bool,
}

impl<'r> BackwardPolicy<'r> {
    pub fn standard() -> Self {
        Self {
            mode: BackwardMode::Standard,
            gim_temperature: DEFAULT_GIM_TEMPERATURE,
            reference: None,
            near_zero_delta_threshold: DEFAULT_NEAR_ZERO_DELTA,
            param_gradients: true,
        }
    }

    /// Same policy, but only input leaves receive gradients.
    pub fn inputs_only(self) -> Self {
        Self { param_gradients: false, ..self }
    }

    pub fn gim(temperature: f64) -> Self {
        Self { mode: BackwardMode::Gim, gim_temperature: temperature, ..Self::standard() }
    }

    pub fn deeplift(reference: &'r ReferenceActivations) -> Self {
        Self { mode: BackwardMode::DeepLiftRescale, reference: Some(reference), ..Self::standard() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gim_temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gim temperature must be positive, got {}",
                self.gim_temperature
            )));
        }
        if !(self.near_zero_delta_threshold > 0.0) {
            return Err(Error::InvalidConfig("near-zero delta threshold must be positive".into()));
        }
        if self.mode == BackwardMode::DeepLiftRescale && self.reference.is_none() {
            return Err(Error::MissingReference);
        }
        Ok(())
    }
}

/// Activations of a reference forward pass, aligned node-for-node with a
/// target pass that has the same structure.
#[derive(Clone, Debug)]
pub struct ReferenceActivations {
    signature: Vec<(OpKind, Vec<usize>)>,
    values: Vec<Tensor>,
}

impl ReferenceActivations {
    pub fn capture(tape: &Tape<'_>) -> Self {
        let signature = tape
            .nodes
            .iter()
            .map(|n| (n.op.kind(), n.value.shape().to_vec()))
            .collect();
        let values = tape.nodes.iter().map(|n| n.value.as_ref().clone()).collect();
        Self { signature, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0)
    }

    /// Node ids whose op is an elementwise or row-wise nonlinearity.
    pub fn nonlinear_nodes(&self) -> Vec<NodeId> {
        self.signature
            .iter()
            .enumerate()
            .filter(|(_, (kind, _))| is_nonlinear(*kind))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn check_alignment(&self, tape: &Tape<'_>) -> Result<()> {
        if self.signature.len() != tape.nodes.len() {
            return Err(Error::TapeMismatch {
                node: self.signature.len().min(tape.nodes.len()),
                detail: format!(
                    "reference has {} nodes, target has {}",
                    self.signature.len(),
                    tape.nodes.len()
                ),
            });
        }
        for (i, ((kind, shape), node)) in self.signature.iter().zip(&tape.nodes).enumerate() {
            if *kind != node.op.kind() || shape.as_slice() != node.value.shape() {
                return Err(Error::TapeMismatch {
                    node: i,
                    detail: format!(
                        "reference {kind:?}{shape:?} vs target {:?}{:?}",
                        node.op.kind(),
                        node.value.shape()
                    ),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn is_nonlinear(kind: OpKind) -> bool {
    matches!(
        kind,
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp | OpKind::Softmax | OpKind::LayerNorm
    )
}

/// Per-node gradients (or DeepLIFT multipliers) from one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to any recorded node; `None` when no signal
    /// reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn wrt_or_zeros(&self, id: NodeId, tape: &Tape<'_>) -> Tensor {
        self.wrt(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }

    /// Gradients of every input leaf, keyed by node id.
    pub fn leaves(&self, tape: &Tape<'_>) -> Vec<(NodeId, Tensor)> {
        (0..tape.nodes.len())
            .map(NodeId)
            .filter(|id| tape.leaf_kind(*id) == Some(LeafKind::Input))
            .map(|id| (id, self.wrt_or_zeros(id, tape)))
            .collect()
    }
}

impl<'a> Tape<'a> {
    /// Backward from a scalar output.
    pub fn backward(&self, output: NodeId, policy: &BackwardPolicy<'_>) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        self.backward_with_seed(output, Tensor::filled(out.shape(), 1.0), policy)
    }

    /// Backward from `output` with an explicit upstream gradient.
    pub fn backward_with_seed(
        &self,
        output: NodeId,
        seed: Tensor,
        policy: &BackwardPolicy<'_>,
    ) -> Result<Gradients> {
        policy.validate()?;
        if seed.numel() != self.value(output).numel() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            });
        }
        let reference = match policy.mode {
            BackwardMode::DeepLiftRescale => {
                let r = policy.reference.ok_or(Error::MissingReference)?;
                r.check_alignment(self)?;
                Some(r)
            }
            _ => None,
        };

        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            needs[i] = match node.op {
                Op::Leaf(kind) => match kind {
                    LeafKind::Input => true,
                    LeafKind::Param => policy.param_gradients,
                    LeafKind::Constant => false,
                },
                _ => node.parents.iter().any(|p| needs[p.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(seed.into_data());
        let ctx = Ctx { tape: self, policy, reference };

        for i in (0..n).rev() {
            if !needs[i] || matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            let contributions = ctx.node_backward(i, g, &needs)?;
            for (parent, contribution) in self.nodes[i].parents.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut lower[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

struct Ctx<'t, 'a, 'r> {
    tape: &'t Tape<'a>,
    policy: &'t BackwardPolicy<'r>,
    reference: Option<&'r ReferenceActivations>,
}

impl Ctx<'_, '_, '_> {
    fn deeplift(&self) -> bool {
        self.reference.is_some()
    }

    /// The softmax and layer-norm interventions switch on together; at
    /// temperature 1 GIM is exactly the standard gradient.
    fn gim_active(&self) -> bool {
        self.policy.mode == BackwardMode::Gim && self.policy.gim_temperature != 1.0
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }

    fn ref_val(&self, id: NodeId) -> &Tensor {
        &self.reference.expect("deeplift reference").values[id.0]
    }

    /// Operand value to pair with the other side of a bilinear op. Under
    /// DeepLIFT this is the midpoint of target and reference activations,
    /// which makes `Δ(ab) = Δa·(b+b0)/2 + (a+a0)/2·Δb` exact.
    fn bilinear_partner(&self, id: NodeId) -> Vec<f64> {
        let v = self.val(id).data();
        let fixed = matches!(self.tape.leaf_kind(id), Some(LeafKind::Param | LeafKind::Constant));
        if !self.deeplift() || fixed {
            return v.to_vec();
        }
        v.iter().zip(self.ref_val(id).data()).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    fn node_backward(&self, i: usize, g: &[f64], needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.tape.nodes[i];
        let parents = &node.parents;
        let want = |k: usize| needs[parents[k].0];
        let y = node.value.as_ref();
        let thr = self.policy.near_zero_delta_threshold;

        let out = match &node.op {
            Op::Leaf(_) => Vec::new(),
            Op::MatMul => {
                let (a, b) = (self.val(parents[0]), self.val(parents[1]));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = want(0).then(|| {
                    let partner = self.bilinear_partner(parents[1]);
                    let mut out = vec![0.0; m * k];
                    matmul_nt_acc(g, &partner, m, n, k, &mut out);
                    out
                });
                let gb = want(1).then(|| {
                    let partner = self.bilinear_partner(parents[0]);
                    let mut out = vec![0.0; k * n];
                    matmul_tn_acc(&partner, g, m, k, n, &mut out);
                    out
                });
                vec![ga, gb]
            }
            Op::Add => {
                let (a, b) = (self.val(parents[0]), self.val(parents[1]));
                let bc = broadcast_kind(a, b).unwrap_or(false);
                let ga = want(0).then(|| g.to_vec());
                let gb = want(1).then(|| if bc { column_sums(g, a.cols()) } else { g.to_vec() });
                vec![ga, gb]
            }
            Op::Mul { gate } => {
                let (a, b) = (self.val(parents[0]), self.val(parents[1]));
                let bc = broadcast_kind(a, b).unwrap_or(false);
                let cols = a.cols();
                let gate = if self.policy.mode == BackwardMode::Gim { *gate } else { None };
                let ga = (want(0) && gate != Some(GateOperand::Lhs)).then(|| {
                    let pb = self.bilinear_partner(parents[1]);
                    g.iter()
                        .enumerate()
                        .map(|(j, gv)| gv * if bc { pb[j % cols] } else { pb[j] })
                        .collect::<Vec<_>>()
                });
                let gb = (want(1) && gate != Some(GateOperand::Rhs)).then(|| {
                    let pa = self.bilinear_partner(parents[0]);
                    let full: Vec<f64> = g.iter().zip(&pa).map(|(gv, av)| gv * av).collect();
                    if bc {
                        column_sums(&full, cols)
                    } else {
                        full
                    }
                });
                vec![ga, gb]
            }
            Op::Affine { scale, .. } => vec![Some(g.iter().map(|v| v * scale).collect())],
            Op::Relu | Op::Sigmoid | Op::Tanh | Op::Exp => {
                let x = self.val(parents[0]).data();
                let yv = y.data();
                let local = |j: usize| match node.op {
                    Op::Relu => {
                        if x[j] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Op::Sigmoid => yv[j] * (1.0 - yv[j]),
                    Op::Tanh => 1.0 - yv[j] * yv[j],
                    _ => yv[j],
                };
                let grad: Vec<f64> = if self.deeplift() {
                    let x0 = self.ref_val(parents[0]).data();
                    let y0 = self.ref_val(NodeId(i)).data();
                    (0..g.len())
                        .map(|j| {
                            let dx = x[j] - x0[j];
                            let m = if dx.abs() < thr { local(j) } else { (yv[j] - y0[j]) / dx };
                            g[j] * m
                        })
                        .collect()
                } else {
                    (0..g.len()).map(|j| g[j] * local(j)).collect()
                };
                vec![Some(grad)]
            }
            Op::Softmax { role } => {
                let x = self.val(parents[0]);
                let grad = if self.deeplift() {
                    softmax_deeplift(x, self.ref_val(parents[0]), g, thr)
                } else {
                    if self.gim_active() && *role == SoftmaxRole::Attention {
                        softmax_vjp(&softmax_rows(x, self.policy.gim_temperature), g)
                    } else {
                        softmax_vjp(y, g)
                    }
                };
                vec![Some(grad)]
            }
            Op::LayerNorm { eps } => {
                let Saved::LayerNorm { inv_std, .. } = &node.saved else {
                    return Err(Error::Shape { op: "layer-norm", detail: "missing saved statistics".into() });
                };
                let cols = y.cols();
                let grad = if self.deeplift() {
                    layer_norm_deeplift(self.val(parents[0]), self.ref_val(parents[0]), g, *eps, thr)
                } else if self.gim_active() {
                    g.iter().enumerate().map(|(j, gv)| gv * inv_std[j / cols]).collect()
                } else {
                    let mut out = vec![0.0; g.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = y.row_slice(r);
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            out[r * cols + j] = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    out
                };
                vec![Some(grad)]
            }
            Op::EmbeddingLookup { indices } => {
                let table = self.val(parents[0]);
                let cols = table.cols();
                let mut out = vec![0.0; table.numel()];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..cols {
                        out[ix * cols + j] += g[r * cols + j];
                    }
                }
                vec![Some(out)]
            }
            Op::Concat { axis } => {
                let mut out = Vec::with_capacity(parents.len());
                let total_cols = y.cols();
                let mut offset = 0;
                for (k, p) in parents.iter().enumerate() {
                    let part = self.val(*p);
                    let piece = match axis {
                        Axis::Rows => {
                            let len = part.numel();
                            let s = g[offset..offset + len].to_vec();
                            offset += len;
                            s
                        }
                        Axis::Cols => {
                            let c = part.cols();
                            let mut s = Vec::with_capacity(part.numel());
                            for r in 0..part.rows() {
                                s.extend_from_slice(&g[r * total_cols + offset..r * total_cols + offset + c]);
                            }
                            offset += c;
                            s
                        }
                    };
                    out.push(want(k).then_some(piece));
                }
                out
            }
            Op::Slice { axis, start, len } => {
                let a = self.val(parents[0]);
                let cols = a.cols();
                let mut out = vec![0.0; a.numel()];
                match axis {
                    Axis::Rows => out[start * cols..(start + len) * cols].copy_from_slice(g),
                    Axis::Cols => {
                        for r in 0..a.rows() {
                            out[r * cols + start..r * cols + start + len]
                                .copy_from_slice(&g[r * len..(r + 1) * len]);
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::Transpose => {
                let gt = Tensor::from_parts(y.rows(), y.cols(), g.to_vec());
                vec![Some(transpose(&gt).into_data())]
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let a = self.val(parents[0]);
                let (r, c) = (a.rows(), a.cols());
                let is_mean = matches!(node.op, Op::Mean { .. });
                let out = match axis {
                    None => {
                        let s = if is_mean { g[0] / a.numel() as f64 } else { g[0] };
                        vec![s; a.numel()]
                    }
                    Some(Axis::Rows) => {
                        let scale = if is_mean { 1.0 / r as f64 } else { 1.0 };
                        (0..r * c).map(|k| g[k % c] * scale).collect()
                    }
                    Some(Axis::Cols) => {
                        let scale = if is_mean { 1.0 / c as f64 } else { 1.0 };
                        (0..r * c).map(|k| g[k / c] * scale).collect()
                    }
                };
                vec![Some(out)]
            }
        };
        Ok(out)
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (k, v) in g.iter().enumerate() {
        out[k % cols] += v;
    }
    out
}

/// Row-wise `s ⊙ (g - <g, s>)`.
fn softmax_vjp(s: &Tensor, g: &[f64]) -> Vec<f64> {
    let cols = s.cols();
    let mut out = vec![0.0; g.len()];
    for r in 0..s.rows() {
        let sr = s.row_slice(r);
        let gr = &g[r * cols..(r + 1) * cols];
        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            out[r * cols + j] = sr[j] * (gr[j] - dot);
        }
    }
    out
}

/// Exact multipliers for `softmax(x) = e ⊙ (1 / Σe)` with `e = exp(x - c)`,
/// `c` shared between target and reference rows.
fn softmax_deeplift(x: &Tensor, x0: &Tensor, g: &[f64], thr: f64) -> Vec<f64> {
    let cols = x.cols();
    let mut out = vec![0.0; g.len()];
    for r in 0..x.rows() {
        let xr = x.row_slice(r);
        let x0r = x0.row_slice(r);
        let gr = &g[r * cols..(r + 1) * cols];
        let c = xr.iter().chain(x0r).cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xr.iter().map(|v| (v - c).exp()).collect();
        let e0: Vec<f64> = x0r.iter().map(|v| (v - c).exp()).collect();
        let (s, s0) = (e.iter().sum::<f64>(), e0.iter().sum::<f64>());
        let (inv, inv0) = (1.0 / s, 1.0 / s0);
        let m_r: f64 = (0..cols).map(|j| gr[j] * 0.5 * (e[j] + e0[j])).sum();
        let ds = s - s0;
        let recip = if ds.abs() < thr { -inv * inv } else { (inv - inv0) / ds };
        let m_s = m_r * recip;
        for j in 0..cols {
            let m_e = gr[j] * 0.5 * (inv + inv0) + m_s;
            let dx = xr[j] - x0r[j];
            let mult = if dx.abs() < thr { e[j] } else { (e[j] - e0[j]) / dx };
            out[r * cols + j] = m_e * mult;
        }
    }
    out
}

/// Exact multipliers for `y = d · (mean(d²) + eps)^(-1/2)`, `d = x - mean(x)`.
fn layer_norm_deeplift(x: &Tensor, x0: &Tensor, g: &[f64], eps: f64, thr: f64) -> Vec<f64> {
    let cols = x.cols();
    let n = cols as f64;
    let mut out = vec![0.0; g.len()];
    for r in 0..x.rows() {
        let centre = |row: &[f64]| {
            let m = row.iter().sum::<f64>() / n;
            row.iter().map(|v| v - m).collect::<Vec<f64>>()
        };
        let d = centre(x.row_slice(r));
        let d0 = centre(x0.row_slice(r));
        let v = d.iter().map(|a| a * a).sum::<f64>() / n;
        let v0 = d0.iter().map(|a| a * a).sum::<f64>() / n;
        let s = 1.0 / (v + eps).sqrt();
        let s0 = 1.0 / (v0 + eps).sqrt();
        let gr = &g[r * cols..(r + 1) * cols];

        let gs: f64 = (0..cols).map(|j| gr[j] * 0.5 * (d[j] + d0[j])).sum();
        let dv = v - v0;
        let mult = if dv.abs() < thr { -0.5 * s * s * s } else { (s - s0) / dv };
        let gq = gs * mult / n;
        let gd: Vec<f64> = (0..cols)
            .map(|j| gr[j] * 0.5 * (s + s0) + gq * (d[j] + d0[j]))
            .collect();
        let mean_gd = gd.iter().sum::<f64>() / n;
        for j in 0..cols {
            out[r * cols + j] = gd[j] - mean_gd;
        }
    }
    out
}
