use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ones, uniform, xavier, zeros, ParamStore};
use super::{Architecture, Model, ModelConfig, N_TIME_FEATURES};
use crate::autodiff::{Axis, GateOperand, NodeId, SoftmaxRole, Tape, Tensor};
use crate::data::{FeatureKind, PatientRecord, PAD};
use crate::error::{Error, Result};

/// Which recurrent products GIM should treat as gates. Only meaningful for
/// the recurrent architectures; ignored otherwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateFlags {
    /// `z ⊙ (h - n)` in the hidden-state update.
    pub update: bool,
    /// `r ⊙ (U_n h + b)` inside the candidate state.
    pub reset: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub gates: GateFlags,
    /// Training-time dropout; `None` at inference.
    pub dropout_seed: Option<u64>,
}

/// Range of an input leaf's data owned by one feature position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputLeaf {
    pub node: NodeId,
    pub offset: usize,
    pub len: usize,
}

/// A record reduced to the tensors the forward pass consumes. Padding
/// visits are dropped here.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRecord {
    /// Original visit index of every active visit.
    pub active_visits: Vec<usize>,
    /// Code index of every code slot, visit by visit.
    pub codes: Vec<usize>,
    /// Active-visit row of every code slot.
    pub code_rows: Vec<usize>,
    /// Raw lab values `[active visits x n_labs]`.
    pub labs: Tensor,
    pub delta_t: Vec<f64>,
    /// For every feature position of the record: `Code(slot)` or
    /// `Lab(row, index)` into the tensors above.
    pub slots: Vec<Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Code(usize),
    Lab { row: usize, index: usize },
}

impl PreparedRecord {
    pub fn n_active(&self) -> usize {
        self.active_visits.len()
    }

    pub fn n_code_slots(&self) -> usize {
        self.codes.len()
    }

    fn time_features(&self) -> Tensor {
        let n = self.n_active();
        let mut data = Vec::with_capacity(n * N_TIME_FEATURES);
        let mut until_end = 0.0;
        let mut remaining = vec![0.0; n];
        for v in (0..n).rev() {
            remaining[v] = until_end;
            until_end += self.delta_t[v];
        }
        for v in 0..n {
            data.push(0.25 * self.delta_t[v].ln_1p());
            data.push(0.25 * remaining[v].ln_1p());
        }
        Tensor::from_parts(n, N_TIME_FEATURES, data)
    }
}

/// One recorded forward pass.
pub struct ForwardTrace<'m> {
    pub tape: Tape<'m>,
    /// `[1 x n_classes]`.
    pub logits: NodeId,
    /// Softmax of the logits.
    pub probs: NodeId,
    /// Attention probabilities per layer and head, each `[seq x seq]`.
    pub attention: Vec<Vec<NodeId>>,
    /// Code embedding rows `[code slots x embed_dim]`, one per slot.
    pub code_leaf: Option<NodeId>,
    /// Raw lab values `[active visits x n_labs]`.
    pub lab_leaf: Option<NodeId>,
    /// Visit embeddings `[active visits x embed_dim]` before any sequence layer.
    pub visit_embedding: Option<NodeId>,
    /// Normalised labs after the constant affine, `[active visits x n_labs]`.
    pub normalized_labs: Option<NodeId>,
    /// One entry per feature position of the record.
    pub input_leaves: Vec<InputLeaf>,
}

impl ForwardTrace<'_> {
    pub fn logits(&self) -> &[f64] {
        self.tape.value(self.logits).data()
    }

    pub fn probabilities(&self) -> &[f64] {
        self.tape.value(self.probs).data()
    }

    /// Argmax with ties going to the lower class index.
    pub fn predicted_class(&self) -> usize {
        argmax(self.probabilities())
    }

    pub fn attention_map(&self, layer: usize, head: usize) -> &Tensor {
        self.tape.value(self.attention[layer][head])
    }

    /// Appends a scalar node for the probability of `class`.
    pub fn probability_node(&mut self, class: usize) -> Result<NodeId> {
        self.tape.slice(self.probs, Axis::Cols, class, 1)
    }

    /// Appends a scalar node for the logit of `class`.
    pub fn logit_node(&mut self, class: usize) -> Result<NodeId> {
        self.tape.slice(self.logits, Axis::Cols, class, 1)
    }
}

/// Index of the largest value, the first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let d = config.embed_dim;
    let h = config.hidden_dim;
    let mut p = ParamStore::new();

    let mut codes = uniform(rng, config.vocab_size, d, 0.1);
    codes.data_mut()[PAD * d..(PAD + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    p.insert("emb.codes", codes);
    p.insert("emb.lab", xavier(rng, config.n_labs.max(1), d));
    p.insert("emb.time", xavier(rng, N_TIME_FEATURES, d));
    p.insert("emb.bias", zeros(1, d));

    let width = match config.architecture {
        Architecture::Transformer => {
            p.insert("pos", uniform(rng, config.max_visits, d, 0.1));
            for l in 0..config.n_layers {
                init_attention(&mut p, rng, &format!("l{l}"), d);
                p.insert(format!("l{l}.ffn.w1"), xavier(rng, d, h));
                p.insert(format!("l{l}.ffn.b1"), zeros(1, h));
                p.insert(format!("l{l}.ffn.w2"), xavier(rng, h, d));
                p.insert(format!("l{l}.ffn.b2"), zeros(1, d));
                p.insert(format!("l{l}.ln2.g"), ones(1, d));
                p.insert(format!("l{l}.ln2.b"), zeros(1, d));
            }
            d
        }
        Architecture::StageRecurrent | Architecture::StageAttn => {
            for gate in ["r", "z", "n"] {
                p.insert(format!("gru.w{gate}"), xavier(rng, d, h));
                p.insert(format!("gru.u{gate}"), xavier(rng, h, h));
                p.insert(format!("gru.b{gate}"), zeros(1, h));
            }
            p.insert("gru.bhn", zeros(1, h));
            // per-unit time constants between two and three days
            let log_tau = (0..h).map(|_| rng.random_range(48.0f64..72.0).ln()).collect();
            p.insert("gru.log_tau", Tensor::row(log_tau));
            if config.architecture == Architecture::StageAttn {
                init_attention(&mut p, rng, "a0", h);
            }
            h
        }
    };
    p.insert("head.w", xavier(rng, width, config.n_classes));
    p.insert("head.b", zeros(1, config.n_classes));
    p
}

fn init_attention(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for m in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.w{m}"), xavier(rng, d, d));
        p.insert(format!("{prefix}.b{m}"), zeros(1, d));
    }
    p.insert(format!("{prefix}.ln1.g"), ones(1, d));
    p.insert(format!("{prefix}.ln1.b"), zeros(1, d));
}

impl Model {
    /// Validates `record` against the model and extracts its tensors.
    pub fn prepare(&self, record: &PatientRecord) -> Result<PreparedRecord> {
        let cfg = &self.config;
        let n_active = record.n_active_visits();
        if n_active > cfg.max_visits {
            return Err(Error::TooManyVisits { got: n_active, max: cfg.max_visits });
        }
        let mut active_visits = Vec::with_capacity(n_active);
        let mut codes = Vec::new();
        let mut code_rows = Vec::new();
        let mut labs = Vec::with_capacity(n_active * cfg.n_labs);
        let mut delta_t = Vec::with_capacity(n_active);
        let mut visit_row = vec![usize::MAX; record.visits.len()];
        let mut code_slot_start = vec![0; record.visits.len()];
        for (v, visit) in record.visits.iter().enumerate() {
            if visit.is_padding() {
                continue;
            }
            if visit.labs.len() != cfg.n_labs {
                return Err(Error::Shape {
                    op: "prepare",
                    detail: format!("visit {v} has {} labs, model expects {}", visit.labs.len(), cfg.n_labs),
                });
            }
            if !(visit.delta_t >= 0.0 && visit.delta_t.is_finite()) || visit.labs.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "prepare" });
            }
            let row = active_visits.len();
            visit_row[v] = row;
            code_slot_start[v] = codes.len();
            active_visits.push(v);
            for &c in &visit.codes {
                if c >= cfg.vocab_size {
                    return Err(Error::OutOfVocabulary { code: c, vocab: cfg.vocab_size });
                }
                codes.push(c);
                code_rows.push(row);
            }
            labs.extend_from_slice(&visit.labs);
            delta_t.push(visit.delta_t);
        }
        let slots = record
            .feature_positions()
            .into_iter()
            .map(|fp| match fp.kind {
                FeatureKind::Code { slot } => Slot::Code(code_slot_start[fp.visit] + slot),
                FeatureKind::Lab { index } => Slot::Lab { row: visit_row[fp.visit], index },
            })
            .collect();
        Ok(PreparedRecord {
            active_visits,
            codes,
            code_rows,
            labs: Tensor::from_parts(n_active, cfg.n_labs, labs),
            delta_t,
            slots,
        })
    }

    /// Embedding rows of the record's code slots, `[slots x embed_dim]`.
    pub fn code_vectors(&self, prepared: &PreparedRecord) -> Tensor {
        let table = self.params.get("emb.codes");
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(prepared.codes.len() * d);
        for &c in &prepared.codes {
            data.extend_from_slice(table.row_slice(c));
        }
        Tensor::from_parts(prepared.codes.len(), d, data)
    }

    /// Input leaves for the all-absent reference of `prepared`: zero (PAD)
    /// code embeddings and the given lab replacement per lab index.
    pub fn baseline_inputs(&self, prepared: &PreparedRecord, lab_replacement: &[f64]) -> (Tensor, Tensor) {
        let codes = Tensor::zeros(&[prepared.n_code_slots(), self.config.embed_dim]);
        let n = prepared.n_active();
        let mut labs = Vec::with_capacity(n * self.config.n_labs);
        for _ in 0..n {
            labs.extend_from_slice(lab_replacement);
        }
        (codes, Tensor::from_parts(n, self.config.n_labs, labs))
    }

    pub fn forward_traced(&self, record: &PatientRecord) -> Result<ForwardTrace<'_>> {
        let prepared = self.prepare(record)?;
        let codes = self.code_vectors(&prepared);
        self.forward_inputs(&prepared, codes, prepared.labs.clone(), ForwardOptions::default())
    }

    /// Class probabilities for `record`.
    pub fn predict_proba(&self, record: &PatientRecord) -> Result<Vec<f64>> {
        Ok(self.forward_traced(record)?.probabilities().to_vec())
    }

    /// Forward pass with explicit input-leaf values; used for baselines and
    /// interpolated inputs.
    pub fn forward_inputs(
        &self,
        prepared: &PreparedRecord,
        code_vectors: Tensor,
        labs: Tensor,
        options: ForwardOptions,
    ) -> Result<ForwardTrace<'_>> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.embed_dim;
        let n = prepared.n_active();
        if code_vectors.rows() != prepared.n_code_slots() || (code_vectors.rows() > 0 && code_vectors.cols() != d) {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("code vectors {:?} for {} slots", code_vectors.shape(), prepared.n_code_slots()),
            });
        }
        if labs.rows() != n || (n > 0 && labs.cols() != cfg.n_labs) {
            return Err(Error::Shape { op: "forward", detail: format!("labs {:?} for {n} visits", labs.shape()) });
        }
        let mut dropout = options.dropout_seed.filter(|_| cfg.dropout > 0.0).map(ChaCha8Rng::seed_from_u64);

        let mut tape = Tape::new();
        let mut attention = Vec::new();
        let mut code_leaf = None;
        let mut lab_leaf = None;
        let mut visit_embedding = None;
        let mut normalized_labs = None;

        let pooled = if n == 0 {
            tape.constant(Tensor::zeros(&[1, self.readout_width()]))
        } else {
            // visit embeddings
            let time = tape.constant(prepared.time_features());
            let w_time = tape.param(p.get("emb.time"));
            let mut x = tape.matmul(time, w_time)?;
            let bias = tape.param(p.get("emb.bias"));
            x = tape.add(x, bias)?;
            if prepared.n_code_slots() > 0 {
                let mut agg = vec![0.0; n * prepared.n_code_slots()];
                for (slot, &row) in prepared.code_rows.iter().enumerate() {
                    agg[row * prepared.n_code_slots() + slot] = 1.0;
                }
                let agg = tape.constant(Tensor::from_parts(n, prepared.n_code_slots(), agg));
                let leaf = tape.input(code_vectors);
                code_leaf = Some(leaf);
                let sum = tape.matmul(agg, leaf)?;
                x = tape.add(x, sum)?;
            }
            if cfg.n_labs > 0 {
                let leaf = tape.input(labs);
                lab_leaf = Some(leaf);
                let shift = tape.constant(Tensor::row(self.lab_stats.mean.iter().map(|m| -m).collect()));
                let scale = tape.constant(Tensor::row(self.lab_stats.std.iter().map(|s| 1.0 / s).collect()));
                let centred = tape.add(leaf, shift)?;
                let z = tape.mul(centred, scale)?;
                normalized_labs = Some(z);
                let w_lab = tape.param(p.get("emb.lab"));
                let proj = tape.matmul(z, w_lab)?;
                x = tape.add(x, proj)?;
            }
            visit_embedding = Some(x);
            x = apply_dropout(&mut tape, x, cfg.dropout, dropout.as_mut())?;

            match cfg.architecture {
                Architecture::Transformer => {
                    let pos = tape.param(p.get("pos"));
                    let idx = (0..n).map(|v| n - 1 - v).collect();
                    let pe = tape.embedding_lookup(pos, idx)?;
                    x = tape.add(x, pe)?;
                    for l in 0..cfg.n_layers {
                        let prefix = format!("l{l}");
                        let mut maps = Vec::with_capacity(cfg.n_heads);
                        x = self.attention_block(&mut tape, x, &prefix, d, &mut maps)?;
                        attention.push(maps);
                        let w1 = tape.param(p.get(&format!("{prefix}.ffn.w1")));
                        let b1 = tape.param(p.get(&format!("{prefix}.ffn.b1")));
                        let w2 = tape.param(p.get(&format!("{prefix}.ffn.w2")));
                        let b2 = tape.param(p.get(&format!("{prefix}.ffn.b2")));
                        let hdn = tape.matmul(x, w1)?;
                        let hdn = tape.add(hdn, b1)?;
                        let hdn = tape.relu(hdn)?;
                        let f = tape.matmul(hdn, w2)?;
                        let f = tape.add(f, b2)?;
                        let res = tape.add(x, f)?;
                        x = self.norm(&mut tape, res, &format!("{prefix}.ln2"))?;
                    }
                    tape.mean(x, Some(Axis::Rows))?
                }
                Architecture::StageRecurrent => {
                    let states = self.recurrent(&mut tape, x, prepared, options.gates)?;
                    *states.last().expect("at least one visit")
                }
                Architecture::StageAttn => {
                    let states = self.recurrent(&mut tape, x, prepared, options.gates)?;
                    let hs = tape.concat(&states, Axis::Rows)?;
                    let mut maps = Vec::with_capacity(cfg.n_heads);
                    let y = self.attention_block(&mut tape, hs, "a0", cfg.hidden_dim, &mut maps)?;
                    attention.push(maps);
                    tape.mean(y, Some(Axis::Rows))?
                }
            }
        };
        let pooled = apply_dropout(&mut tape, pooled, cfg.dropout, dropout.as_mut())?;
        let w = tape.param(p.get("head.w"));
        let b = tape.param(p.get("head.b"));
        let logits = tape.matmul(pooled, w)?;
        let logits = tape.add(logits, b)?;
        let probs = tape.softmax(logits, SoftmaxRole::Output)?;

        let d_lab = cfg.n_labs;
        let input_leaves = prepared
            .slots
            .iter()
            .map(|slot| match *slot {
                Slot::Code(s) => InputLeaf { node: code_leaf.expect("code slots imply a code leaf"), offset: s * d, len: d },
                Slot::Lab { row, index } => {
                    InputLeaf { node: lab_leaf.expect("labs imply a lab leaf"), offset: row * d_lab + index, len: 1 }
                }
            })
            .collect();

        Ok(ForwardTrace {
            tape,
            logits,
            probs,
            attention,
            code_leaf,
            lab_leaf,
            visit_embedding,
            normalized_labs,
            input_leaves,
        })
    }

    fn readout_width(&self) -> usize {
        match self.config.architecture {
            Architecture::Transformer => self.config.embed_dim,
            _ => self.config.hidden_dim,
        }
    }

    fn norm<'m>(&'m self, tape: &mut Tape<'m>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let y = tape.layer_norm(x)?;
        let g = tape.param(self.params.get(&format!("{prefix}.g")));
        let b = tape.param(self.params.get(&format!("{prefix}.b")));
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }

    /// Post-norm multi-head self-attention with a residual connection.
    fn attention_block<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        x: NodeId,
        prefix: &str,
        dim: usize,
        maps: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let p = &self.params;
        let heads = self.config.n_heads;
        let dh = dim / heads;
        let q = project_with(tape, p, prefix, "q", x)?;
        let k = project_with(tape, p, prefix, "k", x)?;
        let v = project_with(tape, p, prefix, "v", x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, Axis::Cols, h * dh, dh)?;
            let kh = tape.slice(k, Axis::Cols, h * dh, dh)?;
            let vh = tape.slice(v, Axis::Cols, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.affine(s, scale, 0.0)?;
            let a = tape.softmax(s, SoftmaxRole::Attention)?;
            maps.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, Axis::Cols)? };
        let o = project_with(tape, p, prefix, "o", cat)?;
        let res = tape.add(x, o)?;
        self.norm(tape, res, &format!("{prefix}.ln1"))
    }

    /// Runs the time-decayed GRU over the visit embeddings and returns the
    /// hidden state after every visit, each `[1 x hidden]`.
    fn recurrent<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        x: NodeId,
        prepared: &PreparedRecord,
        gates: GateFlags,
    ) -> Result<Vec<NodeId>> {
        let p = &self.params;
        let hdim = self.config.hidden_dim;
        let xr = project_with(tape, p, "gru", "r", x)?;
        let xz = project_with(tape, p, "gru", "z", x)?;
        let xn = project_with(tape, p, "gru", "n", x)?;
        let ur = tape.param(p.get("gru.ur"));
        let uz = tape.param(p.get("gru.uz"));
        let un = tape.param(p.get("gru.un"));
        let bhn = tape.param(p.get("gru.bhn"));
        let log_tau = tape.param(p.get("gru.log_tau"));
        let neg_log_tau = tape.affine(log_tau, -1.0, 0.0)?;
        let inv_tau = tape.exp(neg_log_tau)?;
        let update_gate = gates.update.then_some(GateOperand::Lhs);
        let reset_gate = gates.reset.then_some(GateOperand::Lhs);

        let mut h = tape.constant(Tensor::zeros(&[1, hdim]));
        let mut states = Vec::with_capacity(prepared.n_active());
        for (t, &dt) in prepared.delta_t.iter().enumerate() {
            let xr_t = tape.slice(xr, Axis::Rows, t, 1)?;
            let xz_t = tape.slice(xz, Axis::Rows, t, 1)?;
            let xn_t = tape.slice(xn, Axis::Rows, t, 1)?;

            let hr = tape.matmul(h, ur)?;
            let r = tape.add(xr_t, hr)?;
            let r = tape.sigmoid(r)?;
            let hz = tape.matmul(h, uz)?;
            let z = tape.add(xz_t, hz)?;
            let z = tape.sigmoid(z)?;
            let decay = tape.affine(inv_tau, -dt, 0.0)?;
            let decay = tape.exp(decay)?;
            let z = tape.mul(z, decay)?;

            let hn = tape.matmul(h, un)?;
            let hn = tape.add(hn, bhn)?;
            let gated = tape.mul_gated(r, hn, reset_gate)?;
            let cand = tape.add(xn_t, gated)?;
            let cand = tape.tanh(cand)?;

            let neg_cand = tape.affine(cand, -1.0, 0.0)?;
            let diff = tape.add(h, neg_cand)?;
            let keep = tape.mul_gated(z, diff, update_gate)?;
            h = tape.add(cand, keep)?;
            states.push(h);
        }
        Ok(states)
    }
}

fn project_with<'m>(tape: &mut Tape<'m>, p: &'m ParamStore, prefix: &str, m: &str, x: NodeId) -> Result<NodeId> {
    let w = tape.param(p.get(&format!("{prefix}.w{m}")));
    let b = tape.param(p.get(&format!("{prefix}.b{m}")));
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn apply_dropout(tape: &mut Tape<'_>, x: NodeId, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
