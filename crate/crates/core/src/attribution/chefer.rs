//! Gradient-weighted attention rollout.
//!
//! Per attention layer, `Ā = mean_h (∇A_h ⊙ A_h)⁺` with gradients of the
//! target logit. Relevance starts at the identity and accumulates
//! `R ← R + Ā·R` layer by layer. Mean pooling makes a visit's relevance the
//! column mean of `R`. Within a visit the relevance is shared out as
//! `g_v · c_i / Σ_j |g_v · c_j|`, where `g_v` is the logit gradient at the
//! visit embedding and `c_i` is feature `i`'s additive term in it, so a
//! feature pushing against the target gets a negative share.

use nalgebra::DMatrix;

use super::{AttributionMap, Method};
use crate::autodiff::{BackwardPolicy, Tensor};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::model::{Model, Slot};

/// Accumulates per-layer relevance maps, each `[seq x seq]`.
pub fn rollout(layers: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let Some(first) = layers.first() else {
        return Err(Error::InvalidConfig("rollout needs at least one layer".into()));
    };
    let n = first.nrows();
    let mut r = DMatrix::<f64>::identity(n, n);
    for a in layers {
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Shape { op: "rollout", detail: format!("{}x{} map for {n} tokens", a.nrows(), a.ncols()) });
        }
        r += a * &r;
    }
    Ok(r)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn chefer(model: &Model, record: &PatientRecord, target_class: usize) -> Result<AttributionMap> {
    if !model.architecture().has_attention() {
        return Err(Error::NotApplicable { method: Method::Chefer.as_str().into(), model: model.architecture().as_str().into() });
    }
    if target_class >= model.n_classes() {
        return Err(Error::InvalidConfig(format!("target class {target_class} outside {} classes", model.n_classes())));
    }
    let prepared = model.prepare(record)?;
    let done = |scores: Vec<f64>| {
        AttributionMap::new(Method::Chefer, target_class, scores)
            .with_meta("forward_passes", 1.0)
            .with_meta("backward_passes", 1.0)
    };
    let n = prepared.n_active();
    if n == 0 {
        return Ok(done(vec![0.0; record.n_positions()]));
    }

    let mut trace = model.forward_inputs(&prepared, model.code_vectors(&prepared), prepared.labs.clone(), Default::default())?;
    let out = trace.logit_node(target_class)?;
    let grads = trace.tape.backward(out, &BackwardPolicy::standard().inputs_only())?;
    let tape = &trace.tape;

    let layers: Vec<DMatrix<f64>> = trace
        .attention
        .iter()
        .map(|heads| {
            let mut acc = DMatrix::<f64>::zeros(n, n);
            for &h in heads {
                let a = to_matrix(tape.value(h));
                let g = to_matrix(&grads.wrt_or_zeros(h, tape));
                acc += g.component_mul(&a).map(|v| v.max(0.0));
            }
            acc / heads.len() as f64
        })
        .collect();
    let r = rollout(&layers)?;
    let visit_relevance: Vec<f64> = (0..n).map(|j| r.column(j).sum() / n as f64).collect();

    let emb = trace.visit_embedding.expect("active visits imply a visit embedding");
    let g_visit = grads.wrt_or_zeros(emb, tape);
    let codes = model.code_vectors(&prepared);
    let z = trace.normalized_labs.map(|id| tape.value(id).clone());
    let w_lab = model.params.get("emb.lab");

    let (rows, contrib): (Vec<usize>, Vec<f64>) = prepared
        .slots
        .iter()
        .map(|slot| match *slot {
            Slot::Code(s) => {
                let row = prepared.code_rows[s];
                let dot: f64 = g_visit.row_slice(row).iter().zip(codes.row_slice(s)).map(|(g, e)| g * e).sum();
                (row, dot)
            }
            Slot::Lab { row, index } => {
                let zv = z.as_ref().expect("lab slots imply labs").get(row, index);
                let dot: f64 = g_visit.row_slice(row).iter().zip(w_lab.row_slice(index)).map(|(g, w)| g * w * zv).sum();
                (row, dot)
            }
        })
        .unzip();

    let mut totals = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (&row, &c) in rows.iter().zip(&contrib) {
        totals[row] += c.abs();
        counts[row] += 1;
    }
    let scores = rows
        .iter()
        .zip(&contrib)
        .map(|(&row, &c)| {
            let share = if totals[row] > 0.0 { c / totals[row] } else { 1.0 / counts[row] as f64 };
            visit_relevance[row] * share
        })
        .collect();
    Ok(done(scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_of_zero_maps_is_identity() {
        let r = rollout(&[DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)]).unwrap();
        assert_eq!(r, DMatrix::identity(3, 3));
    }

    #[test]
    fn rollout_two_layers() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]);
        // (I + A)(I + A)
        let expected = DMatrix::from_row_slice(2, 2, &[2.25, 1.75, 0.0, 4.0]);
        let r = rollout(&[a.clone(), a]).unwrap();
        assert!((r - expected).abs().max() < 1e-12);
    }

    #[test]
    fn rollout_rejects_mismatched_layers() {
        assert!(rollout(&[DMatrix::zeros(2, 2), DMatrix::zeros(3, 3)]).is_err());
        assert!(rollout(&[]).is_err());
    }
}
