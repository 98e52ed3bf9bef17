//! Kernel SHAP: Shapley values as the solution of a kernel-weighted
//! least-squares problem over feature coalitions.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::linalg::weighted_ridge;
use super::mask::{mask_complement, MaskPolicy};
use super::{AttributionMap, Method};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::model::Model;

/// Largest feature count for exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelWeight {
    /// Empty and full coalitions; enforced as equality constraints.
    Infinite,
    Finite(f64),
}

/// `(M - 1) / (C(M, s) · s · (M - s))`.
pub fn shapley_kernel_weight(m: usize, s: usize) -> Result<KernelWeight> {
    if m == 0 || s > m {
        return Err(Error::InvalidConfig(format!("coalition size {s} for {m} features")));
    }
    if s == 0 || s == m {
        return Ok(KernelWeight::Infinite);
    }
    Ok(KernelWeight::Finite((m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapMode {
    #[default]
    Sampled,
    Exact,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapSettings {
    pub mode: ShapMode,
    /// Coalitions used in the regression, excluding the empty and full
    /// ones. Defaults to `2 (M + 1)` capped at 512.
    pub n_coalitions: Option<usize>,
}

impl ShapSettings {
    pub fn budget(&self, m: usize) -> usize {
        self.n_coalitions.unwrap_or((2 * (m + 1)).min(512))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapValues {
    /// `f(empty coalition)`.
    pub phi0: f64,
    pub phi: Vec<f64>,
    pub n_coalitions: usize,
    /// Weighted RMS error of the fitted additive model on the coalitions.
    pub residual: f64,
    /// Direct evaluation of the Shapley formula; exact mode only.
    pub brute_force: Option<Vec<f64>>,
}

type Coalition = Vec<bool>;

/// Shapley values of the set function `value` over `m` features.
pub fn kernel_shap_values<F>(m: usize, value: F, settings: &ShapSettings, seed: u64) -> Result<ShapValues>
where
    F: Fn(&[bool]) -> Result<f64> + Sync,
{
    let full = value(&vec![true; m])?;
    let empty = value(&vec![false; m])?;
    if m == 0 {
        return Ok(ShapValues { phi0: empty, phi: vec![], n_coalitions: 0, residual: 0.0, brute_force: None });
    }

    let (coalitions, weights, brute_force) = match settings.mode {
        ShapMode::Exact => {
            if m > MAX_EXACT_FEATURES {
                return Err(Error::InvalidConfig(format!(
                    "exact Kernel SHAP needs at most {MAX_EXACT_FEATURES} features, got {m}"
                )));
            }
            let table = evaluate_all(m, &value)?;
            let phi = shapley_from_table(m, &table);
            let (zs, ws) = all_coalitions(m);
            (zs, ws, Some((phi, table)))
        }
        ShapMode::Sampled => {
            let budget = settings.budget(m);
            if budget < m + 2 {
                return Err(Error::InvalidConfig(format!("{budget} coalitions for {m} features; need at least {}", m + 2)));
            }
            if m < 31 && budget >= (1usize << m) - 2 {
                let (zs, ws) = all_coalitions(m);
                (zs, ws, None)
            } else {
                let (zs, ws) = sample_coalitions(m, budget, seed);
                (zs, ws, None)
            }
        }
    };

    let ys: Vec<f64> = match &brute_force {
        Some((_, table)) => coalitions.iter().map(|z| table[bits(z)]).collect(),
        None => coalitions.par_iter().map(|z| value(z)).collect::<Result<_>>()?,
    };
    let (phi, residual) = solve_constrained(m, &coalitions, &weights, &ys, empty, full)?;
    Ok(ShapValues {
        phi0: empty,
        phi,
        n_coalitions: coalitions.len(),
        residual,
        brute_force: brute_force.map(|(phi, _)| phi),
    })
}

/// Shapley values by the permutation-weighted marginal contribution sum,
/// evaluating all `2^m` coalitions.
pub fn brute_force_shapley<F>(m: usize, value: F) -> Result<Vec<f64>>
where
    F: Fn(&[bool]) -> Result<f64> + Sync,
{
    if m > MAX_EXACT_FEATURES {
        return Err(Error::InvalidConfig(format!("brute-force Shapley needs at most {MAX_EXACT_FEATURES} features")));
    }
    let table = evaluate_all(m, &value)?;
    Ok(shapley_from_table(m, &table))
}

fn bits(z: &[bool]) -> usize {
    z.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| 1usize << i).sum()
}

fn from_bits(m: usize, mask: usize) -> Coalition {
    (0..m).map(|i| mask >> i & 1 == 1).collect()
}

fn evaluate_all<F>(m: usize, value: &F) -> Result<Vec<f64>>
where
    F: Fn(&[bool]) -> Result<f64> + Sync,
{
    (0..1usize << m).into_par_iter().map(|mask| value(&from_bits(m, mask))).collect()
}

fn shapley_from_table(m: usize, table: &[f64]) -> Vec<f64> {
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    (0..m)
        .map(|i| {
            let mut phi = 0.0;
            for mask in 0..1usize << m {
                if mask >> i & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = fact[s] * fact[m - s - 1] / fact[m];
                phi += w * (table[mask | 1 << i] - table[mask]);
            }
            phi
        })
        .collect()
}

fn all_coalitions(m: usize) -> (Vec<Coalition>, Vec<f64>) {
    let mut zs = Vec::with_capacity((1usize << m) - 2);
    let mut ws = Vec::with_capacity((1usize << m) - 2);
    for mask in 1..(1usize << m) - 1 {
        let z = from_bits(m, mask);
        let s = mask.count_ones() as usize;
        if let Ok(KernelWeight::Finite(w)) = shapley_kernel_weight(m, s) {
            zs.push(z);
            ws.push(w);
        }
    }
    (zs, ws)
}

/// Fully enumerates the smallest and largest coalition sizes while the
/// budget allows (sizes 1 and M-1 whenever they fit at all), then fills the
/// rest with paired samples (each mask with its complement), deduplicated
/// with multiplicity weights.
fn sample_coalitions(m: usize, budget: usize, seed: u64) -> (Vec<Coalition>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // total kernel mass carried by each size: C(M, s) · k(M, s)
    let size_mass = |s: usize| (m - 1) as f64 / (s as f64 * (m - s) as f64);
    let half = m / 2;
    let mut zs = Vec::new();
    let mut ws = Vec::new();
    let mut remaining_mass: f64 = (1..m).map(size_mass).sum();
    let mut left = budget;
    let mut first_sampled = 1;

    for s in 1..=half {
        let paired = s != m - s;
        let count = binomial(m, s) * if paired { 2.0 } else { 1.0 };
        let pair_mass = size_mass(s) * if paired { 2.0 } else { 1.0 };
        let share = left as f64 * pair_mass / remaining_mass;
        // singletons and their complements always go in when they fit:
        // complement rows are collinear after the sum constraint, so a
        // sampled design near 2M rows is often rank deficient
        let singletons_fit = s == 1 && count as usize <= left;
        if share + 1e-8 < count && !singletons_fit {
            break;
        }
        let w = size_mass(s) / binomial(m, s);
        for idx in combinations(m, s) {
            let mut z = vec![false; m];
            idx.iter().for_each(|&i| z[i] = true);
            if paired {
                zs.push(z.iter().map(|b| !b).collect());
                ws.push(w);
            }
            zs.push(z);
            ws.push(w);
        }
        left -= count as usize;
        remaining_mass -= pair_mass;
        first_sampled = s + 1;
    }
    if left == 0 || first_sampled > half {
        return (zs, ws);
    }

    let sizes: Vec<usize> = (first_sampled..=m - first_sampled).collect();
    let masses: Vec<f64> = sizes.iter().map(|&s| size_mass(s)).collect();
    let total: f64 = masses.iter().sum();
    let mut counts: HashMap<Coalition, usize> = HashMap::new();
    let mut order: Vec<Coalition> = Vec::new();
    let mut draws = 0usize;
    let max_draws = 100 * budget + 1000;
    while order.len() < left && draws < max_draws {
        let mut u = rng.random::<f64>() * total;
        let mut s = *sizes.last().expect("nonempty sizes");
        for (k, &mass) in masses.iter().enumerate() {
            if u < mass {
                s = sizes[k];
                break;
            }
            u -= mass;
        }
        let mut z = vec![false; m];
        sample(&mut rng, m, s).into_iter().for_each(|i| z[i] = true);
        let complement: Coalition = z.iter().map(|b| !b).collect();
        for c in [z, complement] {
            draws += 1;
            match counts.get_mut(&c) {
                Some(n) => *n += 1,
                None => {
                    if order.len() < left {
                        counts.insert(c.clone(), 1);
                        order.push(c);
                    }
                }
            }
        }
    }
    let counted: usize = order.iter().map(|c| counts[c]).sum();
    for c in order {
        ws.push(remaining_mass * counts[&c] as f64 / counted as f64);
        zs.push(c);
    }
    (zs, ws)
}

/// Index sets of size `k` from `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { return out };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Weighted least squares for `y_z - φ0 ≈ Σ z_i φ_i` subject to
/// `Σ φ_i = f(full) - φ0`, with the last coefficient eliminated through the
/// constraint.
fn solve_constrained(m: usize, zs: &[Coalition], ws: &[f64], ys: &[f64], empty: f64, full: f64) -> Result<(Vec<f64>, f64)> {
    let delta = full - empty;
    if m == 1 {
        return Ok((vec![delta], 0.0));
    }
    let p = m - 1;
    let mut x = DMatrix::<f64>::zeros(zs.len(), p);
    let mut y = DVector::<f64>::zeros(zs.len());
    for (k, z) in zs.iter().enumerate() {
        let last = if z[p] { 1.0 } else { 0.0 };
        for i in 0..p {
            x[(k, i)] = if z[i] { 1.0 } else { 0.0 } - last;
        }
        y[k] = ys[k] - empty - last * delta;
    }
    let beta = weighted_ridge(&x, &y, ws, 0.0, "kernel shap")
        .map_err(|_| Error::Singular("kernel shap: coalitions do not identify every feature".into()))?;
    let mut phi: Vec<f64> = beta.iter().copied().collect();
    phi.push(delta - phi.iter().sum::<f64>());

    let mut sq = 0.0;
    let mut wsum = 0.0;
    for (k, z) in zs.iter().enumerate() {
        let fitted: f64 = empty + z.iter().zip(&phi).filter(|(b, _)| **b).map(|(_, v)| v).sum::<f64>();
        sq += ws[k] * (ys[k] - fitted).powi(2);
        wsum += ws[k];
    }
    Ok((phi, if wsum > 0.0 { (sq / wsum).sqrt() } else { 0.0 }))
}

/// Kernel SHAP on the target-class probability; absent features are masked
/// with `policy`.
pub fn kernel_shap(
    model: &Model,
    record: &PatientRecord,
    target_class: usize,
    policy: &MaskPolicy,
    settings: &ShapSettings,
    seed: u64,
) -> Result<AttributionMap> {
    let m = record.n_positions();
    let value = |z: &[bool]| -> Result<f64> {
        let masked = mask_complement(record, z, policy)?;
        Ok(model.predict_proba(&masked)?[target_class])
    };
    let shap = kernel_shap_values(m, value, settings, seed)?;
    let evaluations = if shap.brute_force.is_some() { 1usize << m } else { shap.n_coalitions + 2 };
    Ok(AttributionMap::new(Method::KernelShap, target_class, shap.phi)
        .with_meta("phi0", shap.phi0)
        .with_meta("coalitions", shap.n_coalitions as f64)
        .with_meta("residual", shap.residual)
        .with_meta("forward_passes", evaluations as f64)
        .with_meta("backward_passes", 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weight_values() {
        assert_eq!(shapley_kernel_weight(4, 1).unwrap(), KernelWeight::Finite(0.25));
        assert_eq!(shapley_kernel_weight(4, 2).unwrap(), KernelWeight::Finite(0.125));
        assert_eq!(shapley_kernel_weight(4, 0).unwrap(), KernelWeight::Infinite);
        assert_eq!(shapley_kernel_weight(4, 4).unwrap(), KernelWeight::Infinite);
        assert!(shapley_kernel_weight(4, 5).is_err());
    }

    #[test]
    fn combinations_are_complete() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(5, 5), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(combinations(3, 1), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn and_model_is_symmetric() {
        let f = |z: &[bool]| Ok(if z[0] && z[1] { 1.0 } else { 0.0 });
        let s = kernel_shap_values(2, f, &ShapSettings { mode: ShapMode::Exact, ..Default::default() }, 0).unwrap();
        assert!((s.phi[0] - s.phi[1]).abs() < 1e-12);
        assert!((s.phi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampled_budget_must_cover_features() {
        let f = |_: &[bool]| Ok(0.0);
        let settings = ShapSettings { mode: ShapMode::Sampled, n_coalitions: Some(5) };
        assert!(kernel_shap_values(6, f, &settings, 0).is_err());
    }

    #[test]
    fn sampled_mode_is_deterministic_and_locally_accurate() {
        let w: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |z: &[bool]| Ok(z.iter().zip(&w).filter(|(b, _)| **b).map(|(_, v)| v).sum::<f64>() + 0.1 * (z[0] && z[1]) as u8 as f64);
        let settings = ShapSettings { mode: ShapMode::Sampled, n_coalitions: Some(200) };
        let a = kernel_shap_values(40, f, &settings, 3).unwrap();
        let b = kernel_shap_values(40, f, &settings, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_coalitions, 200);
        let total: f64 = a.phi.iter().sum::<f64>() + a.phi0;
        assert!((total - f(&[true; 40]).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn default_budget_identifies_every_feature() {
        for m in [20, 70, 127] {
            let f = |z: &[bool]| Ok(z.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| (i as f64).cos()).sum::<f64>());
            let s = kernel_shap_values(m, f, &ShapSettings::default(), 11).unwrap();
            assert_eq!(s.n_coalitions, 2 * (m + 1));
            for (i, p) in s.phi.iter().enumerate() {
                assert!((p - (i as f64).cos()).abs() < 1e-9, "m={m} i={i}");
            }
        }
    }
}
