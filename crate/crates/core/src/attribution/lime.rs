//! LIME: a locally weighted ridge regression on random binary masks.

use nalgebra::{DMatrix, DVector};
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

const MAX_RETRIES: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimeSettings {
    pub n_samples: usize,
    /// Defaults to `0.75 · sqrt(M)`.
    pub kernel_width: Option<f64>,
    pub ridge_lambda: f64,
    /// Probability that a feature is kept in a sample.
    pub keep_probability: f64,
}

impl Default for LimeSettings {
    fn default() -> Self {
        Self { n_samples: 200, kernel_width: None, ridge_lambda: 1e-3, keep_probability: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeValues {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Seed offset that produced a non-degenerate sample set.
    pub retries: u64,
}

/// Fits `value(z) ≈ b + Σ φ_i z_i` around the all-present mask.
///
/// Samples are weighted by `exp(-d² / width²)` with `d` the number of
/// removed features. Weights are rescaled to average 1 before the fit,
/// which only changes the scale `ridge_lambda` is measured in.
pub fn lime_values<F>(m: usize, value: F, settings: &LimeSettings, seed: u64) -> Result<LimeValues>
where
    F: Fn(&[bool]) -> Result<f64> + Sync,
{
    if settings.n_samples < 2 {
        return Err(Error::InvalidConfig("LIME needs at least 2 samples".into()));
    }
    if !(settings.ridge_lambda >= 0.0) || !(0.0..=1.0).contains(&settings.keep_probability) {
        return Err(Error::InvalidConfig("LIME ridge lambda and keep probability out of range".into()));
    }
    if m == 0 {
        return Ok(LimeValues { coefficients: vec![], intercept: value(&[])?, retries: 0 });
    }
    let width = settings.kernel_width.unwrap_or(0.75 * (m as f64).sqrt());
    if !(width > 0.0) {
        return Err(Error::InvalidConfig("LIME kernel width must be positive".into()));
    }

    for retry in 0..=MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(retry));
        let zs: Vec<Vec<bool>> = (0..settings.n_samples)
            .map(|_| (0..m).map(|_| rng.random::<f64>() < settings.keep_probability).collect())
            .collect();
        if zs.iter().all(|z| z == &zs[0]) {
            continue;
        }
        let ys: Vec<f64> = zs.par_iter().map(|z| value(z)).collect::<Result<_>>()?;

        let log_w: Vec<f64> = zs
            .iter()
            .map(|z| {
                let d = z.iter().filter(|k| !**k).count() as f64;
                -(d * d) / (width * width)
            })
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let mean_w = raw.iter().sum::<f64>() / raw.len() as f64;
        let w: Vec<f64> = raw.iter().map(|v| v / mean_w).collect();
        let wsum: f64 = w.iter().sum();

        // centre on weighted means so the intercept is not penalised
        let mut xbar = vec![0.0; m];
        let mut ybar = 0.0;
        for (k, z) in zs.iter().enumerate() {
            for i in 0..m {
                if z[i] {
                    xbar[i] += w[k];
                }
            }
            ybar += w[k] * ys[k];
        }
        xbar.iter_mut().for_each(|v| *v /= wsum);
        ybar /= wsum;
        let x = DMatrix::from_fn(zs.len(), m, |k, i| if zs[k][i] { 1.0 } else { 0.0 } - xbar[i]);
        let y = DVector::from_fn(zs.len(), |k, _| ys[k] - ybar);
        let lambda = settings.ridge_lambda.max(1e-12);
        let beta = weighted_ridge(&x, &y, &w, lambda, "lime")?;
        let coefficients: Vec<f64> = beta.iter().copied().collect();
        let intercept = ybar - coefficients.iter().zip(&xbar).map(|(b, x)| b * x).sum::<f64>();
        return Ok(LimeValues { coefficients, intercept, retries: retry });
    }
    Err(Error::Singular(format!("LIME samples degenerate after {MAX_RETRIES} retries")))
}

pub fn lime(
    model: &Model,
    record: &PatientRecord,
    target_class: usize,
    policy: &MaskPolicy,
    settings: &LimeSettings,
    seed: u64,
) -> Result<AttributionMap> {
    let m = record.n_positions();
    let value = |z: &[bool]| -> Result<f64> {
        let masked = mask_complement(record, z, policy)?;
        Ok(model.predict_proba(&masked)?[target_class])
    };
    let fit = lime_values(m, value, settings, seed)?;
    Ok(AttributionMap::new(Method::Lime, target_class, fit.coefficients)
        .with_meta("intercept", fit.intercept)
        .with_meta("samples", settings.n_samples as f64)
        .with_meta("retries", fit.retries as f64)
        .with_meta("forward_passes", settings.n_samples as f64)
        .with_meta("backward_passes", 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_model_gives_zero_coefficients() {
        let fit = lime_values(6, |_| Ok(0.7), &LimeSettings::default(), 1).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-8));
        assert!((fit.intercept - 0.7).abs() < 1e-8);
    }

    #[test]
    fn same_seed_same_fit() {
        let f = |z: &[bool]| Ok(z.iter().enumerate().map(|(i, b)| if *b { i as f64 } else { 0.0 }).sum());
        let a = lime_values(5, f, &LimeSettings::default(), 9).unwrap();
        let b = lime_values(5, f, &LimeSettings::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_samples_exhaust_retries() {
        let settings = LimeSettings { keep_probability: 1.0, ..Default::default() };
        assert!(matches!(lime_values(3, |_| Ok(1.0), &settings, 0), Err(Error::Singular(_))));
    }
}
