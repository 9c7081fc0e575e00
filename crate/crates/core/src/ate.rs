//! Regression-imputation estimators of the ATE.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{point_key, Dataset};
use crate::error::{Error, Result};
use crate::glm::{fit_interaction, fit_stratified};
use crate::simgen::sigmoid;

pub const BIASED_INPUT_WARNING: &str = "biased dataset used as validation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AteMethod {
    StratifiedImputation,
    InteractionImputation,
}

impl FromStr for AteMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stratified" | "stratified-imputation" => Ok(AteMethod::StratifiedImputation),
            "interaction" | "interaction-imputation" => Ok(AteMethod::InteractionImputation),
            _ => Err(format!("unknown ATE method `{s}` (stratified|interaction)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub value: f64,
    pub method: AteMethod,
    pub n_used: usize,
    /// Set when the input dataset is flagged as outcome-selected.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl AteEstimate {
    fn new(value: f64, method: AteMethod, ds: &Dataset) -> Self {
        AteEstimate {
            value,
            method,
            n_used: ds.len(),
            warning: ds.is_biased().then(|| BIASED_INPUT_WARNING.to_string()),
        }
    }
}

pub fn estimate_ate(ds: &Dataset, method: AteMethod) -> Result<AteEstimate> {
    match method {
        AteMethod::StratifiedImputation => ate_stratified_imputation(ds),
        AteMethod::InteractionImputation => ate_interaction_imputation(ds),
    }
}

/// `n⁻¹ Σᵢ [σ(β̂₀ˣ + β̂₁ˣ) − σ(β̂₀ˣ)]` with `x = Xᵢ`, each sample using its
/// own stratum's fit.
pub fn ate_stratified_imputation(ds: &Dataset) -> Result<AteEstimate> {
    ds.ensure_nonempty()?;
    let fits = fit_stratified(ds)?;
    if let Some(r) = fits.rejects.first() {
        return Err(Error::StratumUnusable {
            point: r.point.to_string(),
            reason: r.reason.clone(),
        });
    }
    let mut key = Vec::with_capacity(ds.dim());
    let mut total = 0.0;
    for i in 0..ds.len() {
        point_key(ds.x(i), &mut key);
        let f = fits
            .get_by_key(&key)
            .ok_or_else(|| Error::Domain("sample without stratum fit".into()))?;
        let b0 = f.intercept();
        total += sigmoid(b0 + f.log_or()) - sigmoid(b0);
    }
    Ok(AteEstimate::new(
        total / ds.len() as f64,
        AteMethod::StratifiedImputation,
        ds,
    ))
}

/// `n⁻¹ Σᵢ [σ(β̂₀ + β̂₁ + (β̂₂ + β̂₃)ᵀXᵢ) − σ(β̂₀ + β̂₂ᵀXᵢ)]`.
pub fn ate_interaction_imputation(ds: &Dataset) -> Result<AteEstimate> {
    ds.ensure_nonempty()?;
    let fit = fit_interaction(ds)?;
    let d = ds.dim();
    let c = &fit.coef;
    let (b2, b3) = (&c[2..2 + d], &c[2 + d..2 + 2 * d]);
    let mut total = 0.0;
    for i in 0..ds.len() {
        let x = ds.x(i);
        let lin2: f64 = b2.iter().zip(x).map(|(b, v)| b * v).sum();
        let lin3: f64 = b3.iter().zip(x).map(|(b, v)| b * v).sum();
        total += sigmoid(c[0] + c[1] + lin2 + lin3) - sigmoid(c[0] + lin2);
    }
    Ok(AteEstimate::new(
        total / ds.len() as f64,
        AteMethod::InteractionImputation,
        ds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::rng::RngStream;
    use crate::simgen::{default_config, generate_unbiased, true_ate};

    fn cells(spec: &[(u8, f64, u8, usize)]) -> Dataset {
        let mut v = Vec::new();
        for &(z, x, y, n) in spec {
            for _ in 0..n {
                v.push(Sample::new(z, vec![x], y));
            }
        }
        Dataset::new(v, false, "t").unwrap()
    }

    #[test]
    fn saturated_single_stratum() {
        let ds = cells(&[(0, 0.0, 1, 1), (0, 0.0, 0, 3), (1, 0.0, 1, 3), (1, 0.0, 0, 1)]);
        let e = ate_stratified_imputation(&ds).unwrap();
        assert!((e.value - 0.5).abs() < 1e-9);
        assert_eq!(e.n_used, 8);
        assert!(e.warning.is_none());
    }

    #[test]
    fn no_effect_gives_zero() {
        let ds = cells(&[
            (0, 0.0, 1, 2),
            (0, 0.0, 0, 3),
            (1, 0.0, 1, 2),
            (1, 0.0, 0, 3),
            (0, 1.0, 1, 4),
            (0, 1.0, 0, 1),
            (1, 1.0, 1, 8),
            (1, 1.0, 0, 2),
        ]);
        assert!(ate_stratified_imputation(&ds).unwrap().value.abs() < 1e-9);
        assert!(ate_interaction_imputation(&ds).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn unusable_populated_stratum_is_error() {
        let ds = cells(&[(0, 0.0, 1, 1), (0, 0.0, 0, 3), (1, 0.0, 1, 3), (1, 0.0, 0, 1), (1, 1.0, 1, 2)]);
        let err = ate_stratified_imputation(&ds).unwrap_err();
        assert!(err.to_string().contains("(1)"), "{err}");
    }

    #[test]
    fn interaction_matches_stratified_for_d1() {
        let ds = cells(&[
            (0, 0.0, 0, 30),
            (0, 0.0, 1, 11),
            (1, 0.0, 0, 14),
            (1, 0.0, 1, 33),
            (0, 1.0, 0, 21),
            (0, 1.0, 1, 24),
            (1, 1.0, 0, 51),
            (1, 1.0, 1, 15),
        ]);
        let a = ate_stratified_imputation(&ds).unwrap().value;
        let b = ate_interaction_imputation(&ds).unwrap().value;
        assert!((a - b).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn biased_input_flagged() {
        let ds = cells(&[(0, 0.0, 1, 1), (0, 0.0, 0, 3), (1, 0.0, 1, 3), (1, 0.0, 0, 1)]).with_flags(true, "O1");
        let e = ate_stratified_imputation(&ds).unwrap();
        assert_eq!(e.warning.as_deref(), Some(BIASED_INPUT_WARNING));
    }

    #[test]
    fn large_sample_consistency() {
        let cfg = default_config();
        let truth = true_ate(&cfg).unwrap();
        let ds = generate_unbiased(&cfg, 100_000, &RngStream::new(2024, 0)).unwrap();
        let a = ate_stratified_imputation(&ds).unwrap().value;
        let b = ate_interaction_imputation(&ds).unwrap().value;
        assert!((a - truth).abs() < 0.02, "{a} vs {truth}");
        assert!((b - truth).abs() < 0.02, "{b} vs {truth}");
    }
}
