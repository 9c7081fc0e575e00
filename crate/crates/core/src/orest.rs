//! Conditional odds-ratio estimators and the control-variate estimands built
//! from them.
//!
//! Three estimators are provided: per-stratum logistic fits for discrete
//! covariates, a logistic model with X-by-Z interaction, and a Gaussian
//! kernel smoother over the four cells of the treatment/outcome table. All of
//! them stay consistent on data subsampled on the outcome, because the
//! conditional odds ratio is unchanged by selection that depends on Y alone.

use std::fmt;
use std::ops::{Add, Div, Mul};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{CovPoint, Dataset};
use crate::error::{Error, Result};
use crate::glm::{fit_interaction, fit_stratified_with, StratifiedOptions};
use crate::simgen::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Natural,
    Log,
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "natural" => Ok(Scale::Natural),
            "log" => Ok(Scale::Log),
            _ => Err(format!("unknown scale `{s}` (natural|log)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRatioEstimate {
    pub points: Vec<CovPoint>,
    pub values: Vec<f64>,
    pub scale: Scale,
}

impl OddsRatioEstimate {
    pub fn new(points: Vec<CovPoint>, values: Vec<f64>, scale: Scale) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::Domain("points and values differ in length".into()));
        }
        let ok = match scale {
            Scale::Natural => values.iter().all(|v| v.is_finite() && *v > 0.0),
            Scale::Log => values.iter().all(|v| v.is_finite()),
        };
        if !ok {
            return Err(Error::Domain(format!("odds ratio values invalid on {scale:?} scale")));
        }
        Ok(OddsRatioEstimate { points, values, scale })
    }

    pub fn log_values(&self) -> Vec<f64> {
        match self.scale {
            Scale::Log => self.values.clone(),
            Scale::Natural => self.values.iter().map(|v| v.ln()).collect(),
        }
    }

    pub fn natural_values(&self) -> Vec<f64> {
        match self.scale {
            Scale::Natural => self.values.clone(),
            Scale::Log => self.values.iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn to_scale(&self, scale: Scale) -> OddsRatioEstimate {
        let values = match scale {
            Scale::Natural => self.natural_values(),
            Scale::Log => self.log_values(),
        };
        OddsRatioEstimate {
            points: self.points.clone(),
            values,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_points(ds: &Dataset, points: &[CovPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    if let Some(p) = points.iter().find(|p| p.values().len() != ds.dim()) {
        return Err(Error::Domain(format!(
            "point {p} has dimension {}, dataset has {}",
            p.values().len(),
            ds.dim()
        )));
    }
    Ok(())
}

/// Odds ratio `exp(β̂₁ˣ)` from the logistic fit within each point's stratum.
pub fn or_stratified(ds: &Dataset, points: &[CovPoint]) -> Result<OddsRatioEstimate> {
    or_stratified_with(ds, points, StratifiedOptions::default())
}

pub fn or_stratified_with(ds: &Dataset, points: &[CovPoint], opts: StratifiedOptions) -> Result<OddsRatioEstimate> {
    check_points(ds, points)?;
    let fits = fit_stratified_with(ds, opts)?;
    let mut values = Vec::with_capacity(points.len());
    for p in points {
        match fits.get(p) {
            Some(f) => values.push(f.log_or().exp()),
            None => {
                let reason = fits
                    .reject_for(p)
                    .map_or_else(|| "no samples".to_string(), |r| r.reason.clone());
                return Err(Error::StratumUnusable {
                    point: p.to_string(),
                    reason,
                });
            }
        }
    }
    OddsRatioEstimate::new(points.to_vec(), values, Scale::Natural)
}

/// Log odds ratio `β̂₁ + β̂₃ᵀx` from the interaction logistic model.
pub fn or_interaction(ds: &Dataset, points: &[CovPoint]) -> Result<OddsRatioEstimate> {
    check_points(ds, points)?;
    let fit = fit_interaction(ds)?;
    let d = ds.dim();
    let b1 = fit.coef[1];
    let b3 = &fit.coef[2 + d..2 + 2 * d];
    let values = points
        .iter()
        .map(|p| b1 + b3.iter().zip(p.values()).map(|(b, x)| b * x).sum::<f64>())
        .collect();
    OddsRatioEstimate::new(points.to_vec(), values, Scale::Log)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    /// `σ̂_j · N^(-1/(d+4))` per coordinate.
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Auto => write!(f, "auto"),
            Bandwidth::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Bandwidth::Auto);
        }
        let v: f64 = s.parse().map_err(|_| format!("bandwidth `{s}` is neither `auto` nor a number"))?;
        if v.is_finite() && v > 0.0 {
            Ok(Bandwidth::Fixed(v))
        } else {
            Err(format!("bandwidth must be positive, got {v}"))
        }
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Auto => s.serialize_str("auto"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Bandwidth::from_str(&v.to_string()),
            Repr::Str(s) => Bandwidth::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Gaussian kernel `K(u) = exp(-‖u‖²/2)` with the given bandwidth rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

/// Per-coordinate bandwidths and their geometric mean `λ`, so that
/// `λ^d = Π h_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedBandwidth {
    pub per_coord: Vec<f64>,
    pub effective: f64,
}

impl ResolvedBandwidth {
    /// `√(λ^d)`, the factor applied to the kernel-based combiner.
    pub fn combiner_scale(&self) -> f64 {
        self.per_coord.iter().product::<f64>().sqrt()
    }
}

pub fn resolve_bandwidth(ds: &Dataset, cfg: &KernelConfig) -> Result<ResolvedBandwidth> {
    ds.ensure_nonempty()?;
    let d = ds.dim();
    let per_coord = match cfg.bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
            }
            vec![h; d]
        }
        Bandwidth::Auto => {
            let n = ds.len() as f64;
            let rate = n.powf(-1.0 / (d as f64 + 4.0));
            (0..d)
                .map(|j| {
                    let sd = coordinate_sd(ds, j);
                    if sd > 0.0 {
                        sd * rate
                    } else {
                        rate
                    }
                })
                .collect()
        }
    };
    let effective = if d == 0 {
        1.0
    } else {
        (per_coord.iter().map(|h| h.ln()).sum::<f64>() / d as f64).exp()
    };
    Ok(ResolvedBandwidth { per_coord, effective })
}

fn coordinate_sd(ds: &Dataset, j: usize) -> f64 {
    let n = ds.len();
    if n < 2 {
        return 0.0;
    }
    let mean = ds.iter().map(|s| s.x[j]).sum::<f64>() / n as f64;
    let ss: f64 = ds.iter().map(|s| (s.x[j] - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

pub fn or_kernel(ds: &Dataset, points: &[CovPoint], cfg: &KernelConfig) -> Result<OddsRatioEstimate> {
    or_kernel_detailed(ds, points, cfg).map(|(est, _)| est)
}

/// Kernel odds ratio: the product of the smoothed `YZ` and `(1-Y)(1-Z)` sums
/// over the product of the smoothed `Y(1-Z)` and `(1-Y)Z` sums.
pub fn or_kernel_detailed(
    ds: &Dataset,
    points: &[CovPoint],
    cfg: &KernelConfig,
) -> Result<(OddsRatioEstimate, ResolvedBandwidth)> {
    check_points(ds, points)?;
    let bw = resolve_bandwidth(ds, cfg)?;
    let inv_h: Vec<f64> = bw.per_coord.iter().map(|h| 1.0 / h).collect();
    let mut expo = vec![0.0; ds.len()];
    let mut values = Vec::with_capacity(points.len());
    for p in points {
        let x0 = p.values();
        for (i, e) in expo.iter_mut().enumerate() {
            let dist2: f64 = ds
                .x(i)
                .iter()
                .zip(x0)
                .zip(&inv_h)
                .map(|((xi, x), ih)| ((x - xi) * ih).powi(2))
                .sum();
            *e = -0.5 * dist2;
        }
        // weights relative to the largest one; the ratio is scale-free
        let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut cell = [[0.0f64; 2]; 2];
        for (i, e) in expo.iter().enumerate() {
            cell[ds.z(i) as usize][ds.y(i) as usize] += (e - top).exp();
        }
        if cell.iter().flatten().any(|&c| !(c > 0.0)) {
            return Err(Error::EmptyKernelCell(p.to_string()));
        }
        let log_or = cell[1][1].ln() + cell[0][0].ln() - cell[0][1].ln() - cell[1][0].ln();
        values.push(log_or.exp());
    }
    Ok((OddsRatioEstimate::new(points.to_vec(), values, Scale::Natural)?, bw))
}

/// `|𝒳|⁻¹ Σ log OR(x)`.
pub fn psi_mean_log(est: &OddsRatioEstimate) -> Result<f64> {
    if est.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let logs = est.log_values();
    if logs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite log odds ratio".into()));
    }
    Ok(logs.iter().sum::<f64>() / logs.len() as f64)
}

/// Per-point values, in point order and on the estimate's own scale.
pub fn psi_vector(est: &OddsRatioEstimate) -> Result<Vec<f64>> {
    if est.is_empty() {
        return Err(Error::EmptyPoints);
    }
    Ok(est.values.clone())
}

/// Odds ratio from `[P(Y=0|z), P(Y=1|z)]` in the treated and control arms.
pub fn odds_ratio_of<T>(treated: &[T; 2], control: &[T; 2]) -> T
where
    T: Clone + Mul<Output = T> + Div<Output = T>,
{
    (treated[1].clone() * control[0].clone()) / (treated[0].clone() * control[1].clone())
}

/// Bayes reweighting of `[P(Y=0), P(Y=1)]` under selection with keep
/// probabilities `[sel0, sel1]`, giving the distribution among kept units.
pub fn reweight_by_selection<T>(p: &[T; 2], sel: &[T; 2]) -> [T; 2]
where
    T: Clone + Add<Output = T> + Mul<Output = T> + Div<Output = T>,
{
    let k0 = p[0].clone() * sel[0].clone();
    let k1 = p[1].clone() * sel[1].clone();
    let total = k0.clone() + k1.clone();
    [k0 / total.clone(), k1 / total]
}

/// ATE of the single-binary-covariate, no-interaction logistic model, from
/// `a = e^{β0}`, `b = e^{β2}`, `γ = P(X=1)` and the odds ratio `ψ = e^{β1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalOrAte {
    /// Exact cell enumeration; this is the reference value.
    pub enumerated: f64,
    /// The published closed-form expression, evaluated literally.
    pub closed_form: f64,
    pub discrepancy: f64,
}

pub fn ate_from_marginal_or(a: f64, b: f64, gamma: f64, psi: f64) -> Result<MarginalOrAte> {
    for (name, v) in [("a", a), ("b", b), ("psi", psi)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let (la, lb, lp) = (a.ln(), b.ln(), psi.ln());
    let enumerated = gamma * (sigmoid(la + lb + lp) - sigmoid(la + lb))
        + (1.0 - gamma) * (sigmoid(la + lp) - sigmoid(la));
    let c = a / (a + 1.0) - a * b / (a * b + 1.0);
    let closed_form = gamma * a * b * psi / (a * b * psi + 1.0) - gamma * a * psi / (a * psi + 1.0)
        + (a * psi - a) / (a * a * psi - a * psi + a + 1.0)
        - c;
    Ok(MarginalOrAte {
        enumerated,
        closed_form,
        discrepancy: closed_form - enumerated,
    })
}
