//! Bootstrap estimation of `Γ` and `V`, and the control-variate combiner
//! `τ̂_CV = τ̂₂ − s · Γ̂ᵀV̂⁻¹(ψ̂₂ − ψ̂₁)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ate::{estimate_ate, AteEstimate, AteMethod};
use crate::data::{distinct_points, CovPoint, Dataset};
use crate::error::{Error, Result, StageExt};
use crate::glm::StratifiedOptions;
use crate::orest::{
    or_interaction, or_kernel, or_kernel_detailed, or_stratified_with, psi_mean_log,
    KernelConfig, OddsRatioEstimate, ResolvedBandwidth, Scale,
};
use crate::rng::RngStream;

/// Attempts allowed for a single replicate before the run is abandoned.
pub const MAX_ATTEMPTS_PER_REPLICATE: usize = 50;
/// Total attempts allowed across a run, as a multiple of `B`.
pub const RETRY_BUDGET_FACTOR: usize = 5;
const RIDGE_TRIGGER: f64 = 1e-10;
const RIDGE_START: f64 = 1e-8;
const RIDGE_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrMethod {
    Stratified,
    Interaction,
    Kernel,
}

impl FromStr for OrMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stratified" => Ok(OrMethod::Stratified),
            "interaction" => Ok(OrMethod::Interaction),
            "kernel" => Ok(OrMethod::Kernel),
            _ => Err(format!("unknown odds-ratio method `{s}` (stratified|interaction|kernel)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiAggregation {
    /// Scalar mean of the log odds ratios over the evaluation points.
    MeanLog,
    /// One control variate per evaluation point.
    Vector,
}

impl FromStr for PsiAggregation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean-log" | "mean_log" => Ok(PsiAggregation::MeanLog),
            "vector" => Ok(PsiAggregation::Vector),
            _ => Err(format!("unknown psi aggregation `{s}` (mean-log|vector)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    /// Deviations from the full-sample estimates.
    #[default]
    FullSample,
    /// Deviations from the replicate means.
    ReplicateMean,
}

impl FromStr for Centering {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full-sample" => Ok(Centering::FullSample),
            "replicate-mean" => Ok(Centering::ReplicateMean),
            _ => Err(format!("unknown centering `{s}` (full-sample|replicate-mean)")),
        }
    }
}

/// The estimators recomputed on every bootstrap resample.
pub trait CvEstimators: Sync {
    /// `τ̂₂` from the unbiased dataset.
    fn tau(&self, o2: &Dataset) -> Result<f64>;
    /// `ψ̂` from either dataset.
    fn psi(&self, ds: &Dataset) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSet {
    pub ate: AteMethod,
    pub or: OrMethod,
    pub psi: PsiAggregation,
    /// Scale of the vector control variate; ignored by `MeanLog`.
    pub scale: Scale,
    pub points: Vec<CovPoint>,
    pub kernel: KernelConfig,
    pub continuity_correction: bool,
}

impl EstimatorSet {
    pub fn odds_ratio(&self, ds: &Dataset) -> Result<OddsRatioEstimate> {
        match self.or {
            OrMethod::Stratified => or_stratified_with(
                ds,
                &self.points,
                StratifiedOptions {
                    continuity_correction: self.continuity_correction,
                },
            ),
            OrMethod::Interaction => or_interaction(ds, &self.points),
            OrMethod::Kernel => or_kernel(ds, &self.points, &self.kernel),
        }
    }
}

impl CvEstimators for EstimatorSet {
    fn tau(&self, o2: &Dataset) -> Result<f64> {
        estimate_ate(o2, self.ate).map(|e| e.value)
    }

    fn psi(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let est = self.odds_ratio(ds)?;
        match self.psi {
            PsiAggregation::MeanLog => Ok(vec![psi_mean_log(&est)?]),
            PsiAggregation::Vector => Ok(est.to_scale(self.scale).values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMatrix {
    pub b: usize,
    pub tau2: Vec<f64>,
    /// `B` rows of `ψ̂₂⁽ᵇ⁾ − ψ̂₁⁽ᵇ⁾`.
    pub dpsi: Vec<Vec<f64>>,
    pub center_tau: f64,
    pub center_dpsi: Vec<f64>,
    /// Resamples drawn, including failed ones.
    pub attempts: usize,
    /// Failed resamples by reason.
    pub failures: BTreeMap<String, usize>,
}

impl ReplicateMatrix {
    /// Builds a matrix from precomputed replicates, checking shapes.
    pub fn from_parts(tau2: Vec<f64>, dpsi: Vec<Vec<f64>>, center_tau: f64, center_dpsi: Vec<f64>) -> Result<Self> {
        let b = tau2.len();
        if b < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 replicates, got {b}")));
        }
        let k = center_dpsi.len();
        if k == 0 {
            return Err(Error::EmptyPoints);
        }
        if dpsi.len() != b || dpsi.iter().any(|r| r.len() != k) {
            return Err(Error::Domain("replicate rows do not match the control-variate length".into()));
        }
        let finite = tau2.iter().chain(dpsi.iter().flatten()).chain(&center_dpsi).all(|v| v.is_finite());
        if !finite || !center_tau.is_finite() {
            return Err(Error::Domain("non-finite replicate value".into()));
        }
        Ok(ReplicateMatrix {
            b,
            tau2,
            dpsi,
            center_tau,
            center_dpsi,
            attempts: b,
            failures: BTreeMap::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.center_dpsi.len()
    }

    pub fn failed(&self) -> usize {
        self.failures.values().sum()
    }

    /// Writes `b,tau2,dpsi_1..dpsi_k` with `b` counted from 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("b,tau2");
        for j in 1..=self.k() {
            header.push_str(&format!(",dpsi_{j}"));
        }
        writeln!(w, "{header}")?;
        for (i, (t, row)) in self.tau2.iter().zip(&self.dpsi).enumerate() {
            write!(w, "{},{}", i + 1, t)?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn dpsi_of<E: CvEstimators + ?Sized>(est: &E, o1: &Dataset, o2: &Dataset) -> Result<Vec<f64>> {
    let p2 = est.psi(o2)?;
    let p1 = est.psi(o1)?;
    if p1.len() != p2.len() {
        return Err(Error::Domain("control variates differ in length between datasets".into()));
    }
    Ok(p2.iter().zip(&p1).map(|(a, b)| a - b).collect())
}

fn resample(ds: &Dataset, stream: RngStream) -> Dataset {
    let n = ds.len();
    let mut rng = stream.rng();
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    ds.gather(&idx)
}

struct ReplicateOutcome {
    value: Option<(f64, Vec<f64>)>,
    attempts: usize,
    failures: Vec<String>,
}

fn run_replicate<E: CvEstimators + ?Sized>(
    o1: &Dataset,
    o2: &Dataset,
    est: &E,
    k: usize,
    stream: RngStream,
) -> ReplicateOutcome {
    let mut failures = Vec::new();
    for attempt in 0..MAX_ATTEMPTS_PER_REPLICATE {
        let s = stream.substream(attempt as u64);
        let r2 = resample(o2, s.substream(0));
        let r1 = resample(o1, s.substream(1));
        let res = est.tau(&r2).and_then(|t| {
            let d = dpsi_of(est, &r1, &r2)?;
            if d.len() != k {
                return Err(Error::Domain("control-variate length changed".into()));
            }
            if !t.is_finite() || d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite replicate value".into()));
            }
            Ok((t, d))
        });
        match res {
            Ok(v) => {
                return ReplicateOutcome {
                    value: Some(v),
                    attempts: attempt + 1,
                    failures,
                }
            }
            Err(e) => failures.push(e.root().to_string()),
        }
    }
    ReplicateOutcome {
        value: None,
        attempts: MAX_ATTEMPTS_PER_REPLICATE,
        failures,
    }
}

/// Draws `B` paired resamples of both datasets and recomputes `τ̂₂` and
/// `ψ̂₂ − ψ̂₁` on each.
///
/// Replicate `b` (from 0), attempt `a` resamples O₂ with
/// `rng.substream(b).substream(a).substream(0)` and O₁ with `.substream(1)`,
/// so results do not depend on scheduling. A failed resample is redrawn; the
/// run fails if one replicate needs more than [`MAX_ATTEMPTS_PER_REPLICATE`]
/// draws or the run needs more than `5B`.
pub fn bootstrap_replicates<E: CvEstimators + ?Sized>(
    o1: &Dataset,
    o2: &Dataset,
    est: &E,
    b: usize,
    rng: &RngStream,
) -> Result<ReplicateMatrix> {
    if b < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 replicates, got {b}")));
    }
    o1.ensure_nonempty()?;
    o2.ensure_nonempty()?;
    let center_tau = est.tau(o2)?;
    let center_dpsi = dpsi_of(est, o1, o2)?;
    let k = center_dpsi.len();
    if k == 0 {
        return Err(Error::EmptyPoints);
    }

    let outcomes: Vec<ReplicateOutcome> = (0..b)
        .into_par_iter()
        .map(|i| run_replicate(o1, o2, est, k, rng.substream(i as u64)))
        .collect();

    let attempts: usize = outcomes.iter().map(|o| o.attempts).sum();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for o in &outcomes {
        for f in &o.failures {
            *failures.entry(f.clone()).or_default() += 1;
        }
    }
    let exhausted = outcomes.iter().any(|o| o.value.is_none());
    if exhausted || attempts > RETRY_BUDGET_FACTOR * b {
        let failed = failures.values().sum();
        let reasons = failures
            .iter()
            .map(|(r, n)| format!("{r}: {n}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::BootstrapExhausted {
            attempts,
            failed,
            reasons,
        });
    }
    let mut tau2 = Vec::with_capacity(b);
    let mut dpsi = Vec::with_capacity(b);
    for o in outcomes {
        let (t, d) = o.value.expect("checked above");
        tau2.push(t);
        dpsi.push(d);
    }
    Ok(ReplicateMatrix {
        b,
        tau2,
        dpsi,
        center_tau,
        center_dpsi,
        attempts,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaV {
    pub gamma: Vec<f64>,
    /// Symmetrized `V̂`, row-major.
    pub v: Vec<Vec<f64>>,
    /// `(B−1)⁻¹ Σ (τ̂₂⁽ᵇ⁾ − c)²` under the same centering.
    pub var_tau2: f64,
}

/// Sample covariances with the `1/(B−1)` normalization.
pub fn estimate_gamma_v(rm: &ReplicateMatrix, centering: Centering) -> GammaV {
    let b = rm.b;
    let k = rm.k();
    let (ct, cd) = match centering {
        Centering::FullSample => (rm.center_tau, rm.center_dpsi.clone()),
        Centering::ReplicateMean => {
            let mt = rm.tau2.iter().sum::<f64>() / b as f64;
            let md = (0..k)
                .map(|j| rm.dpsi.iter().map(|r| r[j]).sum::<f64>() / b as f64)
                .collect();
            (mt, md)
        }
    };
    let mut gamma = vec![0.0; k];
    let mut v = vec![vec![0.0; k]; k];
    let mut var_tau2 = 0.0;
    let mut dev = vec![0.0; k];
    for (t, row) in rm.tau2.iter().zip(&rm.dpsi) {
        let dt = t - ct;
        var_tau2 += dt * dt;
        for j in 0..k {
            dev[j] = row[j] - cd[j];
            gamma[j] += dt * dev[j];
        }
        for i in 0..k {
            for j in 0..k {
                v[i][j] += dev[i] * dev[j];
            }
        }
    }
    let denom = (b - 1) as f64;
    gamma.iter_mut().for_each(|g| *g /= denom);
    v.iter_mut().flatten().for_each(|x| *x /= denom);
    for i in 0..k {
        for j in 0..i {
            let s = 0.5 * (v[i][j] + v[j][i]);
            v[i][j] = s;
            v[j][i] = s;
        }
    }
    GammaV {
        gamma,
        v,
        var_tau2: var_tau2 / denom,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub tau2: f64,
    pub tau_cv: f64,
    pub dpsi: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    pub v_hat: Vec<Vec<f64>>,
    /// `Γ̂ᵀV̂⁻¹`.
    pub coef: Vec<f64>,
    /// `Γ̂ᵀV̂⁻¹Γ̂`.
    pub var_reduction: f64,
    /// Ridge added to the diagonal of `V̂` before inversion.
    pub ridge: f64,
    /// Multiplier `s` on the correction term.
    pub scale: f64,
    pub kernel_scale: Option<f64>,
    /// Bootstrap variance `v̂₂` of `τ̂₂`.
    pub var_tau2: Option<f64>,
    /// `v̂₂ − (2s − s²) Γ̂ᵀV̂⁻¹Γ̂`, the bootstrap variance of `τ̂_CV`; equals
    /// `v̂₂ − Γ̂ᵀV̂⁻¹Γ̂` at `s = 1`.
    pub var_proxy: Option<f64>,
}

impl CvResult {
    pub fn with_var_tau2(mut self, v2: f64) -> Self {
        let s = self.scale;
        self.var_tau2 = Some(v2);
        self.var_proxy = Some(v2 - (2.0 * s - s * s) * self.var_reduction);
        self
    }

    /// `Γ̂ᵀV̂⁻¹Γ̂ / v̂₂`, when `v̂₂ > 0`.
    pub fn relative_reduction(&self) -> Option<f64> {
        self.var_tau2.filter(|v| *v > 0.0).map(|v| self.var_reduction / v)
    }
}

/// Smallest ridge `ε` (zero if none is needed) making `V̂ + εI`
/// well-conditioned, and its Cholesky factor.
fn regularize(v: &DMatrix<f64>) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let k = v.nrows();
    let tr = v.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::IllConditionedV);
    }
    let unit = tr / k as f64;
    let min_ok = RIDGE_TRIGGER * unit;
    let min_ev = v.clone().symmetric_eigen().eigenvalues.min();
    let mut eps = 0.0;
    if min_ev < min_ok {
        eps = RIDGE_START * unit;
        while min_ev + eps < min_ok {
            eps *= 10.0;
            if eps > RIDGE_MAX * unit * (1.0 + 1e-12) {
                return Err(Error::IllConditionedV);
            }
        }
    }
    let ridged = v + DMatrix::identity(k, k) * eps;
    ridged.cholesky().map(|c| (eps, c)).ok_or(Error::IllConditionedV)
}

/// `τ̂_CV = τ̂₂ − s · Γ̂ᵀV̂⁻¹ dpsi` with `s = scale.unwrap_or(1)`.
pub fn combine(tau2: f64, dpsi: &[f64], gamma: &[f64], v: &[Vec<f64>], scale: Option<f64>) -> Result<CvResult> {
    let k = dpsi.len();
    if k == 0 {
        return Err(Error::EmptyPoints);
    }
    if gamma.len() != k || v.len() != k || v.iter().any(|r| r.len() != k) {
        return Err(Error::Domain("Γ̂, V̂ and the control variate differ in dimension".into()));
    }
    let s = scale.unwrap_or(1.0);
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidConfig(format!("scale must be positive, got {s}")));
    }
    let base = CvResult {
        tau2,
        tau_cv: tau2,
        dpsi: dpsi.to_vec(),
        gamma_hat: gamma.to_vec(),
        v_hat: v.to_vec(),
        coef: vec![0.0; k],
        var_reduction: 0.0,
        ridge: 0.0,
        scale: s,
        kernel_scale: None,
        var_tau2: None,
        var_proxy: None,
    };
    if gamma.iter().all(|g| *g == 0.0) {
        return Ok(base);
    }
    let vm = DMatrix::from_fn(k, k, |i, j| v[i][j]);
    let (ridge, chol) = regularize(&vm)?;
    let g = DVector::from_column_slice(gamma);
    let coef = chol.solve(&g);
    let correction: f64 = coef.iter().zip(dpsi).map(|(c, d)| c * d).sum();
    let var_reduction = coef.dot(&g);
    Ok(CvResult {
        tau_cv: tau2 - s * correction,
        coef: coef.iter().copied().collect(),
        var_reduction,
        ridge,
        ..base
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PointsPolicy {
    /// All distinct O₂ points if there are at most [`AUTO_POINT_LIMIT`],
    /// otherwise a seeded sample of that many.
    Auto,
    AllDistinct,
    Subsample { count: usize },
    Explicit { points: Vec<CovPoint> },
}

pub const AUTO_POINT_LIMIT: usize = 50;

/// Evaluation points drawn from the distinct covariate values of `o2`, in
/// canonical order.
pub fn select_points(o2: &Dataset, policy: &PointsPolicy, rng: &RngStream) -> Result<Vec<CovPoint>> {
    let all = distinct_points(o2);
    let pick = |count: usize| -> Vec<CovPoint> {
        if count >= all.len() {
            return all.clone();
        }
        let mut r = rng.rng();
        let mut idx = sample_indices(&mut r, all.len(), count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i].clone()).collect()
    };
    let points = match policy {
        PointsPolicy::Auto => pick(AUTO_POINT_LIMIT),
        PointsPolicy::AllDistinct => all.clone(),
        PointsPolicy::Subsample { count } => {
            if *count == 0 {
                return Err(Error::EmptyPoints);
            }
            pick(*count)
        }
        PointsPolicy::Explicit { points } => {
            let mut p = points.clone();
            p.sort();
            p.dedup();
            p
        }
    };
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ate: AteMethod,
    pub or: OrMethod,
    pub psi: PsiAggregation,
    pub scale: Scale,
    pub points: PointsPolicy,
    pub kernel: KernelConfig,
    pub continuity_correction: bool,
    pub replicates: usize,
    pub centering: Centering,
    /// Replaces the automatic combiner scale.
    pub scale_override: Option<f64>,
    /// Skips the bootstrap covariance and sets `Γ̂ = 0`.
    pub force_zero_gamma: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ate: AteMethod::StratifiedImputation,
            or: OrMethod::Stratified,
            psi: PsiAggregation::Vector,
            scale: Scale::Log,
            points: PointsPolicy::Auto,
            kernel: KernelConfig::default(),
            continuity_correction: false,
            replicates: 100,
            centering: Centering::FullSample,
            scale_override: None,
            force_zero_gamma: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidConfig(format!(
                "replicates: need at least 2, got {}",
                self.replicates
            )));
        }
        if let Some(s) = self.scale_override {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!("scale_override: must be positive, got {s}")));
            }
        }
        if let crate::orest::Bandwidth::Fixed(h) = self.kernel.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::InvalidConfig(format!("kernel.bandwidth: must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// Spread of the replicate estimates themselves, with `τ̂_CV⁽ᵇ⁾` formed
/// from the full-sample coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub attempts: usize,
    pub failures: BTreeMap<String, usize>,
    pub mean_tau2: f64,
    pub mean_tau_cv: f64,
    pub var_tau2: f64,
    pub var_tau_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub result: CvResult,
    pub tau2_estimate: AteEstimate,
    pub points: Vec<CovPoint>,
    pub psi1: Vec<f64>,
    pub psi2: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<ResolvedBandwidth>,
    pub bootstrap: BootstrapSummary,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub replicates: Option<ReplicateMatrix>,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Full estimate: point selection on `rng.substream(1)`, full-sample
/// estimators, bootstrap on `rng.substream(0)`, then the combiner.
pub fn run_cv_pipeline(o1: &Dataset, o2: &Dataset, cfg: &PipelineConfig, rng: &RngStream) -> Result<PipelineOutput> {
    cfg.validate()?;
    o1.ensure_nonempty().stage("input O1")?;
    o2.ensure_nonempty().stage("input O2")?;
    if o1.dim() != o2.dim() {
        return Err(Error::InvalidConfig(format!(
            "O1 has {} covariates, O2 has {}",
            o1.dim(),
            o2.dim()
        )));
    }
    let mut warnings = Vec::new();
    if o2.is_biased() {
        warnings.push(crate::ate::BIASED_INPUT_WARNING.to_string());
    }
    let points = select_points(o2, &cfg.points, &rng.substream(1)).stage("points")?;
    let est = EstimatorSet {
        ate: cfg.ate,
        or: cfg.or,
        psi: cfg.psi,
        scale: cfg.scale,
        points: points.clone(),
        kernel: cfg.kernel,
        continuity_correction: cfg.continuity_correction,
    };

    let tau2_estimate = estimate_ate(o2, cfg.ate).stage("tau2")?;
    let (psi2, bandwidth) = if cfg.or == OrMethod::Kernel {
        let (or2, bw) = or_kernel_detailed(o2, &points, &cfg.kernel).stage("psi2")?;
        let p = match cfg.psi {
            PsiAggregation::MeanLog => vec![psi_mean_log(&or2).stage("psi2")?],
            PsiAggregation::Vector => or2.to_scale(cfg.scale).values,
        };
        (p, Some(bw))
    } else {
        (est.psi(o2).stage("psi2")?, None)
    };
    let psi1 = est.psi(o1).stage("psi1")?;
    let dpsi: Vec<f64> = psi2.iter().zip(&psi1).map(|(a, b)| a - b).collect();

    let kernel_scale = bandwidth.as_ref().map(ResolvedBandwidth::combiner_scale);
    let scale = cfg.scale_override.or(kernel_scale);

    let rm = bootstrap_replicates(o1, o2, &est, cfg.replicates, &rng.substream(0)).stage("bootstrap")?;
    let gv = estimate_gamma_v(&rm, cfg.centering);
    let gamma = if cfg.force_zero_gamma {
        vec![0.0; gv.gamma.len()]
    } else {
        gv.gamma.clone()
    };
    let mut result = combine(tau2_estimate.value, &dpsi, &gamma, &gv.v, scale)
        .stage("combine")?
        .with_var_tau2(gv.var_tau2);
    result.kernel_scale = kernel_scale;

    let s = result.scale;
    let tau_cv_reps: Vec<f64> = rm
        .tau2
        .iter()
        .zip(&rm.dpsi)
        .map(|(t, d)| t - s * result.coef.iter().zip(d).map(|(c, x)| c * x).sum::<f64>())
        .collect();
    let (mean_tau2, var_tau2) = mean_var(&rm.tau2);
    let (mean_tau_cv, var_tau_cv) = mean_var(&tau_cv_reps);
    if rm.failed() > 0 {
        warnings.push(format!(
            "{} of {} bootstrap resamples failed and were redrawn",
            rm.failed(),
            rm.attempts
        ));
    }
    if result.ridge > 0.0 {
        warnings.push(format!("ridge {:e} added to V", result.ridge));
    }
    let bootstrap = BootstrapSummary {
        replicates: rm.b,
        attempts: rm.attempts,
        failures: rm.failures.clone(),
        mean_tau2,
        mean_tau_cv,
        var_tau2,
        var_tau_cv,
    };
    Ok(PipelineOutput {
        result,
        tau2_estimate,
        points,
        psi1,
        psi2,
        bandwidth,
        bootstrap,
        warnings,
        replicates: Some(rm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::simgen::{default_config, generate_selected, generate_unbiased};
    use proptest::prelude::*;
    use rand::Rng;

    /// Box-Muller pair of standard normals.
    fn normal_pair<R: Rng>(r: &mut R) -> (f64, f64) {
        let u1: f64 = 1.0 - r.gen::<f64>();
        let u2: f64 = r.gen();
        let rad = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        (rad * th.cos(), rad * th.sin())
    }

    struct Shifted<'a>(&'a EstimatorSet, f64);
    impl CvEstimators for Shifted<'_> {
        fn tau(&self, o2: &Dataset) -> Result<f64> {
            self.0.tau(o2)
        }
        fn psi(&self, ds: &Dataset) -> Result<Vec<f64>> {
            Ok(self.0.psi(ds)?.into_iter().map(|v| v + self.1).collect())
        }
    }

    fn small_problem() -> (Dataset, Dataset, EstimatorSet) {
        let cfg = default_config();
        let o2 = generate_unbiased(&cfg, 400, &RngStream::new(11, 0)).unwrap();
        let o1 = generate_selected(&cfg, 2000, &RngStream::new(11, 1)).unwrap();
        let est = EstimatorSet {
            ate: AteMethod::StratifiedImputation,
            or: OrMethod::Stratified,
            psi: PsiAggregation::Vector,
            scale: Scale::Log,
            points: distinct_points(&o2),
            kernel: KernelConfig::default(),
            continuity_correction: false,
        };
        (o1, o2, est)
    }

    fn rm(tau: &[f64], dpsi: &[f64], ct: f64, cd: f64) -> ReplicateMatrix {
        ReplicateMatrix::from_parts(tau.to_vec(), dpsi.iter().map(|v| vec![*v]).collect(), ct, vec![cd]).unwrap()
    }

    #[test]
    fn hand_covariance_example() {
        let m = rm(&[1.3, -0.7, 0.3], &[2.5, -1.5, 0.5], 0.3, 0.5);
        let gv = estimate_gamma_v(&m, Centering::FullSample);
        assert!((gv.gamma[0] - 2.0).abs() < 1e-12);
        assert!((gv.v[0][0] - 4.0).abs() < 1e-12);
        let exact = rm(&[1.0, -1.0, 0.0], &[2.0, -2.0, 0.0], 0.0, 0.0);
        let gv = estimate_gamma_v(&exact, Centering::FullSample);
        assert_eq!(gv.gamma, vec![2.0]);
        assert_eq!(gv.v, vec![vec![4.0]]);
    }

    #[test]
    fn zero_deviations() {
        let m = rm(&[0.2, 0.2], &[0.1, 0.1], 0.2, 0.1);
        let gv = estimate_gamma_v(&m, Centering::FullSample);
        assert_eq!(gv.gamma, vec![0.0]);
        assert_eq!(gv.v, vec![vec![0.0]]);
    }

    #[test]
    fn centering_modes_differ_only_by_offset() {
        let m = rm(&[1.0, 2.0, 4.0], &[0.0, 1.0, 5.0], 0.0, 0.0);
        let a = estimate_gamma_v(&m, Centering::FullSample);
        let b = estimate_gamma_v(&m, Centering::ReplicateMean);
        // full-sample centering adds B/(B-1) * offset products
        let (mt, md) = (7.0 / 3.0, 2.0);
        assert!((a.gamma[0] - b.gamma[0] - 3.0 / 2.0 * mt * md).abs() < 1e-12);
        assert!((a.v[0][0] - b.v[0][0] - 3.0 / 2.0 * md * md).abs() < 1e-12);
    }

    #[test]
    fn bivariate_normal_covariance() {
        // tau = X, dpsi = 0.6 X + 0.8 W with X, W iid N(0,1) scaled
        let mut r = RngStream::new(99, 0).rng();
        let (st, sd) = (0.05, 0.2);
        let mut tau = Vec::new();
        let mut dpsi = Vec::new();
        for _ in 0..10_000 {
            let (x, w) = normal_pair(&mut r);
            tau.push(st * x);
            dpsi.push(sd * (0.6 * x + 0.8 * w));
        }
        let m = rm(&tau, &dpsi, 0.0, 0.0);
        let gv = estimate_gamma_v(&m, Centering::FullSample);
        let (g, v) = (0.6 * st * sd, sd * sd);
        assert!((gv.gamma[0] / g - 1.0).abs() < 0.1, "{} vs {g}", gv.gamma[0]);
        assert!((gv.v[0][0] / v - 1.0).abs() < 0.1);
    }

    #[test]
    fn combine_examples() {
        let r = combine(0.3, &[0.1], &[0.02], &[vec![0.04]], None).unwrap();
        assert!((r.tau_cv - 0.25).abs() < 1e-15);
        assert!((r.var_reduction - 0.01).abs() < 1e-15);
        let r = combine(0.3, &[0.1], &[0.0], &[vec![0.04]], None).unwrap();
        assert_eq!(r.tau_cv.to_bits(), 0.3f64.to_bits());
        let r = combine(0.3, &[0.0, 0.0], &[0.5, -0.2], &[vec![2.0, 0.3], vec![0.3, 1.0]], None).unwrap();
        assert_eq!(r.tau_cv, 0.3);
        let r = combine(0.3, &[0.1], &[0.02], &[vec![0.04]], Some(0.5)).unwrap();
        assert!((r.tau_cv - 0.275).abs() < 1e-15);
    }

    #[test]
    fn ridge_rescues_singular_v() {
        let v = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let r = combine(0.0, &[1.0, 1.0], &[0.5, 0.5], &v, None).unwrap();
        assert!(r.ridge > 0.0);
        assert!(r.ridge <= 1e-2);
        assert!(r.tau_cv.is_finite());
    }

    #[test]
    fn hopeless_v_is_error() {
        let v = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        let err = combine(0.0, &[1.0, 1.0], &[0.5, 0.5], &v, None).unwrap_err();
        assert_eq!(err.to_string(), "ill-conditioned V");
        let err = combine(0.0, &[1.0], &[0.5], &[vec![0.0]], None).unwrap_err();
        assert_eq!(err.to_string(), "ill-conditioned V");
    }

    #[test]
    fn single_row_datasets_resample_to_themselves() {
        struct Id;
        impl CvEstimators for Id {
            fn tau(&self, o2: &Dataset) -> Result<f64> {
                Ok(f64::from(o2.y(0)))
            }
            fn psi(&self, ds: &Dataset) -> Result<Vec<f64>> {
                Ok(vec![ds.x(0)[0]])
            }
        }
        let o1 = Dataset::new(vec![Sample::new(1, vec![3.0], 1)], true, "O1").unwrap();
        let o2 = Dataset::new(vec![Sample::new(0, vec![5.0], 0)], false, "O2").unwrap();
        let m = bootstrap_replicates(&o1, &o2, &Id, 2, &RngStream::new(1, 0)).unwrap();
        assert_eq!(m.dpsi, vec![vec![2.0], vec![2.0]]);
        assert_eq!(m.tau2, vec![0.0, 0.0]);
    }

    #[test]
    fn retry_budget_reports_reasons() {
        struct Flaky;
        impl CvEstimators for Flaky {
            fn tau(&self, o2: &Dataset) -> Result<f64> {
                // fails unless the resample reproduces the original order of y
                if o2.y(0) == 1 {
                    Ok(0.0)
                } else {
                    Err(Error::DegenerateOutcome)
                }
            }
            fn psi(&self, _: &Dataset) -> Result<Vec<f64>> {
                Ok(vec![0.0])
            }
        }
        let mut rows = vec![Sample::new(0, vec![0.0], 1)];
        rows.extend((0..999).map(|_| Sample::new(0, vec![0.0], 0)));
        let o2 = Dataset::new(rows, false, "O2").unwrap();
        let err = bootstrap_replicates(&o2, &o2, &Flaky, 3, &RngStream::new(1, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("degenerate outcome"), "{msg}");
    }

    #[test]
    fn replicates_are_deterministic_and_csv_shaped() {
        let cfg = default_config();
        let o2 = generate_unbiased(&cfg, 300, &RngStream::new(5, 0)).unwrap();
        let o1 = generate_selected(&cfg, 1000, &RngStream::new(5, 1)).unwrap();
        let est = EstimatorSet {
            ate: AteMethod::StratifiedImputation,
            or: OrMethod::Stratified,
            psi: PsiAggregation::Vector,
            scale: Scale::Log,
            points: distinct_points(&o2),
            kernel: KernelConfig::default(),
            continuity_correction: false,
        };
        let a = bootstrap_replicates(&o1, &o2, &est, 20, &RngStream::new(5, 2)).unwrap();
        let b = bootstrap_replicates(&o1, &o2, &est, 20, &RngStream::new(5, 2)).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "b,tau2,dpsi_1,dpsi_2,dpsi_3,dpsi_4");
        assert_eq!(lines.len(), 21);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn pipeline_runs_and_forced_zero_gamma_is_plain() {
        let cfg = default_config();
        let o2 = generate_unbiased(&cfg, 500, &RngStream::new(6, 0)).unwrap();
        let o1 = generate_selected(&cfg, 3000, &RngStream::new(6, 1)).unwrap();
        let pc = PipelineConfig {
            replicates: 30,
            ..Default::default()
        };
        let out = run_cv_pipeline(&o1, &o2, &pc, &RngStream::new(6, 2)).unwrap();
        assert_eq!(out.points.len(), 4);
        assert!(out.result.var_reduction >= 0.0);
        assert!(out.result.var_proxy.unwrap() <= out.result.var_tau2.unwrap());
        let zero = run_cv_pipeline(
            &o1,
            &o2,
            &PipelineConfig {
                force_zero_gamma: true,
                ..pc.clone()
            },
            &RngStream::new(6, 2),
        )
        .unwrap();
        assert_eq!(zero.result.tau_cv, zero.result.tau2);
        assert_eq!(zero.result.tau2, out.result.tau2);
        let kern = run_cv_pipeline(
            &o1,
            &o2,
            &PipelineConfig {
                or: OrMethod::Kernel,
                ..pc
            },
            &RngStream::new(6, 2),
        )
        .unwrap();
        let ks = kern.result.kernel_scale.unwrap();
        assert!(ks > 0.0 && ks < 1.0);
        assert_eq!(kern.result.scale, ks);
    }

    #[test]
    fn biased_validation_warns() {
        let cfg = default_config();
        let o1 = generate_selected(&cfg, 800, &RngStream::new(7, 1)).unwrap();
        let pc = PipelineConfig {
            replicates: 5,
            ..Default::default()
        };
        let out = run_cv_pipeline(&o1, &o1, &pc, &RngStream::new(7, 2)).unwrap();
        assert!(out.warnings.iter().any(|w| w == "biased dataset used as validation"));
    }

    #[test]
    fn point_policies() {
        let rows: Vec<Sample> = (0..200).map(|i| Sample::new((i % 2) as u8, vec![i as f64 * 0.1], (i % 3 == 0) as u8)).collect();
        let ds = Dataset::new(rows, false, "c").unwrap();
        let s = RngStream::new(1, 1);
        let auto = select_points(&ds, &PointsPolicy::Auto, &s).unwrap();
        assert_eq!(auto.len(), 50);
        assert!(auto.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(auto, select_points(&ds, &PointsPolicy::Auto, &s).unwrap());
        assert_ne!(auto, select_points(&ds, &PointsPolicy::Auto, &RngStream::new(2, 1)).unwrap());
        assert_eq!(select_points(&ds, &PointsPolicy::AllDistinct, &s).unwrap().len(), 200);
        assert!(select_points(&ds, &PointsPolicy::Subsample { count: 0 }, &s).is_err());
        assert!(select_points(&ds, &PointsPolicy::Explicit { points: vec![] }, &s).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let pc = PipelineConfig {
            points: PointsPolicy::Subsample { count: 7 },
            scale_override: Some(0.5),
            ..Default::default()
        };
        let j = serde_json::to_string(&pc).unwrap();
        let back: PipelineConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(pc, back);
        let partial: PipelineConfig = serde_json::from_str(r#"{"replicates": 7}"#).unwrap();
        assert_eq!(partial.replicates, 7);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"replicate": 7}"#).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, f64, Vec<f64>)> {
        (3usize..12, 1usize..4).prop_flat_map(|(b, k)| {
            (
                prop::collection::vec(-1.0f64..1.0, b),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, k), b),
                -1.0f64..1.0,
                prop::collection::vec(-1.0f64..1.0, k),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn shift_invariance(shift in -5.0f64..5.0) {
            let (o1, o2, est) = small_problem();
            let s = RngStream::new(3, 3);
            let a = bootstrap_replicates(&o1, &o2, &est, 10, &s).unwrap();
            let b = bootstrap_replicates(&o1, &o2, &Shifted(&est, shift), 10, &s).unwrap();
            let ga = estimate_gamma_v(&a, Centering::FullSample);
            let gb = estimate_gamma_v(&b, Centering::FullSample);
            for (x, y) in ga.gamma.iter().zip(&gb.gamma) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in ga.v.iter().flatten().zip(gb.v.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let ra = combine(a.center_tau, &a.center_dpsi, &ga.gamma, &ga.v, None).unwrap();
            let rb = combine(b.center_tau, &b.center_dpsi, &gb.gamma, &gb.v, None).unwrap();
            prop_assert!((ra.tau_cv - rb.tau_cv).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn affine_equivariance((tau, dpsi, ct, cd) in arb_matrix(), c in prop_oneof![0.1f64..10.0, -10.0f64..-0.1]) {
            let a = ReplicateMatrix::from_parts(tau.clone(), dpsi.clone(), ct, cd.clone()).unwrap();
            let scaled: Vec<Vec<f64>> = dpsi.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let b = ReplicateMatrix::from_parts(tau, scaled, ct, cd.iter().map(|v| v * c).collect()).unwrap();
            let ga = estimate_gamma_v(&a, Centering::FullSample);
            let gb = estimate_gamma_v(&b, Centering::FullSample);
            for (x, y) in ga.gamma.iter().zip(&gb.gamma) {
                prop_assert!((x * c - y).abs() < 1e-12);
            }
            for (ra, rb) in ga.v.iter().zip(&gb.v) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x * c * c - y).abs() < 1e-10 * (1.0 + y.abs()));
                }
            }
            let ra = combine(ct, &a.center_dpsi, &ga.gamma, &ga.v, None);
            let rb = combine(ct, &b.center_dpsi, &gb.gamma, &gb.v, None);
            if let (Ok(ra), Ok(rb)) = (ra, rb) {
                if ra.ridge == 0.0 && rb.ridge == 0.0 {
                    prop_assert!((ra.tau_cv - rb.tau_cv).abs() < 1e-10 * (1.0 + ra.tau_cv.abs()));
                }
            }
        }

        #[test]
        fn reduction_nonnegative_and_proxy_bounded((tau, dpsi, ct, cd) in arb_matrix()) {
            let m = ReplicateMatrix::from_parts(tau, dpsi, ct, cd).unwrap();
            let gv = estimate_gamma_v(&m, Centering::FullSample);
            if let Ok(r) = combine(ct, &m.center_dpsi, &gv.gamma, &gv.v, None) {
                let r = r.with_var_tau2(gv.var_tau2);
                prop_assert!(r.var_reduction >= 0.0);
                prop_assert!(r.var_proxy.unwrap() <= gv.var_tau2);
            }
        }
    }
}
