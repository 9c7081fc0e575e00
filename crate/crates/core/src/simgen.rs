//! Synthetic data with binary covariates, logistic confounding and
//! outcome-dependent selection.
//!
//! Each unit draws `X_j ~ Bernoulli(p_j)`, then `Z ~ Bernoulli(σ(a0 + a1ᵀx))`,
//! then `Y ~ Bernoulli(σ(b_{z,0} + b_{z,1}ᵀx))`. Every Bernoulli draw consumes
//! exactly one uniform, in that order, so a stream replays identically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CovPoint, Dataset};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(x).map(|(a, x)| a * x).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub d: usize,
    /// Bernoulli parameter of each covariate.
    pub p_x: Vec<f64>,
    /// Propensity intercept and slopes.
    pub a0: f64,
    pub a1: Vec<f64>,
    /// Control potential-outcome intercept and slopes.
    pub b00: f64,
    pub b01: Vec<f64>,
    /// Treated potential-outcome intercept and slopes.
    pub b10: f64,
    pub b11: Vec<f64>,
    /// P(S=1 | Y=1) and P(S=1 | Y=0).
    pub sel1: f64,
    pub sel0: f64,
}

/// Coefficients of the equivalent single logistic model
/// `σ(β0 + β1 z + β2ᵀx + β3ᵀxz)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beta {
    pub b0: f64,
    pub b1: f64,
    pub b2: Vec<f64>,
    pub b3: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogOrAt {
    pub x: CovPoint,
    pub log_or: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSummary {
    pub true_ate: f64,
    pub true_log_or: Vec<LogOrAt>,
    pub beta: Beta,
    /// Marginal P(Y=1) before selection.
    pub p_y1: f64,
    /// Expected fraction of units surviving selection.
    pub keep_fraction: f64,
}

/// Largest covariate dimension handled by exact cell enumeration.
pub const MAX_ENUM_DIM: usize = 20;

impl SimConfig {
    /// Default generator: two Bernoulli(0.5) covariates, confounded
    /// treatment, and an X-by-Z interaction in the outcome.
    pub fn default_config() -> SimConfig {
        Self::with_slopes(vec![-1.0, 1.0], vec![1.0, -1.0])
    }

    /// No-interaction variant with `b11 = b01 = (-1, 1)`.
    pub fn simple_config() -> SimConfig {
        Self::with_slopes(vec![-1.0, 1.0], vec![-1.0, 1.0])
    }

    fn with_slopes(b01: Vec<f64>, b11: Vec<f64>) -> SimConfig {
        let p_x = vec![0.5, 0.5];
        let a1 = vec![-1.0, 1.0];
        SimConfig {
            d: 2,
            a0: -dot(&a1, &p_x),
            b00: -0.5 - dot(&b01, &p_x),
            b10: 0.5 - dot(&b11, &p_x),
            p_x,
            a1,
            b01,
            b11,
            sel1: 0.9,
            sel0: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidConfig(format!("{field}: {msg}")));
        for (name, v) in [("p_x", &self.p_x), ("a1", &self.a1), ("b01", &self.b01), ("b11", &self.b11)] {
            if v.len() != self.d {
                return bad(name, &format!("length {} != d = {}", v.len(), self.d));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(name, "non-finite entry");
            }
        }
        if self.p_x.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("p_x", "must lie in [0, 1]");
        }
        for (name, v) in [("a0", self.a0), ("b00", self.b00), ("b10", self.b10)] {
            if !v.is_finite() {
                return bad(name, "non-finite");
            }
        }
        for (name, v) in [("sel1", self.sel1), ("sel0", self.sel0)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> Beta {
        Beta {
            b0: self.b00,
            b1: self.b10 - self.b00,
            b2: self.b01.clone(),
            b3: self.b11.iter().zip(&self.b01).map(|(t, c)| t - c).collect(),
        }
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        sigmoid(self.a0 + dot(&self.a1, x))
    }

    /// P(Y=1 | Z=z, X=x).
    pub fn outcome_prob(&self, z: u8, x: &[f64]) -> f64 {
        if z == 1 {
            sigmoid(self.b10 + dot(&self.b11, x))
        } else {
            sigmoid(self.b00 + dot(&self.b01, x))
        }
    }

    pub fn true_log_or(&self, x: &[f64]) -> f64 {
        let beta = self.beta();
        beta.b1 + dot(&beta.b3, x)
    }

    /// Calls `f(x, P(X=x))` for each of the 2^d covariate cells.
    fn for_each_cell(&self, mut f: impl FnMut(&[f64], f64)) -> Result<()> {
        if self.d > MAX_ENUM_DIM {
            return Err(Error::InvalidConfig(format!(
                "d = {} too large to enumerate (max {MAX_ENUM_DIM})",
                self.d
            )));
        }
        let mut x = vec![0.0; self.d];
        for mask in 0u64..(1u64 << self.d) {
            let mut p = 1.0;
            for j in 0..self.d {
                let on = (mask >> (self.d - 1 - j)) & 1 == 1;
                x[j] = if on { 1.0 } else { 0.0 };
                p *= if on { self.p_x[j] } else { 1.0 - self.p_x[j] };
            }
            f(&x, p);
        }
        Ok(())
    }

    /// Exact ATE by enumerating covariate cells.
    pub fn true_ate(&self) -> Result<f64> {
        let mut tau = 0.0;
        self.for_each_cell(|x, p| {
            tau += p * (self.outcome_prob(1, x) - self.outcome_prob(0, x));
        })?;
        Ok(tau)
    }

    pub fn truth(&self) -> Result<TruthSummary> {
        self.validate()?;
        let mut log_or = Vec::new();
        let mut p_y1 = 0.0;
        self.for_each_cell(|x, p| {
            if p > 0.0 {
                log_or.push(LogOrAt {
                    x: CovPoint(x.to_vec()),
                    log_or: self.true_log_or(x),
                });
            }
            let e = self.propensity(x);
            p_y1 += p * (e * self.outcome_prob(1, x) + (1.0 - e) * self.outcome_prob(0, x));
        })?;
        log_or.sort_by(|a, b| a.x.cmp(&b.x));
        Ok(TruthSummary {
            true_ate: self.true_ate()?,
            true_log_or: log_or,
            beta: self.beta(),
            p_y1,
            keep_fraction: p_y1 * self.sel1 + (1.0 - p_y1) * self.sel0,
        })
    }
}

pub fn default_config() -> SimConfig {
    SimConfig::default_config()
}

pub fn simple_config() -> SimConfig {
    SimConfig::simple_config()
}

pub fn true_ate(cfg: &SimConfig) -> Result<f64> {
    cfg.true_ate()
}

/// Draws `n` units from the unselected population.
pub fn generate_unbiased(cfg: &SimConfig, n: usize, rng: &RngStream) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let mut r = rng.rng();
    let mut ds = Dataset::with_capacity(cfg.d, n, false, "O2");
    let mut x = vec![0.0; cfg.d];
    for _ in 0..n {
        for (xj, &p) in x.iter_mut().zip(&cfg.p_x) {
            *xj = if r.gen::<f64>() < p { 1.0 } else { 0.0 };
        }
        let z = u8::from(r.gen::<f64>() < cfg.propensity(&x));
        let y = u8::from(r.gen::<f64>() < cfg.outcome_prob(z, &x));
        ds.push_unchecked(z, &x, y);
    }
    Ok(ds)
}

/// Keep decisions for outcome selection: one uniform per unit, compared with
/// `sel1` or `sel0` according to the unit's outcome alone.
pub fn selection_mask(outcomes: &[u8], sel1: f64, sel0: f64, rng: &RngStream) -> Vec<bool> {
    let mut r = rng.rng();
    outcomes
        .iter()
        .map(|&y| {
            let keep_p = if y == 1 { sel1 } else { sel0 };
            r.gen::<f64>() < keep_p
        })
        .collect()
}

/// Outcome-dependent subsampling; the result is flagged biased.
pub fn apply_selection(ds: &Dataset, sel1: f64, sel0: f64, rng: &RngStream) -> Result<Dataset> {
    for (name, v) in [("sel1", sel1), ("sel0", sel0)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
        }
    }
    let mask = selection_mask(ds.outcomes(), sel1, sel0, rng);
    Ok(ds.filter(&mask).with_flags(true, "O1"))
}

/// Batches generated per call of [`generate_selected`] before giving up.
pub const SELECTION_BATCHES: u64 = 10;

/// Generates a selection-biased dataset of exactly `n1` post-selection units.
///
/// Pre-selection units are drawn in batches of `n1`; batch `k` generates on
/// `rng.substream(2k)` and selects on `rng.substream(2k+1)`. Kept units are
/// concatenated and truncated to `n1`.
pub fn generate_selected(cfg: &SimConfig, n1: usize, rng: &RngStream) -> Result<Dataset> {
    cfg.validate()?;
    if n1 == 0 {
        return Err(Error::InvalidConfig("n1 must be at least 1".into()));
    }
    let mut out = Dataset::with_capacity(cfg.d, n1, true, "O1");
    for batch in 0..SELECTION_BATCHES {
        let pre = generate_unbiased(cfg, n1, &rng.substream(2 * batch))?;
        let kept = apply_selection(&pre, cfg.sel1, cfg.sel0, &rng.substream(2 * batch + 1))?;
        out.append(&kept);
        if out.len() >= n1 {
            out.truncate(n1);
            return Ok(out);
        }
    }
    Err(Error::InvalidConfig(format!(
        "selection kept only {} of the requested {n1} units after {SELECTION_BATCHES} batches",
        out.len()
    )))
}
