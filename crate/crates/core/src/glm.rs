//! Logistic-regression maximum likelihood by iteratively reweighted least
//! squares (Newton-Raphson with step halving).
//!
//! Fits run on grouped binomial data: each design row carries a success
//! count and a trial count. Ungrouped 0/1 data is the special case of unit
//! trials, and dataset fits collapse identical rows first, which gives the
//! same maximiser while making the cost independent of the sample size.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{key_to_point, point_key, CovPoint, Dataset};
use crate::error::{Error, Result};
use crate::simgen::sigmoid;

pub const MAX_ITER: usize = 100;
pub const SCORE_TOL: f64 = 1e-8;
pub const LOGLIK_REL_TOL: f64 = 1e-12;
/// Coefficients beyond this magnitude are taken as divergence under separation.
pub const SEPARATION_BOUND: f64 = 30.0;
const MAX_HALVINGS: usize = 50;
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignKind {
    /// Columns `(1, z)`, used within a single stratum.
    ZOnly,
    /// Columns `(1, z, x_1..x_d, x_1 z..x_d z)`.
    Interaction,
}

impl DesignKind {
    pub fn ncols(self, d: usize) -> usize {
        match self {
            DesignKind::ZOnly => 2,
            DesignKind::Interaction => 2 + 2 * d,
        }
    }

    pub fn write_row(self, z: u8, x: &[f64], out: &mut Vec<f64>) {
        let zf = f64::from(z);
        out.clear();
        out.push(1.0);
        out.push(zf);
        if self == DesignKind::Interaction {
            out.extend_from_slice(x);
            out.extend(x.iter().map(|v| v * zf));
        }
    }
}

pub fn design_matrix(kind: DesignKind, ds: &Dataset) -> DMatrix<f64> {
    let p = kind.ncols(ds.dim());
    let mut m = DMatrix::zeros(ds.len(), p);
    let mut row = Vec::with_capacity(p);
    for (i, s) in ds.iter().enumerate() {
        kind.write_row(s.z, s.x, &mut row);
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the score at `coef`.
    pub score_max: f64,
}

/// Maximum-likelihood logistic fit of 0/1 outcomes `y` on `rows`.
pub fn fit_logistic(rows: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("outcomes must be 0 or 1".into()));
    }
    let trials = vec![1.0; y.len()];
    fit_binomial(rows, y, &trials)
}

/// Binomial log-likelihood of `coef`; terms with zero trials contribute nothing.
pub fn binomial_loglik(rows: &DMatrix<f64>, successes: &[f64], trials: &[f64], coef: &[f64]) -> f64 {
    let beta = DVector::from_column_slice(coef);
    let eta = rows * &beta;
    eta.iter()
        .zip(successes.iter().zip(trials))
        .map(|(&e, (&s, &t))| s * e - t * softplus(e))
        .sum()
}

/// Score vector `Xᵀ(s − t·σ(Xβ))`.
pub fn binomial_score(rows: &DMatrix<f64>, successes: &[f64], trials: &[f64], coef: &[f64]) -> Vec<f64> {
    let beta = DVector::from_column_slice(coef);
    let eta = rows * &beta;
    let resid = DVector::from_iterator(
        eta.len(),
        eta.iter()
            .zip(successes.iter().zip(trials))
            .map(|(&e, (&s, &t))| s - t * sigmoid(e)),
    );
    (rows.transpose() * resid).iter().copied().collect()
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

/// Maximum-likelihood logistic fit on grouped binomial data.
pub fn fit_binomial(rows: &DMatrix<f64>, successes: &[f64], trials: &[f64]) -> Result<LogisticFit> {
    let (n, p) = rows.shape();
    if successes.len() != n || trials.len() != n {
        return Err(Error::Domain(format!(
            "design has {n} rows but {} successes and {} trials",
            successes.len(),
            trials.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if successes
        .iter()
        .zip(trials)
        .any(|(&s, &t)| !(s >= 0.0 && t >= s && t.is_finite()))
    {
        return Err(Error::Domain("need 0 <= successes <= trials".into()));
    }
    let informative = trials.iter().filter(|&&t| t > 0.0).count();
    if informative < p {
        return Err(Error::SingularDesign);
    }
    let total_s: f64 = successes.iter().sum();
    let total_t: f64 = trials.iter().sum();
    if total_s <= 0.0 || total_s >= total_t {
        return Err(Error::DegenerateOutcome);
    }

    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = binomial_loglik(rows, successes, trials, beta.as_slice());
    let mut converged = false;
    let mut iterations = 0;
    let mut score_max;

    loop {
        let eta = rows * &beta;
        let mut resid = DVector::zeros(n);
        let mut weighted = rows.clone();
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            resid[i] = successes[i] - trials[i] * mu;
            let w = trials[i] * mu * (1.0 - mu);
            weighted.row_mut(i).scale_mut(w);
        }
        let score = rows.transpose() * &resid;
        score_max = score.amax();
        let info = rows.transpose() * &weighted;
        let info = (&info + info.transpose()) * 0.5;
        let eig = info.clone().symmetric_eigen();
        let max_ev = eig.eigenvalues.max();
        let min_ev = eig.eigenvalues.min();
        if !(max_ev > 0.0) || min_ev <= RANK_TOL * max_ev {
            if beta.amax() > SEPARATION_BOUND {
                return Err(Error::Separation);
            }
            return Err(Error::SingularDesign);
        }
        if converged || score_max <= SCORE_TOL {
            converged = true;
            break;
        }
        if iterations == MAX_ITER {
            break;
        }
        iterations += 1;
        let step = match info.cholesky() {
            Some(ch) => ch.solve(&score),
            None => return Err(Error::SingularDesign),
        };

        let mut t = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_ll = binomial_loglik(rows, successes, trials, candidate.as_slice());
        let mut halvings = 0;
        while !(cand_ll >= ll) && halvings < MAX_HALVINGS {
            t *= 0.5;
            candidate = &beta + &step * t;
            cand_ll = binomial_loglik(rows, successes, trials, candidate.as_slice());
            halvings += 1;
        }
        if !(cand_ll >= ll) {
            // no ascent left at floating-point resolution
            break;
        }
        let rel = (cand_ll - ll).abs() / ll.abs().max(1.0);
        beta = candidate;
        ll = cand_ll;
        if rel <= LOGLIK_REL_TOL {
            converged = true;
        }
    }

    if beta.amax() > SEPARATION_BOUND {
        return Err(Error::Separation);
    }
    Ok(LogisticFit {
        coef: beta.iter().copied().collect(),
        loglik: ll,
        iterations,
        converged,
        score_max,
    })
}

/// Treatment-by-outcome counts `n[z][y]` within one stratum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Table2x2 {
    pub n: [[f64; 2]; 2],
}

impl Table2x2 {
    pub fn total(&self) -> f64 {
        self.n.iter().flatten().sum()
    }

    fn add(&mut self, z: u8, y: u8) {
        self.n[z as usize][y as usize] += 1.0;
    }

    fn with_correction(&self, c: f64) -> Table2x2 {
        let mut t = *self;
        t.n.iter_mut().flatten().for_each(|v| *v += c);
        t
    }

    /// Reason the stratum cannot support a `(1, z)` fit, if any.
    fn defect(&self, corrected: bool) -> Option<&'static str> {
        let [[n00, n01], [n10, n11]] = self.n;
        if n00 + n01 == 0.0 || n10 + n11 == 0.0 {
            return Some("no treatment variation");
        }
        if corrected {
            return None;
        }
        if n01 + n11 == 0.0 || n00 + n10 == 0.0 {
            return Some("degenerate outcome");
        }
        if n00 == 0.0 || n01 == 0.0 || n10 == 0.0 || n11 == 0.0 {
            return Some("separation");
        }
        None
    }
}

/// Fits `P(Y=1|z) = σ(β0 + β1 z)` from a 2×2 table.
pub fn fit_table(table: &Table2x2) -> Result<LogisticFit> {
    let [[n00, n01], [n10, n11]] = table.n;
    let rows = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
    fit_binomial(&rows, &[n01, n11], &[n00 + n01, n10 + n11])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedOptions {
    /// Add 0.5 to every cell of each stratum's 2×2 table.
    pub continuity_correction: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumFit {
    pub point: CovPoint,
    pub table: Table2x2,
    pub fit: LogisticFit,
}

impl StratumFit {
    pub fn intercept(&self) -> f64 {
        self.fit.coef[0]
    }

    pub fn log_or(&self) -> f64 {
        self.fit.coef[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumReject {
    pub point: CovPoint,
    pub reason: String,
    pub n: usize,
}

/// Per-stratum fits in canonical point order, plus strata that could not be fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifiedFits {
    pub fits: Vec<StratumFit>,
    pub rejects: Vec<StratumReject>,
    #[serde(skip)]
    index: BTreeMap<Vec<u64>, usize>,
}

impl StratifiedFits {
    pub fn get(&self, point: &CovPoint) -> Option<&StratumFit> {
        let mut key = Vec::new();
        point_key(point.values(), &mut key);
        self.get_by_key(&key)
    }

    pub(crate) fn get_by_key(&self, key: &[u64]) -> Option<&StratumFit> {
        self.index.get(key).map(|&i| &self.fits[i])
    }

    pub fn reject_for(&self, point: &CovPoint) -> Option<&StratumReject> {
        self.rejects.iter().find(|r| &r.point == point)
    }
}

/// 2×2 tables for every stratum, keyed by ordered-bit covariate key.
pub(crate) fn stratum_tables(ds: &Dataset) -> BTreeMap<Vec<u64>, (Table2x2, usize)> {
    let mut tables: BTreeMap<Vec<u64>, (Table2x2, usize)> = BTreeMap::new();
    let mut key = Vec::with_capacity(ds.dim());
    for s in ds.iter() {
        point_key(s.x, &mut key);
        match tables.get_mut(key.as_slice()) {
            Some((t, n)) => {
                t.add(s.z, s.y);
                *n += 1;
            }
            None => {
                let mut t = Table2x2::default();
                t.add(s.z, s.y);
                tables.insert(key.clone(), (t, 1));
            }
        }
    }
    tables
}

pub fn fit_stratified(ds: &Dataset) -> Result<StratifiedFits> {
    fit_stratified_with(ds, StratifiedOptions::default())
}

/// Fits the `(1, z)` logistic model separately within each covariate stratum.
pub fn fit_stratified_with(ds: &Dataset, opts: StratifiedOptions) -> Result<StratifiedFits> {
    ds.ensure_nonempty()?;
    let mut fits = Vec::new();
    let mut rejects = Vec::new();
    let mut index = BTreeMap::new();
    for (key, (table, n)) in stratum_tables(ds) {
        let point = key_to_point(&key);
        if let Some(reason) = table.defect(opts.continuity_correction) {
            rejects.push(StratumReject {
                point,
                reason: reason.to_string(),
                n,
            });
            continue;
        }
        let used = if opts.continuity_correction {
            table.with_correction(0.5)
        } else {
            table
        };
        match fit_table(&used) {
            Ok(fit) => {
                index.insert(key, fits.len());
                fits.push(StratumFit {
                    point,
                    table: used,
                    fit,
                });
            }
            Err(e) => rejects.push(StratumReject {
                point,
                reason: e.to_string(),
                n,
            }),
        }
    }
    if fits.is_empty() {
        let reasons: Vec<String> = rejects
            .iter()
            .map(|r| format!("{}: {}", r.point, r.reason))
            .collect();
        return Err(Error::NoUsableStrata(reasons.join("; ")));
    }
    Ok(StratifiedFits {
        fits,
        rejects,
        index,
    })
}

/// Fits `σ(β0 + β1 z + β2ᵀx + β3ᵀxz)`; coefficients are ordered
/// `(β0, β1, β2_1..β2_d, β3_1..β3_d)`.
pub fn fit_interaction(ds: &Dataset) -> Result<LogisticFit> {
    ds.ensure_nonempty()?;
    let d = ds.dim();
    // key: z followed by ordered-bit covariate key; canonical row order
    let mut groups: BTreeMap<Vec<u64>, (f64, f64)> = BTreeMap::new();
    let mut key = Vec::with_capacity(d + 1);
    let mut xkey = Vec::with_capacity(d);
    for s in ds.iter() {
        point_key(s.x, &mut xkey);
        key.clear();
        key.push(u64::from(s.z));
        key.extend_from_slice(&xkey);
        let y = f64::from(s.y);
        match groups.get_mut(key.as_slice()) {
            Some(g) => {
                g.0 += y;
                g.1 += 1.0;
            }
            None => {
                groups.insert(key.clone(), (y, 1.0));
            }
        }
    }
    let kind = DesignKind::Interaction;
    let p = kind.ncols(d);
    let mut rows = DMatrix::zeros(groups.len(), p);
    let mut successes = Vec::with_capacity(groups.len());
    let mut trials = Vec::with_capacity(groups.len());
    let mut row = Vec::with_capacity(p);
    for (i, (k, (s, t))) in groups.iter().enumerate() {
        let x = key_to_point(&k[1..]);
        kind.write_row(k[0] as u8, x.values(), &mut row);
        for (j, v) in row.iter().enumerate() {
            rows[(i, j)] = *v;
        }
        successes.push(*s);
        trials.push(*t);
    }
    fit_binomial(&rows, &successes, &trials)
}
