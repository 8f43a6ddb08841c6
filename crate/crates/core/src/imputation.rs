//! Multiple imputation under a multivariate normal model.
//!
//! Each replicate draws a bootstrap resample of the rows, estimates the
//! mean and covariance on it by EM, and then fills every missing cell of the
//! original table with a draw from the conditional normal of the missing
//! coordinates given the observed ones. Nominal columns enter the model as
//! indicator blocks (baseline omitted); ordinal and nominal draws are coerced
//! back onto their declared levels.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::dataset::{ColumnKind, DataTable, DatasetError};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputationError {
    #[error("model column '{0}' has no observed values")]
    ColumnAllMissing(String),
    #[error("covariance block is not positive definite ({0}); increase the ridge")]
    SingularCovariance(String),
    #[error("EM did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("the table has a single missingness pattern; the MCAR test is undefined")]
    SinglePattern,
    #[error("MCAR test has no degrees of freedom")]
    NoDegreesOfFreedom,
    #[error("replicate {replicate} failed after {attempts} bootstrap attempts: {last}")]
    ReplicateFailed {
        replicate: usize,
        attempts: usize,
        last: String,
    },
    #[error("row has {got} entries, model has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("{0}")]
    Dataset(String),
}

impl From<DatasetError> for ImputationError {
    fn from(e: DatasetError) -> Self {
        ImputationError::Dataset(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ImputationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    /// Prior weight as a fraction of the row count. The M-step returns
    /// `(n S + r n D) / (n + r n)` where `D` holds the observed column variances.
    pub ridge: f64,
    /// Stop when the relative increase of the objective falls to this value.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            ridge: 0.005,
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

/// Mean and covariance estimated by EM.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Observed-data log-likelihood at the returned parameters.
    pub log_likelihood: f64,
    /// Objective (log-likelihood plus ridge prior) before the first update
    /// and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl MvnParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Rows grouped by identical missingness, in lexicographic mask order.
struct Patterns {
    groups: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>, // (observed, missing, rows)
}

impl Patterns {
    fn of(x: &DMatrix<f64>) -> Self {
        let mut map: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
        for i in 0..x.nrows() {
            let mask: Vec<bool> = (0..x.ncols()).map(|j| x[(i, j)].is_nan()).collect();
            map.entry(mask).or_default().push(i);
        }
        let groups = map
            .into_iter()
            .map(|(mask, rows)| {
                let obs = (0..mask.len()).filter(|&j| !mask[j]).collect();
                let mis = (0..mask.len()).filter(|&j| mask[j]).collect();
                (obs, mis, rows)
            })
            .collect();
        Self { groups }
    }

    fn has_missing(&self) -> bool {
        self.groups.iter().any(|(_, mis, _)| !mis.is_empty())
    }
}

fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| ImputationError::SingularCovariance(what.to_string()))
}

/// Observed-data log-likelihood of an incomplete matrix under N(mean, cov).
pub fn observed_loglik(x: &DMatrix<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    loglik_by_pattern(x, &Patterns::of(x), mean, cov)
}

fn loglik_by_pattern(
    x: &DMatrix<f64>,
    patterns: &Patterns,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (obs, _, rows) in &patterns.groups {
        if obs.is_empty() {
            continue;
        }
        let chol = cholesky(sub_matrix(cov, obs, obs), "observed block")?;
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mu = sub_vector(mean, obs);
        for &r in rows {
            let d = DVector::from_fn(obs.len(), |i, _| x[(r, obs[i])] - mu[i]);
            let quad = d.dot(&chol.solve(&d));
            total -= 0.5 * (obs.len() as f64 * LN_2PI + logdet + quad);
        }
    }
    Ok(total)
}

/// Log of the ridge prior, up to a constant: `-(lambda/2)(log|S| + tr(D S^-1))`.
fn log_prior(cov: &DMatrix<f64>, prior_diag: &DVector<f64>, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let chol = cholesky(cov.clone(), "full covariance")?;
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = chol.inverse();
    let trace: f64 = (0..cov.nrows()).map(|j| prior_diag[j] * inv[(j, j)]).sum();
    Ok(-0.5 * lambda * (logdet + trace))
}

/// EM estimate of the mean and covariance of an incomplete matrix (`NaN` = missing).
pub fn em_fit(x: &DMatrix<f64>, opts: &EmOptions) -> Result<MvnParams> {
    em_fit_named(x, opts, None)
}

fn em_fit_named(x: &DMatrix<f64>, opts: &EmOptions, names: Option<&[String]>) -> Result<MvnParams> {
    if opts.ridge < 0.0 || opts.tol < 0.0 || opts.max_iter == 0 {
        return Err(ImputationError::InvalidOption(format!("{opts:?}")));
    }
    let (n, p) = x.shape();
    let col_name = |j: usize| names.map_or_else(|| format!("#{j}"), |ns| ns[j].clone());

    let mut mean = DVector::zeros(p);
    let mut prior_diag = DVector::zeros(p);
    for j in 0..p {
        let obs: Vec<f64> = x.column(j).iter().copied().filter(|v| !v.is_nan()).collect();
        if obs.is_empty() {
            return Err(ImputationError::ColumnAllMissing(col_name(j)));
        }
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        let v = obs.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / obs.len() as f64;
        mean[j] = m;
        // constant columns get unit prior scale so the ridge can still regularise them
        prior_diag[j] = if v > 0.0 { v } else { 1.0 };
    }
    let lambda = opts.ridge * n as f64;
    let patterns = Patterns::of(x);

    let m_step = |t1: &DVector<f64>, t2: &DMatrix<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mu = t1 / n as f64;
        let mut s = t2 / n as f64 - &mu * mu.transpose();
        if lambda > 0.0 {
            s = (s * n as f64 + DMatrix::from_diagonal(&(&prior_diag * lambda))) / (n as f64 + lambda);
        }
        let s = (&s + s.transpose()) * 0.5;
        (mu, s)
    };

    if !patterns.has_missing() {
        let mut t1 = DVector::zeros(p);
        let mut t2 = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = x.row(i).transpose();
            t1 += &row;
            t2 += &row * row.transpose();
        }
        let (mu, cov) = m_step(&t1, &t2);
        let ll = loglik_by_pattern(x, &patterns, &mu, &cov)?;
        let obj = ll + log_prior(&cov, &prior_diag, lambda)?;
        return Ok(MvnParams {
            mean: mu,
            covariance: cov,
            log_likelihood: ll,
            objective_trace: vec![obj],
            iterations: 1,
            converged: true,
        });
    }

    let mut cov = DMatrix::from_diagonal(&prior_diag);
    let mut objective = loglik_by_pattern(x, &patterns, &mean, &cov)? + log_prior(&cov, &prior_diag, lambda)?;
    let mut trace = vec![objective];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut t1 = DVector::zeros(p);
        let mut t2 = DMatrix::zeros(p, p);
        for (obs, mis, rows) in &patterns.groups {
            if mis.is_empty() {
                for &r in rows {
                    let row = x.row(r).transpose();
                    t1 += &row;
                    t2 += &row * row.transpose();
                }
                continue;
            }
            let cond = Conditional::new(&mean, &cov, obs, mis)?;
            for &r in rows {
                let mut xhat = DVector::zeros(p);
                for &j in obs {
                    xhat[j] = x[(r, j)];
                }
                let m = cond.mean(x, r);
                for (k, &j) in mis.iter().enumerate() {
                    xhat[j] = m[k];
                }
                t1 += &xhat;
                t2 += &xhat * xhat.transpose();
                for (a, &ja) in mis.iter().enumerate() {
                    for (b, &jb) in mis.iter().enumerate() {
                        t2[(ja, jb)] += cond.cov[(a, b)];
                    }
                }
            }
        }
        let (mu, s) = m_step(&t1, &t2);
        let new_obj = loglik_by_pattern(x, &patterns, &mu, &s)? + log_prior(&s, &prior_diag, lambda)?;
        mean = mu;
        cov = s;
        trace.push(new_obj);
        let gain = new_obj - objective;
        objective = new_obj;
        if gain <= opts.tol * objective.abs() {
            converged = true;
            break;
        }
    }

    let log_likelihood = loglik_by_pattern(x, &patterns, &mean, &cov)?;
    Ok(MvnParams {
        mean,
        covariance: cov,
        log_likelihood,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Conditional normal of the missing coordinates given the observed ones.
struct Conditional {
    obs: Vec<usize>,
    mu_obs: DVector<f64>,
    mu_mis: DVector<f64>,
    /// Regression coefficients `S_mo S_oo^-1`.
    coef: DMatrix<f64>,
    cov: DMatrix<f64>,
}

impl Conditional {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, obs: &[usize], mis: &[usize]) -> Result<Self> {
        let s_mm = sub_matrix(cov, mis, mis);
        let mu_mis = sub_vector(mean, mis);
        if obs.is_empty() {
            return Ok(Self {
                obs: vec![],
                mu_obs: DVector::zeros(0),
                mu_mis,
                coef: DMatrix::zeros(mis.len(), 0),
                cov: s_mm,
            });
        }
        let s_om = sub_matrix(cov, obs, mis);
        let chol = cholesky(sub_matrix(cov, obs, obs), "observed block")?;
        let coef = chol.solve(&s_om).transpose();
        let c = &s_mm - &coef * &s_om;
        Ok(Self {
            obs: obs.to_vec(),
            mu_obs: sub_vector(mean, obs),
            mu_mis,
            coef,
            cov: (&c + c.transpose()) * 0.5,
        })
    }

    fn mean(&self, x: &DMatrix<f64>, r: usize) -> DVector<f64> {
        if self.obs.is_empty() {
            return self.mu_mis.clone();
        }
        let d = DVector::from_fn(self.obs.len(), |i, _| x[(r, self.obs[i])] - self.mu_obs[i]);
        &self.mu_mis + &self.coef * d
    }
}

/// Conditional draw of the missing entries (`NaN`) of `row`; observed entries
/// are returned unchanged.
pub fn conditional_draw<R: Rng + ?Sized>(params: &MvnParams, row: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let x = DMatrix::from_row_slice(1, row.len(), row);
    let mut sampler = Sampler::new(params);
    sampler.draw(&x, 0, rng)
}

struct Sampler<'a> {
    params: &'a MvnParams,
    cache: BTreeMap<Vec<usize>, (Conditional, DMatrix<f64>)>,
}

impl<'a> Sampler<'a> {
    fn new(params: &'a MvnParams) -> Self {
        Self {
            params,
            cache: BTreeMap::new(),
        }
    }

    fn draw<R: Rng + ?Sized>(&mut self, x: &DMatrix<f64>, r: usize, rng: &mut R) -> Result<Vec<f64>> {
        let p = self.params.dim();
        if x.ncols() != p {
            return Err(ImputationError::DimensionMismatch {
                got: x.ncols(),
                expected: p,
            });
        }
        let mut out: Vec<f64> = x.row(r).iter().copied().collect();
        let mis: Vec<usize> = (0..p).filter(|&j| out[j].is_nan()).collect();
        if mis.is_empty() {
            return Ok(out);
        }
        if !self.cache.contains_key(&mis) {
            let obs: Vec<usize> = (0..p).filter(|&j| !out[j].is_nan()).collect();
            let cond = Conditional::new(&self.params.mean, &self.params.covariance, &obs, &mis)?;
            let l = cholesky(cond.cov.clone(), "conditional covariance")?.unpack();
            self.cache.insert(mis.clone(), (cond, l));
        }
        let (cond, l) = &self.cache[&mis];
        let z = DVector::from_fn(mis.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = cond.mean(x, r) + l * z;
        for (k, &j) in mis.iter().enumerate() {
            out[j] = draw[k];
        }
        Ok(out)
    }
}

/// How draws for ordinal columns are written back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoercionMode {
    /// Round to the nearest declared level.
    #[default]
    Round,
    /// Keep the continuous draw; the column becomes numeric in the output.
    Continuous,
}

/// Maps a raw draw back onto a valid cell. For nominal columns `raw` is the
/// full indicator vector over the levels (baseline included) and the result
/// is the index of the largest indicator; otherwise `raw` has one element.
pub fn coerce_imputed(raw: &[f64], kind: &ColumnKind, mode: CoercionMode) -> f64 {
    match kind {
        ColumnKind::Numeric => raw[0],
        ColumnKind::Ordinal { levels } => match mode {
            CoercionMode::Continuous => raw[0],
            CoercionMode::Round => {
                let v = raw[0];
                let mut best = levels[0];
                for &l in levels {
                    // ties resolve upward, like rounding half away from the lower level
                    if (l as f64 - v).abs() <= (best as f64 - v).abs() {
                        best = l;
                    }
                }
                best as f64
            }
        },
        ColumnKind::Nominal { .. } => {
            let mut best = 0;
            for (i, &v) in raw.iter().enumerate() {
                if v > raw[best] {
                    best = i;
                }
            }
            best as f64
        }
    }
}

/// How one table column maps onto model columns.
#[derive(Debug, Clone)]
enum Block {
    Scalar { column: usize, model: usize },
    Indicators { column: usize, baseline: usize, model: Vec<(usize, usize)> }, // (level, model col)
}

/// Numeric encoding of the model columns of a table.
pub struct ModelMatrix {
    pub data: DMatrix<f64>,
    pub names: Vec<String>,
    blocks: Vec<Block>,
}

/// Encodes every column not listed in `exclude`: numeric and ordinal columns
/// as their values, nominal columns as indicators for each non-baseline level.
pub fn encode_model(t: &DataTable, exclude: &[String]) -> ModelMatrix {
    let mut names = Vec::new();
    let mut blocks = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (ci, c) in t.columns().iter().enumerate() {
        if exclude.iter().any(|e| e == c.name()) {
            continue;
        }
        match c.kind() {
            ColumnKind::Numeric | ColumnKind::Ordinal { .. } => {
                blocks.push(Block::Scalar {
                    column: ci,
                    model: cols.len(),
                });
                names.push(c.name().to_string());
                cols.push(c.values().to_vec());
            }
            ColumnKind::Nominal { levels, .. } => {
                let baseline = c.kind().baseline_index().expect("validated nominal");
                let mut model = Vec::new();
                for (li, label) in levels.iter().enumerate() {
                    if li == baseline {
                        continue;
                    }
                    model.push((li, cols.len()));
                    names.push(format!("{}[{}]", c.name(), label));
                    cols.push(
                        c.values()
                            .iter()
                            .map(|&v| if v.is_nan() { f64::NAN } else if v as usize == li { 1.0 } else { 0.0 })
                            .collect(),
                    );
                }
                blocks.push(Block::Indicators {
                    column: ci,
                    baseline,
                    model,
                });
            }
        }
    }
    let n = t.n_rows();
    let data = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    ModelMatrix { data, names, blocks }
}

/// [`em_fit`] on the model encoding of a table.
pub fn em_fit_table(t: &DataTable, exclude: &[String], opts: &EmOptions) -> Result<MvnParams> {
    let mm = encode_model(t, exclude);
    em_fit_named(&mm.data, opts, Some(&mm.names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McarTestResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub patterns: usize,
}

/// Little's chi-square test of missing completely at random.
pub fn mcar_test(t: &DataTable, exclude: &[String]) -> Result<McarTestResult> {
    let mm = encode_model(t, exclude);
    let patterns = Patterns::of(&mm.data);
    if patterns.groups.len() < 2 {
        return Err(ImputationError::SinglePattern);
    }
    let opts = EmOptions {
        ridge: 0.0,
        tol: 1e-10,
        max_iter: 10_000,
    };
    let params = em_fit_named(&mm.data, &opts, Some(&mm.names))?;
    if !params.converged {
        return Err(ImputationError::NotConverged {
            iterations: params.iterations,
        });
    }
    let p = mm.data.ncols();
    let mut statistic = 0.0;
    let mut observed_total = 0usize;
    for (obs, _, rows) in &patterns.groups {
        if obs.is_empty() {
            continue;
        }
        observed_total += obs.len();
        let chol = cholesky(sub_matrix(&params.covariance, obs, obs), "observed block")?;
        let mut diff = DVector::zeros(obs.len());
        for &r in rows {
            for (k, &j) in obs.iter().enumerate() {
                diff[k] += mm.data[(r, j)];
            }
        }
        let nj = rows.len() as f64;
        for (k, &j) in obs.iter().enumerate() {
            diff[k] = diff[k] / nj - params.mean[j];
        }
        statistic += nj * diff.dot(&chol.solve(&diff));
    }
    if observed_total <= p {
        return Err(ImputationError::NoDegreesOfFreedom);
    }
    let df = observed_total - p;
    let p_value = ChiSquared::new(df as f64)
        .expect("positive df")
        .sf(statistic)
        .clamp(0.0, 1.0);
    Ok(McarTestResult {
        statistic,
        degrees_of_freedom: df,
        p_value,
        patterns: patterns.groups.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbOptions {
    pub m: usize,
    pub master_seed: u64,
    pub em: EmOptions,
    pub coercion: CoercionMode,
    /// Columns left out of the model and copied through unchanged.
    pub exclude: Vec<String>,
    /// Run replicates on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl Default for EmbOptions {
    fn default() -> Self {
        Self {
            m: 5,
            master_seed: 1,
            em: EmOptions::default(),
            coercion: CoercionMode::Round,
            exclude: Vec::new(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateDiagnostics {
    pub replicate: usize,
    pub seed: u64,
    /// Bootstrap resamples drawn before EM succeeded; 0 when nothing was missing.
    pub attempts: usize,
    pub em_iterations: usize,
    pub converged: bool,
    pub log_likelihood: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ImputedSet {
    pub datasets: Vec<DataTable>,
    pub m: usize,
    pub master_seed: u64,
    pub diagnostics: Vec<ReplicateDiagnostics>,
}

const MAX_ATTEMPTS: usize = 4;

/// Runs `m` EM-bootstrap replicates and returns the completed tables.
/// Replicate `k` (0-based) draws from its own stream seeded `master_seed + k`.
pub fn emb_impute(t: &DataTable, opts: &EmbOptions) -> Result<ImputedSet> {
    if opts.m < 2 {
        return Err(ImputationError::InvalidOption("m must be at least 2".into()));
    }
    let mm = encode_model(t, &opts.exclude);
    let run = |k: usize| replicate(t, &mm, opts, k);
    let results: Vec<Result<(DataTable, ReplicateDiagnostics)>> = if opts.parallel {
        (0..opts.m).into_par_iter().map(run).collect()
    } else {
        (0..opts.m).map(run).collect()
    };
    let mut datasets = Vec::with_capacity(opts.m);
    let mut diagnostics = Vec::with_capacity(opts.m);
    for r in results {
        let (d, diag) = r?;
        datasets.push(d);
        diagnostics.push(diag);
    }
    Ok(ImputedSet {
        datasets,
        m: opts.m,
        master_seed: opts.master_seed,
        diagnostics,
    })
}

fn replicate(
    t: &DataTable,
    mm: &ModelMatrix,
    opts: &EmbOptions,
    k: usize,
) -> Result<(DataTable, ReplicateDiagnostics)> {
    let seed = opts.master_seed.wrapping_add(k as u64);
    let n = mm.data.nrows();
    let has_missing = mm.data.iter().any(|v| v.is_nan());
    if !has_missing {
        return Ok((
            t.clone(),
            ReplicateDiagnostics {
                replicate: k,
                seed,
                attempts: 0,
                em_iterations: 0,
                converged: true,
                log_likelihood: None,
            },
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let boot = DMatrix::from_fn(n, mm.data.ncols(), |i, j| mm.data[(rows[i], j)]);
        let params = match em_fit_named(&boot, &opts.em, Some(&mm.names)) {
            Ok(p) if p.converged => p,
            Ok(p) => {
                last = ImputationError::NotConverged { iterations: p.iterations }.to_string();
                continue;
            }
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        match fill(t, mm, &params, opts.coercion, &mut rng) {
            Ok(table) => {
                return Ok((
                    table,
                    ReplicateDiagnostics {
                        replicate: k,
                        seed,
                        attempts: attempt,
                        em_iterations: params.iterations,
                        converged: params.converged,
                        log_likelihood: Some(params.log_likelihood),
                    },
                ))
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(ImputationError::ReplicateFailed {
        replicate: k,
        attempts: MAX_ATTEMPTS,
        last,
    })
}

fn fill<R: Rng>(
    t: &DataTable,
    mm: &ModelMatrix,
    params: &MvnParams,
    mode: CoercionMode,
    rng: &mut R,
) -> Result<DataTable> {
    let mut sampler = Sampler::new(params);
    let mut fills: Vec<Vec<(usize, f64)>> = vec![Vec::new(); t.n_cols()];
    for r in 0..mm.data.nrows() {
        if !mm.data.row(r).iter().any(|v| v.is_nan()) {
            continue;
        }
        let draw = sampler.draw(&mm.data, r, rng)?;
        for block in &mm.blocks {
            match block {
                Block::Scalar { column, model } => {
                    if t.columns()[*column].is_missing(r) {
                        let kind = t.columns()[*column].kind();
                        fills[*column].push((r, coerce_imputed(&[draw[*model]], kind, mode)));
                    }
                }
                Block::Indicators { column, baseline, model } => {
                    let c = &t.columns()[*column];
                    if c.is_missing(r) {
                        let ColumnKind::Nominal { levels, .. } = c.kind() else { unreachable!() };
                        let mut raw = vec![0.0; levels.len()];
                        let mut rest = 1.0;
                        for &(li, mc) in model {
                            raw[li] = draw[mc];
                            rest -= draw[mc];
                        }
                        raw[*baseline] = rest;
                        fills[*column].push((r, coerce_imputed(&raw, c.kind(), mode)));
                    }
                }
            }
        }
    }
    let columns = t
        .columns()
        .iter()
        .zip(&fills)
        .map(|(c, f)| {
            let kind = match (c.kind(), mode) {
                (ColumnKind::Ordinal { .. }, CoercionMode::Continuous) if c.missing_count() > 0 => {
                    ColumnKind::Numeric
                }
                (k, _) => k.clone(),
            };
            c.with_fills(kind, f)
        })
        .collect();
    Ok(DataTable::new(columns)?)
}
