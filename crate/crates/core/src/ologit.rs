//! Proportional-odds cumulative-logit regression.
//!
//! With J ordered categories and cutpoints `a_1 < ... < a_{J-1}`,
//!
//! ```text
//! P(Y <= j | x) = logistic(a_j - b'x)
//! ```
//!
//! so a positive coefficient shifts mass toward the higher categories. Cell
//! probabilities are successive differences of the cumulative ones, with the
//! last category taking the complement.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::dataset::{ColumnKind, DataTable, DatasetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OlogitError {
    #[error("cutpoints must be strictly increasing")]
    NonMonotoneCutpoints,
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("predictor '{0}' is constant")]
    ConstantPredictor(String),
    #[error("response takes a single category")]
    SingleCategory,
    #[error("column '{column}' row {row} is missing; design matrices must be complete")]
    MissingCell { column: String, row: usize },
    #[error("column '{0}' must be ordinal to serve as the response")]
    ResponseNotOrdinal(String),
    #[error("no design column named '{0}'")]
    UnknownColumn(String),
    #[error("quasi-separation: coefficient '{name}' drifted to {value}")]
    Separation { name: String, value: f64 },
    #[error("information matrix is singular at the optimum")]
    SingularHessian,
    #[error("fit did not converge; Wald statistics are unavailable")]
    NotConverged,
    #[error("intercept-only log-likelihood is zero; pseudo-R2 undefined")]
    DegenerateNullModel,
    #[error("fits were estimated on different data ({0} vs {1} rows)")]
    DifferentData(usize, usize),
    #[error("{0}")]
    Dataset(String),
}

impl From<DatasetError> for OlogitError {
    fn from(e: DatasetError) -> Self {
        OlogitError::Dataset(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, OlogitError>;

// bound on |beta| * sd(x): an odds ratio of e^25 per standard deviation
const SEPARATION_BOUND: f64 = 25.0;
const PROB_FLOOR: f64 = 1e-300;

/// Complete numeric design with an ordinal response coded `0..J`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    /// Response as an index into `categories`.
    pub y: Vec<usize>,
    /// Observed response levels in increasing order.
    pub categories: Vec<i64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, x: DMatrix<f64>, y: Vec<usize>, categories: Vec<i64>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(OlogitError::DimensionMismatch { expected: x.ncols(), got: names.len() });
        }
        if y.len() != x.nrows() {
            return Err(OlogitError::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        if categories.len() < 2 || y.iter().any(|&v| v >= categories.len()) {
            return Err(OlogitError::SingleCategory);
        }
        let mut seen = vec![false; categories.len()];
        y.iter().for_each(|&v| seen[v] = true);
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(OlogitError::SingleCategory);
        }
        for (j, name) in names.iter().enumerate() {
            let col = x.column(j);
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(OlogitError::MissingCell { column: name.clone(), row: row + 1 });
            }
            if col.iter().all(|&v| v == col[0]) {
                return Err(OlogitError::ConstantPredictor(name.clone()));
            }
        }
        Ok(Self { names, x, y, categories })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.names.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// Keeps the named design columns, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<DesignMatrix> {
        let idx = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| OlogitError::UnknownColumn(n.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let x = DMatrix::from_fn(self.x.nrows(), idx.len(), |i, j| self.x[(i, idx[j])]);
        Ok(DesignMatrix {
            names: names.iter().map(|s| s.to_string()).collect(),
            x,
            y: self.y.clone(),
            categories: self.categories.clone(),
        })
    }

    /// The same response with no predictors.
    pub fn intercept_only(&self) -> DesignMatrix {
        self.select(&[]).expect("empty selection")
    }
}

/// Design-column name for one non-baseline level of a nominal predictor.
pub fn indicator_name(column: &str, level: &str) -> String {
    format!("{column}[{level}]")
}

/// Builds the design from a complete table. Numeric and ordinal predictors
/// enter as their values; nominal predictors expand into one indicator per
/// non-baseline level, in level order.
pub fn encode_design(t: &DataTable, response: &str, predictors: &[&str]) -> Result<DesignMatrix> {
    let rc = t.column(response)?;
    let ColumnKind::Ordinal { levels } = rc.kind() else {
        return Err(OlogitError::ResponseNotOrdinal(response.to_string()));
    };
    let mut y_raw = Vec::with_capacity(t.n_rows());
    for row in 0..t.n_rows() {
        let v = rc.get(row).ok_or_else(|| OlogitError::MissingCell {
            column: response.to_string(),
            row: row + 1,
        })?;
        y_raw.push(v as i64);
    }
    let categories: Vec<i64> = levels.iter().copied().filter(|l| y_raw.contains(l)).collect();
    let y: Vec<usize> = y_raw
        .iter()
        .map(|v| categories.iter().position(|c| c == v).expect("observed level"))
        .collect();

    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for &p in predictors {
        let c = t.column(p)?;
        if let Some(row) = (0..t.n_rows()).find(|&r| c.is_missing(r)) {
            return Err(OlogitError::MissingCell { column: p.to_string(), row: row + 1 });
        }
        match c.kind() {
            ColumnKind::Numeric | ColumnKind::Ordinal { .. } => {
                names.push(p.to_string());
                cols.push(c.values().to_vec());
            }
            ColumnKind::Nominal { levels, .. } => {
                let base = c.kind().baseline_index().expect("validated nominal");
                for (li, label) in levels.iter().enumerate().filter(|(li, _)| *li != base) {
                    names.push(indicator_name(p, label));
                    cols.push(c.values().iter().map(|&v| f64::from(v as usize == li)).collect());
                }
            }
        }
    }
    let x = DMatrix::from_fn(t.n_rows(), cols.len(), |i, j| cols[j][i]);
    DesignMatrix::new(names, x, y, categories)
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn density(z: f64) -> f64 {
    logistic(z) * logistic(-z)
}

#[inline]
fn density_slope(z: f64) -> f64 {
    density(z) * (logistic(-z) - logistic(z))
}

/// P(lower < Z <= upper) for a standard logistic Z; `None` bounds are infinite.
fn interval_prob(upper: Option<f64>, lower: Option<f64>) -> f64 {
    match (upper, lower) {
        (Some(u), None) => logistic(u),
        (None, Some(l)) => logistic(-l),
        (Some(u), Some(l)) if l > 0.0 => logistic(-l) - logistic(-u),
        (Some(u), Some(l)) => logistic(u) - logistic(l),
        (None, None) => 1.0,
    }
}

fn check_cutpoints(alpha: &[f64]) -> Result<()> {
    if alpha.windows(2).any(|w| !(w[0] < w[1])) || alpha.iter().any(|a| !a.is_finite()) {
        Err(OlogitError::NonMonotoneCutpoints)
    } else {
        Ok(())
    }
}

fn check_dims(beta: &[f64], alpha: &[f64], d: &DesignMatrix) -> Result<()> {
    if beta.len() != d.n_predictors() {
        return Err(OlogitError::DimensionMismatch { expected: d.n_predictors(), got: beta.len() });
    }
    if alpha.len() + 1 != d.n_categories() {
        return Err(OlogitError::DimensionMismatch { expected: d.n_categories() - 1, got: alpha.len() });
    }
    check_cutpoints(alpha)
}

/// Negative log-likelihood.
pub fn negloglik(beta: &[f64], alpha: &[f64], d: &DesignMatrix) -> Result<f64> {
    check_dims(beta, alpha, d)?;
    let j_max = alpha.len();
    let mut total = 0.0;
    for i in 0..d.n_obs() {
        let eta: f64 = (0..beta.len()).map(|k| beta[k] * d.x[(i, k)]).sum();
        let c = d.y[i];
        let upper = (c < j_max).then(|| alpha[c] - eta);
        let lower = (c > 0).then(|| alpha[c - 1] - eta);
        total -= interval_prob(upper, lower).max(PROB_FLOOR).ln();
    }
    Ok(total)
}

/// Value, gradient and Hessian of the negative log-likelihood in the
/// natural `(beta, alpha)` coordinates.
pub struct Derivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub fn derivatives(beta: &[f64], alpha: &[f64], d: &DesignMatrix) -> Result<Derivatives> {
    check_dims(beta, alpha, d)?;
    let p = beta.len();
    let j_max = alpha.len();
    let k = p + j_max;
    let mut value = 0.0;
    let mut g = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    // gradient of u and l w.r.t. (beta, alpha): -x on beta, unit on one cutpoint
    let mut grad_u = DVector::zeros(k);
    let mut grad_l = DVector::zeros(k);
    for i in 0..d.n_obs() {
        let xi = d.x.row(i);
        let eta: f64 = (0..p).map(|c| beta[c] * xi[c]).sum();
        let c = d.y[i];
        let upper = (c < j_max).then(|| alpha[c] - eta);
        let lower = (c > 0).then(|| alpha[c - 1] - eta);
        let prob = interval_prob(upper, lower).max(PROB_FLOOR);
        value -= prob.ln();

        let (a, a1) = upper.map_or((0.0, 0.0), |u| (density(u), density_slope(u)));
        let (b, b1) = lower.map_or((0.0, 0.0), |l| (density(l), density_slope(l)));
        // second derivatives of log P w.r.t. (u, l)
        let huu = a1 / prob - a * a / (prob * prob);
        let hll = -b1 / prob - b * b / (prob * prob);
        let hul = a * b / (prob * prob);

        grad_u.fill(0.0);
        grad_l.fill(0.0);
        for c2 in 0..p {
            grad_u[c2] = -xi[c2];
            grad_l[c2] = -xi[c2];
        }
        if upper.is_some() {
            grad_u[p + c] = 1.0;
        }
        if lower.is_some() {
            grad_l[p + c - 1] = 1.0;
        }
        let du = a / prob;
        let dl = -b / prob;
        if upper.is_some() {
            g.axpy(-du, &grad_u, 1.0);
            h.ger(-huu, &grad_u, &grad_u, 1.0);
        }
        if lower.is_some() {
            g.axpy(-dl, &grad_l, 1.0);
            h.ger(-hll, &grad_l, &grad_l, 1.0);
        }
        if upper.is_some() && lower.is_some() {
            h.ger(-hul, &grad_u, &grad_l, 1.0);
            h.ger(-hul, &grad_l, &grad_u, 1.0);
        }
    }
    Ok(Derivatives { value, gradient: g, hessian: h })
}

/// Analytic gradient of [`negloglik`] in `(beta, alpha)` order.
pub fn negloglik_gradient(beta: &[f64], alpha: &[f64], d: &DesignMatrix) -> Result<Vec<f64>> {
    Ok(derivatives(beta, alpha, d)?.gradient.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Convergence threshold on the max-norm of the gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

/// One fitted proportional-odds model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalFit {
    pub predictors: Vec<String>,
    pub categories: Vec<i64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Inverse observed information, `(beta, alpha)` order, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_obs: usize,
}

impl OrdinalFit {
    /// Labels "1|2", "2|3", ... for the cutpoints.
    pub fn cutpoint_names(&self) -> Vec<String> {
        self.categories.windows(2).map(|w| format!("{}|{}", w[0], w[1])).collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.predictors.iter().cloned().chain(self.cutpoint_names()).collect()
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.alpha).copied().collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.covariance.len()).map(|i| self.covariance[i][i].max(0.0).sqrt()).collect()
    }
}

/// Maximum-likelihood fit by Newton iterations with step halving. The
/// negative log-likelihood is convex in (beta, alpha); steps that would
/// break the cutpoint ordering are halved away.
pub fn fit(d: &DesignMatrix, opts: &FitOptions) -> Result<OrdinalFit> {
    let p = d.n_predictors();
    let j = d.n_categories() - 1;

    // start: beta = 0, cutpoints at the empirical cumulative logits
    let mut counts = vec![0.0; d.n_categories()];
    d.y.iter().for_each(|&c| counts[c] += 1.0);
    let n = d.n_obs() as f64;
    let mut cum = 0.0;
    let mut theta = DVector::zeros(p + j);
    for (i, c) in counts.iter().take(j).enumerate() {
        cum += c;
        // unobserved interior categories would give equal cutpoints
        let q = (cum / n).clamp(0.5 / n, 1.0 - 0.5 / n);
        theta[p + i] = (q / (1.0 - q)).ln();
    }
    for i in 1..j {
        if theta[p + i] <= theta[p + i - 1] {
            theta[p + i] = theta[p + i - 1] + 1e-3;
        }
    }

    let split = |th: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
        (th.rows(0, p).iter().copied().collect(), th.rows(p, j).iter().copied().collect())
    };
    let objective = |th: &DVector<f64>| -> f64 {
        let (b, a) = split(th);
        negloglik(&b, &a, d).unwrap_or(f64::INFINITY)
    };

    let scale: Vec<f64> = (0..p)
        .map(|c| {
            let col = d.x.column(c);
            let mean = col.mean();
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();

    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let (beta, alpha) = split(&theta);
        let der = derivatives(&beta, &alpha, d)?;
        grad_norm = der.gradient.amax();
        if grad_norm < opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let step = newton_direction(&der.hessian, &der.gradient).ok_or(OlogitError::SingularHessian)?;
        let mut improved = false;
        // once the predicted decrease is below the rounding noise of the
        // objective, comparing objective values says nothing: take the full step
        if der.gradient.dot(&step) < 1e-10 * (1.0 + der.value.abs()) {
            let cand = &theta - &step;
            if objective(&cand).is_finite() {
                theta = cand;
                improved = true;
            }
        }
        let slack = 4.0 * f64::EPSILON * (1.0 + der.value.abs());
        let mut t = 1.0;
        for _ in 0..40 {
            if improved {
                break;
            }
            let cand = &theta - &step * t;
            if objective(&cand) <= der.value + slack {
                theta = cand;
                improved = true;
            }
            t *= 0.5;
        }
        if let Some((i, v)) = theta
            .rows(0, p)
            .iter()
            .enumerate()
            .find(|(i, v)| v.abs() * scale[*i] > SEPARATION_BOUND)
        {
            return Err(OlogitError::Separation { name: d.names[i].clone(), value: *v });
        }
        if !improved {
            break;
        }
    }

    let (beta, alpha) = split(&theta);
    let der = derivatives(&beta, &alpha, d)?;
    let cov = Cholesky::new(der.hessian.clone())
        .map(|c| c.inverse())
        .ok_or(OlogitError::SingularHessian)?;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(OrdinalFit {
        predictors: d.names.clone(),
        categories: d.categories.clone(),
        beta,
        alpha,
        covariance: (0..p + j).map(|r| cov.row(r).iter().copied().collect()).collect(),
        log_likelihood: -der.value,
        converged,
        iterations,
        gradient_norm: grad_norm,
        n_obs: d.n_obs(),
    })
}

/// Solves `H s = g`, damping the diagonal until `H` is positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Some(c.solve(g));
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut damping = 1e-8 * scale;
    for _ in 0..30 {
        let mut hd = h.clone();
        for i in 0..h.nrows() {
            hd[(i, i)] += damping;
        }
        if let Some(c) = Cholesky::new(hd) {
            return Some(c.solve(g));
        }
        damping *= 10.0;
    }
    None
}

/// Category probabilities for one predictor row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDistribution {
    pub probabilities: Vec<f64>,
}

impl PredictedDistribution {
    pub fn cumulative(&self) -> Vec<f64> {
        self.probabilities
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }
}

/// Category probabilities from cutpoints and coefficients.
pub fn predict_from(beta: &[f64], alpha: &[f64], x: &[f64]) -> Result<PredictedDistribution> {
    if x.len() != beta.len() {
        return Err(OlogitError::DimensionMismatch { expected: beta.len(), got: x.len() });
    }
    check_cutpoints(alpha)?;
    let eta: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
    let mut probabilities = Vec::with_capacity(alpha.len() + 1);
    let mut prev = 0.0;
    for a in alpha {
        let cum = logistic(a - eta);
        probabilities.push(cum - prev);
        prev = cum;
    }
    probabilities.push(1.0 - prev);
    Ok(PredictedDistribution { probabilities })
}

pub fn predict_probs(f: &OrdinalFit, x: &[f64]) -> Result<PredictedDistribution> {
    predict_from(&f.beta, &f.alpha, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

impl WaldRow {
    /// Wald row with a two-sided standard-normal p-value.
    pub fn new(name: &str, value: f64, std_error: f64) -> Self {
        let t_value = if value == 0.0 { 0.0 } else { value / std_error };
        Self {
            name: name.to_string(),
            value,
            std_error,
            t_value,
            p_value: normal_two_sided(t_value),
        }
    }
}

pub(crate) fn normal_two_sided(t: f64) -> f64 {
    erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Coefficient rows followed by cutpoint rows.
pub fn wald_table(f: &OrdinalFit) -> Result<Vec<WaldRow>> {
    if !f.converged {
        return Err(OlogitError::NotConverged);
    }
    Ok(f.parameter_names()
        .iter()
        .zip(f.estimates())
        .zip(f.std_errors())
        .map(|((n, v), se)| WaldRow::new(n, v, se))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub mcfadden_r2: f64,
    pub loglik_full: f64,
    pub loglik_intercept: f64,
}

/// McFadden's pseudo-R2 from log-likelihoods.
pub fn mcfadden_from_loglik(loglik_full: f64, loglik_intercept: f64) -> Result<FitQuality> {
    if loglik_intercept == 0.0 {
        return Err(OlogitError::DegenerateNullModel);
    }
    Ok(FitQuality {
        mcfadden_r2: 1.0 - loglik_full / loglik_intercept,
        loglik_full,
        loglik_intercept,
    })
}

pub fn mcfadden_r2(full: &OrdinalFit, intercept_only: &OrdinalFit) -> Result<FitQuality> {
    if full.n_obs != intercept_only.n_obs {
        return Err(OlogitError::DifferentData(full.n_obs, intercept_only.n_obs));
    }
    mcfadden_from_loglik(full.log_likelihood, intercept_only.log_likelihood)
}
