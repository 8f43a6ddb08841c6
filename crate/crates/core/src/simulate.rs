//! Monte-Carlo recovery study: simulate from a known ordered-logit model,
//! punch MCAR holes in the covariates, multiply impute, pool and compare the
//! intervals with the truth. A listwise-deletion fit runs alongside.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::dataset::{Column, DataTable};
use crate::imputation::{emb_impute, CoercionMode, EmOptions, EmbOptions};
use crate::ologit::{encode_design, fit, DesignMatrix, FitOptions, OrdinalFit};
use crate::pipeline::{guarded, PipelineError, Stage};
use crate::pooling::{pool, PooledFit};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    Invalid(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("every replication failed; first error: {0}")]
    AllFailed(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// How covariates are derived from the latent normal draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariates {
    /// The normal draws themselves.
    #[default]
    Continuous,
    /// round(3 + z) clamped to 1..=5, stored as ordinal columns.
    Likert,
}

fn default_m() -> usize {
    5
}
fn default_correlation() -> f64 {
    0.3
}
fn default_level() -> f64 {
    0.95
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub beta: Vec<f64>,
    pub cutpoints: Vec<f64>,
    pub n: usize,
    /// Probability that each covariate cell is deleted.
    pub missing_rate: f64,
    pub replications: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    /// Common correlation between the latent covariates.
    #[serde(default = "default_correlation")]
    pub covariate_correlation: f64,
    #[serde(default)]
    pub covariates: Covariates,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default)]
    pub fit: FitOptions,
    /// Use the observed response as an auxiliary variable when imputing.
    #[serde(default = "default_true")]
    pub response_in_imputation_model: bool,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl SimConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: SimConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        let p = self.beta.len();
        if p == 0 {
            return bad("beta needs at least one coefficient");
        }
        if self.cutpoints.is_empty() {
            return bad("at least one cutpoint is required");
        }
        if self.beta.iter().chain(&self.cutpoints).any(|v| !v.is_finite()) {
            return bad("beta and cutpoints must be finite");
        }
        if self.cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("cutpoints must be strictly increasing");
        }
        if self.n < 10 {
            return bad("n must be at least 10");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.replications == 0 {
            return bad("replications must be positive");
        }
        if self.m < 2 {
            return bad("m must be at least 2");
        }
        let rho = self.covariate_correlation;
        let lower = if p > 1 { -1.0 / (p as f64 - 1.0) } else { -1.0 };
        if !(rho > lower && rho < 1.0) {
            return bad("covariate_correlation does not give a positive-definite covariance");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.cutpoints.len() + 1
    }

    fn covariate_names(&self) -> Vec<String> {
        (1..=self.beta.len()).map(|k| format!("x{k}")).collect()
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draws a complete table: response `y` with levels `1..=J`, covariates `x1..xp`.
pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> DataTable {
    let p = cfg.beta.len();
    let rho = cfg.covariate_correlation;
    let sigma = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho });
    let l = Cholesky::new(sigma).expect("validated correlation").l();
    let mut xs = vec![Vec::with_capacity(cfg.n); p];
    let mut ys = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let latent = &l * z;
        let x: Vec<f64> = latent
            .iter()
            .map(|&v| match cfg.covariates {
                Covariates::Continuous => v,
                Covariates::Likert => (3.0 + v).round().clamp(1.0, 5.0),
            })
            .collect();
        let eta: f64 = x.iter().zip(&cfg.beta).map(|(a, b)| a * b).sum();
        let u: f64 = rng.random();
        let cat = cfg.cutpoints.iter().take_while(|&&a| u > logistic(a - eta)).count();
        ys.push(Some(cat as i64 + 1));
        for (col, v) in xs.iter_mut().zip(x) {
            col.push(Some(v));
        }
    }
    let levels: Vec<i64> = (1..=cfg.n_categories() as i64).collect();
    let mut cols = vec![Column::ordinal("y", levels, ys).expect("levels in range")];
    for (name, cells) in cfg.covariate_names().iter().zip(xs) {
        cols.push(match cfg.covariates {
            Covariates::Continuous => Column::numeric(name, cells).expect("finite"),
            Covariates::Likert => Column::ordinal(
                name,
                vec![1, 2, 3, 4, 5],
                cells.into_iter().map(|c| c.map(|v| v as i64)).collect(),
            )
            .expect("levels in range"),
        });
    }
    DataTable::new(cols).expect("equal lengths")
}

/// Deletes each covariate cell independently with probability `rate`.
pub fn mcar_mask<R: Rng + ?Sized>(t: &DataTable, response: &str, rate: f64, rng: &mut R) -> DataTable {
    let mut cols = Vec::with_capacity(t.n_cols());
    for c in t.columns() {
        if c.name() == response || rate == 0.0 {
            cols.push(c.clone());
            continue;
        }
        let cells: Vec<Option<f64>> = (0..c.len())
            .map(|r| if rng.random::<f64>() < rate { None } else { c.get(r) })
            .collect();
        cols.push(Column::new(c.name(), c.kind().clone(), cells).expect("same kind"));
    }
    DataTable::new(cols).expect("equal lengths")
}

/// Estimates and interval for one parameter in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    pub rows_listwise: usize,
    /// Pooled multiple-imputation intervals, β then cutpoints.
    pub imputed: Vec<Interval>,
    pub complete: Vec<Interval>,
    pub listwise: Option<Vec<Interval>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_std_error: f64,
    /// Mean reported SE over the empirical SD of the estimates.
    pub se_ratio: f64,
    pub coverage: f64,
    pub mean_half_width: f64,
    /// Set when the average interval is wider than the distance from the truth to zero.
    pub wide_interval: bool,
    pub complete_mean_std_error: f64,
    pub complete_coverage: f64,
    pub listwise_mean_std_error: Option<f64>,
    pub listwise_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub completed: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub parameters: Vec<ParameterRecovery>,
    pub replications: Vec<ReplicationRecord>,
}

impl SimReport {
    pub fn get(&self, name: &str) -> Option<&ParameterRecovery> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn any_wide_interval(&self) -> bool {
        self.parameters.iter().any(|p| p.wide_interval)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "name",
            "truth",
            "mean_estimate",
            "bias",
            "empirical_sd",
            "mean_std_error",
            "se_ratio",
            "coverage",
            "mean_half_width",
            "wide_interval",
            "complete_mean_std_error",
            "complete_coverage",
            "listwise_mean_std_error",
            "listwise_coverage",
        ])
        .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.parameters {
            w.write_record([
                p.name.clone(),
                p.truth.to_string(),
                p.mean_estimate.to_string(),
                p.bias.to_string(),
                p.empirical_sd.to_string(),
                p.mean_std_error.to_string(),
                p.se_ratio.to_string(),
                p.coverage.to_string(),
                p.mean_half_width.to_string(),
                p.wide_interval.to_string(),
                p.complete_mean_std_error.to_string(),
                p.complete_coverage.to_string(),
                opt(p.listwise_mean_std_error),
                opt(p.listwise_coverage),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn quantile(level: f64, df: Option<f64>) -> f64 {
    let q = 0.5 + level / 2.0;
    match df {
        Some(d) if d.is_finite() => StudentsT::new(0.0, 1.0, d).expect("positive df").inverse_cdf(q),
        _ => Normal::standard().inverse_cdf(q),
    }
}

fn pooled_intervals(p: &PooledFit, level: f64) -> Vec<Interval> {
    let coefs = p.coefficients().chain(p.cutpoints());
    coefs
        .map(|r| {
            let q = quantile(level, r.df);
            Interval {
                estimate: r.mean,
                std_error: r.pooled_se,
                lower: r.mean - q * r.pooled_se,
                upper: r.mean + q * r.pooled_se,
            }
        })
        .collect()
}

fn single_intervals(f: &OrdinalFit, level: f64) -> Vec<Interval> {
    let q = quantile(level, None);
    f.estimates()
        .into_iter()
        .zip(f.std_errors())
        .map(|(e, s)| Interval {
            estimate: e,
            std_error: s,
            lower: e - q * s,
            upper: e + q * s,
        })
        .collect()
}

fn design(cfg: &SimConfig, t: &DataTable) -> std::result::Result<DesignMatrix, String> {
    let names = cfg.covariate_names();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let d = encode_design(t, "y", &refs).map_err(|e| e.to_string())?;
    if d.n_categories() != cfg.n_categories() {
        return Err(format!(
            "only {} of {} response categories occurred",
            d.n_categories(),
            cfg.n_categories()
        ));
    }
    Ok(d)
}

fn fit_table(cfg: &SimConfig, t: &DataTable) -> std::result::Result<OrdinalFit, String> {
    fit(&design(cfg, t)?, &cfg.fit).map_err(|e| e.to_string())
}

/// Seed of replication `r`; replication streams are 2^20 apart so the
/// imputation seeds `seed + 1 ..= seed + m` never collide.
pub fn replication_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add((r as u64) << 20)
}

pub fn run_replication(cfg: &SimConfig, r: usize) -> std::result::Result<ReplicationRecord, String> {
    let seed = replication_seed(cfg.seed, r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let complete = generate(cfg, &mut rng);
    let masked = mcar_mask(&complete, "y", cfg.missing_rate, &mut rng);

    let complete_fit = fit_table(cfg, &complete)?;
    let opts = EmbOptions {
        m: cfg.m,
        master_seed: seed.wrapping_add(1),
        em: cfg.em.clone(),
        coercion: CoercionMode::Round,
        exclude: if cfg.response_in_imputation_model {
            Vec::new()
        } else {
            vec!["y".to_string()]
        },
        parallel: false,
    };
    let set = emb_impute(&masked, &opts).map_err(|e| e.to_string())?;
    let fits = set
        .datasets
        .iter()
        .map(|d| fit_table(cfg, d))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pooled = pool(&fits).map_err(|e| e.to_string())?;

    let keep: Vec<bool> = (0..masked.n_rows())
        .map(|row| masked.columns().iter().all(|c| !c.is_missing(row)))
        .collect();
    let listwise_table = masked.filter_rows(&keep);
    let listwise = fit_table(cfg, &listwise_table).ok().map(|f| single_intervals(&f, cfg.level));

    Ok(ReplicationRecord {
        index: r,
        seed,
        rows_listwise: listwise_table.n_rows(),
        imputed: pooled_intervals(&pooled, cfg.level),
        complete: single_intervals(&complete_fit, cfg.level),
        listwise,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let one = |r: usize| run_replication(cfg, r);
    let results: Vec<std::result::Result<ReplicationRecord, String>> = if cfg.parallel {
        (0..cfg.replications).into_par_iter().map(one).collect()
    } else {
        (0..cfg.replications).map(one).collect()
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(format!("replication {r}: {e}")),
        }
    }
    if records.is_empty() {
        return Err(SimError::AllFailed(failures.first().cloned().unwrap_or_default()));
    }

    let names: Vec<String> = cfg
        .covariate_names()
        .into_iter()
        .chain((1..=cfg.cutpoints.len()).map(|j| format!("{}|{}", j, j + 1)))
        .collect();
    let truths: Vec<f64> = cfg.beta.iter().chain(&cfg.cutpoints).copied().collect();
    let parameters = names
        .iter()
        .zip(&truths)
        .enumerate()
        .map(|(k, (name, &truth))| {
            let mi: Vec<Interval> = records.iter().map(|r| r.imputed[k]).collect();
            let cc: Vec<Interval> = records.iter().map(|r| r.complete[k]).collect();
            let lw: Vec<Interval> = records.iter().filter_map(|r| r.listwise.as_ref().map(|l| l[k])).collect();
            let est: Vec<f64> = mi.iter().map(|i| i.estimate).collect();
            let se: Vec<f64> = mi.iter().map(|i| i.std_error).collect();
            let cover = |v: &[Interval]| v.iter().filter(|i| i.covers(truth)).count() as f64 / v.len() as f64;
            let mean_estimate = mean(&est);
            let empirical_sd = sd(&est);
            let mean_std_error = mean(&se);
            let mean_half_width = mean(&mi.iter().map(|i| (i.upper - i.lower) / 2.0).collect::<Vec<_>>());
            ParameterRecovery {
                name: name.clone(),
                truth,
                mean_estimate,
                bias: mean_estimate - truth,
                empirical_sd,
                mean_std_error,
                se_ratio: if empirical_sd > 0.0 { mean_std_error / empirical_sd } else { f64::NAN },
                coverage: cover(&mi),
                mean_half_width,
                wide_interval: truth != 0.0 && mean_half_width > truth.abs(),
                complete_mean_std_error: mean(&cc.iter().map(|i| i.std_error).collect::<Vec<_>>()),
                complete_coverage: cover(&cc),
                listwise_mean_std_error: (!lw.is_empty()).then(|| mean(&lw.iter().map(|i| i.std_error).collect::<Vec<_>>())),
                listwise_coverage: (!lw.is_empty()).then(|| cover(&lw)),
            }
        })
        .collect();
    Ok(SimReport {
        config: cfg.clone(),
        completed: records.len(),
        failed: failures.len(),
        failures,
        parameters,
        replications: records,
    })
}

/// Runs the study and writes `simulation.json` and `simulation.csv`.
pub fn run_simulate(cfg: &SimConfig, dir: &Path) -> std::result::Result<SimReport, PipelineError> {
    guarded(dir, |out| {
        let report = run_simulation(cfg).map_err(|e| PipelineError::new(Stage::Fit, e.to_string()))?;
        let mut json = serde_json::to_string_pretty(&report).map_err(|e| PipelineError::new(Stage::Output, e.to_string()))?;
        json.push('\n');
        out.write("simulation.json", json.as_bytes())?;
        out.write("simulation.csv", &report.to_csv())?;
        Ok(report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(missing_rate: f64) -> SimConfig {
        SimConfig::from_json_str(&format!(
            r#"{{"beta": [1.0, -0.5], "cutpoints": [-1.0, 0.5, 2.0], "n": 300,
                "missing_rate": {missing_rate}, "replications": 3, "seed": 11}}"#
        ))
        .unwrap()
    }

    #[test]
    fn zero_missing_rate_reproduces_complete_data_fit() {
        let rep = run_simulation(&small(0.0)).unwrap();
        assert_eq!(rep.completed, 3);
        for r in &rep.replications {
            for (a, b) in r.imputed.iter().zip(&r.complete) {
                assert_eq!(a.estimate, b.estimate);
                assert_eq!(a.std_error, b.std_error);
            }
        }
    }

    #[test]
    fn generator_respects_settings() {
        let cfg = small(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = generate(&cfg, &mut rng);
        assert_eq!(t.n_rows(), 300);
        assert_eq!(t.names(), vec!["y", "x1", "x2"]);
        let masked = mcar_mask(&t, "y", 0.3, &mut rng);
        assert_eq!(masked.column("y").unwrap().missing_count(), 0);
        let frac = masked.total_missing() as f64 / 600.0;
        assert!((frac - 0.3).abs() < 0.06, "{frac}");
    }

    #[test]
    fn deterministic_across_parallelism() {
        let mut cfg = small(0.2);
        let a = run_simulation(&cfg).unwrap();
        cfg.parallel = false;
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a.replications, b.replications);
    }

    #[test]
    fn tiny_run_flags_wide_intervals() {
        let mut cfg = small(0.2);
        cfg.n = 50;
        cfg.cutpoints = vec![-1.0, 1.0];
        cfg.replications = 4;
        let rep = run_simulation(&cfg).unwrap();
        assert!(rep.completed >= 1);
        assert!(rep.any_wide_interval());
    }

    #[test]
    fn rejects_bad_settings() {
        for body in [
            r#"{"beta": [], "cutpoints": [0.0], "n": 100, "missing_rate": 0.1, "replications": 1}"#,
            r#"{"beta": [1.0], "cutpoints": [1.0, 0.0], "n": 100, "missing_rate": 0.1, "replications": 1}"#,
            r#"{"beta": [1.0], "cutpoints": [0.0], "n": 100, "missing_rate": 1.0, "replications": 1}"#,
            r#"{"beta": [1.0, 1.0, 1.0], "cutpoints": [0.0], "n": 100, "missing_rate": 0.1, "replications": 1, "covariate_correlation": -0.6}"#,
            r#"{"beta": [1.0], "cutpoints": [0.0], "n": 100, "missing_rate": 0.1, "replications": 1, "m": 1}"#,
        ] {
            assert!(SimConfig::from_json_str(body).is_err(), "{body}");
        }
    }
}
