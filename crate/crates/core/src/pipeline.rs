//! Stage orchestration: load, inspect, screen, impute, fit, pool, report.
//!
//! Every `run_*` function writes its artifacts into an output directory. When
//! a stage fails, files already written by that call are moved into
//! `quarantine/` so a half-finished run is never mistaken for a result.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DerivedVariable, PipelineConfig};
use crate::dataset::{
    self, load_csv, merge_into_bmi, missingness_summary, read_csv, reverse_code, ColumnKind, DataTable,
    MissingReport, Schema,
};
use crate::imputation::{emb_impute, mcar_test, EmbOptions, ImputedSet, McarTestResult, ReplicateDiagnostics};
use crate::ologit::{encode_design, fit, mcfadden_r2, DesignMatrix, OrdinalFit};
use crate::pooling::{pool, significance_filter, PooledCoefficient, PooledFit};
use crate::screening::{
    chi_square_test, collinearity_screen, correlation_matrix, xml_escape, ChiSquareResult,
    CorrelationMatrix, FlaggedPair,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Inspect,
    Screen,
    Prepare,
    Impute,
    Fit,
    Pool,
    Filter,
    Refit,
    Report,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Inspect => "inspect",
            Stage::Screen => "screen",
            Stage::Prepare => "prepare",
            Stage::Impute => "impute",
            Stage::Fit => "fit",
            Stage::Pool => "pool",
            Stage::Filter => "filter",
            Stage::Refit => "refit",
            Stage::Report => "report",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e.to_string())
}

pub const SIGN_CONVENTION: &str = "P(Y <= j | x) = 1 / (1 + exp(-(alpha_j - x'beta))); \
a positive coefficient moves probability toward higher response categories";

/// Files written by one invocation.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::new(Stage::Output, format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::new(Stage::Output, format!("{}: {e}", path.display())))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    fn quarantine(&self) {
        let q = self.dir.join("quarantine");
        if fs::create_dir_all(&q).is_err() {
            return;
        }
        for name in &self.written {
            let _ = fs::rename(self.dir.join(name), q.join(name));
        }
    }
}

/// Runs `body`, quarantining its outputs if it fails.
pub fn guarded<T>(dir: &Path, body: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
    let mut out = Outputs::create(dir)?;
    let result = body(&mut out);
    if result.is_err() {
        out.quarantine();
    }
    result
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(at(Stage::Output))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Loads the data and applies response reverse-coding.
pub fn load(cfg: &PipelineConfig) -> Result<DataTable> {
    let t = load_csv(&cfg.data_path, &cfg.schema, &cfg.load_options()).map_err(at(Stage::Load))?;
    if !cfg.reverse_code_response {
        return Ok(t);
    }
    let col = reverse_code(t.column(&cfg.response).map_err(at(Stage::Load))?).map_err(at(Stage::Load))?;
    t.with_column(col).map_err(at(Stage::Load))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub n_rows: usize,
    /// Missing cells in the response and the columns the predictors draw on.
    pub missing: MissingReport,
    /// (level, count) over the observed responses.
    pub response_counts: Vec<(i64, usize)>,
}

pub fn inspect(cfg: &PipelineConfig, t: &DataTable) -> Result<InspectReport> {
    let mut names = vec![cfg.response.clone()];
    names.extend(cfg.source_columns());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let sub = t.select(&refs).map_err(at(Stage::Inspect))?;
    let missing = missingness_summary(&sub, Some(&cfg.response));
    let resp = t.column(&cfg.response).map_err(at(Stage::Inspect))?;
    let ColumnKind::Ordinal { levels } = resp.kind() else {
        return Err(PipelineError::new(Stage::Inspect, "response is not ordinal"));
    };
    let response_counts = levels
        .iter()
        .map(|&l| {
            let n = (0..resp.len()).filter(|&r| resp.get(r) == Some(l as f64)).count();
            (l, n)
        })
        .collect();
    Ok(InspectReport {
        n_rows: t.n_rows(),
        missing,
        response_counts,
    })
}

pub fn missingness_csv(m: &MissingReport, n_rows: usize) -> Vec<u8> {
    let rows: Vec<Vec<String>> = m
        .per_column
        .iter()
        .map(|(name, k)| {
            let frac = if n_rows == 0 { 0.0 } else { *k as f64 / n_rows as f64 };
            vec![name.clone(), k.to_string(), frac.to_string()]
        })
        .collect();
    csv_bytes(&["column", "missing", "missing_fraction"], &rows)
}

/// Bar chart of response frequencies; each bar carries its level and count.
pub fn response_svg(name: &str, counts: &[(i64, usize)]) -> String {
    let bar_w = 60.0;
    let gap = 20.0;
    let plot_h = 240.0;
    let left = 50.0;
    let top = 40.0;
    let width = left + counts.len() as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 50.0;
    let max = counts.iter().map(|c| c.1).max().unwrap_or(0).max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-variable="{}">"#,
        xml_escape(name)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">Response: {}</text>"#,
        width / 2.0,
        xml_escape(name)
    );
    let base = top + plot_h;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, width - gap / 2.0);
    for (i, (level, n)) in counts.iter().enumerate() {
        let h = plot_h * *n as f64 / max;
        let x = left + gap / 2.0 + i as f64 * (bar_w + gap);
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{x}" y="{}" width="{bar_w}" height="{h}" fill="#4477aa" data-level="{level}" data-count="{n}"/>"##,
            base - h
        );
        let cx = x + bar_w / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{level}</text>"#,
            base + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{n}</text>"#,
            base - h - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_inspect(out: &mut Outputs, cfg: &PipelineConfig, r: &InspectReport) -> Result<()> {
    out.write("missingness.csv", &missingness_csv(&r.missing, r.n_rows))?;
    out.write("response.svg", response_svg(&cfg.response, &r.response_counts).as_bytes())
}

pub fn run_inspect(cfg: &PipelineConfig, dir: &Path) -> Result<InspectReport> {
    guarded(dir, |out| {
        let t = load(cfg)?;
        let r = inspect(cfg, &t)?;
        write_inspect(out, cfg, &r)?;
        Ok(r)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareRow {
    pub variable: String,
    pub result: Option<ChiSquareResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub correlations: CorrelationMatrix,
    pub chi_square: Vec<ChiSquareRow>,
    pub flagged: Vec<FlaggedPair>,
}

pub fn screen(cfg: &PipelineConfig, t: &DataTable) -> Result<ScreenReport> {
    let vars = cfg.correlation_vars();
    let refs: Vec<&str> = vars.iter().map(String::as_str).collect();
    let correlations = correlation_matrix(t, &refs).map_err(at(Stage::Screen))?;
    let flagged = collinearity_screen(&correlations, cfg.collinearity_threshold).map_err(at(Stage::Screen))?;
    let chi_square = cfg
        .chi_square_vars()
        .into_iter()
        .map(|v| match chi_square_test(t, &v, &cfg.response) {
            Ok(r) => ChiSquareRow {
                variable: v,
                result: Some(r),
                error: None,
            },
            Err(e) => ChiSquareRow {
                variable: v,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(ScreenReport {
        correlations,
        chi_square,
        flagged,
    })
}

pub fn chisq_csv(rows: &[ChiSquareRow]) -> Vec<u8> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| match &r.result {
            Some(c) => vec![
                r.variable.clone(),
                c.statistic.to_string(),
                c.degrees_of_freedom.to_string(),
                c.p_value.to_string(),
                c.low_expected_cell_count.to_string(),
                String::new(),
            ],
            None => vec![
                r.variable.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                r.error.clone().unwrap_or_default(),
            ],
        })
        .collect();
    csv_bytes(
        &["variable", "statistic", "df", "p_value", "low_expected_cells", "error"],
        &body,
    )
}

pub fn collinearity_csv(pairs: &[FlaggedPair]) -> Vec<u8> {
    let body: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| vec![p.first.clone(), p.second.clone(), p.r.to_string()])
        .collect();
    csv_bytes(&["first", "second", "r"], &body)
}

fn write_screen(out: &mut Outputs, r: &ScreenReport) -> Result<()> {
    out.write("correlations.csv", r.correlations.to_csv().as_bytes())?;
    out.write("heatmap.svg", r.correlations.to_svg().as_bytes())?;
    out.write("chisq.csv", &chisq_csv(&r.chi_square))?;
    out.write("collinearity.csv", &collinearity_csv(&r.flagged))
}

pub fn run_screen(cfg: &PipelineConfig, dir: &Path) -> Result<ScreenReport> {
    guarded(dir, |out| {
        let t = load(cfg)?;
        let r = screen(cfg, &t)?;
        write_screen(out, &r)?;
        Ok(r)
    })
}

/// The modelling table before and after the response drop.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Response followed by the predictors, derived variables computed.
    pub analysis: DataTable,
    pub missing: MissingReport,
    /// `analysis` without the rows whose response is missing.
    pub complete_response: DataTable,
}

pub fn prepare(cfg: &PipelineConfig, t: &DataTable) -> Result<Prepared> {
    let mut t = t.clone();
    for d in &cfg.derived {
        t = match d {
            DerivedVariable::Bmi { name, weight, height } => {
                merge_into_bmi(&t, weight, height, name).map_err(at(Stage::Prepare))?
            }
        };
    }
    let mut names = vec![cfg.response.as_str()];
    names.extend(cfg.predictors.iter().map(String::as_str));
    let analysis = t.select(&names).map_err(at(Stage::Prepare))?;
    let missing = missingness_summary(&analysis, Some(&cfg.response));
    let complete_response = dataset::drop_missing_response(&analysis, &cfg.response).map_err(at(Stage::Prepare))?;
    Ok(Prepared {
        analysis,
        missing,
        complete_response,
    })
}

pub fn emb_options(cfg: &PipelineConfig) -> EmbOptions {
    EmbOptions {
        m: cfg.m,
        master_seed: cfg.seed,
        em: cfg.em.clone(),
        coercion: cfg.coercion,
        exclude: if cfg.response_in_imputation_model {
            Vec::new()
        } else {
            vec![cfg.response.clone()]
        },
        parallel: cfg.parallel,
    }
}

/// Written next to the completed datasets so later stages can reload them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationManifest {
    pub m: usize,
    pub master_seed: u64,
    pub schema: Schema,
    pub files: Vec<String>,
    pub replicates: Vec<ReplicateDiagnostics>,
}

pub fn outdata_name(k: usize) -> String {
    format!("outdata{}.csv", k + 1)
}

fn write_imputed(out: &mut Outputs, set: &ImputedSet) -> Result<ImputationManifest> {
    let mut files = Vec::with_capacity(set.m);
    for (k, d) in set.datasets.iter().enumerate() {
        let mut buf = Vec::new();
        d.write_csv(&mut buf).map_err(at(Stage::Output))?;
        let name = outdata_name(k);
        out.write(&name, &buf)?;
        files.push(name);
    }
    let manifest = ImputationManifest {
        m: set.m,
        master_seed: set.master_seed,
        schema: set.datasets[0].schema(),
        files,
        replicates: set.diagnostics.clone(),
    };
    out.write("imputation.json", &json_bytes(&manifest)?)?;
    Ok(manifest)
}

pub fn impute(cfg: &PipelineConfig, prepared: &Prepared) -> Result<ImputedSet> {
    emb_impute(&prepared.complete_response, &emb_options(cfg)).map_err(at(Stage::Impute))
}

pub fn run_impute(cfg: &PipelineConfig, dir: &Path) -> Result<ImputationManifest> {
    guarded(dir, |out| {
        let t = load(cfg)?;
        let prepared = prepare(cfg, &t)?;
        let set = impute(cfg, &prepared)?;
        write_imputed(out, &set)
    })
}

pub fn designs(cfg: &PipelineConfig, datasets: &[DataTable]) -> Result<Vec<DesignMatrix>> {
    let preds: Vec<&str> = cfg.predictors.iter().map(String::as_str).collect();
    datasets
        .iter()
        .map(|d| encode_design(d, &cfg.response, &preds).map_err(at(Stage::Fit)))
        .collect()
}

/// Fits every design, in order, optionally on the rayon pool.
pub fn fit_each(cfg: &PipelineConfig, designs: &[DesignMatrix], stage: Stage) -> Result<Vec<OrdinalFit>> {
    let one = |(k, d): (usize, &DesignMatrix)| {
        fit(d, &cfg.fit).map_err(|e| PipelineError::new(stage, format!("dataset {}: {e}", k + 1)))
    };
    if cfg.parallel {
        designs.par_iter().enumerate().map(one).collect()
    } else {
        designs.iter().enumerate().map(one).collect()
    }
}

pub fn coefficient_rows<'a>(rows: impl Iterator<Item = &'a PooledCoefficient>) -> Vec<Vec<String>> {
    rows.map(|r| {
        vec![
            r.name.clone(),
            r.mean.to_string(),
            r.pooled_se.to_string(),
            r.t_value.to_string(),
            r.df.map(|v| v.to_string()).unwrap_or_default(),
            r.p_value.to_string(),
        ]
    })
    .collect()
}

pub const TABLE_HEADER: [&str; 6] = ["name", "estimate", "std_error", "t_value", "df", "p_value"];

pub fn pooled_csv<'a>(rows: impl Iterator<Item = &'a PooledCoefficient>) -> Vec<u8> {
    csv_bytes(&TABLE_HEADER, &coefficient_rows(rows))
}

fn fit_csv(f: &OrdinalFit) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = crate::ologit::wald_table(f)
        .map_err(at(Stage::Fit))?
        .into_iter()
        .map(|w| {
            vec![
                w.name,
                w.value.to_string(),
                w.std_error.to_string(),
                w.t_value.to_string(),
                w.p_value.to_string(),
            ]
        })
        .collect();
    Ok(csv_bytes(&["name", "estimate", "std_error", "t_value", "p_value"], &rows))
}

fn read_imputed(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<DataTable>> {
    let path = dir.join("imputation.json");
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::new(Stage::Fit, format!("{}: {e}", path.display())))?;
    let manifest: ImputationManifest = serde_json::from_str(&text).map_err(at(Stage::Fit))?;
    manifest
        .files
        .iter()
        .map(|name| {
            let p = dir.join(name);
            let file = fs::File::open(&p).map_err(|e| PipelineError::new(Stage::Fit, format!("{}: {e}", p.display())))?;
            read_csv(file, &manifest.schema, &cfg.load_options()).map_err(at(Stage::Fit))
        })
        .collect()
}

/// Fits the full model to completed datasets found in `dir`.
pub fn run_fit(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<OrdinalFit>> {
    let datasets = read_imputed(dir, cfg)?;
    guarded(dir, |out| {
        let fits = fit_each(cfg, &designs(cfg, &datasets)?, Stage::Fit)?;
        for (k, f) in fits.iter().enumerate() {
            out.write(&format!("fit{}.csv", k + 1), &fit_csv(f)?)?;
        }
        out.write("fits.json", &json_bytes(&fits)?)?;
        Ok(fits)
    })
}

/// Pools the fits saved by [`run_fit`].
pub fn run_pool(_cfg: &PipelineConfig, dir: &Path) -> Result<PooledFit> {
    let path = dir.join("fits.json");
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::new(Stage::Pool, format!("{}: {e}", path.display())))?;
    let fits: Vec<OrdinalFit> = serde_json::from_str(&text).map_err(at(Stage::Pool))?;
    guarded(dir, |out| {
        let pooled = pool(&fits).map_err(at(Stage::Pool))?;
        out.write("pooled.csv", &pooled_csv(pooled.rows.iter()))?;
        Ok(pooled)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McFaddenSummary {
    pub per_dataset: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub data_file: String,
    pub response: String,
    pub reverse_code_response: bool,
    pub derived: Vec<DerivedVariable>,
    pub predictors: Vec<String>,
    pub m: usize,
    pub seed: u64,
    pub alpha: f64,
    pub collinearity_threshold: f64,
    pub em: crate::imputation::EmOptions,
    pub coercion: crate::imputation::CoercionMode,
    pub fit: crate::ologit::FitOptions,
    pub iterative_filter: bool,
    pub response_in_imputation_model: bool,
}

impl RunSettings {
    fn of(cfg: &PipelineConfig) -> Self {
        Self {
            data_file: cfg
                .data_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            response: cfg.response.clone(),
            reverse_code_response: cfg.reverse_code_response,
            derived: cfg.derived.clone(),
            predictors: cfg.predictors.clone(),
            m: cfg.m,
            seed: cfg.seed,
            alpha: cfg.alpha,
            collinearity_threshold: cfg.collinearity_threshold,
            em: cfg.em.clone(),
            coercion: cfg.coercion,
            fit: cfg.fit.clone(),
            iterative_filter: cfg.iterative_filter,
            response_in_imputation_model: cfg.response_in_imputation_model,
        }
    }
}

/// Everything needed to audit a run; serialized as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub settings: RunSettings,
    pub rows_loaded: usize,
    pub rows_analysed: usize,
    pub rows_dropped_missing_response: usize,
    /// Missing cells of the modelling table before the response drop.
    pub missing: MissingReport,
    pub mcar: Option<McarTestResult>,
    pub mcar_error: Option<String>,
    pub collinear_pairs: Vec<FlaggedPair>,
    pub replicates: Vec<ReplicateDiagnostics>,
    pub full_model_terms: Vec<String>,
    pub retained_terms: Vec<String>,
    pub filter_passes: usize,
    pub mcfadden: McFaddenSummary,
    pub sign_convention: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub inspect: InspectReport,
    pub screen: ScreenReport,
    pub full: PooledFit,
    pub pooled: PooledFit,
    pub fits: Vec<OrdinalFit>,
    pub retained: Vec<String>,
    pub manifest: RunManifest,
}

fn mcfadden_summary(fits: &[OrdinalFit], nulls: &[OrdinalFit]) -> Result<McFaddenSummary> {
    let per_dataset = fits
        .iter()
        .zip(nulls)
        .map(|(f, n)| mcfadden_r2(f, n).map(|q| q.mcfadden_r2).map_err(at(Stage::Report)))
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = per_dataset.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(McFaddenSummary {
        mean,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        per_dataset,
    })
}

fn mcfadden_csv(fits: &[OrdinalFit], nulls: &[OrdinalFit], s: &McFaddenSummary) -> Vec<u8> {
    let rows: Vec<Vec<String>> = s
        .per_dataset
        .iter()
        .enumerate()
        .map(|(k, r2)| {
            vec![
                (k + 1).to_string(),
                r2.to_string(),
                fits[k].log_likelihood.to_string(),
                nulls[k].log_likelihood.to_string(),
            ]
        })
        .collect();
    csv_bytes(&["dataset", "mcfadden_r2", "loglik_model", "loglik_intercept_only"], &rows)
}

/// Plain-text summary with the pooled tables and the prediction equations.
pub fn report_text(cfg: &PipelineConfig, pooled: &PooledFit, r2: &McFaddenSummary, n: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Proportional-odds model for '{}' pooled over {} imputations", cfg.response, pooled.m);
    let _ = writeln!(s, "Observations: {n}");
    let _ = writeln!(s, "Significance level for retention: {}", cfg.alpha);
    s.push('\n');
    let table = |s: &mut String, title: &str, rows: Vec<&PooledCoefficient>| {
        let _ = writeln!(s, "{title}");
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            s,
            "  {:<width$}  {:>10}  {:>10}  {:>8}  {:>10}",
            "term", "estimate", "std.error", "t", "p"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "  {:<width$}  {:>10.4}  {:>10.4}  {:>8.3}  {:>10.4e}",
                r.name, r.mean, r.pooled_se, r.t_value, r.p_value
            );
        }
        s.push('\n');
    };
    table(&mut s, "Coefficients", pooled.coefficients().collect());
    table(&mut s, "Cutpoints", pooled.cutpoints().collect());
    let per: Vec<String> = r2.per_dataset.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(s, "McFadden R2 per dataset: {}", per.join(", "));
    let _ = writeln!(s, "McFadden R2 mean {:.4}, range [{:.4}, {:.4}]", r2.mean, r2.min, r2.max);
    s.push('\n');

    let _ = writeln!(s, "Prediction equations");
    let terms: Vec<String> = pooled
        .coefficients()
        .map(|r| format!("{:.4} * {}", r.mean, r.name))
        .collect();
    let eta = if terms.is_empty() { "0".to_string() } else { terms.join(" + ").replace("+ -", "- ") };
    let _ = writeln!(s, "  eta = {eta}");
    let cuts: Vec<&PooledCoefficient> = pooled.cutpoints().collect();
    let levels = cuts.len() + 1;
    for (j, c) in cuts.iter().enumerate() {
        let _ = writeln!(s, "  P(Y <= {}) = 1 / (1 + exp(-({:.4} - eta)))   [{}]", j + 1, c.mean, c.name);
    }
    let _ = writeln!(s, "  P(Y = 1) = P(Y <= 1)");
    if levels > 2 {
        let _ = writeln!(s, "  P(Y = j) = P(Y <= j) - P(Y <= j-1) for 1 < j < {levels}");
    }
    let _ = writeln!(s, "  P(Y = {levels}) = 1 - P(Y <= {})", levels - 1);
    s.push('\n');
    let _ = writeln!(s, "Sign convention: {SIGN_CONVENTION}.");
    let _ = writeln!(s, "Category indices follow the declared response levels in ascending order.");
    s
}

/// Drop-and-refit: keeps the terms significant in the pooled full model and
/// refits. In iterative mode this repeats until the retained set is stable.
fn filter_and_refit(
    cfg: &PipelineConfig,
    full_designs: &[DesignMatrix],
    full: &PooledFit,
) -> Result<(Vec<String>, Vec<OrdinalFit>, PooledFit, usize)> {
    let mut retained = significance_filter(full, cfg.alpha).map_err(at(Stage::Filter))?;
    let mut passes = 1;
    loop {
        let refs: Vec<&str> = retained.iter().map(String::as_str).collect();
        let sub: Vec<DesignMatrix> = full_designs
            .iter()
            .map(|d| d.select(&refs).map_err(at(Stage::Refit)))
            .collect::<Result<_>>()?;
        let fits = fit_each(cfg, &sub, Stage::Refit)?;
        let pooled = pool(&fits).map_err(at(Stage::Refit))?;
        if !cfg.iterative_filter {
            return Ok((retained, fits, pooled, passes));
        }
        let next = significance_filter(&pooled, cfg.alpha).map_err(at(Stage::Filter))?;
        if next == retained {
            return Ok((retained, fits, pooled, passes));
        }
        retained = next;
        passes += 1;
    }
}

/// The whole pipeline. Output files depend only on the configuration and
/// its seed, not on the output directory or on `parallel`.
pub fn run_full(cfg: &PipelineConfig, dir: &Path) -> Result<RunReport> {
    guarded(dir, |out| {
        let loaded = load(cfg)?;
        let inspect_report = inspect(cfg, &loaded)?;
        write_inspect(out, cfg, &inspect_report)?;
        let screen_report = screen(cfg, &loaded)?;
        write_screen(out, &screen_report)?;

        let prepared = prepare(cfg, &loaded)?;
        let exclude = emb_options(cfg).exclude;
        let (mcar, mcar_error) = match mcar_test(&prepared.complete_response, &exclude) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let set = impute(cfg, &prepared)?;
        write_imputed(out, &set)?;

        let full_designs = designs(cfg, &set.datasets)?;
        let full_fits = fit_each(cfg, &full_designs, Stage::Fit)?;
        let full = pool(&full_fits).map_err(at(Stage::Pool))?;
        out.write("full_model.csv", &pooled_csv(full.rows.iter()))?;

        let (retained, fits, pooled, passes) = filter_and_refit(cfg, &full_designs, &full)?;
        out.write("coefficients.csv", &pooled_csv(pooled.coefficients()))?;
        out.write("intercepts.csv", &pooled_csv(pooled.cutpoints()))?;

        let null_designs: Vec<DesignMatrix> = full_designs.iter().map(DesignMatrix::intercept_only).collect();
        let nulls = fit_each(cfg, &null_designs, Stage::Report)?;
        let r2 = mcfadden_summary(&fits, &nulls)?;
        out.write("mcfadden.csv", &mcfadden_csv(&fits, &nulls, &r2))?;
        let n = prepared.complete_response.n_rows();
        out.write("report.txt", report_text(cfg, &pooled, &r2, n).as_bytes())?;

        let mut files: Vec<String> = out.written().to_vec();
        files.push("manifest.json".into());
        files.sort();
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: RunSettings::of(cfg),
            rows_loaded: loaded.n_rows(),
            rows_analysed: n,
            rows_dropped_missing_response: prepared.analysis.n_rows() - n,
            missing: prepared.missing.clone(),
            mcar,
            mcar_error,
            collinear_pairs: screen_report.flagged.clone(),
            replicates: set.diagnostics.clone(),
            full_model_terms: full_designs[0].names.clone(),
            retained_terms: retained.clone(),
            filter_passes: passes,
            mcfadden: r2,
            sign_convention: SIGN_CONVENTION.into(),
            files,
        };
        out.write("manifest.json", &json_bytes(&manifest)?)?;
        Ok(RunReport {
            inspect: inspect_report,
            screen: screen_report,
            full,
            pooled,
            fits,
            retained,
            manifest,
        })
    })
}
