//! Variable screening ahead of imputation: Spearman rank correlations,
//! chi-square independence tests and collinearity flags.
//!
//! Screening runs on incomplete data, so every statistic uses the rows where
//! both inputs are observed (pairwise-complete deletion).

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::dataset::{ColumnKind, DataTable, DatasetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreeningError {
    #[error("need at least 3 complete pairs, found {0}")]
    TooFewPairs(usize),
    #[error("ranks of one input have zero variance")]
    ZeroVariance,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("contingency table is degenerate: {0}")]
    DegenerateTable(String),
    #[error("column '{column}' cannot be used here: {reason}")]
    WrongKind { column: String, reason: String },
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("{0}")]
    Dataset(String),
}

impl From<DatasetError> for ScreeningError {
    fn from(e: DatasetError) -> Self {
        ScreeningError::Dataset(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ScreeningError>;

/// Average ranks (1-based); tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with average ranks for ties. `NaN` marks a missing value;
/// pairs with either side missing are dropped.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ScreeningError::LengthMismatch(x.len(), y.len()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| !a.is_nan() && !b.is_nan())
        .map(|(a, b)| (*a, *b))
        .unzip();
    if xs.len() < 3 {
        return Err(ScreeningError::TooFewPairs(xs.len()));
    }
    pearson(&average_ranks(&xs), &average_ranks(&ys)).ok_or(ScreeningError::ZeroVariance)
}

/// Symmetric matrix of pairwise Spearman coefficients. Entries whose pair
/// could not be computed are `None`, with the reason kept in `failures`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub r: Vec<Vec<Option<f64>>>,
    pub failures: Vec<(String, String, String)>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.r[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for n in &self.names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&csv_field(n));
            for v in &self.r[i] {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Standalone SVG heatmap; each cell carries its coefficient in `data-r`.
    pub fn to_svg(&self) -> String {
        let k = self.names.len();
        let cell = 28.0;
        let margin = 140.0;
        let legend_h = 50.0;
        let width = margin + cell * k as f64 + 20.0;
        let height = margin + cell * k as f64 + legend_h;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, r#"<title>Spearman correlation matrix</title>"#);
        for (i, name) in self.names.iter().enumerate() {
            let pos = margin + cell * (i as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{pos}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                margin - 4.0,
                xml_escape(name)
            );
            let _ = writeln!(
                s,
                r#"<text transform="translate({pos},{}) rotate(-60)" text-anchor="start">{}</text>"#,
                margin - 4.0,
                xml_escape(name)
            );
        }
        for i in 0..k {
            for j in 0..k {
                let x = margin + cell * j as f64;
                let y = margin + cell * i as f64;
                match self.r[i][j] {
                    Some(r) => {
                        let _ = writeln!(
                            s,
                            r#"<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" data-row="{}" data-col="{}" data-r="{r}"/>"#,
                            diverging_color(r),
                            xml_escape(&self.names[i]),
                            xml_escape(&self.names[j]),
                        );
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            r##"<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#cccccc" data-row="{}" data-col="{}" data-r=""/>"##,
                            xml_escape(&self.names[i]),
                            xml_escape(&self.names[j]),
                        );
                    }
                }
            }
        }
        let ly = margin + cell * k as f64 + 15.0;
        for step in 0..=20 {
            let r = -1.0 + step as f64 * 0.1;
            let _ = writeln!(
                s,
                r#"<rect class="legend" x="{}" y="{ly}" width="8" height="12" fill="{}" data-r="{r:.1}"/>"#,
                margin + step as f64 * 8.0,
                diverging_color(r)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">-1</text><text x="{}" y="{}" text-anchor="middle">0</text><text x="{}" y="{}" text-anchor="middle">1</text>"#,
            margin + 4.0,
            ly + 24.0,
            margin + 84.0,
            ly + 24.0,
            margin + 164.0,
            ly + 24.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn diverging_color(r: f64) -> String {
    // blue for negative, red for positive, white at zero
    let t = r.clamp(-1.0, 1.0).abs();
    let fade = (255.0 * (1.0 - t)).round() as u8;
    if r >= 0.0 {
        format!("#ff{fade:02x}{fade:02x}")
    } else {
        format!("#{fade:02x}{fade:02x}ff")
    }
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Pairwise Spearman matrix over numeric and ordinal columns.
pub fn correlation_matrix(t: &DataTable, vars: &[&str]) -> Result<CorrelationMatrix> {
    let mut cols = Vec::with_capacity(vars.len());
    for v in vars {
        let c = t.column(v)?;
        if matches!(c.kind(), ColumnKind::Nominal { .. }) {
            return Err(ScreeningError::WrongKind {
                column: v.to_string(),
                reason: "nominal columns have no rank order".into(),
            });
        }
        cols.push(c.values());
    }
    let k = vars.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let computed: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| spearman_rho(cols[i], cols[j]))
        .collect();

    let mut r = vec![vec![None; k]; k];
    let mut failures = Vec::new();
    for i in 0..k {
        r[i][i] = Some(1.0);
    }
    for (&(i, j), res) in pairs.iter().zip(computed) {
        match res {
            Ok(v) => {
                r[i][j] = Some(v);
                r[j][i] = Some(v);
            }
            Err(e) => failures.push((vars[i].to_string(), vars[j].to_string(), e.to_string())),
        }
    }
    Ok(CorrelationMatrix {
        names: vars.iter().map(|s| s.to_string()).collect(),
        r,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// Expected cell counts below 5; the asymptotic p-value is unreliable when nonzero.
    pub low_expected_cell_count: usize,
}

/// Pearson chi-square test of independence on a table of counts. Rows or
/// columns with zero total are dropped before testing.
pub fn chi_square_from_counts(counts: &[Vec<f64>]) -> Result<ChiSquareResult> {
    let ncol = counts.first().map_or(0, Vec::len);
    if counts.iter().any(|r| r.len() != ncol) {
        return Err(ScreeningError::DegenerateTable("ragged rows".into()));
    }
    let row_tot: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let col_tot: Vec<f64> = (0..ncol).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let rows: Vec<usize> = (0..counts.len()).filter(|&i| row_tot[i] > 0.0).collect();
    let cols: Vec<usize> = (0..ncol).filter(|&j| col_tot[j] > 0.0).collect();
    if rows.len() < 2 || cols.len() < 2 {
        return Err(ScreeningError::DegenerateTable(format!(
            "{} observed row level(s) and {} observed column level(s)",
            rows.len(),
            cols.len()
        )));
    }
    let total: f64 = row_tot.iter().sum();
    let mut statistic = 0.0;
    let mut low = 0;
    for &i in &rows {
        for &j in &cols {
            let expected = row_tot[i] * col_tot[j] / total;
            if expected < 5.0 {
                low += 1;
            }
            let d = counts[i][j] - expected;
            statistic += d * d / expected;
        }
    }
    let df = (rows.len() - 1) * (cols.len() - 1);
    let p_value = ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .sf(statistic)
        .clamp(0.0, 1.0);
    Ok(ChiSquareResult {
        statistic,
        degrees_of_freedom: df,
        p_value,
        low_expected_cell_count: low,
    })
}

/// Chi-square test of a categorical predictor against an ordinal response.
pub fn chi_square_test(t: &DataTable, predictor: &str, response: &str) -> Result<ChiSquareResult> {
    let pc = t.column(predictor)?;
    let rc = t.column(response)?;
    let n_pred = match pc.kind() {
        ColumnKind::Nominal { levels, .. } => levels.len(),
        ColumnKind::Ordinal { levels } => levels.len(),
        ColumnKind::Numeric => {
            return Err(ScreeningError::WrongKind {
                column: predictor.into(),
                reason: "chi-square needs a categorical predictor".into(),
            })
        }
    };
    let ColumnKind::Ordinal { levels: resp_levels } = rc.kind() else {
        return Err(ScreeningError::WrongKind {
            column: response.into(),
            reason: "response must be ordinal".into(),
        });
    };
    let level_index = |c: &crate::dataset::Column, v: f64| -> usize {
        match c.kind() {
            ColumnKind::Ordinal { levels } => levels.iter().position(|&l| l as f64 == v).unwrap(),
            _ => v as usize,
        }
    };
    let mut counts = vec![vec![0.0; resp_levels.len()]; n_pred];
    for row in 0..t.n_rows() {
        if let (Some(p), Some(r)) = (pc.get(row), rc.get(row)) {
            counts[level_index(pc, p)][level_index(rc, r)] += 1.0;
        }
    }
    chi_square_from_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub first: String,
    pub second: String,
    pub r: f64,
}

/// Unordered pairs with |r| at or above `threshold`, strongest first.
pub fn collinearity_screen(m: &CorrelationMatrix, threshold: f64) -> Result<Vec<FlaggedPair>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ScreeningError::InvalidThreshold(threshold));
    }
    let mut out = Vec::new();
    for i in 0..m.names.len() {
        for j in i + 1..m.names.len() {
            if let Some(r) = m.r[i][j] {
                if r.abs() >= threshold {
                    out.push(FlaggedPair {
                        first: m.names[i].clone(),
                        second: m.names[j].clone(),
                        r,
                    });
                }
            }
        }
    }
    // stable sort keeps declaration order among equal magnitudes
    out.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()));
    Ok(out)
}
