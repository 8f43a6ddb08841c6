//! Typed survey tables with an explicit missingness mask.
//!
//! A [`DataTable`] is a set of equally long columns, each declared as numeric,
//! ordinal (ordered integer levels, e.g. a 1..5 Likert item) or nominal
//! (labelled levels with a baseline used for contrasts). Missing cells are
//! tracked by a per-cell flag; their stored value is `NaN`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column '{column}': cannot parse '{value}': {reason}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("CSV header contains column '{0}' which is not declared in the schema")]
    UnknownColumn(String),
    #[error("CSV header repeats column '{0}'")]
    DuplicateHeader(String),
    #[error("schema column '{0}' is absent from the CSV header")]
    MissingColumn(String),
    #[error("column '{0}' is declared more than once")]
    DuplicateColumn(String),
    #[error("column '{column}' has an invalid declaration: {reason}")]
    InvalidKind { column: String, reason: String },
    #[error("column '{column}' has {len} cells, expected {expected}")]
    ShapeMismatch {
        column: String,
        len: usize,
        expected: usize,
    },
    #[error("no column named '{0}'")]
    ColumnNotFound(String),
    #[error("column '{0}' is not ordinal")]
    NotOrdinal(String),
    #[error("column '{0}' is not numeric")]
    NotNumeric(String),
    #[error("row {row}: height must be positive, got {value}")]
    NonPositiveHeight { row: usize, value: f64 },
    #[error("every row has a missing response in '{0}'; nothing left to analyse")]
    EmptyAnalysisSet(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Declared measurement level of a column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Ordinal { levels: Vec<i64> },
    Nominal { levels: Vec<String>, baseline: String },
}

impl ColumnKind {
    /// Integer scale `lo..=hi`.
    pub fn ordinal_range(lo: i64, hi: i64) -> Self {
        ColumnKind::Ordinal {
            levels: (lo..=hi).collect(),
        }
    }

    pub fn nominal<S: Into<String>>(levels: Vec<S>, baseline: &str) -> Self {
        ColumnKind::Nominal {
            levels: levels.into_iter().map(Into::into).collect(),
            baseline: baseline.to_string(),
        }
    }

    pub fn validate(&self, column: &str) -> Result<()> {
        let invalid = |reason: &str| DatasetError::InvalidKind {
            column: column.to_string(),
            reason: reason.to_string(),
        };
        match self {
            ColumnKind::Numeric => Ok(()),
            ColumnKind::Ordinal { levels } => {
                if levels.is_empty() {
                    return Err(invalid("ordinal column needs at least one level"));
                }
                if levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid("ordinal levels must be strictly increasing"));
                }
                Ok(())
            }
            ColumnKind::Nominal { levels, baseline } => {
                if levels.is_empty() {
                    return Err(invalid("nominal column needs at least one level"));
                }
                let mut seen = HashSet::new();
                if !levels.iter().all(|l| seen.insert(l.as_str())) {
                    return Err(invalid("nominal levels must be unique"));
                }
                if !levels.contains(baseline) {
                    return Err(invalid("baseline is not one of the levels"));
                }
                Ok(())
            }
        }
    }

    /// Index of the baseline level for nominal columns.
    pub fn baseline_index(&self) -> Option<usize> {
        match self {
            ColumnKind::Nominal { levels, baseline } => levels.iter().position(|l| l == baseline),
            _ => None,
        }
    }
}

/// One named column declaration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
        }
    }
}

/// Ordered list of column declarations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        Self { columns }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for spec in &self.columns {
            if !seen.insert(spec.name.as_str()) {
                return Err(DatasetError::DuplicateColumn(spec.name.clone()));
            }
            spec.kind.validate(&spec.name)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Options controlling CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    /// Cell contents (after trimming) treated as missing.
    pub missing_tokens: BTreeSet<String>,
    /// Skip CSV columns the schema does not declare instead of failing.
    pub ignore_unknown_columns: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            missing_tokens: ["", "NA"].iter().map(|s| s.to_string()).collect(),
            ignore_unknown_columns: false,
        }
    }
}

/// A typed column. Ordinal cells hold their integer level, nominal cells
/// hold the index of their level label; missing cells hold `NaN`.
#[derive(Debug, Clone)]
pub struct Column {
    name: String,
    kind: ColumnKind,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl PartialEq for Column {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.kind == other.kind
            && self.missing == other.missing
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.missing)
                .all(|((a, b), &m)| m || a.to_bits() == b.to_bits())
    }
}

impl Column {
    /// Builds a column from raw cell values, checking each non-missing cell
    /// against the declared kind.
    pub fn new(name: &str, kind: ColumnKind, cells: Vec<Option<f64>>) -> Result<Self> {
        kind.validate(name)?;
        let mut values = Vec::with_capacity(cells.len());
        let mut missing = Vec::with_capacity(cells.len());
        for (row, cell) in cells.into_iter().enumerate() {
            match cell {
                None => {
                    values.push(f64::NAN);
                    missing.push(true);
                }
                Some(v) => {
                    check_cell(name, &kind, row + 1, v)?;
                    values.push(v);
                    missing.push(false);
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            values,
            missing,
        })
    }

    pub fn numeric(name: &str, cells: Vec<Option<f64>>) -> Result<Self> {
        Self::new(name, ColumnKind::Numeric, cells)
    }

    pub fn ordinal(name: &str, levels: Vec<i64>, cells: Vec<Option<i64>>) -> Result<Self> {
        Self::new(
            name,
            ColumnKind::Ordinal { levels },
            cells.into_iter().map(|c| c.map(|v| v as f64)).collect(),
        )
    }

    pub fn nominal(
        name: &str,
        levels: Vec<&str>,
        baseline: &str,
        cells: Vec<Option<&str>>,
    ) -> Result<Self> {
        let kind = ColumnKind::nominal(levels.clone(), baseline);
        let mut coded = Vec::with_capacity(cells.len());
        for (row, cell) in cells.into_iter().enumerate() {
            coded.push(match cell {
                None => None,
                Some(label) => Some(levels.iter().position(|l| *l == label).ok_or_else(|| {
                    DatasetError::Parse {
                        row: row + 1,
                        column: name.to_string(),
                        value: label.to_string(),
                        reason: "not a declared level".into(),
                    }
                })? as f64),
            });
        }
        Self::new(name, kind, coded)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ColumnKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw stored values (`NaN` where missing).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn get(&self, row: usize) -> Option<f64> {
        if self.missing[row] {
            None
        } else {
            Some(self.values[row])
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        self.missing[row]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn renamed(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// Text form of a cell as written to CSV; empty when missing.
    pub fn format_cell(&self, row: usize) -> String {
        match self.get(row) {
            None => String::new(),
            Some(v) => match &self.kind {
                ColumnKind::Numeric => format!("{v}"),
                ColumnKind::Ordinal { .. } => format!("{}", v as i64),
                ColumnKind::Nominal { levels, .. } => levels[v as usize].clone(),
            },
        }
    }

    /// Copy with the given missing cells filled in, possibly re-declared
    /// under a new kind. Values must already be valid for `kind`.
    pub(crate) fn with_fills(&self, kind: ColumnKind, fills: &[(usize, f64)]) -> Column {
        let mut out = self.clone();
        out.kind = kind;
        for &(row, v) in fills {
            debug_assert!(self.missing[row], "only missing cells are filled");
            out.values[row] = v;
            out.missing[row] = false;
        }
        out
    }

    fn select_rows(&self, keep: &[bool]) -> Column {
        let pick = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .collect()
        };
        Column {
            name: self.name.clone(),
            kind: self.kind.clone(),
            values: pick(&self.values),
            missing: self
                .missing
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(m, _)| *m)
                .collect(),
        }
    }
}

fn check_cell(column: &str, kind: &ColumnKind, row: usize, v: f64) -> Result<()> {
    let fail = |reason: &str| DatasetError::Parse {
        row,
        column: column.to_string(),
        value: format!("{v}"),
        reason: reason.to_string(),
    };
    if !v.is_finite() {
        return Err(fail("value is not finite"));
    }
    match kind {
        ColumnKind::Numeric => Ok(()),
        ColumnKind::Ordinal { levels } => {
            if v.fract() != 0.0 || !levels.contains(&(v as i64)) {
                Err(fail(&format!("not one of the ordinal levels {levels:?}")))
            } else {
                Ok(())
            }
        }
        ColumnKind::Nominal { levels, .. } => {
            if v.fract() != 0.0 || v < 0.0 || v as usize >= levels.len() {
                Err(fail("level index out of range"))
            } else {
                Ok(())
            }
        }
    }
}

fn parse_cell(column: &str, kind: &ColumnKind, row: usize, text: &str) -> Result<f64> {
    let fail = |reason: String| DatasetError::Parse {
        row,
        column: column.to_string(),
        value: text.to_string(),
        reason,
    };
    match kind {
        ColumnKind::Numeric => {
            let v: f64 = text.parse().map_err(|e| fail(format!("{e}")))?;
            if !v.is_finite() {
                return Err(fail("value is not finite".into()));
            }
            Ok(v)
        }
        ColumnKind::Ordinal { levels } => {
            let v: f64 = text.parse().map_err(|e| fail(format!("{e}")))?;
            if v.fract() != 0.0 || !v.is_finite() || !levels.contains(&(v as i64)) {
                return Err(fail(format!("not one of the ordinal levels {levels:?}")));
            }
            Ok(v)
        }
        ColumnKind::Nominal { levels, .. } => levels
            .iter()
            .position(|l| l == text)
            .map(|i| i as f64)
            .ok_or_else(|| fail(format!("not one of the nominal levels {levels:?}"))),
    }
}

/// A rectangular, column-typed table.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    columns: Vec<Column>,
    n_rows: usize,
}

impl DataTable {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, Column::len);
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DatasetError::DuplicateColumn(c.name.clone()));
            }
            if c.len() != n_rows || c.missing.len() != n_rows {
                return Err(DatasetError::ShapeMismatch {
                    column: c.name.clone(),
                    len: c.len(),
                    expected: n_rows,
                });
            }
        }
        Ok(Self { columns, n_rows })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| DatasetError::ColumnNotFound(name.to_string()))
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn schema(&self) -> Schema {
        Schema::new(
            self.columns
                .iter()
                .map(|c| ColumnSpec::new(&c.name, c.kind.clone()))
                .collect(),
        )
    }

    pub fn total_missing(&self) -> usize {
        self.columns.iter().map(Column::missing_count).sum()
    }

    /// Keeps the named columns, in the order given.
    pub fn select(&self, names: &[&str]) -> Result<DataTable> {
        let cols = names
            .iter()
            .map(|n| self.column(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        DataTable::new(cols)
    }

    pub fn without(&self, names: &[&str]) -> DataTable {
        DataTable {
            columns: self
                .columns
                .iter()
                .filter(|c| !names.contains(&c.name.as_str()))
                .cloned()
                .collect(),
            n_rows: self.n_rows,
        }
    }

    /// Replaces the column of the same name, or appends it.
    pub fn with_column(&self, column: Column) -> Result<DataTable> {
        let mut cols = self.columns.clone();
        match self.column_index(&column.name) {
            Some(i) => cols[i] = column,
            None => cols.push(column),
        }
        DataTable::new(cols)
    }

    pub fn filter_rows(&self, keep: &[bool]) -> DataTable {
        assert_eq!(keep.len(), self.n_rows, "row mask length");
        let columns: Vec<Column> = self.columns.iter().map(|c| c.select_rows(keep)).collect();
        DataTable {
            n_rows: keep.iter().filter(|&&k| k).count(),
            columns,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for row in 0..self.n_rows {
            w.write_record(self.columns.iter().map(|c| c.format_cell(row)))?;
        }
        w.flush().map_err(|e| DatasetError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

impl fmt::Display for DataTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataTable({} rows x {} columns)", self.n_rows, self.columns.len())
    }
}

/// Header plus string records, before any typing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub records: Vec<Vec<String>>,
}

/// Reads RFC-4180 CSV into strings. Every record must have as many fields as
/// the header.
pub fn read_raw_csv<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        records.push(rec.iter().map(str::to_string).collect());
    }
    Ok(RawTable { headers, records })
}

/// Parses CSV text against a schema. The resulting table has the schema's
/// column order regardless of the header order.
pub fn read_csv<R: Read>(reader: R, schema: &Schema, opts: &LoadOptions) -> Result<DataTable> {
    schema.validate()?;
    let raw = read_raw_csv(reader)?;

    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, h) in raw.headers.iter().enumerate() {
        if position.insert(h.as_str(), i).is_some() {
            return Err(DatasetError::DuplicateHeader(h.clone()));
        }
        if !opts.ignore_unknown_columns && schema.get(h).is_none() {
            return Err(DatasetError::UnknownColumn(h.clone()));
        }
    }

    let mut columns = Vec::with_capacity(schema.columns.len());
    for spec in &schema.columns {
        let idx = *position
            .get(spec.name.as_str())
            .ok_or_else(|| DatasetError::MissingColumn(spec.name.clone()))?;
        let mut values = Vec::with_capacity(raw.records.len());
        let mut missing = Vec::with_capacity(raw.records.len());
        for (r, rec) in raw.records.iter().enumerate() {
            let text = rec[idx].trim();
            if opts.missing_tokens.contains(text) {
                values.push(f64::NAN);
                missing.push(true);
            } else {
                values.push(parse_cell(&spec.name, &spec.kind, r + 1, text)?);
                missing.push(false);
            }
        }
        columns.push(Column {
            name: spec.name.clone(),
            kind: spec.kind.clone(),
            values,
            missing,
        });
    }
    let n_rows = raw.records.len();
    Ok(DataTable { columns, n_rows })
}

pub fn load_csv(path: &Path, schema: &Schema, opts: &LoadOptions) -> Result<DataTable> {
    let file = File::open(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_csv(std::io::BufReader::new(file), schema, opts)
}

/// Body-mass index from weight in kilograms and height in centimetres.
pub fn derive_bmi(weight_kg: &Column, height_cm: &Column, name: &str) -> Result<Column> {
    for c in [weight_kg, height_cm] {
        if c.kind != ColumnKind::Numeric {
            return Err(DatasetError::NotNumeric(c.name.clone()));
        }
    }
    if weight_kg.len() != height_cm.len() {
        return Err(DatasetError::ShapeMismatch {
            column: height_cm.name.clone(),
            len: height_cm.len(),
            expected: weight_kg.len(),
        });
    }
    let mut cells = Vec::with_capacity(weight_kg.len());
    for row in 0..weight_kg.len() {
        if let Some(h) = height_cm.get(row) {
            if h <= 0.0 {
                return Err(DatasetError::NonPositiveHeight { row: row + 1, value: h });
            }
        }
        cells.push(match (weight_kg.get(row), height_cm.get(row)) {
            (Some(w), Some(h)) => {
                let metres = h / 100.0;
                Some(w / (metres * metres))
            }
            _ => None,
        });
    }
    Column::numeric(name, cells)
}

/// Replaces the source columns with their BMI.
pub fn merge_into_bmi(t: &DataTable, weight: &str, height: &str, name: &str) -> Result<DataTable> {
    let bmi = derive_bmi(t.column(weight)?, t.column(height)?, name)?;
    t.without(&[weight, height]).with_column(bmi)
}

/// Reflects an ordinal column about the midpoint of its scale: `v -> min + max - v`.
pub fn reverse_code(col: &Column) -> Result<Column> {
    let ColumnKind::Ordinal { levels } = &col.kind else {
        return Err(DatasetError::NotOrdinal(col.name.clone()));
    };
    let lo = levels[0];
    let hi = levels[levels.len() - 1];
    let reflected: Vec<i64> = levels.iter().rev().map(|l| lo + hi - l).collect();
    if reflected != *levels {
        return Err(DatasetError::InvalidKind {
            column: col.name.clone(),
            reason: "ordinal levels are not symmetric, so reverse coding would leave the scale"
                .into(),
        });
    }
    let mut out = col.clone();
    for (v, &m) in out.values.iter_mut().zip(&col.missing) {
        if !m {
            *v = (lo + hi) as f64 - *v;
        }
    }
    Ok(out)
}

/// Missing-cell counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingReport {
    pub per_column: Vec<(String, usize)>,
    pub total_missing: usize,
    /// Missing cells outside the response column.
    pub predictor_missing: usize,
    pub rows_with_missing_response: usize,
}

impl MissingReport {
    pub fn count(&self, column: &str) -> Option<usize> {
        self.per_column
            .iter()
            .find(|(n, _)| n == column)
            .map(|(_, c)| *c)
    }
}

pub fn missingness_summary(t: &DataTable, response: Option<&str>) -> MissingReport {
    let per_column: Vec<(String, usize)> = t
        .columns
        .iter()
        .map(|c| (c.name.clone(), c.missing_count()))
        .collect();
    let total_missing = per_column.iter().map(|(_, n)| n).sum();
    let (response_missing, rows_with_missing_response) = match response.and_then(|r| t.column(r).ok()) {
        Some(c) => (c.missing_count(), c.missing_count()),
        None => (0, 0),
    };
    MissingReport {
        per_column,
        total_missing,
        predictor_missing: total_missing - response_missing,
        rows_with_missing_response,
    }
}

/// Removes rows whose response cell is missing.
pub fn drop_missing_response(t: &DataTable, response: &str) -> Result<DataTable> {
    let col = t.column(response)?;
    if !matches!(col.kind, ColumnKind::Ordinal { .. }) {
        return Err(DatasetError::NotOrdinal(response.to_string()));
    }
    let keep: Vec<bool> = col.missing.iter().map(|m| !m).collect();
    if t.n_rows > 0 && keep.iter().all(|k| !k) {
        return Err(DatasetError::EmptyAnalysisSet(response.to_string()));
    }
    Ok(t.filter_rows(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn likert(name: &str) -> ColumnSpec {
        ColumnSpec::new(name, ColumnKind::ordinal_range(1, 5))
    }

    fn small_schema() -> Schema {
        Schema::new(vec![
            likert("Opera"),
            ColumnSpec::new("Weight", ColumnKind::Numeric),
            ColumnSpec::new(
                "Smoking",
                ColumnKind::nominal(vec!["never smoked", "tried smoking"], "never smoked"),
            ),
        ])
    }

    #[test]
    fn empty_cell_is_missing() {
        let csv = "Opera,Weight,Smoking\n1,60,never smoked\n2,,tried smoking\n5,80.5,never smoked\n";
        let t = read_csv(csv.as_bytes(), &small_schema(), &LoadOptions::default()).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.total_missing(), 1);
        assert!(t.column("Weight").unwrap().is_missing(1));
        assert_eq!(t.column("Weight").unwrap().get(2), Some(80.5));
    }

    #[test]
    fn header_order_does_not_matter() {
        let csv = "Smoking,Weight,Opera\ntried smoking,NA,3\n";
        let t = read_csv(csv.as_bytes(), &small_schema(), &LoadOptions::default()).unwrap();
        assert_eq!(t.names(), vec!["Opera", "Weight", "Smoking"]);
        assert_eq!(t.column("Opera").unwrap().get(0), Some(3.0));
        assert_eq!(t.column("Smoking").unwrap().format_cell(0), "tried smoking");
    }

    #[test]
    fn out_of_range_level_names_row_and_column() {
        let csv = "Opera,Weight,Smoking\n1,60,never smoked\n6,70,never smoked\n";
        let err = read_csv(csv.as_bytes(), &small_schema(), &LoadOptions::default()).unwrap_err();
        match err {
            DatasetError::Parse { row, column, value, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "Opera");
                assert_eq!(value, "6");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_duplicate_headers() {
        let csv = "Opera,Weight,Smoking,Gender\n1,60,never smoked,male\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &small_schema(), &LoadOptions::default()),
            Err(DatasetError::UnknownColumn(c)) if c == "Gender"
        ));
        let opts = LoadOptions {
            ignore_unknown_columns: true,
            ..LoadOptions::default()
        };
        assert_eq!(read_csv(csv.as_bytes(), &small_schema(), &opts).unwrap().n_cols(), 3);

        let dup = "Opera,Weight,Opera,Smoking\n1,60,1,never smoked\n";
        assert!(matches!(
            read_csv(dup.as_bytes(), &small_schema(), &LoadOptions::default()),
            Err(DatasetError::DuplicateHeader(c)) if c == "Opera"
        ));
        let absent = "Opera,Weight\n1,60\n";
        assert!(matches!(
            read_csv(absent.as_bytes(), &small_schema(), &LoadOptions::default()),
            Err(DatasetError::MissingColumn(c)) if c == "Smoking"
        ));
    }

    #[test]
    fn custom_missing_tokens() {
        let csv = "Opera,Weight,Smoking\n.,60,never smoked\nNA,61,never smoked\n";
        let opts = LoadOptions {
            missing_tokens: [".".to_string()].into_iter().collect(),
            ..LoadOptions::default()
        };
        // "NA" is no longer a missing token, so it fails to parse as a level.
        assert!(read_csv(csv.as_bytes(), &small_schema(), &opts).is_err());
        let csv = "Opera,Weight,Smoking\n.,60,never smoked\n";
        let t = read_csv(csv.as_bytes(), &small_schema(), &opts).unwrap();
        assert_eq!(t.total_missing(), 1);
    }

    #[test]
    fn kind_validation() {
        assert!(ColumnKind::Ordinal { levels: vec![1, 3, 2] }.validate("x").is_err());
        assert!(ColumnKind::nominal(vec!["a", "a"], "a").validate("x").is_err());
        assert!(ColumnKind::nominal(vec!["a", "b"], "c").validate("x").is_err());
        assert!(ColumnKind::nominal(vec!["a", "b"], "b").validate("x").is_ok());
        let bad = Schema::new(vec![likert("a"), likert("a")]);
        assert!(matches!(bad.validate(), Err(DatasetError::DuplicateColumn(_))));
    }

    #[test]
    fn bmi_examples() {
        let w = Column::numeric("w", vec![Some(70.0), None, Some(81.0)]).unwrap();
        let h = Column::numeric("h", vec![Some(175.0), Some(175.0), Some(180.0)]).unwrap();
        let bmi = derive_bmi(&w, &h, "BMI").unwrap();
        assert!((bmi.get(0).unwrap() - 22.857142857142858).abs() < 1e-12);
        assert_eq!(bmi.get(1), None);
        assert!((bmi.get(2).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn bmi_rejects_non_positive_height() {
        let w = Column::numeric("w", vec![Some(70.0), Some(1.0)]).unwrap();
        let h = Column::numeric("h", vec![Some(175.0), Some(0.0)]).unwrap();
        assert!(matches!(
            derive_bmi(&w, &h, "BMI"),
            Err(DatasetError::NonPositiveHeight { row: 2, .. })
        ));
    }

    #[test]
    fn merge_replaces_sources() {
        let t = DataTable::new(vec![
            Column::numeric("Weight", vec![Some(81.0)]).unwrap(),
            Column::numeric("Height", vec![Some(180.0)]).unwrap(),
            Column::ordinal("Opera", vec![1, 2, 3, 4, 5], vec![Some(2)]).unwrap(),
        ])
        .unwrap();
        let merged = merge_into_bmi(&t, "Weight", "Height", "BMI").unwrap();
        assert_eq!(merged.names(), vec!["Opera", "BMI"]);
    }

    #[test]
    fn reverse_code_examples() {
        let c = Column::ordinal("p", vec![1, 2, 3, 4, 5], vec![Some(1), Some(3), None, Some(4)]).unwrap();
        let r = reverse_code(&c).unwrap();
        assert_eq!(r.get(0), Some(5.0));
        assert_eq!(r.get(1), Some(3.0));
        assert_eq!(r.get(2), None);
        assert_eq!(r.get(3), Some(2.0));
        assert_eq!(reverse_code(&r).unwrap(), c);

        let n = Column::numeric("x", vec![Some(1.0)]).unwrap();
        assert!(matches!(reverse_code(&n), Err(DatasetError::NotOrdinal(_))));
    }

    #[test]
    fn missingness_counts() {
        let t = DataTable::new(vec![
            Column::ordinal("y", vec![1, 2, 3], vec![Some(1), None, Some(3), Some(2)]).unwrap(),
            Column::numeric("x", vec![None, Some(1.0), None, Some(2.0)]).unwrap(),
        ])
        .unwrap();
        let rep = missingness_summary(&t, Some("y"));
        assert_eq!(rep.count("x"), Some(2));
        assert_eq!(rep.total_missing, 3);
        assert_eq!(rep.predictor_missing, 2);
        assert_eq!(rep.rows_with_missing_response, 1);

        let complete = t.filter_rows(&[true, false, true, true]).select(&["y"]).unwrap();
        assert_eq!(missingness_summary(&complete, Some("y")).total_missing, 0);
    }

    #[test]
    fn dropping_missing_responses() {
        let t = DataTable::new(vec![
            Column::ordinal("y", vec![1, 2, 3], vec![Some(1), None, Some(3), None]).unwrap(),
            Column::numeric("x", vec![None, Some(1.0), None, Some(2.0)]).unwrap(),
        ])
        .unwrap();
        let d = drop_missing_response(&t, "y").unwrap();
        assert_eq!(d.n_rows(), 2);
        assert_eq!(d.column("x").unwrap().missing_count(), 2);

        let full = t.filter_rows(&[true, false, true, false]);
        assert_eq!(drop_missing_response(&full, "y").unwrap(), full);

        let none = t.filter_rows(&[false, true, false, true]);
        assert!(matches!(
            drop_missing_response(&none, "y"),
            Err(DatasetError::EmptyAnalysisSet(_))
        ));
        assert!(matches!(
            drop_missing_response(&t, "z"),
            Err(DatasetError::ColumnNotFound(_))
        ));
    }

    fn arb_table() -> impl Strategy<Value = DataTable> {
        (1usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::option::of(-1e6f64..1e6), n),
                prop::collection::vec(prop::option::of(1i64..=5), n),
                prop::collection::vec(prop::option::of(0usize..3), n),
            )
                .prop_map(|(num, ord, nom)| {
                    let labels = ["a", "b, quoted \"c\"", "d"];
                    DataTable::new(vec![
                        Column::numeric("num", num).unwrap(),
                        Column::ordinal("ord", vec![1, 2, 3, 4, 5], ord).unwrap(),
                        Column::nominal(
                            "nom",
                            labels.to_vec(),
                            "a",
                            nom.into_iter().map(|o| o.map(|i| labels[i])).collect(),
                        )
                        .unwrap(),
                    ])
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(t in arb_table()) {
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let opts = LoadOptions { missing_tokens: [String::new()].into_iter().collect(), ..LoadOptions::default() };
            let back = read_csv(buf.as_slice(), &t.schema(), &opts).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn reverse_code_is_involution(t in arb_table()) {
            let c = t.column("ord").unwrap();
            prop_assert_eq!(&reverse_code(&reverse_code(c).unwrap()).unwrap(), c);
        }

        #[test]
        fn bmi_matches_scalar_arithmetic(w in 20.0f64..200.0, h in 100.0f64..220.0) {
            let wc = Column::numeric("w", vec![Some(w)]).unwrap();
            let hc = Column::numeric("h", vec![Some(h)]).unwrap();
            let got = derive_bmi(&wc, &hc, "b").unwrap().get(0).unwrap();
            let expected = w * 10_000.0 / (h * h);
            prop_assert!(((got - expected) / expected).abs() < 1e-12);
        }

        #[test]
        fn dropping_responses_only_removes_rows(t in arb_table()) {
            let before = missingness_summary(&t, Some("ord"));
            if let Ok(d) = drop_missing_response(&t, "ord") {
                let after = missingness_summary(&d, Some("ord"));
                prop_assert!(after.predictor_missing <= before.predictor_missing);
                prop_assert_eq!(after.rows_with_missing_response, 0);
                prop_assert_eq!(d.n_rows(), t.n_rows() - before.rows_with_missing_response);
                let kept: Vec<bool> = t.column("ord").unwrap().missing_mask().iter().map(|m| !m).collect();
                prop_assert_eq!(t.filter_rows(&kept), d);
            }
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = read_csv(bytes.as_slice(), &small_schema(), &LoadOptions::default());
        }
    }
}
