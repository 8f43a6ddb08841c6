mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::{Survey, RESPONSE};
use ordmi::config::PipelineConfig;
use ordmi::dataset::read_raw_csv;
use ordmi::pipeline::{self, RunManifest, Stage};

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_file(&Survey::default().write(tmp.path(), "")).unwrap();
    let out = tmp.path().join("results");
    let report = pipeline::run_full(&cfg, &out).unwrap();

    let written = files(&out);
    for name in [
        "coefficients.csv",
        "intercepts.csv",
        "correlations.csv",
        "chisq.csv",
        "missingness.csv",
        "heatmap.svg",
        "response.svg",
        "outdata1.csv",
        "outdata5.csv",
        "manifest.json",
        "report.txt",
    ] {
        assert!(written.contains_key(name), "missing {name}");
    }
    assert!(!written.contains_key("outdata6.csv"));
    for (name, bytes) in &written {
        if name.ends_with(".csv") {
            let raw = read_raw_csv(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!raw.headers.is_empty(), "{name}");
        }
    }

    let manifest: RunManifest = serde_json::from_slice(&written["manifest.json"]).unwrap();
    assert_eq!(manifest.rows_loaded, 600);
    assert_eq!(manifest.rows_dropped_missing_response, 6);
    assert_eq!(manifest.rows_analysed, 594);
    assert_eq!(manifest.replicates.len(), 5);
    assert_eq!(manifest.files.len(), written.len());
    assert!(manifest.collinear_pairs.iter().any(|p| {
        let pair = [p.first.as_str(), p.second.as_str()];
        pair.contains(&"Height") && pair.contains(&"Weight")
    }));
    // every retained term is significant in the full model and keeps its sign there
    for term in &report.retained {
        assert!(report.full.get(term).unwrap().p_value < cfg.alpha);
    }
    assert_eq!(report.pooled.coefficients().count(), report.retained.len());
    assert_eq!(report.pooled.cutpoints().count(), 4);
    // the simulated effects of the strongest predictors come through
    assert!(report.full.get("Hiphop, Rap").unwrap().mean < 0.0);
    assert!(report.full.get("Smoking[tried smoking]").unwrap().mean > 0.0);

    let r2 = &manifest.mcfadden;
    assert_eq!(r2.per_dataset.len(), 5);
    assert!(r2.min <= r2.mean && r2.mean <= r2.max && r2.min > 0.0);
    let text = String::from_utf8(written["report.txt"].clone()).unwrap();
    assert!(text.contains("Prediction equations"));
    assert!(text.contains("P(Y <= 4)"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::from_file(&Survey::default().write(tmp.path(), "")).unwrap();
    pipeline::run_full(&cfg, &tmp.path().join("a")).unwrap();
    pipeline::run_full(&cfg, &tmp.path().join("b")).unwrap();
    cfg.parallel = false;
    pipeline::run_full(&cfg, &tmp.path().join("c")).unwrap();
    let a = files(&tmp.path().join("a"));
    assert_eq!(a, files(&tmp.path().join("b")));
    assert_eq!(a, files(&tmp.path().join("c")));

    cfg.seed += 1;
    pipeline::run_full(&cfg, &tmp.path().join("d")).unwrap();
    assert_ne!(a["outdata1.csv"], files(&tmp.path().join("d"))["outdata1.csv"]);
}

#[test]
fn complete_data_gives_between_variance_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let survey = Survey {
        missing_rate: 0.0,
        missing_responses: 0,
        ..Survey::default()
    };
    let cfg = PipelineConfig::from_file(&survey.write(tmp.path(), "")).unwrap();
    let report = pipeline::run_full(&cfg, &tmp.path().join("out")).unwrap();
    let first = &report.fits[0];
    assert!(report.fits.iter().all(|f| f == first));
    let se = first.std_errors();
    for (k, row) in report.pooled.rows.iter().enumerate() {
        assert_eq!(row.between_var, 0.0);
        assert_eq!(row.pooled_se, se[k]);
        assert_eq!(row.df, None);
    }
    let inspect = pipeline::run_inspect(&cfg, &tmp.path().join("inspect")).unwrap();
    assert_eq!(inspect.missing.total_missing, 0);
    assert!(inspect.missing.per_column.iter().all(|(_, k)| *k == 0));
}

#[test]
fn stage_commands_agree_with_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_file(&Survey::default().write(tmp.path(), "")).unwrap();
    let full = tmp.path().join("full");
    pipeline::run_full(&cfg, &full).unwrap();
    let staged = tmp.path().join("staged");
    pipeline::run_impute(&cfg, &staged).unwrap();
    pipeline::run_fit(&cfg, &staged).unwrap();
    pipeline::run_pool(&cfg, &staged).unwrap();
    let a = files(&full);
    let b = files(&staged);
    assert_eq!(a["outdata3.csv"], b["outdata3.csv"]);
    assert_eq!(a["full_model.csv"], b["pooled.csv"]);
}

#[test]
fn response_chart_counts_reverse_coded_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let survey = Survey::default();
    let cfg = PipelineConfig::from_file(&survey.write(tmp.path(), "")).unwrap();
    let r = pipeline::run_inspect(&cfg, &tmp.path().join("out")).unwrap();
    let raw = survey.table();
    let col = raw.column(RESPONSE).unwrap();
    for (level, count) in &r.response_counts {
        let stored = (0..col.len()).filter(|&i| col.get(i) == Some((6 - level) as f64)).count();
        assert_eq!(*count, stored);
    }
    let svg = fs::read_to_string(tmp.path().join("out/response.svg")).unwrap();
    assert_eq!(svg.matches("data-level=").count(), 5);
    assert_eq!(r.missing.rows_with_missing_response, 6);
}

#[test]
fn screening_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let one = Survey::default().write(tmp.path(), r#", "correlation_variables": ["Opera"]"#);
    let r = pipeline::run_screen(&PipelineConfig::from_file(&one).unwrap(), &tmp.path().join("one")).unwrap();
    assert_eq!(r.correlations.names, vec!["Opera"]);
    assert_eq!(r.correlations.r, vec![vec![Some(1.0)]]);
    assert!(r.flagged.is_empty());

    let nominal = Survey::default().write(
        tmp.path(),
        r#", "correlation_variables": [], "chi_square_variables": ["Smoking", "Village - town"]"#,
    );
    let r = pipeline::run_screen(&PipelineConfig::from_file(&nominal).unwrap(), &tmp.path().join("nom")).unwrap();
    assert!(r.correlations.names.is_empty());
    assert_eq!(r.chi_square.len(), 2);
    assert!(r.chi_square.iter().all(|c| c.result.is_some()));
    let csv = fs::read(tmp.path().join("nom/chisq.csv")).unwrap();
    assert_eq!(read_raw_csv(csv.as_slice()).unwrap().records.len(), 2);
}

#[test]
fn failures_name_the_stage_and_quarantine_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::from_file(&Survey::default().write(tmp.path(), "")).unwrap();
    cfg.data_path = tmp.path().join("nope.csv");
    let err = pipeline::run_inspect(&cfg, &tmp.path().join("x")).unwrap_err();
    assert_eq!(err.stage, Stage::Load);

    // heights of zero make BMI undefined after inspect and screen have written files
    let text = fs::read_to_string(tmp.path().join("survey.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let h = header.iter().position(|c| *c == "Height").unwrap() - 1; // "Hiphop, Rap" is quoted
    let mut cells: Vec<String> = lines[3].split(',').map(String::from).collect();
    cells[h] = "0".into();
    lines[3] = cells.join(",");
    fs::write(tmp.path().join("survey.csv"), lines.join("\n")).unwrap();
    cfg.data_path = tmp.path().join("survey.csv");
    let out = tmp.path().join("q");
    let err = pipeline::run_full(&cfg, &out).unwrap_err();
    assert_eq!(err.stage, Stage::Prepare, "{err}");
    assert!(!out.join("missingness.csv").exists());
    assert!(out.join("quarantine/missingness.csv").exists());
    assert!(out.join("quarantine/heatmap.svg").exists());
}
