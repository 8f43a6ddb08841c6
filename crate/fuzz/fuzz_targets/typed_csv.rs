#![no_main]
use libfuzzer_sys::fuzz_target;
use ordmi::dataset::{missingness_summary, read_csv, ColumnKind, ColumnSpec, LoadOptions, Schema};

// A fixed schema with one column of each kind; the input is the CSV body.
fuzz_target!(|data: &[u8]| {
    let schema = Schema::new(vec![
        ColumnSpec::new("y", ColumnKind::ordinal_range(1, 5)),
        ColumnSpec::new("group", ColumnKind::nominal(vec!["a", "b"], "a")),
        ColumnSpec::new("x", ColumnKind::Numeric),
    ]);
    if let Ok(t) = read_csv(data, &schema, &LoadOptions::default()) {
        let _ = missingness_summary(&t, Some("y"));
    }
});
