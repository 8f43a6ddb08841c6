#![no_main]
use libfuzzer_sys::fuzz_target;
use ordmi::dataset::read_raw_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_raw_csv(data);
});
