#![no_main]
use libfuzzer_sys::fuzz_target;
use ordmi::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = PipelineConfig::from_json_str(s);
    }
});
