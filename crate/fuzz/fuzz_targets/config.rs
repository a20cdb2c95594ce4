#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = repaint_core::pipeline::PipelineConfig::from_json_str(text);
    let _ = repaint_core::io::RunConfig::from_json_str(text);
});
