#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = repaint_core::io::pfm::parse_frames(data) {
        let _ = repaint_core::io::pfm::encode_frames(&frames);
    }
});
