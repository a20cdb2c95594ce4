#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = repaint_core::io::ply::parse_gaussians(data) {
        let _ = repaint_core::io::ply::encode_gaussians(&cloud);
    }
});
