#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(obj) = repaint_core::io::obj::parse_obj(text) {
        let _ = repaint_core::io::obj::build_mesh(&obj, None, None);
    }
    let _ = repaint_core::io::obj::parse_mtl(text);
});
