#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // ground-truth and tracker result files share the x,y,w,h line format;
    // parsing must never panic on arbitrary text
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = tempotrack::dataset::parse_groundtruth(s);
    }
});
