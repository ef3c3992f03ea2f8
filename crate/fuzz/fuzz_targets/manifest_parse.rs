#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // checkpoint manifests are loaded before any weights are trusted;
    // the parser must reject corruption without panicking or allocating
    // absurd amounts
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = tempotrack::checkpoint::parse_manifest(s);
    }
});
