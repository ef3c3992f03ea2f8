#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(pairs) = tempotrack::config::parse_kv(s) {
            let mut cfg = tempotrack::config::RunConfig::default();
            for (k, v) in &pairs {
                let _ = cfg.apply(k, v);
            }
        }
    }
});
