#![no_main]

use escore::experiment::RunConfig;
use libfuzzer_sys::fuzz_target;

// Input: a JSON document, optionally followed by NUL-separated `key=value`
// overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut parts = text.split('\0');
    let doc = parts.next().filter(|s| !s.trim().is_empty());
    let overrides: Vec<String> = parts.map(str::to_string).collect();
    if let Ok(cfg) = RunConfig::resolve(doc, &overrides) {
        let back = RunConfig::resolve(Some(&cfg.to_pretty_json()), &[]).expect("resolved config re-parses");
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }
});
