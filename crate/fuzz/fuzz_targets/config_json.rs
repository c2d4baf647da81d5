//! Config JSON: malformed or out-of-range configs must be rejected, valid
//! ones must round-trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;

use gruc::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = Config::from_json(text) {
        let again = serde_json::to_string(&config).expect("accepted config serializes");
        let reparsed = Config::from_json(&again).expect("own output parses");
        assert_eq!(config, reparsed, "round trip changed the config");
    }
});
