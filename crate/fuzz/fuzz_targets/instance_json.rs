//! Instance JSON: anything may be rejected, but whatever parses must survive
//! a serialize/reparse round trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;

use gruc::graphs::parse_instance;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(bundle) = parse_instance(text, "<fuzz>") {
        let again = serde_json::to_string(&bundle).expect("accepted instance serializes");
        let reparsed = parse_instance(&again, "<fuzz>").expect("own output parses");
        assert_eq!(bundle, reparsed, "round trip changed the instance");
    }
});
