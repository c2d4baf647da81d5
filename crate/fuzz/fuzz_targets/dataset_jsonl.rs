//! JSONL datasets: parsing must never panic, and accepted datasets must
//! round-trip line by line.

#![no_main]

use libfuzzer_sys::fuzz_target;

use gruc::graphs::{parse_dataset, parse_instance};

fuzz_target!(|data: &[u8]| {
    if let Ok(instances) = parse_dataset(data, "<fuzz>") {
        for instance in &instances {
            let line = serde_json::to_string(instance).expect("accepted instance serializes");
            let reparsed = parse_instance(&line, "<fuzz>").expect("own output parses");
            assert_eq!(*instance, reparsed, "round trip changed an instance");
        }
    }
});
