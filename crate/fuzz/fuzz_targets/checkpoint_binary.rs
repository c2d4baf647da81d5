//! Checkpoint decoder: arbitrary bytes must be cleanly rejected or decode to
//! a checkpoint whose own encoding decodes again.

#![no_main]

use libfuzzer_sys::fuzz_target;

use gruc::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(checkpoint) = Checkpoint::from_bytes(data) {
        let bytes = checkpoint.to_bytes().expect("accepted checkpoint encodes");
        Checkpoint::from_bytes(&bytes).expect("own encoding decodes");
    }
});
