//! Embedding text format: both the self-sizing and the fixed-width paths
//! must reject or accept without panicking, and a fixed width must hold.

#![no_main]

use libfuzzer_sys::fuzz_target;

use gruc::embeddings::EmbeddingTable;

fuzz_target!(|data: &[u8]| {
    let _ = EmbeddingTable::from_reader(data, None, "<fuzz>");
    if let Ok(table) = EmbeddingTable::from_reader(data, Some(4), "<fuzz>") {
        assert_eq!(table.dim(), 4, "fixed-width load produced another width");
    }
});
