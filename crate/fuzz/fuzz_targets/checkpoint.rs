#![no_main]

use libfuzzer_sys::fuzz_target;
use ornk::tensor::{parse_checkpoint, serialize_checkpoint};

// The binary format is canonical: anything that parses must reserialize
// to the exact input bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok((meta, params)) = parse_checkpoint(data) {
        let bytes = serialize_checkpoint(&params, &meta).expect("parsed checkpoint reserializes");
        assert_eq!(bytes, data, "round trip changed the bytes");
    }
});
