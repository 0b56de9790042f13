#![no_main]

use libfuzzer_sys::fuzz_target;
use ornk::roi_cache::{parse_roi, serialize_roi};

fuzz_target!(|data: &[u8]| {
    if let Ok(entry) = parse_roi(data) {
        let bytes = serialize_roi(&entry).expect("parsed entry reserializes");
        assert_eq!(bytes, data, "round trip changed the bytes");
    }
});
