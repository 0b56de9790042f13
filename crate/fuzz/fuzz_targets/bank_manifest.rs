#![no_main]

use libfuzzer_sys::fuzz_target;
use ornk::ranking::parse_bank_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = parse_bank_manifest(data) {
        let json = serde_json::to_vec(&manifest).expect("validated manifest serializes");
        let again = parse_bank_manifest(&json).expect("canonical manifest reparses");
        assert_eq!(
            serde_json::to_vec(&again).expect("reserializes"),
            json,
            "round trip changed the manifest"
        );
    }
});
