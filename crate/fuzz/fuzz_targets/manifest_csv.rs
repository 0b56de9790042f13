#![no_main]

use libfuzzer_sys::fuzz_target;
use ornk::manifest::parse_manifest;

// CSV admits cosmetic variation, so the oracle is idempotence through
// the canonical form rather than byte equality.
fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = parse_manifest(data) {
        let csv = manifest.to_csv();
        let again = parse_manifest(csv.as_bytes()).expect("canonical manifest reparses");
        assert_eq!(again, manifest, "round trip changed the rows");
    }
});
