#![no_main]

use libfuzzer_sys::fuzz_target;
use ornk::config::parse_run_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = parse_run_config(data) {
        let text = toml::to_string_pretty(&config).expect("validated config serializes");
        let again = parse_run_config(text.as_bytes()).expect("canonical config reparses");
        assert_eq!(again.hash(), config.hash(), "round trip changed the content hash");
    }
});
