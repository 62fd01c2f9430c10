#![no_main]
use bivsr::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let emitted = cfg.to_toml_string().expect("valid config serializes");
        assert_eq!(RunConfig::from_toml_str(&emitted).expect("emitted config parses"), cfg);
    }
});
