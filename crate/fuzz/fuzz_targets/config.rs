#![no_main]

use decoupled_isp::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::from_toml(text, &[]) {
        let again = RunConfig::from_toml(&cfg.to_toml(), &[]).expect("serialized config parses");
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }
});
