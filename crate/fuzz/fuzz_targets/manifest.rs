#![no_main]

use decoupled_isp::manifest::PairManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(m) = PairManifest::parse(text) {
        let again = PairManifest::parse(&m.to_json()).expect("serialized manifest parses");
        assert_eq!(again, m);
    }
});
