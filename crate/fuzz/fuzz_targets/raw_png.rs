#![no_main]

use decoupled_isp::raw::BayerRaw;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for depth in [10, 12] {
        if let Ok(raw) = BayerRaw::decode_png(data, depth) {
            let png = raw.encode_png().expect("decoded raw re-encodes");
            let again = BayerRaw::decode_png(&png, depth).expect("re-encoded raw decodes");
            assert_eq!(again.pixels(), raw.pixels());
        }
    }
});
