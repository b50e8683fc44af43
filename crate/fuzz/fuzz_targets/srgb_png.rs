#![no_main]

use decoupled_isp::imaging::RgbImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RgbImage::decode_png(data) {
        let png = img.encode_png().expect("decoded image re-encodes");
        let again = RgbImage::decode_png(&png).expect("re-encoded image decodes");
        assert_eq!(again, img);
    }
});
