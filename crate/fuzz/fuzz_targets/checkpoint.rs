#![no_main]

use decoupled_isp::checkpoint::TensorFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = TensorFile::decode(data) {
        let bytes = f.encode().expect("decoded checkpoint re-encodes");
        let again = TensorFile::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.meta, f.meta);
        assert_eq!(again.tensors.len(), f.tensors.len());
    }
});
