//! Replays the checked-in fuzz seeds through the same properties the fuzz
//! targets check, so the corpus stays exercised without cargo-fuzz.

use std::path::{Path, PathBuf};

use decoupled_isp::checkpoint::TensorFile;
use decoupled_isp::config::RunConfig;
use decoupled_isp::imaging::RgbImage;
use decoupled_isp::manifest::PairManifest;
use decoupled_isp::raw::BayerRaw;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (path, bytes) in seeds("config") {
        let Ok(text) = std::str::from_utf8(&bytes) else {
            continue;
        };
        if let Ok(cfg) = RunConfig::from_toml(text, &[]) {
            let again = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
            assert_eq!(again.fingerprint(), cfg.fingerprint(), "{}", path.display());
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn manifest_seeds() {
    let mut accepted = 0;
    for (path, bytes) in seeds("manifest") {
        let Ok(text) = std::str::from_utf8(&bytes) else {
            continue;
        };
        if let Ok(m) = PairManifest::parse(text) {
            assert_eq!(PairManifest::parse(&m.to_json()).unwrap(), m, "{}", path.display());
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn checkpoint_seeds() {
    let mut accepted = 0;
    for (path, bytes) in seeds("checkpoint") {
        if let Ok(f) = TensorFile::decode(&bytes) {
            let again = TensorFile::decode(&f.encode().unwrap()).unwrap();
            assert_eq!(again.meta, f.meta, "{}", path.display());
            assert_eq!(again.tensors.len(), f.tensors.len());
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn raw_png_seeds() {
    let mut accepted = 0;
    for (path, bytes) in seeds("raw_png") {
        for depth in [10, 12] {
            if let Ok(raw) = BayerRaw::decode_png(&bytes, depth) {
                let again = BayerRaw::decode_png(&raw.encode_png().unwrap(), depth).unwrap();
                assert_eq!(again.pixels(), raw.pixels(), "{}", path.display());
                accepted += 1;
            }
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn srgb_png_seeds() {
    let mut accepted = 0;
    for (path, bytes) in seeds("srgb_png") {
        if let Ok(img) = RgbImage::decode_png(&bytes) {
            let again = RgbImage::decode_png(&img.encode_png().unwrap()).unwrap();
            assert_eq!(again, img, "{}", path.display());
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}
