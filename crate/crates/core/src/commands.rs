//! Subcommand implementations behind the `disp` binary.
//!
//! Each command reads the run config, applies overrides and writes all of
//! its artifacts under the output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::manifest::{train_count, ManifestEntry, PairManifest, Split};
use crate::metrics::{error_map, EvalReport};
use crate::raw::{procedural_scene, synth_pair, BayerRaw};
use crate::rng;
use crate::trainer::{evaluate, run_stage1, run_stage2, Pipeline, StageReport, TrainOptions, TrainingSet};

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl CommonArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = RunConfig::load(&self.config, &overrides)?;
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        Ok(cfg)
    }
}

fn write_config(cfg: &RunConfig, out_dir: &Path, name: &str) -> Result<()> {
    let path = out_dir.join(name);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(path, e))
}

fn even_crop(img: &RgbImage) -> Result<RgbImage> {
    img.crop(0, 0, img.width() & !1, img.height() & !1)
}

/// Synthesizes RAW/sRGB pairs from a directory of sRGB PNGs, or from
/// procedural scenes when `source` is `None`, and writes a manifest.
pub fn cmd_synth(args: &CommonArgs, source: Option<&Path>, count: Option<usize>) -> Result<PathBuf> {
    let cfg = args.load()?;
    let mut images: Vec<(String, RgbImage)> = Vec::new();
    match source {
        Some(dir) => {
            let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut paths: Vec<PathBuf> = listing
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG images in source directory"),
                ));
            }
            for p in paths.into_iter().take(count.unwrap_or(usize::MAX)) {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                images.push((stem, even_crop(&RgbImage::read_png(&p)?)?));
            }
        }
        None => {
            let n = count.unwrap_or(cfg.procedural_pairs);
            for i in 0..n {
                let seed = rng::derive_seed(cfg.seed, &[0x5CE4E, i as u64]);
                images.push((
                    format!("{i:04}"),
                    procedural_scene(cfg.synth_size, cfg.synth_size, seed),
                ));
            }
        }
    }
    let n_train = train_count(images.len(), cfg.train_ratio);
    let mut entries = Vec::new();
    for dir in ["raw", "srgb"] {
        let d = args.out_dir.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (stem, img)) in images.iter().enumerate() {
        let (raw, srgb) = synth_pair(img, &cfg.degradation(), rng::derive_seed(cfg.seed, &[0x5F7, i as u64]))?;
        let raw_rel = PathBuf::from("raw").join(format!("{stem}.png"));
        let srgb_rel = PathBuf::from("srgb").join(format!("{stem}.png"));
        raw.write_png(&args.out_dir.join(&raw_rel))?;
        srgb.write_png(&args.out_dir.join(&srgb_rel))?;
        entries.push(ManifestEntry {
            raw: raw_rel,
            srgb: srgb_rel,
            split: if i < n_train { Split::Train } else { Split::Val },
        });
    }
    let manifest = PairManifest {
        bit_depth: cfg.bit_depth,
        dataset: "synthetic".into(),
        entries,
    };
    manifest.check()?;
    let path = args.out_dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "wrote {} pairs ({n_train} train) to {}",
        images.len(),
        args.out_dir.display()
    );
    Ok(path)
}

/// Stage-1 training.
pub fn cmd_train_codec(args: &CommonArgs, resume: Option<&Path>) -> Result<StageReport> {
    let mut cfg = args.load()?;
    cfg.stage = 1;
    write_config(&cfg, &args.out_dir, "stage1_config.toml")?;
    let pipe = Pipeline::new(&cfg)?;
    let data = TrainingSet::from_config(&cfg)?;
    let opts = TrainOptions {
        out_dir: args.out_dir.clone(),
        resume: resume.map(Path::to_path_buf),
    };
    run_stage1(&cfg, &pipe, &data, &opts)
}

/// Stage-2 training on top of a stage-1 checkpoint directory. Fails if the
/// codec parameters changed during the run.
pub fn cmd_train_diffusion(
    args: &CommonArgs,
    stage1: &Path,
    resume: Option<&Path>,
    no_tel: bool,
    no_ccl: bool,
) -> Result<StageReport> {
    let mut cfg = args.load()?;
    cfg.stage = 2;
    if no_tel {
        cfg.lambda_tel = 0.0;
    }
    if no_ccl {
        cfg.lambda_ccl = 0.0;
    }
    write_config(&cfg, &args.out_dir, "stage2_config.toml")?;
    let pipe = Pipeline::new(&cfg)?;
    pipe.load_codec(stage1)?;
    let before = pipe.codec.params().snapshot()?;
    let data = TrainingSet::from_config(&cfg)?;
    let opts = TrainOptions {
        out_dir: args.out_dir.clone(),
        resume: resume.map(Path::to_path_buf),
    };
    let report = run_stage2(&cfg, &pipe, &data, stage1, &opts)?;
    if pipe.codec.params().snapshot()? != before {
        return Err(Error::Validation("codec parameters changed during stage 2".into()));
    }
    Ok(report)
}

/// Runs the full pipeline on each RAW PNG; with ground truths, also writes
/// `<stem>_error.png`. Returns the written output paths.
pub fn cmd_infer(args: &CommonArgs, checkpoint: &Path, inputs: &[PathBuf], gts: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let cfg = args.load()?;
    if !gts.is_empty() && gts.len() != inputs.len() {
        return Err(Error::config(
            "with-gt",
            format!("{} ground truths for {} inputs", gts.len(), inputs.len()),
        ));
    }
    let mut stems = BTreeSet::new();
    for p in inputs {
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if !stems.insert(stem.clone()) {
            return Err(Error::config("inputs", format!("two inputs share the name {stem:?}")));
        }
    }
    let pipe = Pipeline::new(&cfg)?;
    pipe.load_all(checkpoint)?;
    let mut written = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let raw = BayerRaw::read_png(path, cfg.bit_depth)?;
        let out = pipe.infer(&raw, rng::derive_seed(cfg.seed, &[i as u64]))?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let dst = args.out_dir.join(format!("{stem}.png"));
        out.write_png(&dst)?;
        if let Some(gt) = gts.get(i) {
            let gt = RgbImage::read_png(gt)?;
            error_map(&out, &gt)?.write_png(&args.out_dir.join(format!("{stem}_error.png")))?;
        }
        written.push(dst);
    }
    Ok(written)
}

/// Scores the validation split of the configured manifest; writes
/// `report.json` and one comparison strip per image under `montage/`.
pub fn cmd_eval(args: &CommonArgs, checkpoint: &Path) -> Result<EvalReport> {
    let cfg = args.load()?;
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::config("manifest", "evaluation needs a manifest"))?;
    let manifest = PairManifest::load(&manifest_path)?;
    let pipe = Pipeline::new(&cfg)?;
    pipe.load_all(checkpoint)?;
    let report = evaluate(&manifest, &pipe, &cfg, Some(&args.out_dir.join("montage")))?;
    let path = args.out_dir.join("report.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
