//! Two-stage training, inference and evaluation.
//!
//! Stage 1 fits the codec on RAW, grayscale and sRGB reconstructions. Stage 2
//! freezes the codec and fits the noise predictor and the colorization module
//! on cached latents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointDir, TrainState};
use crate::codec::{Codec, LatentFeature, Modality};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hccm::{ccl_loss, fea_loss, hccm_loss, image_histogram, Hccm};
use crate::imaging::{montage, to_grayscale, GrayImage, RgbImage};
use crate::manifest::{PairManifest, Split};
use crate::metrics::{error_map, histogram_l2, psnr, ssim, EvalReport, EvalRow};
use crate::nn::loss::scalar;
use crate::nn::{Adam, StepDecay};
use crate::raw::{extract_patches, normalize_raw, procedural_scene, synth_pair, BayerRaw};
use crate::rng;
use crate::schedule::{NoiseSchedule, SamplerConfig};
use crate::tadm::{diffusion_loss, sample, NoisePredictor};

const TAG_BATCH: u64 = 0xBA7C;
const TAG_NOISE: u64 = 0xD1FF;
const TAG_SCENE: u64 = 0x5CE4E;
const TAG_SYNTH: u64 = 0x5F7;
const TAG_PATCH: u64 = 0xA7C;

/// All three networks plus the schedule they were built for.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub codec: Codec,
    pub predictor: NoisePredictor,
    pub hccm: Hccm,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    fingerprint: String,
}

impl Pipeline {
    /// Freshly initialized networks for `cfg`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let dtype = cfg.dtype();
        Ok(Self {
            codec: Codec::new(cfg.codec(), cfg.seed, dtype)?,
            predictor: NoisePredictor::new(cfg.predictor(), &schedule, cfg.seed, dtype)?,
            hccm: Hccm::new(cfg.hccm(), cfg.seed, dtype)?,
            sampler: cfg.sampler()?,
            schedule,
            fingerprint: cfg.fingerprint(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.codec.dtype()
    }

    fn codec_arch(&self) -> serde_json::Value {
        serde_json::to_value(self.codec.config()).expect("serializable")
    }

    fn predictor_arch(&self) -> serde_json::Value {
        serde_json::to_value(self.predictor.config()).expect("serializable")
    }

    fn hccm_arch(&self) -> serde_json::Value {
        serde_json::to_value(self.hccm.config()).expect("serializable")
    }

    fn meta(&self) -> Vec<(&'static str, String)> {
        vec![("config_fingerprint", self.fingerprint.clone())]
    }

    pub fn save_codec(&self, dir: &Path) -> Result<()> {
        let d = CheckpointDir(dir.to_path_buf());
        checkpoint::save_params(
            &d.codec(),
            "codec",
            self.codec.params(),
            &self.codec_arch(),
            &self.meta(),
        )
    }

    /// Writes every network into `dir`.
    pub fn save_all(&self, dir: &Path) -> Result<()> {
        let d = CheckpointDir(dir.to_path_buf());
        self.save_codec(dir)?;
        let mut meta = self.meta();
        meta.push((
            "schedule",
            serde_json::to_string(&self.schedule.fingerprint()).expect("serializable"),
        ));
        checkpoint::save_params(
            &d.predictor(),
            "predictor",
            self.predictor.params(),
            &self.predictor_arch(),
            &meta,
        )?;
        checkpoint::save_params(&d.hccm(), "hccm", self.hccm.params(), &self.hccm_arch(), &self.meta())
    }

    pub fn load_codec(&self, dir: &Path) -> Result<()> {
        let path = CheckpointDir(dir.to_path_buf()).codec();
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "codec checkpoint not found"),
            ));
        }
        checkpoint::load_params(&path, "codec", self.codec.params(), &self.codec_arch())?;
        Ok(())
    }

    /// Loads every network from `dir`, refusing a schedule mismatch.
    pub fn load_all(&self, dir: &Path) -> Result<()> {
        let d = CheckpointDir(dir.to_path_buf());
        self.load_codec(dir)?;
        let f = checkpoint::TensorFile::read(&d.predictor())?;
        checkpoint::check_schedule(&f, &self.schedule.fingerprint())?;
        checkpoint::load_params(
            &d.predictor(),
            "predictor",
            self.predictor.params(),
            &self.predictor_arch(),
        )?;
        checkpoint::load_params(&d.hccm(), "hccm", self.hccm.params(), &self.hccm_arch())?;
        Ok(())
    }

    /// RAW mosaics `(B, 1, H, W)` → sRGB `(B, 3, H, W)`: encode, sample the
    /// grayscale latent, colorize, decode.
    pub fn infer_tensor(&self, raw: &Tensor, seed: u64) -> Result<Tensor> {
        let f_r = self.codec.encode(&raw.to_dtype(self.dtype())?, Modality::Raw)?.detach();
        let g = sample(f_r.values(), &self.schedule, &self.sampler, &self.predictor, seed)?;
        let out = self.hccm.forward(&f_r, &g)?;
        Ok(self.codec.decode(&out.srgb, Modality::Srgb)?.detach())
    }

    pub fn infer_mosaic(&self, mosaic: &GrayImage, seed: u64) -> Result<RgbImage> {
        let out = self.infer_tensor(&mosaic.to_tensor(self.dtype())?, seed)?;
        RgbImage::from_tensor(&out)
    }

    pub fn infer(&self, raw: &BayerRaw, seed: u64) -> Result<RgbImage> {
        self.infer_mosaic(&normalize_raw(raw)?, seed)
    }
}

/// Aligned training patches stacked as tensors.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub raw: Tensor,
    pub gray: Tensor,
    pub srgb: Tensor,
    pub srgb_images: Vec<RgbImage>,
}

impl TrainingSet {
    /// From normalized mosaics and their sRGB targets.
    pub fn from_pairs(pairs: &[(GrayImage, RgbImage)], dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let mut raw = Vec::new();
        let mut gray = Vec::new();
        let mut srgb = Vec::new();
        for (m, s) in pairs {
            raw.push(m.to_tensor(dtype)?);
            gray.push(to_grayscale(s).to_tensor(dtype)?);
            srgb.push(s.to_tensor(dtype)?);
        }
        Ok(Self {
            raw: Tensor::cat(&raw, 0)?,
            gray: Tensor::cat(&gray, 0)?,
            srgb: Tensor::cat(&srgb, 0)?,
            srgb_images: pairs.iter().map(|(_, s)| s.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.srgb_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.srgb_images.is_empty()
    }

    /// Procedural scenes passed through the synthetic degradation.
    pub fn procedural(cfg: &RunConfig) -> Result<Self> {
        let pairs = (0..cfg.procedural_pairs as u64)
            .map(|i| {
                let scene = procedural_scene(
                    cfg.patch_size,
                    cfg.patch_size,
                    rng::derive_seed(cfg.seed, &[TAG_SCENE, i]),
                );
                let (raw, srgb) = synth_pair(&scene, &cfg.degradation(), rng::derive_seed(cfg.seed, &[TAG_SYNTH, i]))?;
                Ok((normalize_raw(&raw)?, srgb))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(&pairs, cfg.dtype())
    }

    /// Patches from the train split of the configured manifest, or procedural
    /// pairs when no manifest is set.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let Some(path) = &cfg.manifest else {
            return Self::procedural(cfg);
        };
        let manifest = PairManifest::load(path)?;
        let mut pairs = Vec::new();
        for (i, e) in manifest.split(Split::Train).enumerate() {
            let raw = BayerRaw::read_png(&e.raw, manifest.bit_depth)?;
            let srgb = RgbImage::read_png(&e.srgb)?;
            let seed = rng::derive_seed(cfg.seed, &[TAG_PATCH, i as u64]);
            for p in extract_patches(&raw, &srgb, cfg.patch_size, cfg.patches_per_image, seed)? {
                pairs.push((p.raw, p.srgb));
            }
        }
        Self::from_pairs(&pairs, cfg.dtype())
    }

    fn select(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
        let ids = Tensor::new(idx, t.device())?;
        Ok(t.index_select(&ids, 0)?)
    }
}

/// Indices of the batch for one iteration.
fn batch_indices(seed: u64, stage: u8, iteration: u64, pool: usize, batch: usize) -> Vec<u32> {
    if batch >= pool {
        return (0..pool as u32).collect();
    }
    let mut r = rng::stream(seed, &[TAG_BATCH, stage as u64, iteration]);
    let mut v: Vec<u32> = index::sample(&mut r, pool, batch)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    v.sort_unstable();
    v
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: u8,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for logs and checkpoints.
    pub out_dir: PathBuf,
    /// Checkpoint directory of the same stage to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: u8,
    /// Iterations completed, including any before a resume.
    pub iterations: u64,
    pub checkpoint: PathBuf,
    pub history: Vec<LogRecord>,
}

impl StageReport {
    pub fn last(&self, key: &str) -> Option<f64> {
        self.history.last().and_then(|r| r.losses.get(key).copied())
    }
}

struct Logger {
    file: BufWriter<File>,
    start: Instant,
    history: Vec<LogRecord>,
}

impl Logger {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: BufWriter::new(file),
            start: Instant::now(),
            history: Vec::new(),
        })
    }

    fn record(&mut self, stage: u8, iteration: u64, lr: f64, losses: BTreeMap<String, f64>) -> Result<()> {
        let rec = LogRecord {
            iteration,
            stage,
            losses,
            lr,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io("<log>", e))?;
        self.file.flush().map_err(|e| Error::io("<log>", e))?;
        self.history.push(rec);
        Ok(())
    }
}

fn abort(stage: u8, iteration: u64, err: Error, last_good: &Option<PathBuf>) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Aborted {
            stage,
            iteration,
            detail: err.to_string(),
            last_good: last_good.clone(),
        },
        other => other,
    }
}

fn finite(v: f64, context: &str, detail: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            detail: detail(),
        })
    }
}

fn tensor_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = scalar(&(a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?.sqr()?.mean_all()?)?;
    Ok(if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    })
}

/// Roundtrip PSNR of the codec on every item of `data`, per modality.
pub fn codec_psnr(codec: &Codec, data: &TrainingSet) -> Result<BTreeMap<Modality, f64>> {
    let mut out = BTreeMap::new();
    for (m, t) in [
        (Modality::Raw, &data.raw),
        (Modality::Gray, &data.gray),
        (Modality::Srgb, &data.srgb),
    ] {
        let t = t.to_dtype(codec.dtype())?;
        out.insert(m, tensor_psnr(&codec.reconstruct(&t, m)?.detach(), &t)?);
    }
    Ok(out)
}

fn decay(cfg: &RunConfig) -> StepDecay {
    StepDecay::every_fraction(cfg.learning_rate, cfg.lr_decay, cfg.max_iters, cfg.lr_decay_every)
}

fn clip(cfg: &RunConfig) -> Option<f64> {
    (cfg.clip_norm > 0.0).then_some(cfg.clip_norm)
}

/// Stage 1: fits the codec; the predictor and HCCM are untouched.
pub fn run_stage1(cfg: &RunConfig, pipe: &Pipeline, data: &TrainingSet, opts: &TrainOptions) -> Result<StageReport> {
    let stage = 1;
    let mut opt = Adam::new(clip(cfg));
    let mut start = 0;
    if let Some(dir) = &opts.resume {
        pipe.load_codec(dir)?;
        let d = CheckpointDir(dir.clone());
        start = checkpoint::load_state(&d.state(), stage, &pipe.fingerprint, &mut opt)?.iteration;
    }
    let sched = decay(cfg);
    let mut log = Logger::open(&opts.out_dir.join("stage1_log.jsonl"), opts.resume.is_some())?;
    let mut last_good: Option<PathBuf> = opts.resume.clone();
    let final_dir = opts.out_dir.join("stage1");
    let save = |dir: &Path, iteration: u64, opt: &Adam| -> Result<()> {
        pipe.save_codec(dir)?;
        let state = TrainState {
            stage,
            iteration,
            config_fingerprint: pipe.fingerprint.clone(),
        };
        checkpoint::save_state(&CheckpointDir(dir.to_path_buf()).state(), &state, opt)
    };
    let mut done = start;
    for it in start..cfg.max_iters {
        let lr = sched.lr_at(it);
        let idx = batch_indices(cfg.seed, stage, it, data.len(), cfg.batch_size);
        let mut step = || -> Result<BTreeMap<String, f64>> {
            let batch = [
                (TrainingSet::select(&data.raw, &idx)?, Modality::Raw),
                (TrainingSet::select(&data.gray, &idx)?, Modality::Gray),
                (TrainingSet::select(&data.srgb, &idx)?, Modality::Srgb),
            ];
            let loss = pipe.codec.stage1_loss(&batch)?;
            let total = scalar(&loss.total)?;
            finite(total, &format!("stage-1 loss at iteration {it}"), || {
                format!("{:?}", loss.parts)
            })?;
            let grads = loss.total.backward()?;
            opt.step(&[pipe.codec.params()], &grads, lr)?;
            let mut losses: BTreeMap<String, f64> = loss.parts.iter().map(|(m, v)| (format!("rec_{m}"), *v)).collect();
            losses.insert("total".into(), total);
            Ok(losses)
        };
        let losses = step().map_err(|e| abort(stage, it, e, &last_good))?;
        log.record(stage, it, lr, losses)?;
        done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_iters {
            let dir = opts.out_dir.join("checkpoints").join(format!("stage1-{done:06}"));
            save(&dir, done, &opt)?;
            last_good = Some(dir);
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let scores = codec_psnr(&pipe.codec, data)?;
            let mut rec: BTreeMap<String, f64> = scores.iter().map(|(m, v)| (format!("psnr_{m}"), *v)).collect();
            rec.insert("eval".into(), 1.0);
            log.record(stage, it, lr, rec)?;
            log::info!("stage 1 iteration {done}: roundtrip PSNR {scores:?}");
            if cfg.target_psnr > 0.0 && scores.values().all(|v| *v > cfg.target_psnr) {
                break;
            }
        }
    }
    save(&final_dir, done, &opt)?;
    Ok(StageReport {
        stage,
        iterations: done,
        checkpoint: final_dir,
        history: log.history,
    })
}

/// Frozen-codec latents and target histograms for stage 2.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub raw: Tensor,
    pub gray: Tensor,
    pub srgb: Tensor,
    pub histograms: Tensor,
}

impl LatentSet {
    pub fn encode(codec: &Codec, data: &TrainingSet) -> Result<Self> {
        let dtype = codec.dtype();
        let enc =
            |t: &Tensor, m| -> Result<Tensor> { Ok(codec.encode(&t.to_dtype(dtype)?, m)?.into_values().detach()) };
        let factor = codec.config().factor();
        let hists = data
            .srgb_images
            .iter()
            .map(|img| image_histogram(&img.area_downsample(factor)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            raw: enc(&data.raw, Modality::Raw)?,
            gray: enc(&data.gray, Modality::Gray)?,
            srgb: enc(&data.srgb, Modality::Srgb)?,
            histograms: Tensor::cat(&hists, 0)?.to_dtype(dtype)?,
        })
    }
}

/// Stage-2 objective for one batch; every component is returned for logging.
pub struct Stage2Loss {
    pub total: Tensor,
    pub parts: BTreeMap<String, f64>,
}

pub fn stage2_loss(
    cfg: &RunConfig,
    pipe: &Pipeline,
    latents: &LatentSet,
    idx: &[u32],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Stage2Loss> {
    let f_r = TrainingSet::select(&latents.raw, idx)?;
    let f_g = TrainingSet::select(&latents.gray, idx)?;
    let f_s = TrainingSet::select(&latents.srgb, idx)?;
    let h_s = TrainingSet::select(&latents.histograms, idx)?;
    let dl = diffusion_loss(&f_g, &f_r, &pipe.schedule, &pipe.predictor, cfg.lambda_tel, rng)?;
    let out = pipe
        .hccm
        .forward(&LatentFeature::new(f_r, Modality::Raw)?, &dl.x0_hat)?;
    let fea = fea_loss(&out.srgb, &f_s)?;
    let ccl = ccl_loss(&out.histogram, &h_s)?;
    let l_hccm = hccm_loss(&fea, &ccl, cfg.lambda_ccl)?;
    let total = (&dl.total + &l_hccm)?;
    let mut parts = BTreeMap::new();
    parts.insert("con".to_string(), dl.con);
    parts.insert("tel".to_string(), dl.tel);
    parts.insert("diff".to_string(), scalar(&dl.total)?);
    parts.insert("fea".to_string(), scalar(&fea)?);
    parts.insert("ccl".to_string(), scalar(&ccl)?);
    parts.insert("hccm".to_string(), scalar(&l_hccm)?);
    let t = scalar(&total)?;
    parts.insert("total".to_string(), t);
    finite(t, &format!("stage-2 loss at t={:?}", dl.timesteps), || {
        format!("{parts:?}")
    })?;
    Ok(Stage2Loss { total, parts })
}

/// Stage 2: loads the stage-1 codec from `stage1_dir` and fits the predictor
/// and HCCM jointly with the codec frozen.
pub fn run_stage2(
    cfg: &RunConfig,
    pipe: &Pipeline,
    data: &TrainingSet,
    stage1_dir: &Path,
    opts: &TrainOptions,
) -> Result<StageReport> {
    let stage = 2;
    pipe.load_codec(stage1_dir)?;
    let mut opt = Adam::new(clip(cfg));
    let mut start = 0;
    if let Some(dir) = &opts.resume {
        pipe.load_all(dir)?;
        let d = CheckpointDir(dir.clone());
        start = checkpoint::load_state(&d.state(), stage, &pipe.fingerprint, &mut opt)?.iteration;
    }
    let latents = LatentSet::encode(&pipe.codec, data)?;
    let sched = decay(cfg);
    let mut log = Logger::open(&opts.out_dir.join("stage2_log.jsonl"), opts.resume.is_some())?;
    let mut last_good: Option<PathBuf> = opts.resume.clone();
    let final_dir = opts.out_dir.join("stage2");
    let save = |dir: &Path, iteration: u64, opt: &Adam| -> Result<()> {
        pipe.save_all(dir)?;
        let state = TrainState {
            stage,
            iteration,
            config_fingerprint: pipe.fingerprint.clone(),
        };
        checkpoint::save_state(&CheckpointDir(dir.to_path_buf()).state(), &state, opt)
    };
    let mut done = start;
    for it in start..cfg.max_iters {
        let lr = sched.lr_at(it);
        let idx = batch_indices(cfg.seed, stage, it, data.len(), cfg.batch_size);
        let mut noise = rng::stream(cfg.seed, &[TAG_NOISE, it]);
        let mut step = || -> Result<BTreeMap<String, f64>> {
            let loss = stage2_loss(cfg, pipe, &latents, &idx, &mut noise)?;
            let grads = loss.total.backward()?;
            opt.step(&[pipe.predictor.params(), pipe.hccm.params()], &grads, lr)?;
            Ok(loss.parts)
        };
        let losses = step().map_err(|e| abort(stage, it, e, &last_good))?;
        log.record(stage, it, lr, losses)?;
        done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_iters {
            let dir = opts.out_dir.join("checkpoints").join(format!("stage2-{done:06}"));
            save(&dir, done, &opt)?;
            last_good = Some(dir);
        }
    }
    save(&final_dir, done, &opt)?;
    Ok(StageReport {
        stage,
        iterations: done,
        checkpoint: final_dir,
        history: log.history,
    })
}

/// Runs inference on every validation pair of `manifest` and scores it.
/// Per-image failures are recorded in their row. With `montage_dir`, a
/// (RAW, output, target, error map) strip is written per image.
pub fn evaluate(
    manifest: &PairManifest,
    pipe: &Pipeline,
    cfg: &RunConfig,
    montage_dir: Option<&Path>,
) -> Result<EvalReport> {
    let val: Vec<_> = manifest.split(Split::Val).collect();
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(val.len());
    for (i, e) in val.iter().enumerate() {
        let id = e
            .srgb
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| i.to_string());
        let run = || -> Result<EvalRow> {
            let raw = BayerRaw::read_png(&e.raw, manifest.bit_depth)?;
            let gt = RgbImage::read_png(&e.srgb)?;
            let mosaic = normalize_raw(&raw)?;
            let out = pipe.infer_mosaic(&mosaic, rng::derive_seed(cfg.seed, &[i as u64]))?;
            if let Some(dir) = montage_dir {
                std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
                let strip = montage(&[mosaic.to_rgb(), out.clone(), gt.clone(), error_map(&out, &gt)?.to_rgb()])?;
                strip.write_png(&dir.join(format!("{id}.png")))?;
            }
            Ok(EvalRow {
                id: id.clone(),
                psnr_db: Some(psnr(&out, &gt)?),
                ssim: Some(ssim(&out, &gt)?),
                histogram_l2: Some(histogram_l2(&out, &gt)?),
                error: None,
            })
        };
        rows.push(run().unwrap_or_else(|err| EvalRow {
            id,
            psnr_db: None,
            ssim: None,
            histogram_l2: None,
            error: Some(err.to_string()),
        }));
    }
    Ok(EvalReport::from_rows(rows, cfg.fingerprint(), cfg.seed))
}
