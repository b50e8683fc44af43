//! Flat key-value run configuration (TOML syntax).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::hccm::HccmConfig;
use crate::raw::Degradation;
use crate::schedule::{NoiseSchedule, SamplerConfig};
use crate::tadm::{PredictionTarget, PredictorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: f64,
    pub clip_norm: f64,
    pub lambda_tel: f64,
    pub lambda_ccl: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub eta: f64,
    pub downsample: usize,
    pub latent_channels: usize,
    pub pack_raw: bool,
    pub norm_groups: usize,
    pub predictor_width: usize,
    pub predictor_levels: usize,
    pub prediction_target: PredictionTarget,
    pub chp_width: usize,
    pub attn_heads: usize,
    pub colorize_ffn: bool,
    pub seed: u64,
    pub max_iters: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub target_psnr: f64,
    pub double_precision: bool,
    pub manifest: Option<PathBuf>,
    pub patches_per_image: usize,
    pub procedural_pairs: usize,
    pub synth_size: usize,
    pub train_ratio: f64,
    pub gamma: f64,
    pub gains: [f64; 3],
    pub noise_sigma: f64,
    pub bit_depth: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = Degradation::default();
        Self {
            stage: 1,
            batch_size: 4,
            patch_size: 64,
            learning_rate: 1e-4,
            lr_decay: 0.8,
            lr_decay_every: 0.2,
            clip_norm: 1.0,
            lambda_tel: 0.01,
            lambda_ccl: 0.01,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sampling_steps: 25,
            eta: 0.0,
            downsample: 2,
            latent_channels: 64,
            pack_raw: false,
            norm_groups: 8,
            predictor_width: 64,
            predictor_levels: 2,
            prediction_target: PredictionTarget::Clean,
            chp_width: 64,
            attn_heads: 1,
            colorize_ffn: true,
            seed: 0,
            max_iters: 1000,
            checkpoint_every: 500,
            eval_every: 0,
            target_psnr: 0.0,
            double_precision: false,
            manifest: None,
            patches_per_image: 4,
            procedural_pairs: 4,
            synth_size: 128,
            train_ratio: 0.9,
            gamma: d.gamma,
            gains: d.gains,
            noise_sigma: d.noise_sigma,
            bit_depth: d.bit_depth,
        }
    }
}

/// Every accepted key with a one-line description, in display order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("stage", "training stage, 1 (codec) or 2 (diffusion + colorization)"),
    ("batch_size", "patches per iteration"),
    ("patch_size", "training patch side in pixels"),
    ("learning_rate", "initial Adam learning rate"),
    ("lr_decay", "multiplicative learning-rate decay at each milestone"),
    ("lr_decay_every", "milestone spacing as a fraction of max_iters"),
    ("clip_norm", "global gradient-norm clip (0 disables)"),
    ("lambda_tel", "weight of the texture loss"),
    ("lambda_ccl", "weight of the histogram loss"),
    ("timesteps", "diffusion steps T"),
    ("beta_start", "first variance of the linear schedule"),
    ("beta_end", "last variance of the linear schedule"),
    ("sampling_steps", "sampler steps S"),
    ("eta", "sampler stochasticity (0 is deterministic)"),
    ("downsample", "stride-2 stages k in the codec"),
    ("latent_channels", "latent channels c"),
    ("pack_raw", "feed the RAW head a 4-plane RGGB packing"),
    ("norm_groups", "group-norm groups"),
    ("predictor_width", "noise predictor base width"),
    ("predictor_levels", "noise predictor resolution levels"),
    ("prediction_target", "network output: \"noise\" or \"clean\""),
    ("chp_width", "histogram predictor width"),
    ("attn_heads", "cross-attention heads"),
    ("colorize_ffn", "position-wise feed-forward after the cross-attention"),
    ("seed", "master seed for initialization, batching, noise and sampling"),
    ("max_iters", "training iterations for the selected stage"),
    ("checkpoint_every", "checkpoint cadence in iterations (0 = final only)"),
    ("eval_every", "stage-1 roundtrip PSNR check cadence (0 disables)"),
    (
        "target_psnr",
        "stop stage 1 once every modality exceeds this PSNR (0 disables)",
    ),
    ("double_precision", "use 64-bit floats for all networks"),
    ("manifest", "pair manifest path; procedural pairs are used when unset"),
    ("patches_per_image", "patches drawn from each manifest training pair"),
    (
        "procedural_pairs",
        "procedural training pairs when no manifest is given",
    ),
    ("synth_size", "image side used by the synth subcommand"),
    ("train_ratio", "fraction of synthesized pairs in the train split"),
    ("gamma", "degradation gamma"),
    ("gains", "degradation white-balance gains [r, g, b]"),
    ("noise_sigma", "degradation read-noise sigma"),
    ("bit_depth", "RAW bit depth, 10 or 12"),
];

fn parse_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

impl RunConfig {
    /// Parses a config document and applies `key=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            field: "config".into(),
            reason: e.message().to_string(),
        })?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::config("override", format!("{ov:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        for key in table.keys() {
            if !KEY_DOCS.iter().any(|(k, _)| k == key) {
                return Err(Error::config(key, "unknown key"));
            }
        }
        let cfg: RunConfig = table.clone().try_into().map_err(|e: toml::de::Error| {
            let field = table
                .keys()
                .find(|k| e.message().contains(k.as_str()) || e.to_string().contains(k.as_str()))
                .cloned()
                .unwrap_or_else(|| "config".into());
            Error::config(&field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative `manifest` resolves against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::config("stage", format!("{} must be 1 or 2", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (name, v) in [("lambda_tel", self.lambda_tel), ("lambda_ccl", self.lambda_ccl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be a finite value >= 0")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must be in (0, 1]"));
        }
        if !(self.lr_decay_every > 0.0 && self.lr_decay_every <= 1.0) {
            return Err(Error::config("lr_decay_every", "must be in (0, 1]"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::config("train_ratio", "must be in (0, 1]"));
        }
        let f = 1usize << self.downsample.min(16);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(f << (self.predictor_levels.max(1) - 1)) {
            return Err(Error::config(
                "patch_size",
                format!(
                    "{} must be a positive multiple of {}",
                    self.patch_size,
                    f << (self.predictor_levels.max(1) - 1)
                ),
            ));
        }
        if self.patch_size / f < 5 {
            return Err(Error::config("patch_size", "latent grid must be at least 5x5"));
        }
        self.codec().validate()?;
        self.predictor().validate()?;
        self.hccm().validate()?;
        self.degradation().validate()?;
        self.schedule()?;
        self.sampler()?;
        Ok(())
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            scale: self.downsample,
            channels: self.latent_channels,
            pack_raw: self.pack_raw,
            groups: self.norm_groups,
        }
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            channels: self.latent_channels,
            width: self.predictor_width,
            levels: self.predictor_levels,
            groups: self.norm_groups,
            target: self.prediction_target,
        }
    }

    pub fn hccm(&self) -> HccmConfig {
        HccmConfig {
            channels: self.latent_channels,
            chp_width: self.chp_width,
            heads: self.attn_heads,
            ffn: self.colorize_ffn,
            groups: self.norm_groups,
        }
    }

    pub fn degradation(&self) -> Degradation {
        Degradation {
            gamma: self.gamma,
            gains: self.gains,
            noise_sigma: self.noise_sigma,
            bit_depth: self.bit_depth,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::uniform(self.timesteps, self.sampling_steps, self.eta)
    }

    pub fn dtype(&self) -> candle_core::DType {
        if self.double_precision {
            candle_core::DType::F64
        } else {
            candle_core::DType::F32
        }
    }

    /// Stable hash of every setting that shapes the networks or the schedule.
    pub fn fingerprint(&self) -> String {
        let arch = serde_json::json!({
            "codec": self.codec(),
            "predictor": self.predictor(),
            "hccm": self.hccm(),
            "schedule": [self.timesteps, self.beta_start, self.beta_end],
        });
        fingerprint_of(&arch.to_string())
    }

    /// `--help` table: every key with its default and description.
    pub fn key_help() -> String {
        let defaults: toml::Table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut out = String::new();
        for (key, doc) in KEY_DOCS {
            let default = defaults
                .get(*key)
                .map(|v| v.to_string())
                .unwrap_or_else(|| "(unset)".into());
            out.push_str(&format!("  {key:<20} {default:<12} {doc}\n"));
        }
        out
    }
}

/// FNV-1a over `text`, as 16 hex digits.
pub fn fingerprint_of(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn docs_cover_every_key() {
        let table = toml::Table::try_from(RunConfig {
            manifest: Some("m.json".into()),
            ..RunConfig::default()
        })
        .unwrap();
        let mut keys: Vec<&str> = table.keys().map(|k| k.as_str()).collect();
        let mut docs: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        keys.sort();
        docs.sort();
        assert_eq!(keys, docs);
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::from_toml("seed = 3", &["lambda_tel=0".into(), "prediction_target=noise".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lambda_tel, 0.0);
        assert_eq!(cfg.prediction_target, PredictionTarget::Noise);
        let err = RunConfig::from_toml("", &["seed=abc".into()]).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "seed"),
            "{err}"
        );
        let err = RunConfig::from_toml("colour = 1", &[]).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "colour"),
            "{err}"
        );
        assert!(RunConfig::from_toml("", &["lambda_ccl=-1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["stage=3".into()]).is_err());
        assert!(RunConfig::from_toml("", &["noequals".into()]).is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 9, ..a.clone() };
        let c = RunConfig {
            latent_channels: 32,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn help_lists_defaults() {
        let help = RunConfig::key_help();
        for (k, _) in KEY_DOCS {
            assert!(help.contains(k));
        }
        assert!(help.contains("0.0001"));
    }
}
