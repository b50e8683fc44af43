use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use decoupled_isp::commands::{cmd_eval, cmd_infer, cmd_synth, cmd_train_codec, cmd_train_diffusion, CommonArgs};
use decoupled_isp::config::RunConfig;

static KEY_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "Config keys (flat TOML; override with --set key=value):\n{}\nExit codes: 0 ok, 2 bad input or config, 3 numeric abort, 4 incompatible checkpoint.",
        RunConfig::key_help()
    )
});

#[derive(Parser, Debug)]
#[command(name = "disp", version, about = "Decoupled RAW-to-sRGB training and inference", after_help = KEY_HELP.as_str())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for every artifact of this run.
    #[arg(long)]
    out_dir: PathBuf,
}

impl Common {
    fn args(self) -> CommonArgs {
        CommonArgs {
            config: self.config,
            overrides: self.overrides,
            seed: self.seed,
            out_dir: self.out_dir,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize RAW/sRGB pairs and a manifest.
    #[command(after_help = KEY_HELP.as_str())]
    Synth {
        #[command(flatten)]
        common: Common,
        /// Directory of sRGB PNGs to degrade.
        #[arg(long, conflicts_with = "procedural")]
        source: Option<PathBuf>,
        /// Number of procedural scenes to generate.
        #[arg(long)]
        procedural: Option<usize>,
    },
    /// Stage 1: train the shared codec.
    #[command(after_help = KEY_HELP.as_str())]
    TrainCodec {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: train the diffusion model and the colorization module.
    #[command(after_help = KEY_HELP.as_str())]
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        stage1: PathBuf,
        /// Stage-2 checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable the texture loss.
        #[arg(long)]
        no_tel: bool,
        /// Disable the histogram loss.
        #[arg(long)]
        no_ccl: bool,
    },
    /// Convert RAW PNGs to sRGB.
    #[command(after_help = KEY_HELP.as_str())]
    Infer {
        #[command(flatten)]
        common: Common,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ground-truth sRGB per input, in order; adds error maps.
        #[arg(long = "with-gt", value_name = "PNG")]
        with_gt: Vec<PathBuf>,
        /// 16-bit RAW mosaic PNGs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score the validation split of the configured manifest.
    #[command(after_help = KEY_HELP.as_str())]
    Eval {
        #[command(flatten)]
        common: Common,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            common,
            source,
            procedural,
        } => cmd_synth(&common.args(), source.as_deref(), procedural).map(|p| log::info!("manifest: {}", p.display())),
        Command::TrainCodec { common, resume } => cmd_train_codec(&common.args(), resume.as_deref()).map(|r| {
            log::info!(
                "stage 1 done after {} iterations: {}",
                r.iterations,
                r.checkpoint.display()
            )
        }),
        Command::TrainDiffusion {
            common,
            stage1,
            resume,
            no_tel,
            no_ccl,
        } => cmd_train_diffusion(&common.args(), &stage1, resume.as_deref(), no_tel, no_ccl).map(|r| {
            log::info!(
                "stage 2 done after {} iterations: {}",
                r.iterations,
                r.checkpoint.display()
            )
        }),
        Command::Infer {
            common,
            checkpoint,
            with_gt,
            inputs,
        } => cmd_infer(&common.args(), &checkpoint, &inputs, &with_gt).map(|out| {
            for p in out {
                log::info!("wrote {}", p.display());
            }
        }),
        Command::Eval { common, checkpoint } => cmd_eval(&common.args(), &checkpoint).and_then(|r| {
            log::info!(
                "{} rows, mean PSNR {:.2} dB, mean SSIM {:.4}",
                r.rows.len(),
                r.mean_psnr_db,
                r.mean_ssim
            );
            if r.all_ok() {
                Ok(())
            } else {
                Err(decoupled_isp::Error::Validation("some evaluation rows failed".into()))
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
