//! `pdgan`: synthesize data, train the depth GAN, fine-tune and evaluate
//! liveness classifiers, and export embedding projections.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdgan::training::Protocol;

use crate::config::Overrides;

/// A command-line or configuration mistake (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "pdgan", version, about = "Pseudo-depth GAN backbones for face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic face dataset.
    SynthData(SynthArgs),
    /// Train the depth generator: L1 warmup, then adversarial epochs.
    TrainPdgan(TrainArgs),
    /// Fine-tune a liveness classifier from a chosen backbone.
    Finetune(FinetuneArgs),
    /// Score a test set and report BPCER, APCER, ACER, F1, threshold and AUC.
    Evaluate(EvaluateArgs),
    /// Project backbone embeddings onto two principal components.
    EmbedPca(EmbedArgs),
}

/// Options shared by every command.
#[derive(Args)]
struct Common {
    /// JSON config; flags override it, it overrides built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol tier: intra (λ_l 100, 50 baseline epochs) or inter (50, 20).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Protocol>,
    /// Master seed [default: $PDGAN_SEED, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("mode", self.mode).set("train.seed", self.seed).set("out", self.out.as_ref());
        o
    }
}

/// Network shape and batching.
#[derive(Args)]
struct Net {
    #[arg(long)]
    batch_size: Option<usize>,
    /// Channel multiplier relative to ResNet-18.
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    blocks_per_stage: Option<usize>,
    #[arg(long)]
    critic_blocks_per_stage: Option<usize>,
    /// Network input side [default: the dataset's].
    #[arg(long)]
    image_size: Option<usize>,
    /// Turn off training-time augmentation.
    #[arg(long)]
    no_augment: bool,
}

impl Net {
    fn apply(&self, o: &mut Overrides) {
        o.set("train.batch_size", self.batch_size)
            .set("width", self.width)
            .set("blocks_per_stage", self.blocks_per_stage)
            .set("critic_blocks_per_stage", self.critic_blocks_per_stage)
            .set("image_size", self.image_size)
            .set(
                "train.augment",
                self.no_augment.then(pdgan::synth::AugmentConfig::disabled),
            );
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    live: Option<usize>,
    #[arg(long)]
    print: Option<usize>,
    #[arg(long)]
    screen: Option<usize>,
    #[arg(long)]
    mask: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Dataset name recorded in the manifest.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    net: Net,
    /// Training dataset (directory or manifest).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset; otherwise a share of --train is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    lambda_l: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long)]
    lambda_cg: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Warmup plus adversarial epochs.
    #[arg(long)]
    total_epochs: Option<usize>,
    /// Adversarial generator steps per critic step.
    #[arg(long)]
    critic_interval: Option<u64>,
    /// Write the trained generator's depth map of every training sample
    /// as an 8-bit PGM under OUT/depths.
    #[arg(long)]
    dump_depths: bool,
    /// Continue from the checkpoint already in OUT.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    net: Net,
    #[arg(long)]
    train: Option<PathBuf>,
    /// he | pdgan:PATH | ckpt:PATH
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long, conflicts_with = "epoch_normalize")]
    epochs: Option<usize>,
    /// Total budget B; trains B minus the backbone's own epochs.
    #[arg(long)]
    epoch_normalize: Option<usize>,
    /// Add the spoof-class head and its cross-entropy loss.
    #[arg(long)]
    multihead: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Classifier checkpoint (or a finetune output directory).
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    net: Net,
    /// Dataset to embed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Backbone to project; repeat for several (he | pdgan:PATH | ckpt:PATH).
    #[arg(long = "source")]
    sources: Vec<String>,
}

fn parse_mode(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: pdgan::training::TrainError| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData(a) => {
            let mut o = a.common.overrides();
            o.set("synth.live", a.live)
                .set("synth.print", a.print)
                .set("synth.screen", a.screen)
                .set("synth.mask", a.mask)
                .set("synth.name", a.name)
                .set("image_size", a.size);
            commands::synth_data(config::resolve("synth-data", a.common.config.as_deref(), o)?)
        }
        Command::TrainPdgan(a) => {
            let mut o = a.common.overrides();
            a.net.apply(&mut o);
            o.set("data.train", a.train)
                .set("data.val", a.val)
                .set("train.val_fraction", a.val_fraction)
                .set("train.lambda_l", a.lambda_l)
                .set("train.lambda_g", a.lambda_g)
                .set("train.lambda_cg", a.lambda_cg)
                .set("train.warmup_epochs", a.warmup_epochs)
                .set("train.total_pdgan_epochs", a.total_epochs)
                .set("train.critic_interval", a.critic_interval)
                .flag("dump_depths", a.dump_depths)
                .flag("resume", a.resume);
            commands::train_pdgan(config::resolve("train-pdgan", a.common.config.as_deref(), o)?)
        }
        Command::Finetune(a) => {
            let mut o = a.common.overrides();
            a.net.apply(&mut o);
            o.set("data.train", a.train).set("backbone", a.backbone).flag("multihead", a.multihead);
            // one budget flag replaces whatever budget the config file chose
            if a.epochs.is_some() {
                o.set("epochs", a.epochs).set("epoch_normalize", Some(serde_json::Value::Null));
            }
            if a.epoch_normalize.is_some() {
                o.set("epoch_normalize", a.epoch_normalize).set("epochs", Some(serde_json::Value::Null));
            }
            commands::finetune(config::resolve("finetune", a.common.config.as_deref(), o)?)
        }
        Command::Evaluate(a) => {
            let mut o = a.common.overrides();
            o.set("classifier", a.classifier)
                .set("data.test", a.test)
                .set("train.batch_size", a.batch_size);
            commands::evaluate(config::resolve("evaluate", a.common.config.as_deref(), o)?)
        }
        Command::EmbedPca(a) => {
            let mut o = a.common.overrides();
            a.net.apply(&mut o);
            o.set("data.test", a.data)
                .set("sources", (!a.sources.is_empty()).then_some(a.sources));
            commands::embed_pca(config::resolve("embed-pca", a.common.config.as_deref(), o)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
