use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tacnet::config::RunConfig;
use tacnet::pipeline::{self, TACNET_CHECKPOINT};
use tacnet::train::Stage;

#[derive(Parser)]
#[command(name = "tacnet", version, about = "Topology-attention ConvLSTM segmentation on synthetic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Backbone,
    Tacnet,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image / membrane / label volume
    GenData(Common),
    /// Train one stage; `tacnet` continues from the backbone checkpoint in `--out`
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Export critical-point, attention and refined maps for every slice
    Attend {
        #[command(flatten)]
        common: Common,
        /// Defaults to `tacnet.ckpt` in `--out`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a probability volume against a membrane volume
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        /// Defaults to the membrane volume of the configured dataset
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train and score every variant and slice count
    Ablate(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    for item in &common.set {
        let Some((k, v)) = item.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{item}`");
        };
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TACT_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("TACT_THREADS=`{v}` is not a count"))?;
        if n == 0 {
            bail!("TACT_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(common) => {
            let config = load_config(&common)?;
            pipeline::cmd_gen_data(&config, &common.out)?;
        }
        Command::Train { common, stage } => {
            let config = load_config(&common)?;
            let stage = match stage {
                StageArg::Backbone => Stage::Backbone,
                StageArg::Tacnet => Stage::Tacnet,
            };
            let a = pipeline::cmd_train(&config, stage, &common.out)?;
            println!("{}", a.checkpoint.display());
        }
        Command::Attend { common, checkpoint } => {
            let config = load_config(&common)?;
            let checkpoint = checkpoint.unwrap_or_else(|| common.out.join(TACNET_CHECKPOINT));
            pipeline::cmd_attend(&config, checkpoint, &common.out)?;
        }
        Command::Eval { common, pred, gt } => {
            let config = load_config(&common)?;
            let gt = gt.unwrap_or_else(|| config.data_dir.join(tacnet::synth::MEMBRANE_FILE));
            for row in pipeline::cmd_eval(&config, pred, gt, &common.out)? {
                println!("{:<12} {:.4} ± {:.4}", row.metric, row.value, row.stddev);
            }
        }
        Command::Ablate(common) => {
            let config = load_config(&common)?;
            print!("{}", pipeline::ablation_csv(&pipeline::cmd_ablate(&config, &common.out)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
