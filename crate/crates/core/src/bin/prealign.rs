use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prealign::harness::{
    cmd_ablate, cmd_align, cmd_eval, cmd_gen_data, cmd_train, parse_tasks, Axis, ExperimentConfig, HarnessError,
    Overrides,
};
use prealign::moco::MocoVariant;
use prealign::moe::GateVariant;

#[derive(Parser, Debug)]
#[command(name = "prealign", version, about = "Staged expert alignment and top-k expert fusion experiments")]
struct Cli {
    /// Experiment config (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    toggles: Toggles,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Toggles {
    /// Disable the residual cache path during alignment.
    #[arg(long, global = true)]
    no_residual: bool,
    /// Disable the contrastive term during training.
    #[arg(long, global = true)]
    no_contrast: bool,
    /// Number of experts kept by the router.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=4))]
    topk: Option<u8>,
    /// Stage order, e.g. cap,cls,det,seg.
    #[arg(long, global = true)]
    order: Option<String>,
    #[arg(long, global = true, value_parser = ["paired", "literal"])]
    moco_variant: Option<String>,
    #[arg(long, global = true, value_parser = ["renorm", "literal"])]
    gate_variant: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Run the staged alignment.
    Align {
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the latest stage checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the fused model from an alignment checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Alignment checkpoint; defaults to <out>/align.ckpt.
        #[arg(long)]
        align: Option<PathBuf>,
    },
    /// Evaluate a training checkpoint.
    Eval {
        /// Training checkpoint; defaults to <out>/train.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated tasks: caption, presence, count, location.
        #[arg(long, default_value = "caption,presence,count,location")]
        tasks: String,
    },
    /// Run an ablation grid over several seeds.
    Ablate {
        /// topk, residual_contrast or stage_order.
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
}

fn overrides(cli: &Cli) -> Result<Overrides, HarnessError> {
    let t = &cli.toggles;
    Ok(Overrides {
        seed: cli.seed,
        no_residual: t.no_residual,
        no_contrast: t.no_contrast,
        top_k: t.topk.map(usize::from),
        order: t.order.clone(),
        moco_variant: t
            .moco_variant
            .as_deref()
            .map(str::parse::<MocoVariant>)
            .transpose()
            .map_err(HarnessError::Config)?,
        gate_variant: t
            .gate_variant
            .as_deref()
            .map(str::parse::<GateVariant>)
            .transpose()
            .map_err(HarnessError::Config)?,
    })
}

fn config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&overrides(cli)?);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            cmd_gen_data(&cfg, out)?;
        }
        Command::Align { data, resume } => {
            cmd_align(&cfg, data.as_deref(), out, *resume)?;
        }
        Command::Train { data, align } => {
            let align = align.clone().unwrap_or_else(|| out.join("align.ckpt"));
            cmd_train(&cfg, data.as_deref(), &align, out)?;
        }
        Command::Eval { checkpoint, data, tasks } => {
            let tasks = parse_tasks(tasks)?;
            let ck = checkpoint.clone().unwrap_or_else(|| out.join("train.ckpt"));
            cmd_eval(&ck, data.as_deref(), &tasks, out)?;
        }
        Command::Ablate { axis, seeds } => {
            let axis: Axis = axis.parse()?;
            let seeds = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Config(format!("seeds: {e}")))?;
            cmd_ablate(&cfg, axis, &seeds, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
