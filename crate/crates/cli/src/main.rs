mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use isfuse::Error;
use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "isfuse", version, about = "Infrared/visible image fusion under structured interventions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug)]
struct Common {
    /// Global random seed.
    #[arg(long)]
    seed: Option<String>,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fusion model.
    Train(TrainArgs),
    /// Fuse one registered pair with a trained checkpoint.
    Fuse(FuseArgs),
    /// Score fused images (from a checkpoint or a directory) on a dataset.
    Eval(EvalArgs),
    /// Average treatment effect of each intervention on fusion quality.
    Ate(AteArgs),
    /// Sample intervention masks and write them as PNGs with statistics.
    MasksDemo(MasksArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training set directory (`vi/` + `ir/`, or a manifest.tsv).
    #[arg(long)]
    data: Option<String>,
    /// Validation set directory; defaults to the training directory.
    #[arg(long)]
    val_data: Option<String>,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    /// `as_written` or `maximize_margin`.
    #[arg(long)]
    nec_mode: Option<String>,
    #[arg(long)]
    block_size: Option<String>,
    #[arg(long)]
    pool_r: Option<String>,
    /// Encoder widths, e.g. `32,64,128`.
    #[arg(long)]
    channels: Option<String>,
    /// 0 means one pass over the training set per epoch.
    #[arg(long)]
    steps_per_epoch: Option<String>,
    /// Checkpoint with training state to continue from.
    #[arg(long)]
    resume: Option<String>,
    /// Sequential bit-exact execution (the only mode; recorded in the config).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Visible (or any first-modality) image.
    #[arg(long)]
    vi: Option<String>,
    /// Infrared (or any second-modality) image.
    #[arg(long)]
    ir: Option<String>,
    /// Output PNG.
    #[arg(long)]
    out: Option<String>,
    /// Reinject the visible chroma and write RGB.
    #[arg(long)]
    color: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Directory of already-fused `<id>.png` images.
    #[arg(long)]
    fused_dir: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<String>,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct AteArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated mask seeds; defaults to `--seed`.
    #[arg(long)]
    seeds: Option<String>,
    /// `all`, `psnr` or `cc`.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<String>,
    /// Also draw a bar chart PNG.
    #[arg(long)]
    chart: Option<String>,
}

#[derive(Args, Debug)]
struct MasksArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    block_size: Option<String>,
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(common: &Common) -> Self {
        let mut o = Overrides(Vec::new());
        o.opt("seed", &common.seed);
        o
    }

    fn opt(&mut self, key: &str, v: &Option<String>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.clone()));
        }
    }

    fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.0.push((key.to_string(), "true".into()));
        }
    }
}

fn resolve(common: &Common, o: Overrides) -> Result<RunConfig, Error> {
    RunConfig::resolve(common.config.as_deref(), &o.0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (common, cfg, cmd): (&Common, RunConfig, fn(&RunConfig) -> Result<(), Error>) =
        match &cli.command {
            Command::Train(a) => {
                let mut o = Overrides::new(&a.common);
                o.opt("data", &a.data);
                o.opt("val_data", &a.val_data);
                o.opt("out_dir", &a.out);
                o.opt("epochs", &a.epochs);
                o.opt("batch_size", &a.batch);
                o.opt("learning_rate", &a.lr);
                o.opt("patch", &a.patch);
                o.opt("alpha", &a.alpha);
                o.opt("beta", &a.beta);
                o.opt("lambda1", &a.lambda1);
                o.opt("eta", &a.eta);
                o.opt("nec_mode", &a.nec_mode);
                o.opt("block_size", &a.block_size);
                o.opt("pool_r", &a.pool_r);
                o.opt("channels", &a.channels);
                o.opt("steps_per_epoch", &a.steps_per_epoch);
                o.opt("resume", &a.resume);
                o.flag("deterministic", a.deterministic);
                (&a.common, resolve(&a.common, o)?, commands::train)
            }
            Command::Fuse(a) => {
                let mut o = Overrides::new(&a.common);
                o.opt("checkpoint", &a.checkpoint);
                o.opt("vi", &a.vi);
                o.opt("ir", &a.ir);
                o.opt("output", &a.out);
                o.flag("color", a.color);
                (&a.common, resolve(&a.common, o)?, commands::fuse)
            }
            Command::Eval(a) => {
                let mut o = Overrides::new(&a.common);
                o.opt("checkpoint", &a.checkpoint);
                o.opt("fused_dir", &a.fused_dir);
                o.opt("data", &a.data);
                o.flag("json", a.json);
                o.opt("output", &a.out);
                (&a.common, resolve(&a.common, o)?, commands::eval)
            }
            Command::Ate(a) => {
                let mut o = Overrides::new(&a.common);
                o.opt("checkpoint", &a.checkpoint);
                o.opt("data", &a.data);
                o.opt("seeds", &a.seeds);
                o.opt("metric", &a.metric);
                o.flag("json", a.json);
                o.opt("output", &a.out);
                o.opt("chart", &a.chart);
                (&a.common, resolve(&a.common, o)?, commands::ate)
            }
            Command::MasksDemo(a) => {
                let mut o = Overrides::new(&a.common);
                o.opt("output", &a.out);
                o.opt("samples", &a.samples);
                o.opt("height", &a.height);
                o.opt("width", &a.width);
                o.opt("block_size", &a.block_size);
                (&a.common, resolve(&a.common, o)?, commands::masks_demo)
            }
        };
    if common.print_config {
        print!("{cfg}");
        return Ok(());
    }
    log::info!("resolved configuration:\n{cfg}");
    cmd(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
