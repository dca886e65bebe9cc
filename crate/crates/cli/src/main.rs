use clap::{Args, Parser, Subcommand};
use gfftree::experiment::{run, ConfigError, ExperimentConfig, ExperimentKind};
use std::path::PathBuf;
use std::process::ExitCode;

/// Critical level-set percolation of the Gaussian free field on regular trees.
#[derive(Debug, Parser)]
#[command(name = "gfftree", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the critical level and the eigenfunction constants.
    Spectral(Common),
    /// Iterate the survival recursion: one-arm series and Laplace transforms.
    Recursion(Common),
    /// Sample clusters: survival probabilities and the size tail.
    Simulate(Common),
    /// Spine chain histogram and many-to-few moment checks.
    Spine(Common),
    /// Depth-first traversal martingale, LLN and conditioned tree shape.
    Traversal(Common),
    /// Conditioned generation sizes and their exponential limit.
    Yaglom(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key = value file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<u32>,
    /// Generation, chain length or traversal steps, depending on the experiment.
    #[arg(long, visible_alias = "n-max")]
    n: Option<usize>,
    /// Root field value; defaults to h* + 1.
    #[arg(long, allow_hyphen_values = true)]
    x: Option<f64>,
    /// Comma-separated Laplace arguments.
    #[arg(long)]
    alpha: Option<String>,
    /// Replicates, chains, traces or accepted samples.
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "r-cut")]
    r_cut: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Model cache directory; defaults to `<out-dir>/cache`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Any other configuration key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig, ConfigError> {
        let mut c = ExperimentConfig::new(kind);
        if let Some(path) = &self.config {
            c.apply_file(path)?;
            c.kind = kind;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: kv.clone(),
            })?;
            if key.trim() == "kind" {
                return Err(ConfigError::Invalid {
                    key: "kind",
                    message: "the subcommand selects the experiment".into(),
                });
            }
            c.set(key.trim(), value)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("d", self.d.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("x", self.x.map(|v| v.to_string())),
            ("alpha", self.alpha.clone()),
            ("reps", self.reps.clone()),
            ("eta", self.eta.map(|v| v.to_string())),
            ("r_cut", self.r_cut.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                c.set(key, &v)?;
            }
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Spectral(c) => (ExperimentKind::Spectral, c),
        Command::Recursion(c) => (ExperimentKind::Recursion, c),
        Command::Simulate(c) => (ExperimentKind::Simulate, c),
        Command::Spine(c) => (ExperimentKind::Spine, c),
        Command::Traversal(c) => (ExperimentKind::Traversal, c),
        Command::Yaglom(c) => (ExperimentKind::Yaglom, c),
    };
    let config = match common.config(kind).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return ExitCode::from(2);
        }
    };
    let cache = common.cache_dir.clone().unwrap_or_else(|| common.out_dir.join("cache"));
    match run(&config, &common.out_dir, Some(&cache)) {
        Ok(manifest) => {
            for f in &manifest.outputs {
                println!("{}", common.out_dir.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
