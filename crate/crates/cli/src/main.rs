//! Command-line front end: fit latency models from profiling CSVs, run
//! scenarios, and sweep mode grids into comparison tables.

mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "specsim",
    about = "Simulator of batched LLM serving with goodput-controlled speculative decoding",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a forward-pass latency model from a profiling CSV
    /// (header: context_tokens,batched_tokens,latency_ms).
    Fit(FitArgs),
    /// Run one scenario in one mode and export per-step/per-request CSVs.
    Run(RunArgs),
    /// Run the cartesian product of scenarios and modes and write a
    /// comparison table.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct FitArgs {
    /// Profiling samples CSV.
    profile_csv: PathBuf,
    /// Where to write the fitted model (TOML).
    #[arg(long)]
    out: PathBuf,
    /// Identifier stored in the fitted model.
    #[arg(long, default_value = "custom")]
    profile_id: String,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long, required_unless_present = "config")]
    pub scenario: Option<PathBuf>,
    /// Load a previously dumped run config; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Decode-phase target latency model; defaults to the shipped desk model.
    #[arg(long)]
    pub target_profile: Option<PathBuf>,
    /// Decode-phase draft latency model; defaults to the shipped desk model
    /// under the draft policy.
    #[arg(long)]
    pub draft_profile: Option<PathBuf>,
    /// Prefill-phase target model; defaults to the shipped desk model.
    #[arg(long)]
    pub prefill_target_profile: Option<PathBuf>,
    /// Prefill-phase draft model; defaults to the shipped desk model.
    #[arg(long)]
    pub prefill_draft_profile: Option<PathBuf>,
    /// turbospec, no_spec, or fixed:K.
    #[arg(long)]
    pub mode: Option<String>,
    /// Overrides the scenario file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for steps.csv / requests.csv / meta.csv.
    /// Relative paths resolve under $SPECSIM_OUT_ROOT when set.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the controller's search bound.
    #[arg(long)]
    pub max_len: Option<u32>,
    /// Write the effective run config (flags folded in) to this path.
    #[arg(long)]
    pub dump_config: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Scenario files; repeat the flag for several.
    #[arg(long, required = true)]
    pub scenario: Vec<PathBuf>,
    /// Comma-separated mode list; defaults to no_spec, fixed:1..max_len,
    /// turbospec.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long)]
    pub target_profile: Option<PathBuf>,
    #[arg(long)]
    pub draft_profile: Option<PathBuf>,
    #[arg(long)]
    pub prefill_target_profile: Option<PathBuf>,
    #[arg(long)]
    pub prefill_draft_profile: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; one subdirectory per scenario/mode cell plus sweep.csv.
    #[arg(long, default_value = "sweep-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_len: Option<u32>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fit(args) => commands::fit(&args.profile_csv, &args.out, &args.profile_id),
        Command::Run(args) => commands::run(args),
        Command::Sweep(args) => commands::sweep(args),
    }
}
