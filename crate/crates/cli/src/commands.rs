use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use specsim_core::config::{ScenarioFile, SimConfig};
use specsim_core::controller::{Mode, PolicyKind};
use specsim_core::latency::{desk, fit_latency_model, read_profile_csv_path, LatencyModel, LatencyProfiles};
use specsim_core::metrics::{export_csv, latency_cdf, MetricsLog};

use crate::{RunArgs, SweepArgs};

pub fn fit(profile_csv: &Path, out: &Path, profile_id: &str) -> Result<()> {
    let samples = read_profile_csv_path(profile_csv)
        .with_context(|| format!("reading {}", profile_csv.display()))?;
    let model = fit_latency_model(&samples, profile_id)
        .with_context(|| format!("fitting {} samples", samples.len()))?;
    model
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "fitted {}: ctx_coeff {} ms/tok, tok_coeff {} ms/tok, fixed_cost {} ms, r_squared {:.6}",
        model.profile_id, model.ctx_coeff, model.tok_coeff, model.fixed_cost, model.r_squared
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// The effective run configuration; `--dump-config` writes it and `--config`
/// reads it back, so a dumped file reproduces the run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub scenario: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_target_profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_draft_profile: Option<PathBuf>,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<u32>,
}

fn effective_config(args: &RunArgs) -> Result<RunConfigFile> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfigFile>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfigFile {
            scenario: args
                .scenario
                .clone()
                .context("--scenario is required without --config")?,
            target_profile: None,
            draft_profile: None,
            prefill_target_profile: None,
            prefill_draft_profile: None,
            mode: "turbospec".into(),
            seed: None,
            out: PathBuf::from("run-out"),
            max_len: None,
        },
    };
    if let Some(s) = &args.scenario {
        config.scenario = s.clone();
    }
    if let Some(p) = &args.target_profile {
        config.target_profile = Some(p.clone());
    }
    if let Some(p) = &args.draft_profile {
        config.draft_profile = Some(p.clone());
    }
    if let Some(p) = &args.prefill_target_profile {
        config.prefill_target_profile = Some(p.clone());
    }
    if let Some(p) = &args.prefill_draft_profile {
        config.prefill_draft_profile = Some(p.clone());
    }
    if let Some(m) = &args.mode {
        config.mode = m.clone();
    }
    if let Some(s) = args.seed {
        config.seed = Some(s);
    }
    if let Some(o) = &args.out {
        config.out = o.clone();
    }
    if let Some(k) = args.max_len {
        config.max_len = Some(k);
    }
    Ok(config)
}

fn load_model(path: &Option<PathBuf>, default: Option<LatencyModel>) -> Result<Option<LatencyModel>> {
    match path {
        Some(p) => {
            let model =
                LatencyModel::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(Some(model))
        }
        None => Ok(default),
    }
}

fn build_profiles(config: &RunConfigFile, policy: PolicyKind) -> Result<LatencyProfiles> {
    let target = load_model(&config.target_profile, Some(desk::target()))?
        .expect("target model has a default");
    let draft_default = match policy {
        PolicyKind::DraftModel => Some(desk::draft()),
        PolicyKind::PromptLookup => None,
    };
    let draft = load_model(&config.draft_profile, draft_default)?;
    let prefill_target = load_model(&config.prefill_target_profile, Some(desk::prefill_target()))?;
    let prefill_draft_default = match policy {
        PolicyKind::DraftModel => Some(desk::prefill_draft()),
        PolicyKind::PromptLookup => None,
    };
    let prefill_draft = load_model(&config.prefill_draft_profile, prefill_draft_default)?;
    Ok(LatencyProfiles::new(target, draft, prefill_target, prefill_draft))
}

fn build_sim(config: &RunConfigFile) -> Result<SimConfig> {
    let file = ScenarioFile::load(&config.scenario)
        .with_context(|| format!("loading scenario {}", config.scenario.display()))?;
    let mode: Mode = config
        .mode
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))
        .context("parsing --mode")?;
    let policy = PolicyKind::from(file.spec.kind);
    let profiles = build_profiles(config, policy)?;
    let mut sim = SimConfig::from_scenario_file(&file, profiles, mode, config.seed)
        .context("assembling run")?;
    if let Some(k) = config.max_len {
        sim.controller.max_len = k;
    }
    Ok(sim)
}

/// Relative output paths land under `$SPECSIM_OUT_ROOT` when it is set.
fn resolve_out_dir(out: &Path) -> PathBuf {
    match std::env::var_os("SPECSIM_OUT_ROOT") {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

struct Summary {
    finished: usize,
    unfinished: usize,
    horizon_exceeded: bool,
    mean_latency_s: Option<f64>,
    p50_s: f64,
    p90_s: f64,
    p99_s: f64,
    goodput_tps: f64,
    decode_steps: usize,
    k_zero_fraction: f64,
}

fn summarize(log: &MetricsLog) -> Summary {
    let unfinished = log
        .run_meta
        .iter()
        .find(|(k, _)| k == "unfinished_requests")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let quantiles = latency_cdf(log, &[0.5, 0.9, 0.99]).unwrap_or_default();
    let q = |i: usize| quantiles.get(i).map(|(_, v)| v / 1e3).unwrap_or(f64::NAN);
    Summary {
        finished: log.request_records.len(),
        unfinished,
        horizon_exceeded: log.horizon_exceeded,
        mean_latency_s: log.mean_request_latency_ms().ok().map(|v| v / 1e3),
        p50_s: q(0),
        p90_s: q(1),
        p99_s: q(2),
        goodput_tps: log.aggregate_goodput_tps(),
        decode_steps: log.decode_steps().count(),
        k_zero_fraction: log.k_zero_fraction(),
    }
}

fn print_summary(sim: &SimConfig, summary: &Summary, out_dir: &Path) {
    println!(
        "scenario {} | mode {} | seed {}",
        sim.scenario_name, sim.mode, sim.seed
    );
    let horizon = if summary.horizon_exceeded {
        " [horizon exceeded]"
    } else {
        ""
    };
    println!(
        "requests finished: {} (unfinished {}){horizon}",
        summary.finished, summary.unfinished
    );
    match summary.mean_latency_s {
        Some(mean) => println!(
            "mean latency: {:.3} s | p50 {:.3} s | p90 {:.3} s | p99 {:.3} s",
            mean, summary.p50_s, summary.p90_s, summary.p99_s
        ),
        None => println!("mean latency: n/a (no finished requests)"),
    }
    println!("aggregate goodput: {:.1} tok/s", summary.goodput_tps);
    println!(
        "decode steps: {} (k=0 on {:.1}%)",
        summary.decode_steps,
        summary.k_zero_fraction * 100.0
    );
    println!("wrote {}", out_dir.display());
}

pub fn run(args: RunArgs) -> Result<()> {
    let config = effective_config(&args)?;
    if let Some(path) = &args.dump_config {
        let text = toml::to_string(&config).context("serializing run config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let sim = build_sim(&config)?;
    let log = sim.run().context("running simulation")?;
    let out_dir = resolve_out_dir(&config.out);
    export_csv(&log, &out_dir).context("exporting CSVs")?;
    print_summary(&sim, &summarize(&log), &out_dir);
    Ok(())
}

fn parse_modes(spec: &str) -> Result<Vec<Mode>> {
    spec.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Mode>().map_err(|e| anyhow::anyhow!(e)))
        .collect()
}

fn default_modes(max_len: u32) -> Vec<Mode> {
    let mut modes = vec![Mode::NoSpec];
    modes.extend((1..=max_len).map(Mode::FixedK));
    modes.push(Mode::TurboSpec);
    modes
}

struct SweepCell {
    scenario_label: String,
    mode: Mode,
    log: MetricsLog,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    if args.scenario.is_empty() {
        bail!("sweep needs at least one --scenario");
    }
    let out_root = resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out_root)
        .with_context(|| format!("creating {}", out_root.display()))?;

    // Build every cell's config up front so validation errors surface before
    // any simulation starts.
    let mut cells: Vec<(String, Mode, SimConfig, PathBuf)> = Vec::new();
    for scenario_path in &args.scenario {
        let base = RunConfigFile {
            scenario: scenario_path.clone(),
            target_profile: args.target_profile.clone(),
            draft_profile: args.draft_profile.clone(),
            prefill_target_profile: args.prefill_target_profile.clone(),
            prefill_draft_profile: args.prefill_draft_profile.clone(),
            mode: "turbospec".into(),
            seed: args.seed,
            out: out_root.clone(),
            max_len: args.max_len,
        };
        let probe = build_sim(&base)?;
        let modes = match &args.modes {
            Some(spec) => parse_modes(spec)?,
            None => default_modes(probe.controller.max_len),
        };
        let label = scenario_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| probe.scenario_name.clone());
        for mode in modes {
            let mut config = base.clone();
            config.mode = mode.to_string();
            let sim = build_sim(&config)?;
            let cell_dir = out_root.join(format!("{label}-{}", mode.to_string().replace(':', "-")));
            cells.push((label.clone(), mode, sim, cell_dir));
        }
    }

    // Cells are independent; run them on worker threads.
    let results: Vec<Result<SweepCell>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .iter()
            .map(|(label, mode, sim, cell_dir)| {
                scope.spawn(move || -> Result<SweepCell> {
                    let log = sim.run().with_context(|| format!("{label} {mode}"))?;
                    export_csv(&log, cell_dir)
                        .with_context(|| format!("exporting {}", cell_dir.display()))?;
                    Ok(SweepCell {
                        scenario_label: label.clone(),
                        mode: *mode,
                        log,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    let mut failures = 0;
    let mut rows: Vec<SweepCell> = Vec::new();
    for result in results {
        match result {
            Ok(cell) => rows.push(cell),
            Err(e) => {
                failures += 1;
                eprintln!("sweep cell failed: {e:#}");
            }
        }
    }

    let mut table = String::from(
        "scenario,mode,finished,mean_latency_ms,p50_ms,p99_ms,goodput_tps,k0_fraction,speedup_vs_no_spec\n",
    );
    for cell in &rows {
        let mean = cell.log.mean_request_latency_ms().ok();
        let baseline = rows
            .iter()
            .find(|c| c.scenario_label == cell.scenario_label && c.mode == Mode::NoSpec)
            .and_then(|c| c.log.mean_request_latency_ms().ok());
        let speedup = match (baseline, mean) {
            (Some(b), Some(m)) if m > 0.0 => format!("{}", b / m),
            _ => String::new(),
        };
        let quantiles = latency_cdf(&cell.log, &[0.5, 0.99]).unwrap_or_default();
        let q = |i: usize| {
            quantiles
                .get(i)
                .map(|(_, v)| format!("{v}"))
                .unwrap_or_default()
        };
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            cell.scenario_label,
            cell.mode,
            cell.log.request_records.len(),
            mean.map(|m| format!("{m}")).unwrap_or_default(),
            q(0),
            q(1),
            cell.log.aggregate_goodput_tps(),
            cell.log.k_zero_fraction(),
            speedup,
        ));
        println!(
            "{:<20} {:<10} mean {:>10.1} ms  goodput {:>9.1} tok/s  k=0 {:>5.1}%",
            cell.scenario_label,
            cell.mode.to_string(),
            mean.unwrap_or(f64::NAN),
            cell.log.aggregate_goodput_tps(),
            cell.log.k_zero_fraction() * 100.0,
        );
    }
    let table_path = out_root.join("sweep.csv");
    std::fs::write(&table_path, table)
        .with_context(|| format!("writing {}", table_path.display()))?;
    println!("wrote {}", table_path.display());

    if failures > 0 {
        bail!("{failures} sweep cell(s) failed");
    }
    Ok(())
}
