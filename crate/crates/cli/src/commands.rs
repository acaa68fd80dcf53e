//! Command implementations shared by the binary and its integration tests.

use crate::report::{self, ReportData};
use conjsim::config::RunConfig;
use conjsim::error::{Error, Result};
use conjsim::evaluation::{
    build_regime_report, read_episode_log, run_regime, run_regimes, write_episode_log,
    EpisodeRecord, Scenario,
};
use conjsim::fidelity::{reference_calibration, run_fidelity_grid, FidelityGrid};
use conjsim::optimizer::{logit, optimize, Hyperparams, OptLevel, OptimizeOptions, WeightInit};
use conjsim::routing::TopologyKind;
use conjsim::types::{derive_substream_seed, AttackConfig, Regime};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Routing-bias grid of the fidelity sweep.
pub const FIDELITY_RHOS: [f64; 3] = [0.0, 0.4, 0.8];

/// CLI-level overrides; only the seed and episode count may diverge from the
/// config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
}

/// Exclusive lock on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".conjsim.lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    episodes: Option<usize>,
    out_dir: String,
}

/// Create the output directory, take its lock, and write the manifest
/// before any results.
fn open_output(
    command: &str,
    config_path: Option<&Path>,
    seed: Option<u64>,
    episodes: Option<usize>,
    out_dir: &Path,
) -> Result<DirLock> {
    fs::create_dir_all(out_dir)?;
    let lock = DirLock::acquire(out_dir)?;
    let config_sha256 = match config_path {
        Some(path) => {
            let bytes = fs::read(path)?;
            Some(format!("{:x}", Sha256::digest(&bytes)))
        }
        None => None,
    };
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: config_path.map(|p| p.display().to_string()),
        config_sha256,
        seed,
        episodes,
        out_dir: out_dir.display().to_string(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(lock)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

struct LoadedRun {
    config: RunConfig,
    scenario: Scenario,
    attack: AttackConfig,
    seed: u64,
    episodes: usize,
}

fn load_run(config_path: Option<&Path>, overrides: &Overrides) -> Result<LoadedRun> {
    let path = config_path
        .ok_or_else(|| Error::Config("this command requires --config <file>".to_string()))?;
    let config = RunConfig::from_path(path)?;
    let scenario = config.build_scenario()?;
    let attack = config.build_attack()?;
    let seed = overrides.seed.unwrap_or(config.run.seed);
    let episodes = overrides.episodes.unwrap_or(config.run.episodes);
    if episodes == 0 {
        return Err(Error::Config("--episodes must be at least 1".to_string()));
    }
    Ok(LoadedRun {
        config,
        scenario,
        attack,
        seed,
        episodes,
    })
}

fn regime_log_name(regime: Regime) -> String {
    format!("episodes_{}.jsonl", regime.name())
}

fn run_and_log_regimes(
    run: &LoadedRun,
    attack: &AttackConfig,
    out_dir: &Path,
) -> Result<BTreeMap<Regime, Vec<EpisodeRecord>>> {
    let backend = run.config.build_backend()?;
    let policies = run.config.build_policies()?;
    let by_regime = run_regimes(
        &run.scenario,
        &run.config.regimes(),
        attack,
        backend.as_ref(),
        &policies,
        run.seed,
        run.episodes,
    )?;
    for (regime, records) in &by_regime {
        write_episode_log(records, &out_dir.join(regime_log_name(*regime)))?;
    }
    Ok(by_regime)
}

/// Run every configured regime, write one episode log per regime, and emit
/// the regime report.
pub fn cmd_simulate(
    config_path: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<()> {
    let run = load_run(config_path, overrides)?;
    let _lock = open_output(
        "simulate",
        config_path,
        Some(run.seed),
        Some(run.episodes),
        out_dir,
    )?;
    let by_regime = run_and_log_regimes(&run, &run.attack, out_dir)?;
    let regime_report = build_regime_report(&by_regime, run.episodes)?;
    write_json(&out_dir.join("report.json"), &regime_report)?;
    let text = report::render_regime_report(&regime_report, run.scenario.topology.kind);
    fs::write(out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct OptimizeSummary {
    level: String,
    config: AttackConfig,
    final_loss: f64,
    steps: usize,
}

/// Optimize the attack configuration, write the decoded tuple and the loss
/// trace, and optionally simulate under the optimum.
pub fn cmd_optimize(
    config_path: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
    simulate_after: bool,
) -> Result<()> {
    let run = load_run(config_path, overrides)?;
    let hyper = run.config.build_hyperparams()?;
    let options = run.config.build_optimize_options()?;
    let _lock = open_output(
        "optimize",
        config_path,
        Some(run.seed),
        Some(run.episodes),
        out_dir,
    )?;

    let outcome = optimize(&run.scenario.affinity_vector(), &hyper, run.seed, &options)?;
    write_json(&out_dir.join("theta_star.json"), &outcome.config)?;
    write_json(&out_dir.join("loss_trace.json"), &outcome.loss_trace)?;
    let summary = OptimizeSummary {
        level: options.level.to_string(),
        config: outcome.config.clone(),
        final_loss: *outcome.loss_trace.last().expect("steps >= 1"),
        steps: outcome.loss_trace.len(),
    };
    write_json(&out_dir.join("optimize_summary.json"), &summary)?;
    println!(
        "optimized ({}): key_index={} slot={} rho={:.4} final_loss={:.6}",
        summary.level,
        summary.config.key_index,
        summary.config.slot,
        summary.config.routing_bias,
        summary.final_loss
    );

    if simulate_after {
        let followup_dir = out_dir.join("simulate_under_optimum");
        fs::create_dir_all(&followup_dir)?;
        let by_regime = run_and_log_regimes(&run, &outcome.config, &followup_dir)?;
        let regime_report = build_regime_report(&by_regime, run.episodes)?;
        write_json(&followup_dir.join("report.json"), &regime_report)?;
        let text = report::render_regime_report(&regime_report, run.scenario.topology.kind);
        fs::write(followup_dir.join("report.txt"), &text)?;
        print!("{text}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LevelRun {
    seed: u64,
    config: AttackConfig,
    both_asr: f64,
}

#[derive(Debug, Serialize)]
struct LevelSummary {
    level: String,
    mean_both_asr: f64,
    runs: Vec<LevelRun>,
}

/// Optimize at every level over several seeds and simulate each decoded
/// configuration in the both regime.
pub fn cmd_evaluate(
    config_path: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
    seeds: u64,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".to_string()));
    }
    let run = load_run(config_path, overrides)?;
    let (hyper, base_options) = match &run.config.optimizer {
        Some(_) => (
            run.config.build_hyperparams()?,
            run.config.build_optimize_options()?,
        ),
        None => {
            // Without an [optimizer] section the sweep freezes the slot
            // weights at the configured backend effectiveness.
            let eff = run.config.backend_params().slot_effectiveness.as_array();
            (
                Hyperparams::default(),
                OptimizeOptions {
                    level: OptLevel::Full,
                    weight_init: WeightInit::Values([logit(eff[0]), logit(eff[1]), logit(eff[2])]),
                    train_weights: false,
                },
            )
        }
    };
    let _lock = open_output(
        "evaluate",
        config_path,
        Some(run.seed),
        Some(run.episodes),
        out_dir,
    )?;

    let backend = run.config.build_backend()?;
    let policies = run.config.build_policies()?;
    let mut summaries = Vec::new();
    for (level_index, level) in OptLevel::ALL.iter().enumerate() {
        let mut runs = Vec::new();
        for s in 0..seeds {
            let opt_seed = derive_substream_seed(run.seed, ((level_index as u64) << 32) | s);
            let options = OptimizeOptions {
                level: *level,
                ..base_options
            };
            let outcome = optimize(&run.scenario.affinity_vector(), &hyper, opt_seed, &options)?;
            let records = run_regime(
                &run.scenario,
                Regime::Both,
                &outcome.config,
                backend.as_ref(),
                &policies,
                opt_seed,
                run.episodes,
            )?;
            let both_asr = conjsim::evaluation::estimate_asr(&records)?;
            runs.push(LevelRun {
                seed: opt_seed,
                config: outcome.config,
                both_asr,
            });
        }
        let mean = runs.iter().map(|r| r.both_asr).sum::<f64>() / runs.len() as f64;
        summaries.push(LevelSummary {
            level: level.to_string(),
            mean_both_asr: mean,
            runs,
        });
    }
    write_json(&out_dir.join("levels.json"), &summaries)?;
    let mut text = String::from("optimization levels (mean both-regime ASR)\n");
    for summary in &summaries {
        text.push_str(&format!(
            "  {:<12} {:.4}\n",
            summary.level, summary.mean_both_asr
        ));
    }
    fs::write(out_dir.join("levels.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Run the topology x routing-bias fidelity grid and write its table.
pub fn cmd_fidelity(
    config_path: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<()> {
    let run = load_run(config_path, overrides)?;
    let _lock = open_output(
        "fidelity",
        config_path,
        Some(run.seed),
        Some(run.episodes),
        out_dir,
    )?;
    let backend = run.config.build_backend()?;
    let grid: FidelityGrid = run_fidelity_grid(
        &run.scenario,
        &run.attack,
        backend.as_ref(),
        run.seed,
        run.episodes,
        &FIDELITY_RHOS,
        &TopologyKind::ALL,
    )?;
    write_json(&out_dir.join("fidelity.json"), &grid)?;
    let text = report::render_fidelity(&grid);
    fs::write(out_dir.join("fidelity.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Print (and persist) the two-anchor calibration solution.
pub fn cmd_calibrate(out_dir: &Path) -> Result<()> {
    let calibration = reference_calibration();
    fs::create_dir_all(out_dir)?;
    let _lock = open_output("calibrate", None, None, None, out_dir)?;
    write_json(&out_dir.join("calibration.json"), &calibration)?;
    let text = report::render_calibration(&calibration);
    fs::write(out_dir.join("calibration.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Summarize one or more episode logs into per-regime, aggregation,
/// fidelity, and defense tables.
pub fn cmd_report(logs: &[PathBuf], config_path: Option<&Path>, out_dir: &Path) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::Config(
            "report requires at least one log path".to_string(),
        ));
    }
    let mut records = Vec::new();
    for path in logs {
        let mut batch = read_episode_log(path).map_err(|e| match e {
            Error::LogParse { line, detail } => Error::LogParse {
                line,
                detail: format!("{}: {detail}", path.display()),
            },
            Error::LogSchema { line, detail } => Error::LogSchema {
                line,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })?;
        records.append(&mut batch);
    }

    let context = match config_path {
        Some(path) => {
            let config = RunConfig::from_path(path)?;
            let scenario = config.build_scenario()?;
            Some((
                config.build_attack()?.key_index,
                scenario.designated_agent_id().to_string(),
            ))
        }
        None => None,
    };
    let data: ReportData = report::build_report(&records, context.as_ref())?;

    fs::create_dir_all(out_dir)?;
    let _lock = open_output("report", config_path, None, None, out_dir)?;
    write_json(&out_dir.join("report.json"), &data)?;
    let text = report::render_report(&data);
    fs::write(out_dir.join("report.txt"), &text)?;
    print!("{text}");
    for warning in &data.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}
