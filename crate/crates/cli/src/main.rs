//! `metadapt` command-line driver.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 invalid arguments or
//! configuration, 3 I/O or file-format error, 4 numerical failure,
//! 5 reports that can not be compared.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use metadapt::experiment::{
    collect, compare, eval_map_seed, evaluate, train_models, write_comparison, write_dataset, write_history_csv, Configuration, Models,
    MetricsReport, RunConfig,
};
use metadapt::io::{read_dataset, Checkpoint};
use metadapt::sim::{generate_map, MapCategory, TerrainMap};

#[derive(Parser)]
#[command(name = "metadapt", version, about = "Meta-learned online adaptation for off-road MPPI, sim2sim pipeline")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use full-scale planner and training settings.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the evaluation maps.
    GenMaps {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "map-category")]
        categories: Vec<MapCategory>,
    },
    /// Collect training runs with the scripted driver.
    Collect {
        #[arg(long)]
        out: PathBuf,
        /// Number of runs.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the baseline and meta-learned models.
    Train {
        /// Output directory of `collect`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run closed-loop episodes and write metrics.
    Evaluate {
        /// Directory with `baseline.json` and optionally `meta.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory of `gen-maps`; maps are generated when omitted.
        #[arg(long)]
        maps: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long = "map-category")]
        categories: Vec<MapCategory>,
        #[arg(long = "configuration")]
        configurations: Vec<Configuration>,
    },
    /// Tabulate several evaluation outputs side by side.
    Compare {
        /// Evaluation output directories.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use metadapt::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Config(_) | E::Shape(_) | E::GoalBlocked { .. } | E::OutOfGrid { .. }) => 2,
        Some(E::Io { .. } | E::Json { .. } | E::Version { .. } | E::Format { .. }) => 3,
        Some(E::NonFiniteState { .. } | E::SingularInnovation { .. } | E::Divergence { .. } | E::NonFiniteGradient { .. }) => 4,
        Some(E::ReportMismatch(_)) => 5,
        None if e.chain().any(|c| c.is::<toml::de::Error>()) => 2,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => 3,
        None => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if cli.full_scale {
        rc.full_scale();
    }
    if let Some(s) = cli.seed {
        rc.set_seed(s);
    }
    Ok(rc)
}

fn save_resolved(dir: &Path, rc: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.resolved.toml");
    fs::write(&path, toml::to_string(rc)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut rc = load_config(&cli)?;
    match cli.cmd {
        Cmd::GenMaps { out, categories } => {
            if !categories.is_empty() {
                rc.eval.categories = categories;
            }
            rc.validate()?;
            save_resolved(&out, &rc)?;
            for &cat in &rc.eval.categories {
                let map = generate_map(cat, eval_map_seed(rc.eval.seed, cat));
                map.save(&out, cat.name())?;
                log::info!("wrote {} map (seed {})", cat, map.seed);
            }
        }
        Cmd::Collect { out, episodes } => {
            if let Some(n) = episodes {
                rc.collect.runs = n;
            }
            rc.validate()?;
            save_resolved(&out, &rc)?;
            let runs = collect(&rc.collect)?;
            let stats = write_dataset(&out, &runs)?;
            println!("{}", stats.render());
        }
        Cmd::Train { data, out } => {
            rc.validate()?;
            save_resolved(&out, &rc)?;
            let runs = read_dataset(&data.join("runs"))?;
            if runs.is_empty() {
                log::warn!("no runs found in {}", data.join("runs").display());
            }
            let tm = train_models(&runs, &rc.train)?;
            tm.baseline.save(&out.join("baseline.json"))?;
            tm.meta.save(&out.join("meta.json"))?;
            write_history_csv(&out.join("baseline_history.csv"), &tm.baseline.history)?;
            write_history_csv(&out.join("meta_history.csv"), &tm.meta.history)?;
            let last = |c: &Checkpoint| c.history.last().map_or(f64::NAN, |r| r.mean_loss);
            println!(
                "trained on {} segments: baseline loss {:.4}, meta loss {:.4}",
                tm.segments,
                last(&tm.baseline),
                last(&tm.meta)
            );
        }
        Cmd::Evaluate {
            checkpoint,
            maps,
            out,
            episodes,
            categories,
            configurations,
        } => {
            if let Some(n) = episodes {
                rc.eval.episodes = n;
            }
            if !categories.is_empty() {
                rc.eval.categories = categories;
            }
            if !configurations.is_empty() {
                rc.eval.configurations = configurations;
            }
            rc.validate()?;
            save_resolved(&out, &rc)?;
            let baseline = Checkpoint::load(&checkpoint.join("baseline.json"))?;
            let meta_path = checkpoint.join("meta.json");
            let meta = if meta_path.exists() { Some(Checkpoint::load(&meta_path)?) } else { None };
            let maps: Vec<TerrainMap> = match &maps {
                Some(dir) => rc
                    .eval
                    .categories
                    .iter()
                    .map(|c| TerrainMap::load(dir, c.name()))
                    .collect::<Result<_, _>>()?,
                None => metadapt::experiment::eval_maps(&rc.eval.categories, rc.eval.seed),
            };
            let report = evaluate(&maps, &Models { baseline, meta }, &rc.eval)?;
            report.write(&out)?;
            println!("{}", report.render());
        }
        Cmd::Compare { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| Ok((p.display().to_string(), MetricsReport::read(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&loaded)?;
            write_comparison(&out, &cmp, &loaded)?;
            println!("{}", cmp.render());
        }
    }
    Ok(())
}
