//! End-to-end pipeline: data collection, training, evaluation and
//! comparison of the four deployment configurations.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdapterKind, FilterParams};
use crate::dynamics::{ParametricParams, DT};
use crate::episode::{mix_seed, run_episode, Course, Driver, EpisodeConfig, EpisodeLimits, PursuitConfig};
use crate::error::{Error, Result};
use crate::io::{write_run_log, Checkpoint};
use crate::meta::{fit_feature_stats, slice_dataset, train, EpochRecord, MetaParams, MetaTrainConfig, RunLog};
use crate::model::HybridModel;
use crate::mppi::{CostConfig, MppiConfig};
use crate::network::{NetShape, ResidualNet};
use crate::sim::{default_course, figure_eight, generate_map, generate_map_with, MapCategory, MeasurementNoise, SimPhysics, TerrainMap, MAP_CELL, MAP_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Configuration {
    Baseline,
    SlidingLsq,
    Adaptation,
    MetaAdaptation,
}

impl Configuration {
    pub const ALL: [Configuration; 4] = [
        Configuration::Baseline,
        Configuration::SlidingLsq,
        Configuration::Adaptation,
        Configuration::MetaAdaptation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Baseline => "baseline",
            Configuration::SlidingLsq => "sliding-lsq",
            Configuration::Adaptation => "adaptation",
            Configuration::MetaAdaptation => "meta-adaptation",
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown configuration '{s}'")))
    }
}

// ---------------------------------------------------------------- collect

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub runs: usize,
    pub seed: u64,
    pub max_time: f64,
    /// Times the randomized figure-eight is driven per run.
    pub laps: usize,
    pub categories: Vec<MapCategory>,
    pub physics: SimPhysics,
    pub noise: MeasurementNoise,
    pub pursuit: PursuitConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            runs: 12,
            seed: 1000,
            max_time: 45.0,
            laps: 2,
            categories: MapCategory::ALL.to_vec(),
            physics: SimPhysics::data_generation(),
            noise: MeasurementNoise::default(),
            pursuit: PursuitConfig::default(),
        }
    }
}

/// Figure-eight with randomized center and extent.
fn random_course(rng: &mut impl Rng, laps: usize) -> Vec<(f64, f64)> {
    let c = MAP_SIZE / 2.0;
    let center = (c + rng.gen_range(-15.0..15.0), c + rng.gen_range(-15.0..15.0));
    let lap = figure_eight(center, rng.gen_range(25.0..40.0), rng.gen_range(16.0..28.0), 24);
    let mut wps = Vec::with_capacity(lap.len() * laps.max(1));
    for _ in 0..laps.max(1) {
        wps.extend_from_slice(&lap);
    }
    wps
}

/// Drive the scripted pursuit controller on fresh random maps with the
/// data-generation physics. Run `i` uses category `categories[i % len]`.
pub fn collect(cfg: &CollectConfig) -> Result<Vec<RunLog>> {
    if cfg.categories.is_empty() {
        return Err(Error::Config("no map categories to collect on".into()));
    }
    if cfg.runs == 0 {
        log::warn!("collect: zero runs requested, dataset will be empty");
        return Ok(Vec::new());
    }
    cfg.physics.validate()?;
    let geometry = ParametricParams::default();
    let sensing = HybridModel::parametric(geometry, NetShape::default());
    (0..cfg.runs)
        .into_par_iter()
        .map(|i| {
            let seed = mix_seed(cfg.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cat = cfg.categories[i % cfg.categories.len()];
            let wps = random_course(&mut rng, cfg.laps);
            let map = generate_map_with(cat, seed, MAP_SIZE, MAP_CELL, &wps);
            let last = *wps.last().expect("non-empty course");
            let yaw = (wps[0].1 - last.1).atan2(wps[0].0 - last.0);
            // The pursuit driver needs no cost-to-go fields.
            let course = Course {
                start: (last.0, last.1, yaw),
                waypoints: wps,
                fields: Vec::new(),
            };
            let mut ec = EpisodeConfig::new(FilterParams::new(sensing.n_theta()));
            ec.driver = Driver::Pursuit(cfg.pursuit.clone());
            ec.physics = cfg.physics.clone();
            ec.noise = cfg.noise.clone();
            ec.limits.max_time = cfg.max_time;
            ec.control_seed = mix_seed(seed, 1);
            ec.noise_seed = mix_seed(seed, 2);
            ec.prediction_horizon = 0.0;
            let log = run_episode(&map, &course, &sensing, &ec)?;
            log::info!("collect: run {i} on {cat} ({} steps)", log.records.len());
            Ok(log.to_run_log(i))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                median: 0.0,
                max: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            max: v[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub runs: usize,
    pub steps: usize,
    pub duration: f64,
    pub speed: Spread,
    pub abs_yaw_rate: Spread,
    pub abs_roll_deg: Spread,
    pub abs_pitch_deg: Spread,
    pub throttle: Spread,
    pub brake: Spread,
}

impl DatasetStats {
    pub fn of(runs: &[RunLog]) -> Self {
        let states = || runs.iter().flat_map(|r| &r.states[..r.controls.len()]);
        let speed: Vec<f64> = states().map(|x| x.vx.hypot(x.vy)).collect();
        let yaw: Vec<f64> = states().map(|x| x.yaw_rate.abs()).collect();
        let terr = || runs.iter().flat_map(|r| &r.terrains);
        let roll: Vec<f64> = terr().map(|y| y.roll.abs().to_degrees()).collect();
        let pitch: Vec<f64> = terr().map(|y| y.pitch.abs().to_degrees()).collect();
        let ctl = || runs.iter().flat_map(|r| &r.controls);
        let steps = speed.len();
        Self {
            runs: runs.len(),
            steps,
            duration: steps as f64 * DT,
            speed: Spread::of(&speed),
            abs_yaw_rate: Spread::of(&yaw),
            abs_roll_deg: Spread::of(&roll),
            abs_pitch_deg: Spread::of(&pitch),
            throttle: Spread::of(&ctl().map(|u| u.throttle).collect::<Vec<_>>()),
            brake: Spread::of(&ctl().map(|u| u.brake).collect::<Vec<_>>()),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("runs {}  steps {}  duration {:.1} s\n", self.runs, self.steps, self.duration);
        let _ = writeln!(s, "{:<16}{:>10}{:>10}{:>10}", "quantity", "mean", "median", "max");
        for (name, sp) in [
            ("speed [m/s]", &self.speed),
            ("|yaw rate|", &self.abs_yaw_rate),
            ("|roll| [deg]", &self.abs_roll_deg),
            ("|pitch| [deg]", &self.abs_pitch_deg),
            ("throttle", &self.throttle),
            ("brake", &self.brake),
        ] {
            let _ = writeln!(s, "{:<16}{:>10.3}{:>10.3}{:>10.3}", name, sp.mean, sp.median, sp.max);
        }
        s
    }
}

/// Write `runs/run_XXX.jsonl`, `stats.json` and `stats.txt` under `dir`.
pub fn write_dataset(dir: &Path, runs: &[RunLog]) -> Result<DatasetStats> {
    let rd = dir.join("runs");
    fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
    for r in runs {
        write_run_log(&rd.join(format!("run_{:03}.jsonl", r.run_id)), r)?;
    }
    let stats = DatasetStats::of(runs);
    write_json(&dir.join("stats.json"), &stats)?;
    write_text(&dir.join("stats.txt"), &stats.render())?;
    Ok(stats)
}

// ------------------------------------------------------------------ train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub meta: MetaTrainConfig,
    pub shape: NetShape,
    pub init_seed: u64,
    /// Scale of the initial last-layer basis.
    pub basis_scale: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            meta: MetaTrainConfig::default(),
            shape: NetShape::default(),
            init_seed: 7,
            basis_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub baseline: Checkpoint,
    pub meta: Checkpoint,
    pub segments: usize,
    pub skipped_runs: usize,
}

/// Train the non-adaptive baseline and the meta-learned model from the
/// same initialization and segments.
pub fn train_models(runs: &[RunLog], settings: &TrainSettings) -> Result<TrainedModels> {
    let params = ParametricParams::default();
    let stats = fit_feature_stats(runs, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.init_seed);
    let mut net = ResidualNet::init(settings.shape, &mut rng);
    net.basis.iter_mut().for_each(|w| *w *= settings.basis_scale);
    let model = HybridModel::new(params, net, stats.clone());
    let init = MetaParams::from_parts(&model, &FilterParams::new(model.n_theta()));
    let mc = &settings.meta;
    let (segments, skipped) = slice_dataset(runs, mc.tau, mc.horizon, mc.stride);
    log::info!("train: {} segments ({} runs too short)", segments.len(), skipped);

    let base = train(&segments, init.clone(), &stats, mc, false)?;
    let meta = train(&segments, init, &stats, mc, true)?;
    Ok(TrainedModels {
        baseline: Checkpoint::new("baseline", base.params.model(&stats), base.params.filter(), base.history),
        meta: Checkpoint::new("meta", meta.params.model(&stats), meta.params.filter(), meta.history),
        segments: segments.len(),
        skipped_runs: skipped,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// --------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub categories: Vec<MapCategory>,
    pub configurations: Vec<Configuration>,
    pub mppi: MppiConfig,
    pub cost: CostConfig,
    pub physics: SimPhysics,
    pub noise: MeasurementNoise,
    pub limits: EpisodeLimits,
    pub lsq_window: usize,
    pub lsq_ridge: f64,
    pub bootstrap_resamples: usize,
    /// Keep every n-th step in the stored trajectory traces.
    pub trace_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 5,
            seed: 0,
            categories: MapCategory::ALL.to_vec(),
            configurations: Configuration::ALL.to_vec(),
            mppi: MppiConfig::default(),
            cost: CostConfig::default(),
            physics: SimPhysics::deployment(),
            noise: MeasurementNoise::default(),
            limits: EpisodeLimits::default(),
            lsq_window: 50,
            lsq_ridge: 1e-2,
            bootstrap_resamples: 10_000,
            trace_stride: 10,
        }
    }
}

/// Seed of the evaluation map for a category.
pub fn eval_map_seed(seed: u64, cat: MapCategory) -> u64 {
    let k = MapCategory::ALL.iter().position(|c| *c == cat).expect("listed category") as u64;
    mix_seed(seed ^ 0x5eed_0f_3a95, 100 + k)
}

pub fn eval_maps(categories: &[MapCategory], seed: u64) -> Vec<TerrainMap> {
    categories.par_iter().map(|&c| generate_map(c, eval_map_seed(seed, c))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub configuration: Configuration,
    pub category: MapCategory,
    pub map_seed: u64,
    pub episode: usize,
    pub control_seed: u64,
    pub noise_seed: u64,
    pub completed: bool,
    pub completion_time: f64,
    pub average_speed: f64,
    pub prediction_error: f64,
    pub rollover_crossings: usize,
    pub time_exceeding_limit: f64,
    pub rollover_cost: f64,
    pub left_map: bool,
    pub planner_fallbacks: usize,
    pub adapter_resets: usize,
    pub final_theta_norm: f64,
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CompletionTime,
    AverageSpeed,
    PredictionError,
    RolloverCrossings,
    TimeExceedingLimit,
    RolloverCost,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::CompletionTime,
        Metric::AverageSpeed,
        Metric::PredictionError,
        Metric::RolloverCrossings,
        Metric::TimeExceedingLimit,
        Metric::RolloverCost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::CompletionTime => "completion_time",
            Metric::AverageSpeed => "average_speed",
            Metric::PredictionError => "prediction_error",
            Metric::RolloverCrossings => "rollover_crossings",
            Metric::TimeExceedingLimit => "time_exceeding_limit",
            Metric::RolloverCost => "rollover_cost",
        }
    }

    pub fn lower_is_better(self) -> bool {
        !matches!(self, Metric::AverageSpeed)
    }

    pub fn of(self, r: &EpisodeRow) -> f64 {
        match self {
            Metric::CompletionTime => r.completion_time,
            Metric::AverageSpeed => r.average_speed,
            Metric::PredictionError => r.prediction_error,
            Metric::RolloverCrossings => r.rollover_crossings as f64,
            Metric::TimeExceedingLimit => r.time_exceeding_limit,
            Metric::RolloverCost => r.rollover_cost,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub configuration: Configuration,
    pub category: MapCategory,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Downsampled trajectory and `|theta|` of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub configuration: Configuration,
    pub category: MapCategory,
    pub episode: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub theta_norm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<EpisodeRow>,
    pub aggregates: Vec<Aggregate>,
    pub traces: Vec<Trace>,
}

/// Percentile bootstrap interval of the mean (2.5 % and 97.5 %).
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if resamples == 0 || n == 1 {
        let m = values.iter().sum::<f64>() / n as f64;
        return (m, m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<EpisodeRow>, traces: Vec<Trace>, resamples: usize, seed: u64) -> Self {
        let groups: BTreeSet<(Configuration, MapCategory)> = rows.iter().map(|r| (r.configuration, r.category)).collect();
        let mut aggregates = Vec::new();
        for (gi, &(conf, cat)) in groups.iter().enumerate() {
            let sel: Vec<&EpisodeRow> = rows.iter().filter(|r| r.configuration == conf && r.category == cat).collect();
            for (mi, m) in Metric::ALL.into_iter().enumerate() {
                let v: Vec<f64> = sel.iter().map(|r| m.of(r)).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let (lo, hi) = bootstrap_ci(&v, resamples, mix_seed(seed, (gi * Metric::ALL.len() + mi) as u64));
                aggregates.push(Aggregate {
                    configuration: conf,
                    category: cat,
                    metric: m,
                    n: v.len(),
                    mean,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
        }
        Self { rows, aggregates, traces }
    }

    pub fn aggregate(&self, conf: Configuration, cat: MapCategory, metric: Metric) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.configuration == conf && a.category == cat && a.metric == metric)
    }

    pub fn categories(&self) -> BTreeSet<MapCategory> {
        self.rows.iter().map(|r| r.category).collect()
    }

    pub fn configurations(&self) -> BTreeSet<Configuration> {
        self.rows.iter().map(|r| r.configuration).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for cat in self.categories() {
            let _ = writeln!(s, "== {cat}");
            let _ = write!(s, "{:<18}", "configuration");
            for m in Metric::ALL {
                let _ = write!(s, "{:>24}", m.name());
            }
            s.push('\n');
            for conf in self.configurations() {
                let _ = write!(s, "{conf:<18}");
                for m in Metric::ALL {
                    match self.aggregate(conf, cat, m) {
                        Some(a) => {
                            let _ = write!(s, "{:>24}", format!("{:.3} [{:.3},{:.3}]", a.mean, a.ci_low, a.ci_high));
                        }
                        None => {
                            let _ = write!(s, "{:>24}", "-");
                        }
                    }
                }
                s.push('\n');
            }
        }
        s
    }

    /// `metrics.csv`, `metrics.json`, `report.txt` and `plotdata/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join("metrics.json"), self)?;
        write_text(&dir.join("report.txt"), &self.render())?;
        write_plotdata(&dir.join("plotdata"), &[("", self)])
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Trained models for the four configurations.
#[derive(Clone, Debug)]
pub struct Models {
    pub baseline: Checkpoint,
    pub meta: Option<Checkpoint>,
}

impl Models {
    fn setup(&self, conf: Configuration, cfg: &EvalConfig) -> Result<(&HybridModel, AdapterKind, FilterParams)> {
        let b = &self.baseline;
        Ok(match conf {
            Configuration::Baseline => (&b.model, AdapterKind::None, b.filter.clone()),
            Configuration::SlidingLsq => (
                &b.model,
                AdapterKind::SlidingLsq {
                    window: cfg.lsq_window,
                    ridge: cfg.lsq_ridge,
                },
                b.filter.clone(),
            ),
            Configuration::Adaptation => (&b.model, AdapterKind::Kalman, b.filter.clone()),
            Configuration::MetaAdaptation => {
                let m = self
                    .meta
                    .as_ref()
                    .ok_or_else(|| Error::Config("meta-adaptation needs a meta checkpoint".into()))?;
                (&m.model, AdapterKind::Kalman, m.filter.clone())
            }
        })
    }
}

/// Run every configuration on every map for `cfg.episodes` seeds. All
/// configurations share the episode seeds.
pub fn evaluate(maps: &[TerrainMap], models: &Models, cfg: &EvalConfig) -> Result<MetricsReport> {
    if cfg.episodes == 0 {
        log::warn!("evaluate: zero episodes requested");
    }
    cfg.mppi.validate()?;
    cfg.cost.validate()?;
    let courses = maps
        .par_iter()
        .map(|m| Course::closed_loop(m, &default_course()))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for mi in 0..maps.len() {
        for ep in 0..cfg.episodes {
            for &conf in &cfg.configurations {
                jobs.push((mi, ep, conf));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(mi, ep, conf)| {
            let map = &maps[mi];
            let (model, adapter, filter) = models.setup(conf, cfg)?;
            let episode_seed = mix_seed(mix_seed(cfg.seed, map.seed), ep as u64);
            let mut ec = EpisodeConfig::new(filter);
            ec.mppi = cfg.mppi.clone();
            ec.cost = cfg.cost.clone();
            ec.physics = cfg.physics.clone();
            ec.noise = cfg.noise.clone();
            ec.limits = cfg.limits.clone();
            ec.adapter = adapter;
            ec.control_seed = mix_seed(episode_seed, 1);
            ec.noise_seed = mix_seed(episode_seed, 2);
            let started = Instant::now();
            let log = run_episode(map, &courses[mi], model, &ec)?;
            let s = &log.summary;
            log::info!(
                "evaluate: {conf} {} ep {ep}: completed {} in {:.1} s, pred err {:.2} m",
                map.category,
                s.completed,
                s.completion_time,
                s.prediction_error
            );
            let row = EpisodeRow {
                configuration: conf,
                category: map.category,
                map_seed: map.seed,
                episode: ep,
                control_seed: ec.control_seed,
                noise_seed: ec.noise_seed,
                completed: s.completed,
                completion_time: s.completion_time,
                average_speed: s.average_speed,
                prediction_error: s.prediction_error,
                rollover_crossings: s.rollover_crossings,
                time_exceeding_limit: s.time_exceeding_limit,
                rollover_cost: s.rollover_cost,
                left_map: s.left_map,
                planner_fallbacks: s.planner_fallbacks,
                adapter_resets: s.adapter_resets,
                final_theta_norm: s.final_theta_norm,
                wall_time: started.elapsed().as_secs_f64(),
            };
            let stride = cfg.trace_stride.max(1);
            let kept: Vec<_> = log.records.iter().step_by(stride).collect();
            let trace = Trace {
                configuration: conf,
                category: map.category,
                episode: ep,
                t: kept.iter().map(|r| r.t).collect(),
                x: kept.iter().map(|r| r.true_state[0]).collect(),
                y: kept.iter().map(|r| r.true_state[1]).collect(),
                theta_norm: kept.iter().map(|r| r.theta.iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
            };
            Ok((row, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, traces) = results.into_iter().unzip();
    Ok(MetricsReport::from_rows(rows, traces, cfg.bootstrap_resamples, cfg.seed))
}

// ---------------------------------------------------------------- compare

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub source: String,
    pub configuration: Configuration,
    pub category: MapCategory,
    pub metric: Metric,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub entries: Vec<ComparisonEntry>,
}

/// Side-by-side aggregates of several reports with the best value per
/// category and metric flagged. All reports must cover the same categories.
pub fn compare(reports: &[(String, MetricsReport)]) -> Result<Comparison> {
    let Some((first_name, first)) = reports.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    let cats = first.categories();
    for (name, r) in &reports[1..] {
        if r.categories() != cats {
            return Err(Error::ReportMismatch(format!(
                "'{name}' covers {:?}, '{first_name}' covers {:?}",
                r.categories(),
                cats
            )));
        }
    }
    let mut entries = Vec::new();
    for &cat in &cats {
        for m in Metric::ALL {
            let start = entries.len();
            for (name, r) in reports {
                for conf in r.configurations() {
                    if let Some(a) = r.aggregate(conf, cat, m) {
                        entries.push(ComparisonEntry {
                            source: name.clone(),
                            configuration: conf,
                            category: cat,
                            metric: m,
                            mean: a.mean,
                            ci_low: a.ci_low,
                            ci_high: a.ci_high,
                            best: false,
                        });
                    }
                }
            }
            let group = &mut entries[start..];
            let key = |e: &ComparisonEntry| if m.lower_is_better() { e.mean } else { -e.mean };
            if let Some(best) = group.iter().map(key).min_by(f64::total_cmp) {
                group.iter_mut().filter(|e| key(e) == best).for_each(|e| e.best = true);
            }
        }
    }
    Ok(Comparison { entries })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let cats: BTreeSet<MapCategory> = self.entries.iter().map(|e| e.category).collect();
        for cat in cats {
            let _ = writeln!(s, "== {cat}  (* best)");
            let _ = write!(s, "{:<32}", "source/configuration");
            for m in Metric::ALL {
                let _ = write!(s, "{:>22}", m.name());
            }
            s.push('\n');
            let mut rows: Vec<(&str, Configuration)> = Vec::new();
            for e in self.entries.iter().filter(|e| e.category == cat) {
                if !rows.contains(&(e.source.as_str(), e.configuration)) {
                    rows.push((e.source.as_str(), e.configuration));
                }
            }
            for (src, conf) in rows {
                let label = if src.is_empty() { conf.to_string() } else { format!("{src}/{conf}") };
                let _ = write!(s, "{label:<32}");
                for m in Metric::ALL {
                    let e = self
                        .entries
                        .iter()
                        .find(|e| e.category == cat && e.source == src && e.configuration == conf && e.metric == m);
                    let cell = match e {
                        Some(e) => format!("{:.3}{}", e.mean, if e.best { "*" } else { " " }),
                        None => "-".into(),
                    };
                    let _ = write!(s, "{cell:>22}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// `comparison.txt`, `comparison.json` and merged `plotdata/`.
pub fn write_comparison(dir: &Path, cmp: &Comparison, reports: &[(String, MetricsReport)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("comparison.txt"), &cmp.render())?;
    write_json(&dir.join("comparison.json"), cmp)?;
    let named: Vec<(&str, &MetricsReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_plotdata(&dir.join("plotdata"), &named)
}

#[derive(Serialize)]
struct TracePoint<'a> {
    source: &'a str,
    configuration: Configuration,
    category: MapCategory,
    episode: usize,
    t: f64,
    x: f64,
    y: f64,
    theta_norm: f64,
}

/// `trajectories.csv` (x, y over time) and `theta_norm.csv` for every trace.
fn write_plotdata(dir: &Path, reports: &[(&str, &MetricsReport)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tp = dir.join("trajectories.csv");
    let np = dir.join("theta_norm.csv");
    let mut tw = csv::Writer::from_path(&tp).map_err(|e| csv_error(&tp, e))?;
    let mut nw = csv::Writer::from_path(&np).map_err(|e| csv_error(&np, e))?;
    tw.write_record(["source", "configuration", "category", "episode", "t", "x", "y"])
        .map_err(|e| csv_error(&tp, e))?;
    nw.write_record(["source", "configuration", "category", "episode", "t", "theta_norm"])
        .map_err(|e| csv_error(&np, e))?;
    for (src, r) in reports {
        for tr in &r.traces {
            for k in 0..tr.t.len() {
                let p = TracePoint {
                    source: src,
                    configuration: tr.configuration,
                    category: tr.category,
                    episode: tr.episode,
                    t: tr.t[k],
                    x: tr.x[k],
                    y: tr.y[k],
                    theta_norm: tr.theta_norm[k],
                };
                let head = [p.source.to_string(), p.configuration.to_string(), p.category.to_string(), p.episode.to_string()];
                tw.write_record(head.iter().cloned().chain([p.t.to_string(), p.x.to_string(), p.y.to_string()]))
                    .map_err(|e| csv_error(&tp, e))?;
                nw.write_record(head.into_iter().chain([p.t.to_string(), p.theta_norm.to_string()]))
                    .map_err(|e| csv_error(&np, e))?;
            }
        }
    }
    tw.flush().map_err(|e| Error::io(&tp, e))?;
    nw.flush().map_err(|e| Error::io(&np, e))
}

// ----------------------------------------------------------------- config

/// Everything a pipeline run needs; serialized next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub collect: CollectConfig,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Swap in the full-scale planner and training settings, keeping seeds.
    pub fn full_scale(&mut self) {
        let seed = self.train.meta.seed;
        self.train.meta = MetaTrainConfig {
            seed,
            ..MetaTrainConfig::full_scale()
        };
        self.eval.mppi = MppiConfig::full_scale();
        self.collect.runs = self.collect.runs.max(40);
        self.collect.max_time = self.collect.max_time.max(90.0);
    }

    /// Apply a master seed to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.collect.seed = mix_seed(seed, 11);
        self.train.meta.seed = mix_seed(seed, 12);
        self.train.init_seed = mix_seed(seed, 13);
        self.eval.seed = mix_seed(seed, 14);
    }

    pub fn validate(&self) -> Result<()> {
        self.collect.physics.validate()?;
        self.eval.physics.validate()?;
        self.eval.mppi.validate()?;
        self.eval.cost.validate()?;
        self.train.meta.validate(FilterParams::new(self.train.shape.n_theta()).h)?;
        if self.eval.categories.is_empty() || self.eval.configurations.is_empty() {
            return Err(Error::Config("evaluation needs at least one category and configuration".into()));
        }
        Ok(())
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}
