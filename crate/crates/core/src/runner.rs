//! The acquire → simulate → train loop, its configuration, and the on-disk
//! run archive.
//!
//! Archive layout:
//!
//! ```text
//! config.toml              effective configuration (self-contained)
//! manifest.json            config hash, progress and status
//! dataset.jsonl            one {"round", "theta", "x"} record per line
//! acquisition.jsonl        one acquisition trace per round ≥ 1
//! metrics.csv              run_id,rule,round,metric,value
//! weights/round_NNNN.json  ensemble snapshots
//! weights/latest.json      snapshot of the last completed round
//! ```
//!
//! Every random draw comes from a stream keyed by purpose and round, so a
//! run that is stopped after round `k` and resumed produces the same bytes
//! as an uninterrupted run.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{self, AcquisitionConfig, AcquisitionResult, Rule};
use crate::ensemble::{Dataset, Ensemble, EnsembleConfig, EnsembleWeights, Record};
use crate::error::{Error, Result};
use crate::evaluation::{self, HeldOutSet, MetricRow};
use crate::grid::Grid;
use crate::rng::{self, Stream};
use crate::sampler::{self, HmcConfig, PosteriorSampleSet};
use crate::simulators::{BoxPrior, Simulator, SimulatorSpec};

const FORMAT_VERSION: u32 = 1;
/// Added to a round's stream index when the round is retried.
const RETRY_OFFSET: u64 = 1 << 32;

/// Observed data: given directly, or simulated once at `theta` from the
/// observation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSpec {
    pub x: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Total variation to the grid ground truth (tractable simulators only).
    Tv,
    /// Held-out log-likelihood of the ensemble.
    HeldoutLl,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Tv => "tv",
            MetricKind::HeldoutLl => "heldout_ll",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Evaluate every `every` rounds (plus round 0 and the last round);
    /// 0 evaluates only the last round.
    pub every: usize,
    /// Metrics to record; empty picks TV for the Gaussian model and
    /// held-out log-likelihood otherwise.
    pub metrics: Vec<MetricKind>,
    /// Grid nodes per axis for TV; defaults to 1000 in 1-D, 200 in 2-D.
    pub grid_points: Option<usize>,
    pub held_out: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            every: 1,
            metrics: Vec::new(),
            grid_points: None,
            held_out: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
    /// Keep an ensemble snapshot every this many rounds (0 keeps only the
    /// first, the last and `latest`).
    pub weights_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            weights_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    /// Initial prior draws.
    pub t0: usize,
    /// Acquisitions after the initial design.
    pub rounds: usize,
    pub simulator: SimulatorSpec,
    /// Defaults to the simulator's standard box.
    #[serde(default)]
    pub prior: Option<BoxPrior>,
    #[serde(default)]
    pub observation: ObservationSpec,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolves defaults and external files so the configuration stands on
    /// its own: the prior is made explicit and simulator constants inlined.
    pub fn normalized(&self, base_dir: Option<&Path>) -> Result<Self> {
        let mut c = self.clone();
        if let SimulatorSpec::Hh(h) = &mut c.simulator {
            h.constants = Some(h.resolve_constants(base_dir)?);
            h.constants_file = None;
        }
        let sim = Simulator::from_spec(&c.simulator, base_dir)?;
        if c.prior.is_none() {
            c.prior = Some(sim.default_prior());
        }
        if c.evaluation.metrics.is_empty() {
            c.evaluation.metrics = match sim {
                Simulator::Gaussian(_) => vec![MetricKind::Tv],
                _ => vec![MetricKind::HeldoutLl],
            };
        }
        c.validate(&sim)?;
        Ok(c)
    }

    fn validate(&self, sim: &Simulator) -> Result<()> {
        if self.t0 == 0 {
            return Err(Error::Config("t0 must be at least 1".into()));
        }
        if self.experiment.is_empty() {
            return Err(Error::Config("experiment id must not be empty".into()));
        }
        let prior = self.prior.as_ref().expect("normalized");
        prior.validate()?;
        if prior.dim() != sim.theta_dim() {
            return Err(Error::Config(format!(
                "prior has {} dimensions, simulator takes {}",
                prior.dim(),
                sim.theta_dim()
            )));
        }
        self.ensemble.validate()?;
        self.hmc.validate()?;
        if self.acquisition.rule != Rule::Uniform && self.acquisition.restarts == 0 {
            return Err(Error::Config("acquisition needs at least one restart".into()));
        }
        if self.acquisition.rule == Rule::MaxVar && self.observation.x.is_none() && self.observation.theta.is_none() {
            return Err(Error::Config("maxvar acquisition needs an observation".into()));
        }
        if self.evaluation.metrics.contains(&MetricKind::Tv) && !matches!(sim, Simulator::Gaussian(g) if g.dim <= 2) {
            return Err(Error::Config("tv needs the 1-D or 2-D gaussian simulator".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.experiment, self.seed)
    }
}

/// Everything derived from a normalized configuration that the loop and
/// the evaluators need.
pub struct Experiment {
    pub config: RunConfig,
    pub simulator: Simulator,
    pub prior: BoxPrior,
    pub observed: Option<Vec<f64>>,
    tv_reference: Option<(Grid, Vec<f64>)>,
    held_out: Option<HeldOutSet>,
}

impl Experiment {
    /// `config` must already be normalized.
    pub fn new(config: RunConfig) -> Result<Self> {
        let simulator = Simulator::from_spec(&config.simulator, None)?;
        let prior = config
            .prior
            .clone()
            .ok_or_else(|| Error::Config("configuration is not normalized".into()))?;
        let observed = match (&config.observation.x, &config.observation.theta) {
            (Some(x), _) => Some(x.clone()),
            (None, Some(theta)) => Some(observe(&simulator, theta, config.seed, 0)?),
            (None, None) => None,
        };
        if let Some(x) = &observed {
            simulator.head().check_support(x)?;
        }
        let tv_reference = match (&simulator, config.evaluation.metrics.contains(&MetricKind::Tv)) {
            (Simulator::Gaussian(g), true) => {
                let x = observed
                    .as_ref()
                    .ok_or_else(|| Error::Config("tv needs an observation".into()))?;
                let points = config
                    .evaluation
                    .grid_points
                    .unwrap_or(if g.dim == 1 { 1000 } else { 200 });
                let grid = Grid::over_box(&prior, points)?;
                let truth = g.true_posterior(&grid, x)?;
                Some((grid, truth))
            }
            _ => None,
        };
        let held_out = if config.evaluation.metrics.contains(&MetricKind::HeldoutLl) {
            Some(HeldOutSet::draw(&simulator, &prior, config.evaluation.held_out, config.seed)?)
        } else {
            None
        };
        Ok(Self {
            config,
            simulator,
            prior,
            observed,
            tv_reference,
            held_out,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let config = RunConfig::load(path)?;
        Self::new(config.normalized(path.parent())?)
    }

    pub fn fresh_ensemble(&self) -> Result<Ensemble> {
        Ensemble::new(
            self.config.ensemble.clone(),
            self.simulator.head(),
            &self.prior,
            self.config.seed,
        )
    }

    pub fn tv_reference(&self) -> Option<&(Grid, Vec<f64>)> {
        self.tv_reference.as_ref()
    }

    pub fn held_out(&self) -> Option<&HeldOutSet> {
        self.held_out.as_ref()
    }

    /// Metric rows for `ensemble` after `round`.
    pub fn evaluate(&self, ensemble: &Ensemble, round: usize) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        for kind in &self.config.evaluation.metrics {
            let value = match kind {
                MetricKind::Tv => {
                    let (grid, truth) = self.tv_reference.as_ref().expect("built with the experiment");
                    let x = self.observed.as_ref().expect("tv requires an observation");
                    let predicted = evaluation::predicted_posterior(ensemble, grid, x, &self.prior)?;
                    evaluation::total_variation(&predicted, truth, &grid.cell_volumes())?
                }
                MetricKind::HeldoutLl => {
                    evaluation::heldout_loglik(ensemble, self.held_out.as_ref().expect("drawn with the experiment"))?
                }
            };
            rows.push(MetricRow {
                run_id: self.config.run_id(),
                rule: self.config.acquisition.rule.to_string(),
                round,
                metric: kind.name().to_string(),
                value,
            });
        }
        Ok(rows)
    }

    fn should_evaluate(&self, round: usize) -> bool {
        let every = self.config.evaluation.every;
        round == 0 || round == self.config.rounds || (every > 0 && round % every == 0)
    }

    fn should_snapshot(&self, round: usize) -> bool {
        let every = self.config.output.weights_every;
        round == 0 || round == self.config.rounds || (every > 0 && round % every == 0)
    }
}

/// Simulates an observation at `theta` from the observation stream.
pub fn observe(sim: &Simulator, theta: &[f64], seed: u64, index: u64) -> Result<Vec<f64>> {
    sim.simulate(theta, &mut rng::stream(seed, Stream::Observation, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Initialized,
    Running,
    Stopped,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub status: RunStatus,
    /// Last round whose data, weights and metrics are on disk.
    pub completed_round: Option<usize>,
    pub records: usize,
    pub stopped_early: bool,
    pub message: Option<String>,
}

/// Acquisition trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub round: usize,
    pub rule: Rule,
    pub theta: Vec<f64>,
    pub objective: Option<f64>,
    pub n_restarts: usize,
    pub fallback: bool,
    pub retried: bool,
}

impl AcquisitionRecord {
    fn new(round: usize, result: &AcquisitionResult, retried: bool) -> Self {
        Self {
            round,
            rule: result.rule,
            theta: result.theta.clone(),
            objective: result.objective,
            n_restarts: result.restarts.len(),
            fallback: result.fallback,
            retried,
        }
    }
}

/// Handle on an archive directory.
#[derive(Debug, Clone)]
pub struct Archive {
    pub dir: PathBuf,
}

impl Archive {
    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }

    pub fn acquisition_path(&self) -> PathBuf {
        self.dir.join("acquisition.jsonl")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.dir.join("weights")
    }

    pub fn weights_path(&self, round: usize) -> PathBuf {
        self.weights_dir().join(format!("round_{round:04}.json"))
    }

    pub fn latest_weights_path(&self) -> PathBuf {
        self.weights_dir().join("latest.json")
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().is_file()
    }

    /// Writes a fresh archive: configuration, manifest, empty data files.
    pub fn create(dir: impl Into<PathBuf>, config: &RunConfig) -> Result<Self> {
        let archive = Self::at(dir);
        fs::create_dir_all(archive.weights_dir())?;
        fs::write(archive.config_path(), config.to_toml()?)?;
        File::create(archive.dataset_path())?;
        File::create(archive.acquisition_path())?;
        evaluation::write_metrics_csv(&[], File::create(archive.metrics_path())?)?;
        archive.write_manifest(&Manifest {
            format_version: FORMAT_VERSION,
            experiment: config.experiment.clone(),
            config_hash: config.hash()?,
            status: RunStatus::Initialized,
            completed_round: None,
            records: 0,
            stopped_early: false,
            message: None,
        })?;
        Ok(archive)
    }

    pub fn config(&self) -> Result<RunConfig> {
        let text = fs::read_to_string(self.config_path())
            .map_err(|e| Error::Archive(format!("{}: {e}", self.config_path().display())))?;
        RunConfig::parse(&text)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let text = fs::read_to_string(self.manifest_path())
            .map_err(|e| Error::Archive(format!("{}: {e}", self.manifest_path().display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        fs::write(self.manifest_path(), text)?;
        Ok(())
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Experiment::new(self.config()?)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::read_jsonl(BufReader::new(File::open(self.dataset_path())?))
    }

    pub fn metrics(&self) -> Result<Vec<MetricRow>> {
        evaluation::read_metrics_csv(File::open(self.metrics_path())?)
    }

    pub fn acquisitions(&self) -> Result<Vec<AcquisitionRecord>> {
        let reader = BufReader::new(File::open(self.acquisition_path())?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn read_weights(&self, path: &Path) -> Result<EnsembleWeights> {
        let text = fs::read_to_string(path).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rounds with a stored snapshot, ascending.
    pub fn snapshot_rounds(&self) -> Result<Vec<usize>> {
        let mut rounds = Vec::new();
        if !self.weights_dir().is_dir() {
            return Ok(rounds);
        }
        for entry in fs::read_dir(self.weights_dir())? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(r) = name
                .strip_prefix("round_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse().ok())
            {
                rounds.push(r);
            }
        }
        rounds.sort_unstable();
        Ok(rounds)
    }

    /// Ensemble restored from `latest.json`.
    pub fn latest_ensemble(&self, experiment: &Experiment) -> Result<(Ensemble, usize)> {
        let weights = self.read_weights(&self.latest_weights_path())?;
        let mut ensemble = experiment.fresh_ensemble()?;
        ensemble.load_weights(&weights)?;
        Ok((ensemble, weights.round))
    }

    fn save_weights(&self, ensemble: &Ensemble, round: usize, keep: bool) -> Result<()> {
        let text = serde_json::to_string(&ensemble.to_weights(round))?;
        if keep {
            fs::write(self.weights_path(round), &text)?;
        }
        fs::write(self.latest_weights_path(), &text)?;
        Ok(())
    }

    fn append_records(&self, records: &[Record]) -> Result<()> {
        let mut w = BufWriter::new(OpenOptions::new().append(true).open(self.dataset_path())?);
        Dataset::from_records(records.to_vec()).write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn append_acquisition(&self, record: &AcquisitionRecord) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(self.acquisition_path())?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    fn append_metrics(&self, rows: &[MetricRow]) -> Result<()> {
        let f = OpenOptions::new().append(true).open(self.metrics_path())?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Drops everything recorded after `round`, so a resumed run rewrites
    /// the tail exactly as an uninterrupted run would.
    fn truncate_to(&self, round: usize) -> Result<Dataset> {
        let data = self.dataset()?.truncated(round);
        data.write_jsonl(BufWriter::new(File::create(self.dataset_path())?))?;
        let acquisitions: Vec<_> = self.acquisitions()?.into_iter().filter(|a| a.round <= round).collect();
        let mut f = BufWriter::new(File::create(self.acquisition_path())?);
        for a in &acquisitions {
            writeln!(f, "{}", serde_json::to_string(a)?)?;
        }
        f.flush()?;
        let metrics: Vec<_> = self.metrics()?.into_iter().filter(|m| m.round <= round).collect();
        evaluation::write_metrics_csv(&metrics, File::create(self.metrics_path())?)?;
        for r in self.snapshot_rounds()? {
            if r > round {
                fs::remove_file(self.weights_path(r))?;
            }
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop cleanly once this round is complete.
    pub stop_after: Option<usize>,
    /// Continue an existing archive with the same configuration.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub archive: PathBuf,
    pub completed_round: usize,
    pub records: usize,
    pub status: RunStatus,
    pub metrics: Vec<MetricRow>,
}

/// Runs (or resumes) the active-learning loop into `out_dir`.
pub fn cmd_run(config: &RunConfig, base_dir: Option<&Path>, out_dir: &Path, options: &RunOptions) -> Result<RunSummary> {
    let config = config.normalized(base_dir)?;
    let experiment = Experiment::new(config.clone())?;
    let archive = Archive::at(out_dir);
    let mut manifest;
    let (mut data, mut ensemble, start) = if archive.exists() {
        manifest = archive.manifest()?;
        if !options.resume {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume to continue it",
                out_dir.display()
            )));
        }
        if manifest.config_hash != config.hash()? {
            return Err(Error::Config(
                "archive was created with a different configuration".into(),
            ));
        }
        match manifest.completed_round {
            Some(k) => {
                let data = archive.truncate_to(k)?;
                let (ensemble, round) = archive.latest_ensemble(&experiment)?;
                if round != k {
                    return Err(Error::Archive(format!(
                        "latest weights are from round {round}, manifest says {k}"
                    )));
                }
                (data, ensemble, k + 1)
            }
            None => (archive.truncate_to(0).map(|_| Dataset::new())?, experiment.fresh_ensemble()?, 0),
        }
    } else {
        Archive::create(out_dir, &config)?;
        manifest = archive.manifest()?;
        (Dataset::new(), experiment.fresh_ensemble()?, 0)
    };
    if start == 0 {
        // a restart inside round 0 begins from clean data files
        Archive::create(out_dir, &config)?;
    }

    manifest.status = RunStatus::Running;
    manifest.message = None;
    archive.write_manifest(&manifest)?;

    let outcome = run_rounds(&experiment, &archive, &mut manifest, &mut data, &mut ensemble, start, options);
    if let Err(e) = &outcome {
        manifest.status = RunStatus::Failed;
        manifest.message = Some(e.to_string());
        archive.write_manifest(&manifest)?;
    }
    outcome?;
    Ok(RunSummary {
        archive: out_dir.to_path_buf(),
        completed_round: manifest.completed_round.unwrap_or(0),
        records: data.len(),
        status: manifest.status,
        metrics: archive.metrics()?,
    })
}

fn run_rounds(
    exp: &Experiment,
    archive: &Archive,
    manifest: &mut Manifest,
    data: &mut Dataset,
    ensemble: &mut Ensemble,
    start: usize,
    options: &RunOptions,
) -> Result<()> {
    let cfg = &exp.config;
    let finish = |manifest: &mut Manifest, round: usize, data: &Dataset| -> Result<()> {
        manifest.completed_round = Some(round);
        manifest.records = data.len();
        archive.write_manifest(manifest)
    };
    if start == 0 {
        let initial = initial_design(exp)?;
        archive.append_records(&initial)?;
        for r in initial {
            data.push(r);
        }
        ensemble.train(data, cfg.ensemble.initial_epochs, 0, &exp.prior)?;
        archive.save_weights(ensemble, 0, true)?;
        if exp.should_evaluate(0) {
            archive.append_metrics(&exp.evaluate(ensemble, 0)?)?;
        }
        finish(manifest, 0, data)?;
    }
    for round in start.max(1)..=cfg.rounds {
        if options.stop_after.is_some_and(|k| manifest.completed_round.is_some_and(|c| c >= k)) {
            manifest.status = RunStatus::Stopped;
            return archive.write_manifest(manifest);
        }
        let Some((acq, record)) = acquire_and_simulate(exp, ensemble, round)? else {
            log::info!("round {round}: objective fell below the floor; stopping");
            manifest.stopped_early = true;
            break;
        };
        archive.append_acquisition(&acq)?;
        archive.append_records(std::slice::from_ref(&record))?;
        data.push(record);
        ensemble.train(data, cfg.ensemble.round_epochs, round, &exp.prior)?;
        archive.save_weights(ensemble, round, exp.should_snapshot(round))?;
        if exp.should_evaluate(round) {
            archive.append_metrics(&exp.evaluate(ensemble, round)?)?;
        }
        finish(manifest, round, data)?;
        log::debug!("round {round} done: theta = {:?}", acq.theta);
    }
    if options.stop_after.is_some_and(|k| k < cfg.rounds && manifest.completed_round == Some(k)) {
        manifest.status = RunStatus::Stopped;
    } else {
        manifest.status = RunStatus::Complete;
    }
    archive.write_manifest(manifest)
}

/// `t0` prior draws with their simulations; a failed simulation is retried
/// once at a fresh draw.
fn initial_design(exp: &Experiment) -> Result<Vec<Record>> {
    let seed = exp.config.seed;
    (0..exp.config.t0)
        .map(|n| {
            let mut r_theta = rng::stream(seed, Stream::InitialTheta, n as u64);
            let theta = exp.prior.sample(&mut r_theta);
            let mut r_sim = rng::stream(seed, Stream::InitialSimulation, n as u64);
            match exp.simulator.simulate(&theta, &mut r_sim) {
                Ok(x) => Ok(Record { round: 0, theta, x }),
                Err(Error::Simulator { reason, .. }) => {
                    log::warn!("initial draw {n} failed ({reason}); retrying once");
                    let mut r = rng::stream(seed, Stream::SimulationRetry, n as u64);
                    let theta = exp.prior.sample(&mut r);
                    let x = exp.simulator.simulate(&theta, &mut r)?;
                    Ok(Record { round: 0, theta, x })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// One acquisition with its simulation. A simulator failure repeats the
/// whole round once with fresh streams. `None` means the objective fell
/// below the configured floor.
fn acquire_and_simulate(
    exp: &Experiment,
    ensemble: &Ensemble,
    round: usize,
) -> Result<Option<(AcquisitionRecord, Record)>> {
    let cfg = &exp.config;
    for attempt in 0..2u64 {
        let index = round as u64 + attempt * RETRY_OFFSET;
        let mut r_acq = rng::stream(cfg.seed, Stream::Acquisition, index);
        let result = acquisition::propose(ensemble, exp.observed.as_deref(), &exp.prior, &cfg.acquisition, &mut r_acq)?;
        if let (Some(floor), Some(value)) = (cfg.acquisition.objective_floor, result.objective) {
            if value < floor {
                return Ok(None);
            }
        }
        let stream = if attempt == 0 {
            Stream::Simulation
        } else {
            Stream::SimulationRetry
        };
        let mut r_sim = rng::stream(cfg.seed, stream, round as u64);
        match exp.simulator.simulate(&result.theta, &mut r_sim) {
            Ok(x) => {
                let record = Record {
                    round,
                    theta: result.theta.clone(),
                    x,
                };
                return Ok(Some((AcquisitionRecord::new(round, &result, attempt > 0), record)));
            }
            Err(Error::Simulator { theta, reason }) if attempt == 0 => {
                log::warn!("round {round}: simulation at {theta:?} failed ({reason}); retrying once");
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("second attempt returns")
}

/// Samples the posterior for `observed` (or the configured observation)
/// from the archive's latest ensemble and writes the sample CSV.
pub fn cmd_sample_posterior(
    archive_dir: &Path,
    observed: Option<Vec<f64>>,
    seed: Option<u64>,
    output: Option<&Path>,
) -> Result<PosteriorSampleSet> {
    let archive = Archive::at(archive_dir);
    let exp = archive.experiment()?;
    let x_o = match observed.or_else(|| exp.observed.clone()) {
        Some(x) => x,
        None => return Err(Error::Config("no observation given and none configured".into())),
    };
    if x_o.len() != exp.simulator.data_dim() {
        return Err(Error::dim("observation", exp.simulator.data_dim(), x_o.len()));
    }
    let (ensemble, _) = archive.latest_ensemble(&exp)?;
    let set = sampler::run_hmc(&ensemble, &x_o, &exp.prior, &exp.config.hmc, seed.unwrap_or(exp.config.seed))?;
    let path = output.map_or_else(|| archive_dir.join("posterior.csv"), Path::to_path_buf);
    set.write_csv(BufWriter::new(File::create(&path)?))?;
    Ok(set)
}

/// Recomputes metrics for every stored snapshot and rewrites `metrics.csv`.
pub fn cmd_evaluate(archive_dir: &Path) -> Result<Vec<MetricRow>> {
    let archive = Archive::at(archive_dir);
    let exp = archive.experiment()?;
    if !matches!(exp.simulator, Simulator::Gaussian(_)) {
        log::info!("no tractable ground truth for this simulator; tv skipped");
    }
    let mut rows = Vec::new();
    for round in archive.snapshot_rounds()? {
        if !exp.should_evaluate(round) {
            continue;
        }
        let mut ensemble = exp.fresh_ensemble()?;
        ensemble.load_weights(&archive.read_weights(&archive.weights_path(round))?)?;
        rows.extend(exp.evaluate(&ensemble, round)?);
    }
    evaluation::write_metrics_csv(&rows, BufWriter::new(File::create(archive.metrics_path())?))?;
    Ok(rows)
}

/// Collects the metrics of several archives into `out_dir/metrics.csv`
/// and their per-round mean and standard error into `out_dir/summary.csv`.
pub fn cmd_export(archives: &[PathBuf], out_dir: &Path) -> Result<()> {
    let mut dirs = archives.to_vec();
    dirs.sort();
    let mut rows = Vec::new();
    for dir in &dirs {
        rows.extend(Archive::at(dir).metrics()?);
    }
    fs::create_dir_all(out_dir)?;
    evaluation::write_metrics_csv(&rows, BufWriter::new(File::create(out_dir.join("metrics.csv"))?))?;
    evaluation::write_aggregate_csv(
        &evaluation::aggregate(&rows),
        BufWriter::new(File::create(out_dir.join("summary.csv"))?),
    )?;
    Ok(())
}

/// One simulation at `theta`.
pub fn cmd_simulate(config: &RunConfig, base_dir: Option<&Path>, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
    let sim = Simulator::from_spec(&config.simulator, base_dir)?;
    sim.simulate(theta, &mut rng::stream(seed, Stream::Simulation, 0))
}
