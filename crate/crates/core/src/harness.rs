//! Experiment configuration, default populations and run orchestration.
//!
//! Every run writes one directory holding `config.json`, the CSV outputs of
//! the modules it exercised, and `summary.json` with final metrics and a
//! list of named pass/fail checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{self, CsvColumns, TimeSeriesDataset};
use crate::drl::{self, CapacitySchedule, MarlConfig};
use crate::error::{Error, Result};
use crate::federated::{self, FederationConfig, RoundReport};
use crate::game::{self, Game, JacobiConfig, PloProfile, VehicleProfile};
use crate::neural::{evaluate_mse, ModelShape, ModelWeights};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample(&self, r: &mut Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            r.random_range(self.min..self.max)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.min <= self.max && self.min.is_finite() && self.max.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("{name}: min {} exceeds max {}", self.min, self.max)))
        }
    }
}

/// Distributions of the default operator/vehicle population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub plos: usize,
    pub vehicles: usize,
    /// Parking duration in minutes.
    pub duration: Range,
    /// On-board capability in GHz.
    pub capability: Range,
    pub energy_coeff: Range,
    /// Preferences are drawn from the open interval.
    pub preference: Range,
    pub revenue: Range,
    /// Task arrival rate per minute.
    pub task_rate: Range,
    /// Giga-cycles per task.
    pub task_size: Range,
    pub period_minutes: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub penalty: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            plos: 3,
            vehicles: 35,
            duration: Range::new(20.0, 100.0),
            capability: Range::new(0.5, 3.5),
            energy_coeff: Range::new(1.0, 10.0),
            preference: Range::new(0.0, 1.0),
            revenue: Range::new(3.0, 5.0),
            task_rate: Range::new(1.0, 3.0),
            task_size: Range::new(2.0, 5.0),
            period_minutes: 10.0,
            r_min: 0.2,
            r_max: 3.0,
            penalty: 2.0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("duration", self.duration),
            ("capability", self.capability),
            ("energy_coeff", self.energy_coeff),
            ("preference", self.preference),
            ("revenue", self.revenue),
            ("task_rate", self.task_rate),
            ("task_size", self.task_size),
        ] {
            r.check(name)?;
        }
        if self.plos == 0 {
            return Err(Error::Config("population needs at least one operator".into()));
        }
        if !(0.0 < self.r_min && self.r_min < self.r_max) {
            return Err(Error::Config(format!("reward bounds [{}, {}] are invalid", self.r_min, self.r_max)));
        }
        if self.r_max > self.revenue.min {
            return Err(Error::Config(format!(
                "r_max {} can exceed a sampled revenue (minimum {})",
                self.r_max, self.revenue.min
            )));
        }
        if !(self.preference.min >= 0.0 && self.preference.max <= 1.0 && self.preference.min < self.preference.max) {
            return Err(Error::Config("preference range must lie inside [0, 1]".into()));
        }
        if !(self.period_minutes > 0.0 && self.task_rate.min > 0.0 && self.task_size.min > 0.0) {
            return Err(Error::Config("workload model needs positive rate, size and period".into()));
        }
        if !(self.duration.min > 0.0 && self.energy_coeff.min > 0.0) || self.penalty < 0.0 {
            return Err(Error::Config("durations and energy coefficients must be positive".into()));
        }
        Ok(())
    }
}

/// Mean work per vehicle from a Poisson task stream: rate × size × period.
pub fn expected_workload(rate_per_minute: f64, task_size: f64, period_minutes: f64) -> f64 {
    rate_per_minute * task_size * period_minutes
}

/// Samples the default population. Operators come first in the stream, then
/// vehicles, so changing the vehicle count leaves operators unchanged.
pub fn preset_population(seed: u64, cfg: &PopulationConfig) -> Result<(Vec<PloProfile>, Vec<VehicleProfile>)> {
    cfg.validate()?;
    let mut r = rng::seeded(rng::derive(seed, &[rng::label("population")]));
    let plos = (0..cfg.plos)
        .map(|_| {
            let revenue = cfg.revenue.sample(&mut r);
            let rate = cfg.task_rate.sample(&mut r);
            let size = cfg.task_size.sample(&mut r);
            PloProfile {
                revenue,
                workload: expected_workload(rate, size, cfg.period_minutes),
                r_min: cfg.r_min,
                r_max: cfg.r_max,
                capacity: None,
                penalty: cfg.penalty,
            }
        })
        .collect();
    let vehicles = (0..cfg.vehicles)
        .map(|_| {
            let duration = cfg.duration.sample(&mut r);
            let capability = cfg.capability.sample(&mut r);
            let energy_coeff = cfg.energy_coeff.sample(&mut r);
            let preferences = (0..cfg.plos)
                .map(|_| loop {
                    let p = cfg.preference.sample(&mut r);
                    if p > 0.0 && p < 1.0 {
                        break p;
                    }
                })
                .collect();
            VehicleProfile {
                preferences,
                duration,
                energy_coeff,
                capability,
            }
        })
        .collect();
    Ok((plos, vehicles))
}

pub fn preset_game(seed: u64, cfg: &PopulationConfig) -> Result<Game> {
    let (plos, vehicles) = preset_population(seed, cfg)?;
    Game::new(plos, vehicles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FedTrain,
    GameSolve,
    DrlTrain,
    Eval,
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    /// One synthetic series per client from a shared generating process.
    Synthetic { clients: usize, days: usize, slots_per_day: usize },
    /// One client per listed lot of a parking CSV.
    Csv {
        path: PathBuf,
        lot_ids: Vec<String>,
        #[serde(default)]
        columns: CsvColumns,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub data: DataSource,
    pub window: usize,
    pub train_fraction: f64,
    pub hidden_size: usize,
    pub head_width: usize,
    pub federation: FederationConfig,
    /// Checkpoint read by `eval`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                clients: 3,
                days: 14,
                slots_per_day: 19,
            },
            window: 15,
            train_fraction: 0.8,
            hidden_size: 256,
            head_width: 32,
            federation: FederationConfig::default(),
            checkpoint: None,
        }
    }
}

/// Where per-step capacities for DRL training come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CapacitySource {
    Unconstrained,
    /// 1-based index into `ExperimentConfig::cases`.
    Case { case: usize },
    /// Free spaces predicted by a federated forecaster over the test windows
    /// of each lot, one operator per client.
    Forecast { total_spaces: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub forecast: ForecastConfig,
    pub population: PopulationConfig,
    pub solver: JacobiConfig,
    pub drl: MarlConfig,
    pub capacity: CapacitySource,
    pub cases: Vec<Vec<f64>>,
    /// Grid size for the oracle and the linear-pricing sweep.
    pub grid_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::GameSolve,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            forecast: ForecastConfig::default(),
            population: PopulationConfig::default(),
            solver: JacobiConfig::default(),
            drl: MarlConfig::default(),
            capacity: CapacitySource::Unconstrained,
            cases: vec![vec![15.0, 20.0, 5.0], vec![25.0, 20.0, 5.0], vec![35.0, 20.0, 5.0]],
            grid_points: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.forecast.federation.validate()?;
        self.drl.validate()?;
        if self.forecast.window == 0 || !(self.forecast.train_fraction > 0.0 && self.forecast.train_fraction < 1.0) {
            return Err(Error::Config("forecast window must be positive and train fraction in (0, 1)".into()));
        }
        if self.forecast.hidden_size == 0 || self.forecast.head_width == 0 {
            return Err(Error::Config("forecast model sizes must be positive".into()));
        }
        let multi_leader = matches!(self.mode, Mode::GameSolve | Mode::DrlTrain);
        if multi_leader && self.population.plos < 2 {
            return Err(Error::Config("multi-leader modes need at least two operators".into()));
        }
        for case in &self.cases {
            if case.len() != self.population.plos || case.iter().any(|n| !(*n >= 0.0)) {
                return Err(Error::Config(format!(
                    "capacity case {case:?} needs {} non-negative entries",
                    self.population.plos
                )));
            }
        }
        match &self.capacity {
            CapacitySource::Case { case } if *case == 0 || *case > self.cases.len() => {
                return Err(Error::Config(format!("capacity case {case} not defined")));
            }
            CapacitySource::Forecast { total_spaces } if total_spaces.len() != self.population.plos => {
                return Err(Error::Config("forecast capacities need one lot size per operator".into()));
            }
            _ => {}
        }
        if self.grid_points < 100 {
            return Err(Error::Config("grid_points must be at least 100".into()));
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape::lstm(self.forecast.hidden_size, self.forecast.head_width)
    }

    pub fn schedule(&self) -> Result<CapacitySchedule> {
        match &self.capacity {
            CapacitySource::Unconstrained => Ok(CapacitySchedule::Unconstrained),
            CapacitySource::Case { case } => Ok(CapacitySchedule::Fixed(self.cases[case - 1].clone())),
            CapacitySource::Forecast { total_spaces } => forecast_schedule(self, total_spaces),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

/// Results of one run, optionally persisted to a directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub summary: Summary,
    /// File name and contents of every CSV output.
    pub csv: Vec<(String, String)>,
    pub json: Vec<(String, String)>,
    pub binary: Vec<(String, Vec<u8>)>,
}

impl RunArtifact {
    fn new(config: &ExperimentConfig, mode: &str) -> Self {
        Self {
            config: config.clone(),
            summary: Summary {
                mode: mode.into(),
                seed: config.seed,
                metrics: BTreeMap::new(),
                checks: Vec::new(),
            },
            csv: Vec::new(),
            json: Vec::new(),
            binary: Vec::new(),
        }
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.summary.metrics.insert(name.into(), value);
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.summary.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.summary.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.summary.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Writes everything into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        put("config.json", serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        put("summary.json", serde_json::to_string_pretty(&self.summary)?.as_bytes())?;
        for (name, text) in self.csv.iter().chain(&self.json) {
            put(name, text.as_bytes())?;
        }
        for (name, bytes) in &self.binary {
            put(name, bytes)?;
        }
        Ok(())
    }
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("csv buffer", e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn rounds_csv(reports: &[RoundReport]) -> Result<String> {
    let mut buf = Vec::new();
    federated::write_round_reports(&mut buf, reports)?;
    String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Per-client windowed datasets for the configured source.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Vec<String>, Vec<TimeSeriesDataset>)> {
    let f = &cfg.forecast;
    let series = match &f.data {
        DataSource::Synthetic {
            clients,
            days,
            slots_per_day,
        } => (0..*clients)
            .map(|k| {
                let mut s = data::synthesize_series(rng::derive(cfg.seed, &[rng::label("series"), k as u64]), *days, *slots_per_day)?;
                s.lot_id = format!("synthetic-{k}");
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?,
        DataSource::Csv { path, lot_ids, columns } => data::load_parking_csv(path, lot_ids, columns)?,
    };
    let ids = series.iter().map(|s| s.lot_id.clone()).collect();
    let sets = series
        .iter()
        .map(|s| data::make_windows(s, f.window, f.train_fraction))
        .collect::<Result<Vec<_>>>()?;
    Ok((ids, sets))
}

fn federation_config(cfg: &ExperimentConfig, ids: Vec<String>) -> FederationConfig {
    FederationConfig {
        client_ids: ids,
        seed: rng::derive(cfg.seed, &[rng::label("federation")]),
        ..cfg.forecast.federation.clone()
    }
}

fn final_test(reports: &[RoundReport]) -> Option<f64> {
    reports.last().and_then(|r| r.global_test_mse)
}

pub fn run_fed_train(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    cfg.validate()?;
    let mut art = RunArtifact::new(cfg, "fed-train");
    let (ids, sets) = load_datasets(cfg)?;
    let fed_cfg = federation_config(cfg, ids);
    let initial = ModelWeights::init(&cfg.model_shape(), rng::derive(cfg.seed, &[rng::label("init")]))?;
    let (model, reports) = federated::run_federation(&sets, &initial, &fed_cfg)?;
    if let Some(m) = final_test(&reports) {
        art.metric("final_global_test_mse", m);
    }
    if let (Some(first), Some(last)) = (reports.first().and_then(|r| r.global_test_mse), final_test(&reports)) {
        art.metric("first_round_global_test_mse", first);
        art.check("test_mse_finite", last.is_finite(), format!("final global test MSE {last}"));
    }
    art.csv.push(("rounds.csv".into(), rounds_csv(&reports)?));
    art.binary.push(("global_model.bin".into(), model.to_bytes()));
    Ok(art)
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow<'a> {
    round: usize,
    method: &'a str,
    global_test_mse: Option<f64>,
}

/// Federated LSTM vs isolated LSTM vs federated window MLP, all trained
/// with the same schedule.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    cfg.validate()?;
    let mut art = RunArtifact::new(cfg, "compare");
    let (ids, sets) = load_datasets(cfg)?;
    let fed_cfg = federation_config(cfg, ids);
    let init_seed = rng::derive(cfg.seed, &[rng::label("init")]);
    let lstm = ModelWeights::init(&cfg.model_shape(), init_seed)?;
    let mlp = ModelWeights::init(&ModelShape::window_mlp(cfg.forecast.window, cfg.forecast.head_width), init_seed)?;
    let (_, fed) = federated::run_federation(&sets, &lstm, &fed_cfg)?;
    let (_, iso) = federated::run_isolated_baseline(&sets, &lstm, &fed_cfg)?;
    let (_, fed_mlp) = federated::run_federation(&sets, &mlp, &fed_cfg)?;
    let mut rows = Vec::new();
    for (method, reports) in [("fedparking", &fed), ("isolated", &iso), ("fedmlp", &fed_mlp)] {
        rows.extend(reports.iter().map(|r| CompareRow {
            round: r.round_index,
            method,
            global_test_mse: r.global_test_mse,
        }));
        if let Some(m) = final_test(reports) {
            art.metric(format!("{method}_final_test_mse"), m);
        }
    }
    let fed_mean = final_test(&fed).unwrap_or(f64::NAN);
    let worst_isolated = iso
        .last()
        .map(|r| r.clients.iter().filter_map(|c| c.test_mse).fold(f64::NEG_INFINITY, f64::max))
        .unwrap_or(f64::NAN);
    art.metric("isolated_worst_client_test_mse", worst_isolated);
    art.check(
        "federated_beats_worst_isolated",
        fed_mean < worst_isolated,
        format!("federated {fed_mean:.6} vs worst isolated {worst_isolated:.6}"),
    );
    art.csv.push(("compare.csv".into(), csv_string(rows)?));
    art.csv.push(("rounds_fedparking.csv".into(), rounds_csv(&fed)?));
    art.csv.push(("rounds_isolated.csv".into(), rounds_csv(&iso)?));
    art.csv.push(("rounds_fedmlp.csv".into(), rounds_csv(&fed_mlp)?));
    Ok(art)
}

#[derive(Debug, Clone, Serialize)]
struct EvalRow {
    client: String,
    test_mse: Option<f64>,
}

/// Test MSE of a stored checkpoint on every client's held-out windows.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    cfg.validate()?;
    let path = cfg
        .forecast
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs forecast.checkpoint".into()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = ModelWeights::from_bytes(&bytes)?;
    let mut art = RunArtifact::new(cfg, "eval");
    let (ids, sets) = load_datasets(cfg)?;
    let mut rows = Vec::new();
    for (id, d) in ids.into_iter().zip(&sets) {
        let mse = if d.test().is_empty() { None } else { Some(evaluate_mse(&model, d.test())?) };
        if let Some(m) = mse {
            art.metric(format!("test_mse_{id}"), m);
        }
        rows.push(EvalRow { client: id, test_mse: mse });
    }
    art.csv.push(("eval.csv".into(), csv_string(rows)?));
    Ok(art)
}

/// Per-step capacities from a federated forecaster: lot `j` gets
/// `floor((1 - predicted occupancy) * total_spaces[j])` over successive test
/// windows of client `j`.
pub fn forecast_schedule(cfg: &ExperimentConfig, total_spaces: &[u32]) -> Result<CapacitySchedule> {
    let (ids, sets) = load_datasets(cfg)?;
    if sets.len() != total_spaces.len() {
        return Err(Error::Config(format!(
            "{} forecast clients for {} operators",
            sets.len(),
            total_spaces.len()
        )));
    }
    let initial = ModelWeights::init(&cfg.model_shape(), rng::derive(cfg.seed, &[rng::label("init")]))?;
    let (model, _) = federated::run_federation(&sets, &initial, &federation_config(cfg, ids))?;
    let steps = cfg.drl.horizon;
    let rows = (0..steps)
        .map(|t| {
            sets.iter()
                .zip(total_spaces)
                .map(|(d, &total)| {
                    let pool = if d.test().is_empty() { d.train() } else { d.test() };
                    let w = &pool[t % pool.len()];
                    drl::capacity_from_forecast(&model, &w.input, total).map(f64::from)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacitySchedule::PerStep(rows))
}

#[derive(Debug, Clone, Serialize)]
struct TraceCsvRow {
    iteration: usize,
    plo: usize,
    r: f64,
    utility: f64,
}

/// Jacobi dynamics on the preset population, certified by the grid oracle.
pub fn run_game_solve(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    cfg.validate()?;
    let mut art = RunArtifact::new(cfg, "game-solve");
    let game = preset_game(cfg.seed, &cfg.population)?;
    let mut trace = Vec::new();
    let report = game::jacobi_solve_traced(&game, &game.midpoint(), &cfg.solver, |row| {
        for (j, (r, u)) in row.rewards.iter().zip(&row.utilities).enumerate() {
            trace.push(TraceCsvRow {
                iteration: row.iteration,
                plo: j,
                r: *r,
                utility: *u,
            });
        }
    })?;
    let grid = game::grid_oracle_equilibrium(&game, cfg.grid_points)?;
    for (j, r) in report.r_star.iter().enumerate() {
        art.metric(format!("r_star_{j}"), *r);
        art.metric(format!("utility_{j}"), report.utilities[j]);
        art.metric(format!("expected_arrivals_{j}"), report.expected_arrivals[j]);
    }
    art.metric("iterations", report.iterations as f64);
    art.metric("max_residual", report.max_residual());
    art.check("jacobi_converged", report.converged, format!("{} iterations", report.iterations));
    let agree = report
        .r_star
        .iter()
        .zip(&grid.rewards)
        .zip(&grid.cell)
        .all(|((a, b), c)| (a - b).abs() <= *c);
    art.check(
        "grid_oracle_agrees",
        agree,
        format!("jacobi {:?} vs grid {:?}", report.r_star, grid.rewards),
    );
    if report.concavity_condition.iter().any(|c| !c) {
        log::warn!("concavity hypothesis fails at the solution: {:?}", report.concavity_condition);
    }
    art.csv.push(("jacobi_trace.csv".into(), csv_string(trace)?));
    art.json.push(("equilibrium.json".into(), serde_json::to_string_pretty(&report)?));
    Ok(art)
}

/// Trains the agents under `schedule` and reports the greedy outcome next
/// to the analytic unconstrained equilibrium.
pub fn run_drl(cfg: &ExperimentConfig, schedule: &CapacitySchedule, mode: &str) -> Result<(RunArtifact, Vec<f64>)> {
    cfg.validate()?;
    let mut art = RunArtifact::new(cfg, mode);
    let game = preset_game(cfg.seed, &cfg.population)?;
    let drl_cfg = MarlConfig {
        seed: rng::derive(cfg.seed, &[rng::label("drl")]),
        ..cfg.drl.clone()
    };
    let outcome = drl::train_marl(&game, schedule, &drl_cfg)?;
    let roll = drl::greedy_rollout(&outcome.agents, &game, schedule, &drl_cfg)?;
    let eq = game::jacobi_solve(&game, &game.midpoint(), &cfg.solver)?;
    for j in 0..game.num_plos() {
        art.metric(format!("greedy_r_{j}"), roll.final_rewards()[j]);
        art.metric(format!("greedy_profit_{j}"), roll.final_profits()[j]);
        art.metric(format!("greedy_arrivals_{j}"), roll.final_arrivals()[j]);
        art.metric(format!("equilibrium_r_{j}"), eq.r_star[j]);
        art.metric(format!("equilibrium_utility_{j}"), eq.utilities[j]);
        if let Some(n) = schedule.at(cfg.drl.horizon - 1, j) {
            art.metric(format!("capacity_{j}"), n);
        }
    }
    art.csv.push(("learning_curve.csv".into(), csv_string(&outcome.curve)?));
    #[derive(Serialize)]
    struct RolloutRow {
        step: usize,
        plo: usize,
        r: f64,
        profit: f64,
        expected_arrivals: f64,
    }
    let roll_ref = &roll;
    let rows = roll.rewards_posted.iter().enumerate().flat_map(|(t, rs)| {
        rs.iter().enumerate().map(move |(j, r)| RolloutRow {
            step: t,
            plo: j,
            r: *r,
            profit: roll_ref.profits[t][j],
            expected_arrivals: roll_ref.arrivals[t][j],
        })
    });
    art.csv.push(("greedy_rollout.csv".into(), csv_string(rows.collect::<Vec<_>>())?));
    for (j, a) in outcome.agents.iter().enumerate() {
        art.json.push((format!("policy_{j}.json"), serde_json::to_string(&a.policy)?));
    }
    Ok((art, roll.final_rewards().to_vec()))
}

pub fn run_drl_train(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    let schedule = cfg.schedule()?;
    let (mut art, _) = run_drl(cfg, &schedule, "drl-train")?;
    if schedule == CapacitySchedule::Unconstrained {
        let j_count = cfg.population.plos;
        let worst = (0..j_count)
            .map(|j| {
                let g = art.summary.metrics[&format!("greedy_profit_{j}")];
                let e = art.summary.metrics[&format!("equilibrium_utility_{j}")];
                (g - e).abs() / e
            })
            .fold(0.0, f64::max);
        art.metric("max_relative_utility_gap", worst);
        art.check("near_equilibrium_utility", worst < 0.1, format!("worst relative gap {worst:.4}"));
    }
    Ok(art)
}

/// Capacity-binding checks for one case, given the greedy rewards.
pub fn binding_checks(game: &Game, capacities: &[f64], rewards: &[f64]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (j, n) in capacities.iter().enumerate() {
        let arrivals = game.expected_arrivals(j, rewards)?;
        out.push(Check {
            name: format!("arrivals_within_115pct_{j}"),
            passed: arrivals <= 1.15 * n,
            detail: format!("arrivals {arrivals:.3} vs capacity {n}"),
        });
    }
    Ok(out)
}

/// DRL training under one of the configured capacity cases.
pub fn run_case_study(case: usize, cfg: &ExperimentConfig) -> Result<RunArtifact> {
    if case == 0 || case > cfg.cases.len() {
        return Err(Error::Config(format!("capacity case {case} not defined")));
    }
    let cfg = ExperimentConfig {
        mode: Mode::DrlTrain,
        capacity: CapacitySource::Case { case },
        ..cfg.clone()
    };
    let capacities = cfg.cases[case - 1].clone();
    let schedule = CapacitySchedule::Fixed(capacities.clone());
    let (mut art, rewards) = run_drl(&cfg, &schedule, &format!("case-study-{case}"))?;
    let game = preset_game(cfg.seed, &cfg.population)?;
    for c in binding_checks(&game, &capacities, &rewards)? {
        art.check(c.name, c.passed, c.detail);
    }
    Ok(art)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPricingRow {
    pub zeta: f64,
    pub r: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPricingReport {
    pub game_rewards: Vec<f64>,
    pub game_utility: f64,
    pub best_zeta: f64,
    pub best_linear_utility: f64,
    pub ratio: f64,
    pub sweep: Vec<LinearPricingRow>,
}

/// Sweeps operator 0's linear price `r = zeta * n` over
/// `zeta in [r_min/n, r_max/n]` with the other operators held at
/// `game_rewards`, and compares the best swept profit with the profit of
/// `game_rewards` itself. Profits include the capacity penalty.
pub fn compare_linear_pricing(
    game: &Game,
    capacities: &[f64],
    game_rewards: &[f64],
    grid_points: usize,
) -> Result<LinearPricingReport> {
    let n = capacities[0];
    if !(n > 0.0) {
        return Err(Error::InvalidArgument("linear pricing needs positive capacity for operator 0".into()));
    }
    let plo = &game.plos[0];
    let game_utility = drl::capacity_reward(game, 0, game_rewards, Some(n))?;
    let (lo, hi) = (plo.r_min / n, plo.r_max / n);
    let mut sweep = Vec::with_capacity(grid_points);
    let mut r = game_rewards.to_vec();
    for k in 0..grid_points {
        let zeta = lo + (hi - lo) * k as f64 / (grid_points - 1) as f64;
        r[0] = plo.clamp(zeta * n);
        sweep.push(LinearPricingRow {
            zeta,
            r: r[0],
            utility: drl::capacity_reward(game, 0, &r, Some(n))?,
        });
    }
    let best = sweep
        .iter()
        .fold(&sweep[0], |b, row| if row.utility > b.utility { row } else { b });
    Ok(LinearPricingReport {
        game_rewards: game_rewards.to_vec(),
        game_utility,
        best_zeta: best.zeta,
        best_linear_utility: best.utility,
        ratio: game_utility / best.utility,
        sweep,
    })
}

/// Case-3 DRL policy against operator 0's best linear price.
pub fn run_compare_linear(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    let case = cfg.cases.len();
    let mut art = run_case_study(case, cfg)?;
    art.summary.mode = "compare-linear".into();
    let game = preset_game(cfg.seed, &cfg.population)?;
    let rewards: Vec<f64> = (0..game.num_plos())
        .map(|j| art.summary.metrics[&format!("greedy_r_{j}")])
        .collect();
    let report = compare_linear_pricing(&game, &cfg.cases[case - 1], &rewards, cfg.grid_points)?;
    art.metric("game_utility_0", report.game_utility);
    art.metric("best_linear_utility_0", report.best_linear_utility);
    art.metric("best_zeta", report.best_zeta);
    art.metric("utility_ratio", report.ratio);
    art.check(
        "game_within_10pct_of_linear",
        report.ratio >= 0.9,
        format!("ratio {:.4}", report.ratio),
    );
    art.csv.push(("linear_sweep.csv".into(), csv_string(&report.sweep)?));
    Ok(art)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseRow {
    pub factor: String,
    pub value: f64,
    pub r: f64,
    pub f_star: f64,
}

/// Reference vehicle and lot the sweep perturbs one factor at a time.
pub const SWEEP_BASE: (f64, f64, f64, f64) = (0.5, 50.0, 5.0, 70.0);

/// Best responses over grids of preference, duration and energy
/// coefficient, each crossed with the posted reward.
pub fn run_best_response_sweep(rewards: &[f64]) -> Result<Vec<BestResponseRow>> {
    let (p0, d0, k0, w0) = SWEEP_BASE;
    let plo = PloProfile {
        revenue: 5.0,
        workload: w0,
        r_min: 0.2,
        r_max: 3.0,
        capacity: None,
        penalty: 0.0,
    };
    let grids: [(&str, Vec<f64>); 3] = [
        ("p", (1..=9).map(|k| k as f64 / 10.0).collect()),
        ("d", (2..=10).map(|k| 10.0 * k as f64).collect()),
        ("kappa", (1..=10).map(f64::from).collect()),
    ];
    let mut rows = Vec::new();
    for (factor, values) in grids {
        for &value in &values {
            let (p, d, kappa) = match factor {
                "p" => (value, d0, k0),
                "d" => (p0, value, k0),
                _ => (p0, d0, value),
            };
            let v = VehicleProfile {
                preferences: vec![p],
                duration: d,
                energy_coeff: kappa,
                capability: 1.0,
            };
            for &r in rewards {
                rows.push(BestResponseRow {
                    factor: factor.into(),
                    value,
                    r,
                    f_star: game::vehicle_best_response(&v, 0, &plo, r)?.compute,
                });
            }
        }
    }
    Ok(rows)
}

/// Monotonicity of a sweep table: increasing in r, p and d, decreasing in
/// kappa.
pub fn sweep_is_monotone(rows: &[BestResponseRow]) -> bool {
    let mut by_factor: BTreeMap<&str, Vec<&BestResponseRow>> = BTreeMap::new();
    for row in rows {
        by_factor.entry(&row.factor).or_default().push(row);
    }
    by_factor.iter().all(|(factor, rows)| {
        let increasing_in_value = *factor != "kappa";
        rows.iter().all(|a| {
            rows.iter().all(|b| {
                let same_r = a.r == b.r;
                let same_value = a.value == b.value;
                if same_r && a.value < b.value {
                    if increasing_in_value {
                        a.f_star < b.f_star
                    } else {
                        a.f_star > b.f_star
                    }
                } else if same_value && a.r < b.r {
                    a.f_star < b.f_star
                } else {
                    true
                }
            })
        })
    })
}

pub fn run_br_sweep(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    let mut art = RunArtifact::new(cfg, "br-sweep");
    let rewards: Vec<f64> = (0..15).map(|k| 0.2 + 0.2 * k as f64).collect();
    let rows = run_best_response_sweep(&rewards)?;
    art.check("monotone_in_every_factor", sweep_is_monotone(&rows), "f* rises with r, p, d and falls with kappa");
    let at = |factor: &str, value: f64| {
        rows.iter()
            .find(|row| row.factor == factor && row.value == value && (row.r - 1.0).abs() < 1e-12)
            .map(|row| row.f_star)
    };
    if let (Some(a), Some(b)) = (at("d", 50.0), at("d", 70.0)) {
        art.metric("duration_50_to_70_gain", b / a - 1.0);
        art.check("duration_gain_40pct", ((b / a - 1.0) - 0.4).abs() < 1e-12, format!("gain {:.6}", b / a - 1.0));
    }
    if let (Some(a), Some(b)) = (at("kappa", 2.0), at("kappa", 4.0)) {
        art.check("kappa_doubling_halves", (b / a - 0.5).abs() < 1e-12, format!("ratio {:.6}", b / a));
    }
    art.csv.push(("best_response_sweep.csv".into(), csv_string(rows)?));
    Ok(art)
}

/// Dispatches on `cfg.mode`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    match cfg.mode {
        Mode::FedTrain => run_fed_train(cfg),
        Mode::GameSolve => run_game_solve(cfg),
        Mode::DrlTrain => run_drl_train(cfg),
        Mode::Eval => run_eval(cfg),
        Mode::Compare => run_compare(cfg),
    }
}
