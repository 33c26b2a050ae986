//! Config-driven experiments and their CSV/JSON reports.
//!
//! A config is a JSON object with a `"kind"` discriminator. Model paths are
//! resolved relative to the config file. Every experiment produces rows of
//! `experiment,n,estimator,value,stderr,wall_ms`; fitted slopes are reported
//! as rows with `n = 0`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::markov::{self, FiniteMarkovChain, RewardMap, Start};
use crate::rng::{label_id, mix64, StreamKey, StreamRole};
use crate::stats::{self, Estimate, RateReport, SampleSet};
use crate::stein::{self, MartingaleStats};
use crate::td::{self, TdKernel, TdModel};

pub const CSV_HEADER: [&str; 6] = ["experiment", "n", "estimator", "value", "stderr", "wall_ms"];

fn default_directions() -> usize {
    256
}

fn default_reference_draws() -> usize {
    8
}

fn default_beta() -> BetaSetting {
    BetaSetting::Fixed(0.5)
}

fn default_c_universal() -> f64 {
    1.0
}

/// `β` for bound evaluation: a number in (0, 1) or `"schedule"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Fixed(f64),
    Named(BetaName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaName {
    Schedule,
}

impl BetaSetting {
    pub fn at(self, n: u64) -> Result<f64> {
        match self {
            BetaSetting::Fixed(b) => Ok(b),
            BetaSetting::Named(BetaName::Schedule) => stein::beta_schedule(n),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McCltConfig {
    pub name: Option<String>,
    pub chain: PathBuf,
    pub reward: PathBuf,
    pub n_grid: Vec<u64>,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_reference_draws")]
    pub reference_draws: usize,
    #[serde(default = "stationary")]
    pub start: Start,
    #[serde(default = "default_beta")]
    pub beta: BetaSetting,
    #[serde(default = "default_c_universal")]
    pub c_universal: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdCltConfig {
    pub name: Option<String>,
    pub model: PathBuf,
    pub n_grid: Vec<u64>,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub delta: Option<f64>,
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_reference_draws")]
    pub reference_draws: usize,
    #[serde(default = "stationary")]
    pub start: Start,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCurveConfig {
    pub name: Option<String>,
    pub chain: PathBuf,
    pub reward: PathBuf,
    pub n_grid: Vec<u64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default = "default_beta")]
    pub beta: BetaSetting,
    #[serde(default = "stationary")]
    pub start: Start,
    #[serde(default = "default_c_universal")]
    pub c_universal: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsilonDecayConfig {
    pub name: Option<String>,
    /// Either `a_bar` (with `delta`) or a TD `model` file.
    pub a_bar: Option<Vec<Vec<f64>>>,
    pub model: Option<PathBuf>,
    pub delta: Option<f64>,
    pub n_grid: Vec<u64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaMomentsConfig {
    pub name: Option<String>,
    pub model: PathBuf,
    pub n_grid: Vec<u64>,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub delta: Option<f64>,
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "stationary")]
    pub start: Start,
}

fn stationary() -> Start {
    Start::Stationary
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    McClt(McCltConfig),
    TdClt(TdCltConfig),
    BoundCurve(BoundCurveConfig),
    UpsilonDecay(UpsilonDecayConfig),
    DeltaMoments(DeltaMomentsConfig),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&markov::read_text(path)?)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::McClt(_) => "mc-clt",
            ExperimentConfig::TdClt(_) => "td-clt",
            ExperimentConfig::BoundCurve(_) => "bound-curve",
            ExperimentConfig::UpsilonDecay(_) => "upsilon-decay",
            ExperimentConfig::DeltaMoments(_) => "delta-moments",
        }
    }

    pub fn name(&self) -> String {
        let name = match self {
            ExperimentConfig::McClt(c) => &c.name,
            ExperimentConfig::TdClt(c) => &c.name,
            ExperimentConfig::BoundCurve(c) => &c.name,
            ExperimentConfig::UpsilonDecay(c) => &c.name,
            ExperimentConfig::DeltaMoments(c) => &c.name,
        };
        name.clone().unwrap_or_else(|| self.kind().to_string())
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::McClt(c) => c.seed,
            ExperimentConfig::TdClt(c) => c.seed,
            ExperimentConfig::BoundCurve(c) => c.seed,
            ExperimentConfig::UpsilonDecay(c) => c.seed,
            ExperimentConfig::DeltaMoments(c) => c.seed,
        }
        .unwrap_or(0)
    }

    pub fn set_seed(&mut self, seed: u64) {
        let slot = match self {
            ExperimentConfig::McClt(c) => &mut c.seed,
            ExperimentConfig::TdClt(c) => &mut c.seed,
            ExperimentConfig::BoundCurve(c) => &mut c.seed,
            ExperimentConfig::UpsilonDecay(c) => &mut c.seed,
            ExperimentConfig::DeltaMoments(c) => &mut c.seed,
        };
        *slot = Some(seed);
    }

    pub fn threads(&self) -> Option<usize> {
        match self {
            ExperimentConfig::McClt(c) => c.threads,
            ExperimentConfig::TdClt(c) => c.threads,
            ExperimentConfig::BoundCurve(c) => c.threads,
            ExperimentConfig::UpsilonDecay(c) => c.threads,
            ExperimentConfig::DeltaMoments(c) => c.threads,
        }
    }

    pub fn set_threads(&mut self, threads: usize) {
        let slot = match self {
            ExperimentConfig::McClt(c) => &mut c.threads,
            ExperimentConfig::TdClt(c) => &mut c.threads,
            ExperimentConfig::BoundCurve(c) => &mut c.threads,
            ExperimentConfig::UpsilonDecay(c) => &mut c.threads,
            ExperimentConfig::DeltaMoments(c) => &mut c.threads,
        };
        *slot = Some(threads);
    }

    fn n_grid(&self) -> &[u64] {
        match self {
            ExperimentConfig::McClt(c) => &c.n_grid,
            ExperimentConfig::TdClt(c) => &c.n_grid,
            ExperimentConfig::BoundCurve(c) => &c.n_grid,
            ExperimentConfig::UpsilonDecay(c) => &c.n_grid,
            ExperimentConfig::DeltaMoments(c) => &c.n_grid,
        }
    }

    /// Checks the fields shared by every kind.
    pub fn validate(&self) -> Result<()> {
        let grid = self.n_grid();
        if grid.is_empty() {
            return Err(Error::config("n_grid", "must not be empty"));
        }
        if grid[0] == 0 {
            return Err(Error::config("n_grid", "entries must be ≥ 1"));
        }
        if let Some(w) = grid.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "n_grid",
                format!("must be strictly increasing, found {} then {}", w[0], w[1]),
            ));
        }
        if self.threads() == Some(0) {
            return Err(Error::config("threads", "must be ≥ 1"));
        }
        let replicates = match self {
            ExperimentConfig::McClt(c) => Some(c.replicates),
            ExperimentConfig::TdClt(c) => Some(c.replicates),
            ExperimentConfig::DeltaMoments(c) => Some(c.replicates),
            _ => None,
        };
        if replicates == Some(0) {
            return Err(Error::config("replicates", "must be ≥ 1"));
        }
        let distance = match self {
            ExperimentConfig::McClt(c) => Some((c.replicates, c.directions, c.reference_draws)),
            ExperimentConfig::TdClt(c) => Some((c.replicates, c.directions, c.reference_draws)),
            _ => None,
        };
        if let Some((replicates, directions, draws)) = distance {
            if replicates < 2 {
                return Err(Error::config("replicates", "distance experiments need at least 2"));
            }
            if directions == 0 {
                return Err(Error::config("directions", "must be ≥ 1"));
            }
            if draws == 0 {
                return Err(Error::config("reference_draws", "must be ≥ 1"));
            }
        }
        let (beta, c_universal) = match self {
            ExperimentConfig::McClt(c) => (Some(c.beta), Some(c.c_universal)),
            ExperimentConfig::BoundCurve(c) => (Some(c.beta), Some(c.c_universal)),
            _ => (None, None),
        };
        if let Some(BetaSetting::Fixed(b)) = beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config("beta", format!("must lie in (0, 1), got {b}")));
            }
        }
        if let Some(c) = c_universal {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config("c_universal", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub n: u64,
    pub estimator: String,
    pub value: f64,
    pub stderr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutput {
    pub experiment: String,
    pub kind: String,
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    pub reports: Vec<RateReport>,
}

impl ExperimentOutput {
    /// Value of the row with this estimator at this `n`.
    pub fn value(&self, estimator: &str, n: u64) -> Option<f64> {
        self.row(estimator, n).map(|r| r.value)
    }

    pub fn row(&self, estimator: &str, n: u64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n)
    }

    pub fn report(&self, estimator: &str) -> Option<&RateReport> {
        self.reports.iter().find(|r| r.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows_csv(&self.rows, out)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

pub fn write_rows_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: "<csv output>".into(),
        source,
    })?;
    Ok(())
}

/// Reads rows written by [`write_rows_csv`].
pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

struct Rows {
    experiment: String,
    rows: Vec<ResultRow>,
}

impl Rows {
    fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, n: u64, estimator: &str, value: f64, stderr: f64, wall_ms: u64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("estimator {estimator} at n = {n} is not finite")));
        }
        self.rows.push(ResultRow {
            experiment: self.experiment.clone(),
            n,
            estimator: estimator.to_string(),
            value,
            stderr,
            wall_ms,
        });
        Ok(())
    }

    fn push_estimate(&mut self, n: u64, estimator: &str, e: Estimate, wall_ms: u64) -> Result<()> {
        self.push(n, estimator, e.value, e.stderr, wall_ms)
    }

    fn push_slope(&mut self, report: &RateReport) -> Result<()> {
        if let Some(fit) = report.fit {
            self.push(0, &format!("{}_slope", report.estimator), fit.slope, 0.0, 0)?;
        }
        Ok(())
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

/// Runs an experiment; relative model paths resolve against `base_dir`.
/// A `threads` setting in the config sizes a dedicated rayon pool.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    match config.threads() {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?;
            pool.install(|| dispatch(config, base_dir))
        }
        None => dispatch(config, base_dir),
    }
}

fn dispatch(config: &ExperimentConfig, base: &Path) -> Result<ExperimentOutput> {
    let name = config.name();
    let seed = config.seed();
    let (rows, reports) = match config {
        ExperimentConfig::McClt(c) => run_mc_clt(c, &name, seed, base)?,
        ExperimentConfig::TdClt(c) => run_td_clt(c, &name, seed, base)?,
        ExperimentConfig::BoundCurve(c) => run_bound_curve(c, &name, base)?,
        ExperimentConfig::UpsilonDecay(c) => run_upsilon_decay(c, &name, base)?,
        ExperimentConfig::DeltaMoments(c) => run_delta_moments(c, &name, seed, base)?,
    };
    Ok(ExperimentOutput {
        experiment: name,
        kind: config.kind().to_string(),
        seed,
        rows,
        reports,
    })
}

/// Distance from an ensemble to the reference Gaussian and the same-size
/// Gaussian floor, each averaged over `draws` independent reference samples.
fn distance_and_floor(
    ensemble: &SampleSet,
    reference_cov: &Matrix,
    draws: usize,
    directions: usize,
    seed: u64,
    experiment: u64,
) -> Result<(Estimate, Estimate)> {
    let size = ensemble.len();
    let pairs: Vec<(f64, f64)> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let key = StreamKey::new(seed, StreamRole::Reference)
                .experiment(experiment)
                .replicate(i as u64);
            let reference = stats::gaussian_samples(reference_cov, size, &mut key.stream())?;
            let other = stats::gaussian_samples(reference_cov, size, &mut key.role(StreamRole::Floor).stream())?;
            let dir_seed = mix64(seed ^ mix64(experiment ^ i as u64));
            let dist = stats::distance(ensemble, &reference, directions, dir_seed)?;
            let floor = stats::distance(&other, &reference, directions, dir_seed)?;
            Ok((dist.value, floor.value))
        })
        .collect::<Result<Vec<_>>>()?;
    let dist: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let floor: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok((Estimate::from_values(&dist), Estimate::from_values(&floor)))
}

fn relative_hs_error(estimate: &Matrix, target: &Matrix) -> f64 {
    let err = linalg::hs_norm(&(estimate - target));
    let scale = linalg::hs_norm(target);
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

struct DistanceCurve {
    distance: Vec<Estimate>,
    floor: Vec<Estimate>,
}

impl DistanceCurve {
    fn new() -> Self {
        Self {
            distance: Vec::new(),
            floor: Vec::new(),
        }
    }

    fn reports(&self, grid: &[u64], prefix: &str) -> Result<Vec<RateReport>> {
        let make = |name: &str, est: Vec<Estimate>| {
            RateReport::new(
                format!("{prefix}{name}"),
                grid.to_vec(),
                est.iter().map(|e| e.value).collect(),
                est.iter().map(|e| e.stderr).collect(),
            )
        };
        let adjusted: Vec<Estimate> = self
            .distance
            .iter()
            .zip(&self.floor)
            .map(|(d, f)| Estimate {
                value: d.value - f.value,
                stderr: (d.stderr.powi(2) + f.stderr.powi(2)).sqrt(),
            })
            .collect();
        Ok(vec![
            make("", self.distance.clone())?,
            make("_floor", self.floor.clone())?,
            make("_adjusted", adjusted)?,
        ])
    }
}

fn load_chain_reward(chain: &Path, reward: &Path, base: &Path) -> Result<(FiniteMarkovChain, RewardMap)> {
    let chain = FiniteMarkovChain::load(&resolve(base, chain))?;
    let reward = RewardMap::load(&resolve(base, reward))?;
    Ok((chain, reward))
}

fn run_mc_clt(c: &McCltConfig, name: &str, seed: u64, base: &Path) -> Result<(Vec<ResultRow>, Vec<RateReport>)> {
    let (chain, reward) = load_chain_reward(&c.chain, &c.reward, base)?;
    let sol = markov::solve_poisson(&chain, &reward)?;
    let sigma = markov::asymptotic_covariance(&chain, &sol)?;
    if !sigma.positive_definite {
        return Err(Error::config(
            "reward",
            format!(
                "asymptotic covariance is not positive definite (min eigenvalue {:e})",
                sigma.min_eigenvalue
            ),
        ));
    }
    let sigma_inf = sigma.matrix.clone();
    let flat = reward.flattened();
    let d = sol.dim();
    let centered: Vec<Vec<f64>> = flat
        .iter()
        .map(|r| r.iter().zip(sol.r_bar()).map(|(a, b)| a - b).collect())
        .collect();
    let sampler = chain.sampler(&c.start)?;

    let mut rows = Rows::new(name);
    let mut curve = DistanceCurve::new();
    let mut bounds = Vec::with_capacity(c.n_grid.len());
    for &n in &c.n_grid {
        let t0 = Instant::now();
        let experiment = label_id(name, n);
        let base_key = StreamKey::new(seed, StreamRole::ChainStart).experiment(experiment);
        let ensemble: Vec<f64> = (0..c.replicates)
            .into_par_iter()
            .flat_map_iter(|r| {
                let key = base_key.replicate(r as u64);
                let mut start_stream = key.stream();
                let mut step_stream = key.role(StreamRole::ChainSteps).stream();
                let mut x = sampler.draw_start(&mut start_stream);
                let mut sum = vec![0.0; d];
                for _ in 0..n {
                    sum.iter_mut().zip(&centered[x]).for_each(|(s, v)| *s += v);
                    x = sampler.step(x, &mut step_stream);
                }
                let root = (n as f64).sqrt();
                sum.into_iter().map(move |s| s / root)
            })
            .collect();
        let ensemble = SampleSet::new(d, ensemble)?;
        let (dist, floor) =
            distance_and_floor(&ensemble, &sigma_inf, c.reference_draws, c.directions, seed, experiment)?;
        let cov = stats::empirical_covariance(&ensemble)?;
        let beta = c.beta.at(n)?;
        let constants = stein::stein_constants(d, beta)?.with_c_universal(c.c_universal)?;
        let mstats = MartingaleStats::exact(&chain, &sol, &sigma_inf, &c.start, n as usize, beta)?;
        let bound = stein::martingale_clt_bound(&mstats, &constants)?;
        let ms = elapsed_ms(t0);

        rows.push_estimate(n, "w1", dist, ms)?;
        rows.push_estimate(n, "w1_floor", floor, ms)?;
        rows.push(
            n,
            "w1_adjusted",
            dist.value - floor.value,
            (dist.stderr.powi(2) + floor.stderr.powi(2)).sqrt(),
            ms,
        )?;
        rows.push(n, "cov_rel_err", relative_hs_error(&cov, &sigma_inf), 0.0, ms)?;
        rows.push(n, "bound", bound, 0.0, ms)?;
        curve.distance.push(dist);
        curve.floor.push(floor);
        bounds.push(bound);
    }
    rows.push(0, "c_universal", c.c_universal, 0.0, 0)?;
    let mut reports = curve.reports(&c.n_grid, "w1")?;
    reports.push(RateReport::new("bound", c.n_grid.clone(), bounds, vec![0.0; c.n_grid.len()])?);
    for r in &reports {
        rows.push_slope(r)?;
    }
    Ok((rows.rows, reports))
}

fn load_td_model(path: &Path, delta: Option<f64>, base: &Path) -> Result<TdModel> {
    let model = TdModel::load(&resolve(base, path))?;
    match delta {
        Some(d) => model
            .with_delta(d)
            .map_err(|e| Error::config("delta", e.to_string())),
        None => Ok(model),
    }
}

fn theta0_for(model: &TdModel, theta0: &Option<Vec<f64>>) -> Result<Vec<f64>> {
    match theta0 {
        Some(t) if t.len() != model.dim() => Err(Error::config(
            "theta0",
            format!("length {} for a model of dimension {}", t.len(), model.dim()),
        )),
        Some(t) => Ok(t.clone()),
        None => Ok(vec![0.0; model.dim()]),
    }
}

fn run_td_clt(c: &TdCltConfig, name: &str, seed: u64, base: &Path) -> Result<(Vec<ResultRow>, Vec<RateReport>)> {
    let model = load_td_model(&c.model, c.delta, base)?;
    let theta0 = theta0_for(&model, &c.theta0)?;
    let target = td::mean_dynamics(&model)?;
    let kernel = TdKernel::new(&model, &c.start)?;
    let d = model.dim();

    let mut rows = Rows::new(name);
    if !target.sigma_inf.positive_definite {
        rows.push(0, "reference_degenerate", 1.0, 0.0, 0)?;
    }
    let mut curve = DistanceCurve::new();
    for &n in &c.n_grid {
        let t0 = Instant::now();
        let experiment = label_id(name, n);
        let base_key = StreamKey::new(seed, StreamRole::ChainStart).experiment(experiment);
        let ensemble: Vec<f64> = (0..c.replicates)
            .into_par_iter()
            .flat_map_iter(|r| {
                let key = base_key.replicate(r as u64);
                kernel.scaled_error(
                    n as usize,
                    &theta0,
                    &target.theta_star,
                    &mut key.stream(),
                    &mut key.role(StreamRole::ChainSteps).stream(),
                )
            })
            .collect();
        let ensemble = SampleSet::new(d, ensemble)?;
        let (dist, floor) =
            distance_and_floor(&ensemble, &target.limit_cov, c.reference_draws, c.directions, seed, experiment)?;
        let cov = stats::empirical_covariance(&ensemble)?;
        let ms = elapsed_ms(t0);

        rows.push_estimate(n, "distance", dist, ms)?;
        rows.push_estimate(n, "distance_floor", floor, ms)?;
        rows.push(
            n,
            "distance_adjusted",
            dist.value - floor.value,
            (dist.stderr.powi(2) + floor.stderr.powi(2)).sqrt(),
            ms,
        )?;
        rows.push(n, "cov_rel_err", relative_hs_error(&cov, &target.limit_cov), 0.0, ms)?;
        curve.distance.push(dist);
        curve.floor.push(floor);
    }
    let reports = curve.reports(&c.n_grid, "distance")?;
    for r in &reports {
        rows.push_slope(r)?;
    }
    Ok((rows.rows, reports))
}

fn run_bound_curve(c: &BoundCurveConfig, name: &str, base: &Path) -> Result<(Vec<ResultRow>, Vec<RateReport>)> {
    let (chain, reward) = load_chain_reward(&c.chain, &c.reward, base)?;
    let sol = markov::solve_poisson(&chain, &reward)?;
    let sigma = markov::asymptotic_covariance(&chain, &sol)?;
    let sigma_inf = sigma.require_pd()?.clone();
    let d = sol.dim();
    if let Some(&n) = c.n_grid.iter().find(|&&n| n < 8) {
        return Err(Error::Domain(format!(
            "n = {n} is below the β schedule domain (n ≥ 8)"
        )));
    }

    let mut rows = Rows::new(name);
    let mut fixed = Vec::new();
    let mut scheduled = Vec::new();
    let mut envelope = 0.0_f64;
    for &n in &c.n_grid {
        let t0 = Instant::now();
        let eval = |beta: f64| -> Result<f64> {
            let constants = stein::stein_constants(d, beta)?.with_c_universal(c.c_universal)?;
            let s = MartingaleStats::exact(&chain, &sol, &sigma_inf, &c.start, n as usize, beta)?;
            stein::martingale_clt_bound(&s, &constants)
        };
        let beta_n = stein::beta_schedule(n)?;
        let sched = eval(beta_n)?;
        let fixed_value = match c.beta {
            BetaSetting::Fixed(b) => Some(eval(b)?),
            BetaSetting::Named(BetaName::Schedule) => None,
        };
        let ms = elapsed_ms(t0);
        if let Some(v) = fixed_value {
            rows.push(n, "bound", v, 0.0, ms)?;
            fixed.push(v);
        }
        let ratio = sched * (n as f64).sqrt() / (n as f64).ln();
        envelope = envelope.max(ratio);
        rows.push(n, "bound_schedule", sched, 0.0, ms)?;
        rows.push(n, "beta_schedule", beta_n, 0.0, ms)?;
        rows.push(n, "bound_schedule_log_ratio", ratio, 0.0, ms)?;
        scheduled.push(sched);
    }
    rows.push(0, "bound_schedule_log_constant", envelope, 0.0, 0)?;
    rows.push(0, "c_universal", c.c_universal, 0.0, 0)?;
    let zeros = vec![0.0; c.n_grid.len()];
    let mut reports = Vec::new();
    if !fixed.is_empty() {
        reports.push(RateReport::new("bound", c.n_grid.clone(), fixed, zeros.clone())?);
    }
    reports.push(RateReport::new("bound_schedule", c.n_grid.clone(), scheduled, zeros)?);
    for r in &reports {
        rows.push_slope(r)?;
    }
    Ok((rows.rows, reports))
}

fn run_upsilon_decay(c: &UpsilonDecayConfig, name: &str, base: &Path) -> Result<(Vec<ResultRow>, Vec<RateReport>)> {
    let (a_bar, delta) = match (&c.a_bar, &c.model) {
        (Some(rows), None) => {
            let a = Matrix::from_rows(rows).map_err(|e| Error::config("a_bar", e.to_string()))?;
            let delta = c.delta.ok_or_else(|| Error::config("delta", "required with a_bar"))?;
            (a, delta)
        }
        (None, Some(path)) => {
            let model = load_td_model(path, c.delta, base)?;
            (model.a_bar().clone(), model.delta())
        }
        _ => return Err(Error::config("a_bar", "give exactly one of a_bar or model")),
    };
    if !(delta > 0.5 && delta < 1.0) {
        return Err(Error::config("delta", format!("must lie in (0.5, 1), got {delta}")));
    }
    if !a_bar.is_square() || !linalg::is_hurwitz(&a_bar.scale(-1.0))? {
        return Err(Error::Stability("−Ā must be a square Hurwitz matrix".into()));
    }
    let mut rows = Rows::new(name);
    let mut values = Vec::new();
    let mut sups = Vec::new();
    for &t in &c.n_grid {
        let t0 = Instant::now();
        let decay = td::upsilon_decay_curve(&[t], delta, &a_bar)?;
        let ms = elapsed_ms(t0);
        rows.push(t, "upsilon_sq_mean", decay.report.values[0], 0.0, ms)?;
        rows.push(t, "upsilon_sup", decay.sup_norms[0], 0.0, ms)?;
        values.push(decay.report.values[0]);
        sups.push(decay.sup_norms[0]);
    }
    let zeros = vec![0.0; c.n_grid.len()];
    let reports = vec![
        RateReport::new("upsilon_sq_mean", c.n_grid.clone(), values, zeros.clone())?,
        RateReport::new("upsilon_sup", c.n_grid.clone(), sups, zeros)?,
    ];
    for r in &reports {
        rows.push_slope(r)?;
    }
    Ok((rows.rows, reports))
}

fn run_delta_moments(c: &DeltaMomentsConfig, name: &str, seed: u64, base: &Path) -> Result<(Vec<ResultRow>, Vec<RateReport>)> {
    let model = load_td_model(&c.model, c.delta, base)?;
    let theta0 = theta0_for(&model, &c.theta0)?;
    let t0 = Instant::now();
    let report = td::delta_moment_curve(&model, &c.n_grid, c.replicates, seed, &theta0, &c.start)?;
    let ms = elapsed_ms(t0);
    let mut rows = Rows::new(name);
    for ((n, v), s) in report.grid.iter().zip(&report.values).zip(&report.stderrs) {
        rows.push(*n, &report.estimator, *v, *s, ms)?;
    }
    rows.push_slope(&report)?;
    Ok((rows.rows, vec![report]))
}
