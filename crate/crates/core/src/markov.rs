//! Finite Markov chains: validation, stationary law, mixing diagnostics,
//! Poisson-equation solutions and the martingale built from them.
//!
//! The Poisson equation is written here as `V − PV = r − r̄`, which is the
//! average-reward relative value equation `r̄ = r(x) + E[V(X₁) | X₀ = x] − V(x)`.
//! It is solved exactly through the fundamental matrix `(I − P + 1πᵀ)⁻¹` and
//! then centered so that `πᵀV = 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{RandomStream, StreamKey, StreamRole};

/// Row sums must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Threshold used to call a total-variation value zero.
const TV_ZERO: f64 = 1e-15;

/// Row-stochastic transition matrix with optional state labels.
#[derive(Debug, Clone)]
pub struct FiniteMarkovChain {
    p: Matrix,
    labels: Option<Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl FiniteMarkovChain {
    pub fn new(p: Matrix, labels: Option<Vec<String>>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::config(
                "P",
                format!("transition matrix must be square, got {}x{}", p.rows(), p.cols()),
            ));
        }
        for i in 0..p.rows() {
            let row = p.row(i);
            if let Some(j) = row.iter().position(|&x| x < 0.0) {
                return Err(Error::config(
                    format!("P[{i}][{j}]"),
                    format!("negative transition probability {}", row[j]),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::config(
                    format!("P row {i}"),
                    format!("row sums to {sum}, expected 1"),
                ));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != p.rows() {
                return Err(Error::config(
                    "labels",
                    format!("{} labels for {} states", labels.len(), p.rows()),
                ));
            }
        }
        Ok(Self { p, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = Matrix::from_rows(rows).map_err(|e| Error::config("P", e.to_string()))?;
        Self::new(p, None)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ChainFile = serde_json::from_str(text)?;
        if file.p.is_empty() {
            return Err(Error::config("P", "transition matrix has no rows"));
        }
        let p = Matrix::from_rows(&file.p).map_err(|e| Error::config("P", e.to_string()))?;
        Self::new(p, file.labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ChainFile {
            p: self.p.to_rows(),
            labels: self.labels.clone(),
        })
        .expect("chain serializes")
    }

    pub fn n_states(&self) -> usize {
        self.p.rows()
    }

    pub fn transition(&self) -> &Matrix {
        &self.p
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[(from, to)]
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.p
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, _)| j)
    }

    fn reachable_from_zero(&self, reversed: bool) -> Vec<bool> {
        let n = self.n_states();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            let next: Vec<usize> = if reversed {
                (0..n).filter(|&j| self.p[(j, i)] > 0.0).collect()
            } else {
                self.successors(i).collect()
            };
            for j in next {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    }

    /// Strong connectivity of the support graph.
    pub fn is_irreducible(&self) -> bool {
        self.reachable_from_zero(false).iter().all(|&s| s)
            && self.reachable_from_zero(true).iter().all(|&s| s)
    }

    /// Period of state 0: gcd of `level(u) + 1 − level(v)` over support edges,
    /// where `level` is the BFS depth from state 0. Meaningful for irreducible
    /// chains only.
    pub fn period(&self) -> usize {
        let n = self.n_states();
        let mut level = vec![usize::MAX; n];
        level[0] = 0;
        let mut queue = std::collections::VecDeque::from([0]);
        while let Some(i) = queue.pop_front() {
            for j in self.successors(i) {
                if level[j] == usize::MAX {
                    level[j] = level[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        let mut g = 0usize;
        for i in (0..n).filter(|&i| level[i] != usize::MAX) {
            for j in self.successors(i) {
                let diff = (level[i] + 1).abs_diff(level[j]);
                g = gcd(g, diff);
            }
        }
        g.max(1)
    }

    fn require_irreducible(&self) -> Result<()> {
        if !self.is_irreducible() {
            return Err(Error::Structure(
                "chain is reducible (support graph is not strongly connected)".into(),
            ));
        }
        Ok(())
    }

    pub fn require_ergodic(&self) -> Result<()> {
        self.require_irreducible()?;
        let period = self.period();
        if period != 1 {
            return Err(Error::Structure(format!("chain is periodic with period {period}")));
        }
        Ok(())
    }

    /// Unique stationary distribution of an irreducible chain.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        self.require_irreducible()?;
        let n = self.n_states();
        // (Pᵀ − I) π = 0 with the last equation replaced by Σπ = 1
        let mut a = &self.p.transpose() - &Matrix::identity(n);
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut rhs = vec![0.0; n];
        rhs[n - 1] = 1.0;
        let mut pi = linalg::solve_vec(&a, &rhs)?;
        for x in &mut pi {
            *x = x.max(0.0);
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|x| *x /= total);
        Ok(pi)
    }

    /// One step of the law: `μ ↦ μP`.
    pub fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let n = self.n_states();
        let mut out = vec![0.0; n];
        for (i, &mi) in dist.iter().enumerate() {
            if mi == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.p.row(i)) {
                *o += mi * p;
            }
        }
        out
    }

    /// Worst-case total-variation distance to stationarity for `n = 0..=horizon`
    /// and the tightest geometric envelope `K₁ρⁿ` with `K₁ = tv[0]`.
    pub fn mixing_report(&self, horizon: usize) -> Result<MixingReport> {
        self.require_ergodic()?;
        let pi = self.stationary()?;
        let n = self.n_states();
        let mut power = Matrix::identity(n);
        let mut tv_curve = Vec::with_capacity(horizon + 1);
        for step in 0..=horizon {
            if step > 0 {
                power = &power * &self.p;
            }
            let worst = (0..n)
                .map(|x| {
                    0.5 * power
                        .row(x)
                        .iter()
                        .zip(&pi)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            tv_curve.push(if worst < TV_ZERO { 0.0 } else { worst });
        }
        let k1 = tv_curve[0];
        let rho = if k1 == 0.0 {
            0.0
        } else {
            tv_curve
                .iter()
                .enumerate()
                .skip(1)
                .map(|(step, &tv)| (tv / k1).powf(1.0 / step as f64))
                .fold(0.0, f64::max)
        };
        Ok(MixingReport { rho, k1, tv_curve })
    }

    /// Precomputed inverse-CDF sampler for this chain.
    pub fn sampler(&self, start: &Start) -> Result<ChainSampler> {
        let n = self.n_states();
        let start_cdf = match start {
            Start::State(i) => {
                if *i >= n {
                    return Err(Error::config(
                        "start",
                        format!("state {i} out of range for {n} states"),
                    ));
                }
                let mut cdf = vec![0.0; n];
                cdf[*i..].iter_mut().for_each(|c| *c = 1.0);
                cdf
            }
            Start::Distribution(dist) => {
                validate_distribution(dist, n, "start")?;
                cumulative(dist)
            }
            Start::Stationary => cumulative(&self.stationary()?),
        };
        let rows = (0..n).map(|i| cumulative(self.p.row(i))).collect();
        Ok(ChainSampler { rows, start_cdf })
    }

    /// Simulates `X₀..Xₙ` (length `n + 1`) from the given stream.
    pub fn simulate(&self, n: usize, start: &Start, stream: &mut RandomStream) -> Result<Vec<usize>> {
        let sampler = self.sampler(start)?;
        let mut path = Vec::with_capacity(n + 1);
        let mut x = sampler.draw_start(stream);
        path.push(x);
        for _ in 0..n {
            x = sampler.step(x, stream);
            path.push(x);
        }
        Ok(path)
    }
}

/// Simulates a path reproducibly from a bare seed.
pub fn simulate_chain(chain: &FiniteMarkovChain, n: usize, start: &Start, seed: u64) -> Result<Vec<usize>> {
    let mut stream = StreamKey::new(seed, StreamRole::ChainSteps).stream();
    chain.simulate(n, start, &mut stream)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    // guard against the final partial sum landing just below 1
    if let Some(last) = p.iter().rposition(|&x| x > 0.0) {
        cdf[last..].iter_mut().for_each(|c| *c = 1.0);
    }
    cdf
}

fn validate_distribution(dist: &[f64], n: usize, field: &str) -> Result<()> {
    if dist.len() != n {
        return Err(Error::config(
            field,
            format!("distribution has {} entries for {n} states", dist.len()),
        ));
    }
    if let Some(i) = dist.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::config(field, format!("entry {i} is {}", dist[i])));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(field, format!("distribution sums to {sum}")));
    }
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Initial law of a simulated chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    State(usize),
    Distribution(Vec<f64>),
    Stationary,
}

impl Start {
    /// Initial law as a probability vector.
    pub fn distribution(&self, chain: &FiniteMarkovChain) -> Result<Vec<f64>> {
        let n = chain.n_states();
        match self {
            Start::State(i) => {
                if *i >= n {
                    return Err(Error::config("start", format!("state {i} out of range")));
                }
                let mut d = vec![0.0; n];
                d[*i] = 1.0;
                Ok(d)
            }
            Start::Distribution(d) => {
                validate_distribution(d, n, "start")?;
                Ok(d.clone())
            }
            Start::Stationary => chain.stationary(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainSampler {
    rows: Vec<Vec<f64>>,
    start_cdf: Vec<f64>,
}

impl ChainSampler {
    pub fn draw_start(&self, stream: &mut RandomStream) -> usize {
        pick(&self.start_cdf, stream.uniform())
    }

    /// One transition from `state`, consuming exactly one uniform.
    #[inline]
    pub fn step(&self, state: usize, stream: &mut RandomStream) -> usize {
        pick(&self.rows[state], stream.uniform())
    }
}

#[inline]
fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

#[derive(Debug, Clone, Serialize)]
pub struct MixingReport {
    pub rho: f64,
    pub k1: f64,
    pub tv_curve: Vec<f64>,
}

/// Per-state rewards, vector- or matrix-valued.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardMap {
    Vector(Vec<Vec<f64>>),
    Matrix(Vec<Matrix>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardFile {
    r: Option<Vec<Vec<f64>>>,
    #[serde(rename = "A")]
    a: Option<Vec<Vec<Vec<f64>>>>,
}

/// Shape of a reward or Poisson solution value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ValueShape {
    Vector(usize),
    /// `d x d` matrices, stored flattened row-major.
    Matrix(usize),
}

impl ValueShape {
    pub fn flat_len(self) -> usize {
        match self {
            ValueShape::Vector(d) => d,
            ValueShape::Matrix(d) => d * d,
        }
    }
}

impl RewardMap {
    pub fn scalar(values: &[f64]) -> Self {
        RewardMap::Vector(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RewardFile = serde_json::from_str(text)?;
        match (file.r, file.a) {
            (Some(r), None) => Ok(RewardMap::Vector(r)),
            (None, Some(a)) => a
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    Matrix::from_rows(m).map_err(|e| Error::config(format!("A[{i}]"), e.to_string()))
                })
                .collect::<Result<Vec<_>>>()
                .map(RewardMap::Matrix),
            _ => Err(Error::config(
                "reward",
                "expected exactly one of \"r\" (vector rewards) or \"A\" (matrix rewards)",
            )),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn n_states(&self) -> usize {
        match self {
            RewardMap::Vector(v) => v.len(),
            RewardMap::Matrix(m) => m.len(),
        }
    }

    pub fn shape(&self) -> Result<ValueShape> {
        match self {
            RewardMap::Vector(values) => {
                let d = values.first().map_or(0, Vec::len);
                if d == 0 {
                    return Err(Error::config("r", "rewards must have dimension ≥ 1"));
                }
                if let Some(i) = values.iter().position(|v| v.len() != d) {
                    return Err(Error::config(
                        format!("r[{i}]"),
                        format!("has {} entries, expected {d}", values[i].len()),
                    ));
                }
                if let Some(i) = values.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
                    return Err(Error::config(format!("r[{i}]"), "non-finite reward"));
                }
                Ok(ValueShape::Vector(d))
            }
            RewardMap::Matrix(values) => {
                let d = values.first().map_or(0, Matrix::rows);
                if let Some(i) = values
                    .iter()
                    .position(|m| m.rows() != d || m.cols() != d)
                {
                    return Err(Error::config(
                        format!("A[{i}]"),
                        format!("expected a {d}x{d} matrix"),
                    ));
                }
                Ok(ValueShape::Matrix(d))
            }
        }
    }

    /// Per-state values flattened to vectors.
    pub fn flattened(&self) -> Vec<Vec<f64>> {
        match self {
            RewardMap::Vector(v) => v.clone(),
            RewardMap::Matrix(m) => m.iter().map(|m| m.as_slice().to_vec()).collect(),
        }
    }

    fn validate_for(&self, chain: &FiniteMarkovChain) -> Result<ValueShape> {
        if self.n_states() != chain.n_states() {
            return Err(Error::config(
                "reward",
                format!(
                    "{} per-state values for a {}-state chain",
                    self.n_states(),
                    chain.n_states()
                ),
            ));
        }
        self.shape()
    }
}

/// π-centered solution of the Poisson equation together with `r̄` and `π`.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    shape: ValueShape,
    values: Vec<Vec<f64>>,
    next_expected: Vec<Vec<f64>>,
    r_bar: Vec<f64>,
    pi: Vec<f64>,
}

impl PoissonSolution {
    pub fn shape(&self) -> ValueShape {
        self.shape
    }

    /// Flattened dimension of each value.
    pub fn dim(&self) -> usize {
        self.shape.flat_len()
    }

    pub fn value(&self, state: usize) -> &[f64] {
        &self.values[state]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `(PV)(state) = E[V(X₁) | X₀ = state]`.
    pub fn next_expected(&self, state: usize) -> &[f64] {
        &self.next_expected[state]
    }

    pub fn r_bar(&self) -> &[f64] {
        &self.r_bar
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Value at a state reshaped to a matrix (matrix-valued rewards only).
    pub fn value_matrix(&self, state: usize) -> Matrix {
        match self.shape {
            ValueShape::Matrix(d) => Matrix::new(d, d, self.values[state].clone())
                .expect("solution values are finite"),
            ValueShape::Vector(d) => {
                Matrix::new(d, 1, self.values[state].clone()).expect("solution values are finite")
            }
        }
    }

    /// `V(to) − (PV)(from)`: the martingale increment for a transition.
    pub fn increment(&self, from: usize, to: usize) -> Vec<f64> {
        self.values[to]
            .iter()
            .zip(&self.next_expected[from])
            .map(|(v, pv)| v - pv)
            .collect()
    }

    /// `M_V = max_x ‖V(x)‖`.
    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| linalg::norm(v)).fold(0.0, f64::max)
    }

    /// `max_x,c |(V − PV)(x) − (r(x) − r̄)|_c`.
    pub fn residual(&self, reward: &RewardMap) -> f64 {
        let flat = reward.flattened();
        let mut worst = 0.0_f64;
        for (x, rx) in flat.iter().enumerate() {
            for c in 0..self.dim() {
                let lhs = self.values[x][c] - self.next_expected[x][c];
                let rhs = rx[c] - self.r_bar[c];
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }

    /// `max_c |Σ_x π(x) V(x)_c|`.
    pub fn centering_error(&self) -> f64 {
        (0..self.dim())
            .map(|c| {
                self.values
                    .iter()
                    .zip(&self.pi)
                    .map(|(v, p)| p * v[c])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Solves `V − PV = r − r̄` through the fundamental matrix and centers `V`.
pub fn solve_poisson(chain: &FiniteMarkovChain, reward: &RewardMap) -> Result<PoissonSolution> {
    chain.require_ergodic()?;
    let shape = reward.validate_for(chain)?;
    let pi = chain.stationary()?;
    let n = chain.n_states();
    let dim = shape.flat_len();
    let flat = reward.flattened();

    let r_bar: Vec<f64> = (0..dim)
        .map(|c| flat.iter().zip(&pi).map(|(r, p)| p * r[c]).sum())
        .collect();

    // Z = I − P + 1πᵀ
    let mut z = &Matrix::identity(n) - chain.transition();
    for i in 0..n {
        for (j, &pj) in pi.iter().enumerate() {
            z[(i, j)] += pj;
        }
    }
    let mut rhs = Matrix::zeros(n, dim);
    for x in 0..n {
        for c in 0..dim {
            rhs[(x, c)] = flat[x][c] - r_bar[c];
        }
    }
    let sol = linalg::solve(&z, &rhs)?;

    let mut values: Vec<Vec<f64>> = (0..n).map(|x| sol.row(x).to_vec()).collect();
    for c in 0..dim {
        let mean: f64 = values.iter().zip(&pi).map(|(v, p)| p * v[c]).sum();
        values.iter_mut().for_each(|v| v[c] -= mean);
    }
    let next_expected = expected_next(chain, &values);
    Ok(PoissonSolution {
        shape,
        values,
        next_expected,
        r_bar,
        pi,
    })
}

fn expected_next(chain: &FiniteMarkovChain, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chain.n_states();
    let dim = values.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut acc = vec![0.0; dim];
            for (j, vj) in values.iter().enumerate() {
                let p = chain.prob(i, j);
                if p == 0.0 {
                    continue;
                }
                for (a, v) in acc.iter_mut().zip(vj) {
                    *a += p * v;
                }
            }
            acc
        })
        .collect()
}

/// `Σ(i) = Σ_j P_ij (V(j) − (PV)(i))(V(j) − (PV)(i))ᵀ`.
pub fn conditional_covariance(
    chain: &FiniteMarkovChain,
    sol: &PoissonSolution,
    state: usize,
) -> Result<Matrix> {
    let n = chain.n_states();
    if state >= n {
        return Err(Error::Domain(format!("state {state} out of range for {n} states")));
    }
    let dim = sol.dim();
    let mut cov = Matrix::zeros(dim, dim);
    for j in 0..n {
        let p = chain.prob(state, j);
        if p == 0.0 {
            continue;
        }
        let inc = sol.increment(state, j);
        cov.add_scaled(p, &Matrix::outer(&inc, &inc));
    }
    Ok(cov.symmetrized())
}

/// Asymptotic covariance and its positive-definiteness flag.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticCovariance {
    pub matrix: Matrix,
    pub min_eigenvalue: f64,
    pub positive_definite: bool,
}

impl AsymptoticCovariance {
    /// The matrix, or an error when it is not positive definite.
    pub fn require_pd(&self) -> Result<&Matrix> {
        if self.positive_definite {
            Ok(&self.matrix)
        } else {
            Err(Error::DegenerateCovariance {
                min_eigenvalue: self.min_eigenvalue,
            })
        }
    }
}

/// `Σ∞ = Σ_i π_i Σ(i)`; flagged non-PD when `λ_min ≤ 1e−10·tr/d`.
pub fn asymptotic_covariance(
    chain: &FiniteMarkovChain,
    sol: &PoissonSolution,
) -> Result<AsymptoticCovariance> {
    let dim = sol.dim();
    let mut sigma = Matrix::zeros(dim, dim);
    for (i, &pi) in sol.pi().iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        sigma.add_scaled(pi, &conditional_covariance(chain, sol, i)?);
    }
    let sigma = sigma.symmetrized();
    let min_eigenvalue = linalg::min_eigenvalue(&sigma)?;
    let threshold = 1e-10 * sigma.trace() / dim as f64;
    Ok(AsymptoticCovariance {
        positive_definite: min_eigenvalue > threshold && sigma.trace() > 0.0,
        matrix: sigma,
        min_eigenvalue,
    })
}

/// `m_k = V(X_k) − (PV)(X_{k−1})` for `k = 1..n`.
pub fn martingale_increments(
    chain: &FiniteMarkovChain,
    sol: &PoissonSolution,
    path: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let n = chain.n_states();
    if let Some(&bad) = path.iter().find(|&&x| x >= n) {
        return Err(Error::Domain(format!("path visits state {bad} of a {n}-state chain")));
    }
    Ok(path.windows(2).map(|w| sol.increment(w[0], w[1])).collect())
}
