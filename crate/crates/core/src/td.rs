//! TD(0) as a Markov-modulated linear recursion
//! `θ_{k+1} = θ_k − ε_k(A(X_k)θ_k + b(X_k))`, `ε_k = (k+1)^{−δ}`,
//! with Polyak-Ruppert averaging and the step-size matrix products
//! `Υ_j^n` and `Φ_j^n` used in its analysis.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::markov::{
    self, AsymptoticCovariance, ChainSampler, FiniteMarkovChain, PoissonSolution, RewardMap, Start,
};
use crate::rng::{label_id, RandomStream, StreamKey, StreamRole};
use crate::stats::{Estimate, RateReport};

#[derive(Debug, Clone)]
pub struct TdModel {
    chain: FiniteMarkovChain,
    a: Vec<Matrix>,
    b: Vec<Vec<f64>>,
    delta: f64,
    pi: Vec<f64>,
    a_bar: Matrix,
    b_bar: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TdModelFile {
    chain: serde_json::Value,
    #[serde(rename = "A")]
    a: Vec<Vec<Vec<f64>>>,
    b: Vec<Vec<f64>>,
    delta: f64,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.5 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("step exponent δ must lie in (0.5, 1), got {delta}")))
    }
}

impl TdModel {
    pub fn new(chain: FiniteMarkovChain, a: Vec<Matrix>, b: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        let s = chain.n_states();
        if a.len() != s || b.len() != s {
            return Err(Error::config(
                "A",
                format!("{} A matrices and {} b vectors for {s} states", a.len(), b.len()),
            ));
        }
        let d = b[0].len();
        for (i, (ai, bi)) in a.iter().zip(&b).enumerate() {
            if ai.rows() != d || ai.cols() != d {
                return Err(Error::config(
                    format!("A[{i}]"),
                    format!("expected {d}x{d}, got {}x{}", ai.rows(), ai.cols()),
                ));
            }
            if bi.len() != d {
                return Err(Error::config(format!("b[{i}]"), format!("expected length {d}, got {}", bi.len())));
            }
            if bi.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("b[{i}]"), "non-finite entry"));
            }
        }
        check_delta(delta).map_err(|e| Error::config("delta", e.to_string()))?;
        chain.require_ergodic()?;
        let pi = chain.stationary()?;
        let mut a_bar = Matrix::zeros(d, d);
        let mut b_bar = vec![0.0; d];
        for (p, (ai, bi)) in pi.iter().zip(a.iter().zip(&b)) {
            a_bar.add_scaled(*p, ai);
            b_bar.iter_mut().zip(bi).for_each(|(acc, v)| *acc += p * v);
        }
        if !linalg::is_hurwitz(&a_bar.scale(-1.0))? {
            return Err(Error::Stability(format!(
                "−Ā is not Hurwitz (eigenvalues of Ā: {:?})",
                linalg::eigenvalues(&a_bar)?
            )));
        }
        Ok(Self {
            chain,
            a,
            b,
            delta,
            pi,
            a_bar,
            b_bar,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TdModelFile = serde_json::from_str(text)?;
        let chain = FiniteMarkovChain::from_json(&file.chain.to_string())?;
        let a = file
            .a
            .iter()
            .enumerate()
            .map(|(i, rows)| Matrix::from_rows(rows).map_err(|e| Error::config(format!("A[{i}]"), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if file.b.is_empty() {
            return Err(Error::config("b", "no per-state vectors"));
        }
        Self::new(chain, a, file.b, file.delta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&markov::read_text(path)?)
    }

    pub fn chain(&self) -> &FiniteMarkovChain {
        &self.chain
    }

    pub fn dim(&self) -> usize {
        self.b_bar.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn a(&self, state: usize) -> &Matrix {
        &self.a[state]
    }

    pub fn b(&self, state: usize) -> &[f64] {
        &self.b[state]
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn a_bar(&self) -> &Matrix {
        &self.a_bar
    }

    pub fn b_bar(&self) -> &[f64] {
        &self.b_bar
    }

    /// The same model with another step exponent.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self { delta, ..self.clone() })
    }

    /// Poisson solution for the matrix-valued reward `x ↦ A(x)`.
    pub fn matrix_poisson(&self) -> Result<PoissonSolution> {
        markov::solve_poisson(&self.chain, &RewardMap::Matrix(self.a.clone()))
    }
}

/// `ε_k = 1/(k+1)^δ`.
pub fn step_size(k: u64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(eps(k as usize, delta))
}

#[inline]
fn eps(k: usize, delta: f64) -> f64 {
    ((k + 1) as f64).powf(-delta)
}

#[derive(Debug, Clone, Serialize)]
pub struct TdTarget {
    pub a_bar: Matrix,
    pub b_bar: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub sigma_inf: AsymptoticCovariance,
    /// `Ā⁻¹Σ∞Ā⁻ᵀ`.
    pub limit_cov: Matrix,
}

pub fn mean_dynamics(model: &TdModel) -> Result<TdTarget> {
    let a_bar = model.a_bar.clone();
    let a_inv = linalg::inverse(&a_bar)?;
    let theta_star: Vec<f64> = a_inv.mul_vec(&model.b_bar).into_iter().map(|x| -x).collect();
    let reward: Vec<Vec<f64>> = (0..model.chain.n_states())
        .map(|x| {
            model.a[x]
                .mul_vec(&theta_star)
                .into_iter()
                .zip(&model.b[x])
                .map(|(u, v)| u + v)
                .collect()
        })
        .collect();
    let sol = markov::solve_poisson(&model.chain, &RewardMap::Vector(reward))?;
    let sigma_inf = markov::asymptotic_covariance(&model.chain, &sol)?;
    let limit_cov = (&(&a_inv * &sigma_inf.matrix) * &a_inv.transpose()).symmetrized();
    Ok(TdTarget {
        a_bar,
        b_bar: model.b_bar.clone(),
        theta_star,
        sigma_inf,
        limit_cov,
    })
}

/// Flat, allocation-free form of a model for ensemble runs.
#[derive(Debug, Clone)]
pub struct TdKernel {
    d: usize,
    delta: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    sampler: ChainSampler,
}

impl TdKernel {
    pub fn new(model: &TdModel, start: &Start) -> Result<Self> {
        Ok(Self {
            d: model.dim(),
            delta: model.delta,
            a: model.a.iter().flat_map(|m| m.as_slice().iter().copied()).collect(),
            b: model.b.concat(),
            sampler: model.chain.sampler(start)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Runs `n` steps from `theta` (updated in place), calling
    /// `visit(k, X_k, θ_k)` for `k = 0..=n`.
    pub fn run(
        &self,
        n: usize,
        theta: &mut [f64],
        start_stream: &mut RandomStream,
        step_stream: &mut RandomStream,
        mut visit: impl FnMut(usize, usize, &[f64]),
    ) {
        let d = self.d;
        assert_eq!(theta.len(), d);
        let mut scratch = vec![0.0; d];
        let mut x = self.sampler.draw_start(start_stream);
        for k in 0..n {
            visit(k, x, theta);
            let e = eps(k, self.delta);
            let a = &self.a[x * d * d..(x + 1) * d * d];
            let b = &self.b[x * d..(x + 1) * d];
            for (r, s) in scratch.iter_mut().enumerate() {
                let row = &a[r * d..(r + 1) * d];
                *s = row.iter().zip(theta.iter()).map(|(u, v)| u * v).sum::<f64>() + b[r];
            }
            theta.iter_mut().zip(&scratch).for_each(|(t, s)| *t -= e * s);
            x = self.sampler.step(x, step_stream);
        }
        visit(n, x, theta);
    }

    /// `√n(θ̄_n − θ*)` for one replicate, `θ̄_n = (1/n)Σ_{j=1}^n θ_j`.
    pub fn scaled_error(
        &self,
        n: usize,
        theta0: &[f64],
        theta_star: &[f64],
        start_stream: &mut RandomStream,
        step_stream: &mut RandomStream,
    ) -> Vec<f64> {
        let mut theta = theta0.to_vec();
        let mut sum = vec![0.0; self.d];
        self.run(n, &mut theta, start_stream, step_stream, |k, _, t| {
            if k >= 1 {
                sum.iter_mut().zip(t).for_each(|(s, v)| *s += v);
            }
        });
        let root = (n as f64).sqrt();
        sum.iter()
            .zip(theta_star)
            .map(|(s, t)| root * (s / n as f64 - t))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TdTrajectory {
    /// `θ_0..θ_n`.
    pub theta: Vec<Vec<f64>>,
    /// `theta_bar[k − 1] = (1/k)Σ_{j=1}^k θ_j` for `k = 1..n`.
    pub theta_bar: Vec<Vec<f64>>,
    /// `X_0..X_n`.
    pub states: Vec<usize>,
    /// `√n(θ̄_n − θ*)`.
    pub scaled_error: Vec<f64>,
}

pub fn simulate_td(model: &TdModel, n: usize, theta0: &[f64], start: &Start, seed: u64) -> Result<TdTrajectory> {
    if theta0.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "θ0 has length {} for a model of dimension {}",
            theta0.len(),
            model.dim()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("trajectory length must be ≥ 1".into()));
    }
    let target = mean_dynamics(model)?;
    let kernel = TdKernel::new(model, start)?;
    let key = StreamKey::new(seed, StreamRole::ChainStart);
    let mut start_stream = key.stream();
    let mut step_stream = key.role(StreamRole::ChainSteps).stream();

    let mut theta_path = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut theta = theta0.to_vec();
    kernel.run(n, &mut theta, &mut start_stream, &mut step_stream, |_, x, t| {
        theta_path.push(t.to_vec());
        states.push(x);
    });

    let d = model.dim();
    let mut sum = vec![0.0; d];
    let theta_bar: Vec<Vec<f64>> = theta_path[1..]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            sum.iter_mut().zip(t).for_each(|(s, v)| *s += v);
            sum.iter().map(|s| s / (i + 1) as f64).collect()
        })
        .collect();
    let root = (n as f64).sqrt();
    let scaled_error = theta_bar[n - 1]
        .iter()
        .zip(&target.theta_star)
        .map(|(a, b)| root * (a - b))
        .collect();
    Ok(TdTrajectory {
        theta: theta_path,
        theta_bar,
        states,
        scaled_error,
    })
}

/// Both sides of `Σ_{j<n} [V_A(X_j)Δ_j − V_A(X_{j+1})Δ_{j+1}] = V_A(X_0)Δ_0 − V_A(X_n)Δ_n`.
pub fn telescoping_sides(model: &TdModel, traj: &TdTrajectory, theta_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let sol = model.matrix_poisson()?;
    let term = |k: usize| -> Vec<f64> {
        let delta: Vec<f64> = traj.theta[k].iter().zip(theta_star).map(|(a, b)| a - b).collect();
        sol.value_matrix(traj.states[k]).mul_vec(&delta)
    };
    let n = traj.theta.len() - 1;
    let d = model.dim();
    let mut lhs = vec![0.0; d];
    let mut current = term(0);
    for j in 0..n {
        let next = term(j + 1);
        lhs.iter_mut()
            .zip(current.iter().zip(&next))
            .for_each(|(l, (c, x))| *l += c - x);
        current = next;
    }
    let rhs = term(0).iter().zip(&term(n)).map(|(a, b)| a - b).collect();
    Ok((lhs, rhs))
}

fn check_indices(j: usize, n: usize) -> Result<()> {
    if j < n {
        Ok(())
    } else {
        Err(Error::Domain(format!("index j = {j} must be below n = {n}")))
    }
}

fn shrink(a_bar: &Matrix, l: usize, delta: f64) -> Matrix {
    let mut m = a_bar.scale(-eps(l, delta));
    for i in 0..m.rows() {
        m[(i, i)] += 1.0;
    }
    m
}

/// `Φ_j^n = ε_j Σ_{k=j}^{n−1} Π_{l=j}^{k−1}(I − ε_lĀ) − Ā⁻¹`.
pub fn phi(j: usize, n: usize, delta: f64, a_bar: &Matrix) -> Result<Matrix> {
    check_delta(delta)?;
    check_indices(j, n)?;
    let d = a_bar.rows();
    let mut product = Matrix::identity(d);
    let mut sum = Matrix::zeros(d, d);
    for k in j..n {
        sum.add_scaled(1.0, &product);
        product = &product * &shrink(a_bar, k, delta);
    }
    Ok(&sum.scale(eps(j, delta)) - &linalg::inverse(a_bar)?)
}

/// `Υ_j^n = ε_j Σ_{k=j+1}^{n} Π_{l=j+1}^{k−1}(I − ε_lĀ) − Ā⁻¹`.
pub fn upsilon(j: usize, n: usize, delta: f64, a_bar: &Matrix) -> Result<Matrix> {
    check_delta(delta)?;
    check_indices(j, n)?;
    let d = a_bar.rows();
    let mut product = Matrix::identity(d);
    let mut sum = Matrix::zeros(d, d);
    for k in j + 1..=n {
        sum.add_scaled(1.0, &product);
        product = &product * &shrink(a_bar, k, delta);
    }
    Ok(&sum.scale(eps(j, delta)) - &linalg::inverse(a_bar)?)
}

/// `Υ_j^n` for every `j < n`, from the suffix recurrence
/// `T_{n−1} = I`, `T_j = I + (I − ε_{j+1}Ā)T_{j+1}`, `Υ_j^n = ε_jT_j − Ā⁻¹`.
pub fn upsilon_all(n: usize, delta: f64, a_bar: &Matrix) -> Result<Vec<Matrix>> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::Domain("n must be ≥ 1".into()));
    }
    let d = a_bar.rows();
    let a_inv = linalg::inverse(a_bar)?;
    let identity = Matrix::identity(d);
    let mut out = vec![Matrix::zeros(d, d); n];
    let mut t = identity.clone();
    for j in (0..n).rev() {
        if j + 1 < n {
            t = &identity + &(&shrink(a_bar, j + 1, delta) * &t);
        }
        out[j] = &t.scale(eps(j, delta)) - &a_inv;
    }
    Ok(out)
}

/// Closed form of `Υ_{j+1}^n − Υ_j^n`:
/// `ε_{j+1}(Υ_{j+1}^n + Ā⁻¹)Ā − ε_{j+1}I + ((ε_{j+1} − ε_j)/ε_j)(Υ_j^n + Ā⁻¹)`.
pub fn upsilon_difference(j: usize, n: usize, delta: f64, a_bar: &Matrix) -> Result<Matrix> {
    check_indices(j + 1, n)?;
    let a_inv = linalg::inverse(a_bar)?;
    let (e0, e1) = (eps(j, delta), eps(j + 1, delta));
    let u0 = &upsilon(j, n, delta, a_bar)? + &a_inv;
    let u1 = &upsilon(j + 1, n, delta, a_bar)? + &a_inv;
    let mut out = (&u1 * a_bar).scale(e1);
    out.add_scaled(-e1, &Matrix::identity(a_bar.rows()));
    out.add_scaled((e1 - e0) / e0, &u0);
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct UpsilonDecay {
    /// `(1/t)Σ_{j<t}‖Υ_j^t‖²_op` along the grid.
    pub report: RateReport,
    /// `max_{j<t}‖Υ_j^t‖_op` along the grid.
    pub sup_norms: Vec<f64>,
}

pub fn upsilon_decay_curve(t_grid: &[u64], delta: f64, a_bar: &Matrix) -> Result<UpsilonDecay> {
    let mut values = Vec::with_capacity(t_grid.len());
    let mut sup_norms = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let norms: Vec<f64> = upsilon_all(t as usize, delta, a_bar)?
            .par_iter()
            .map(linalg::operator_norm)
            .collect();
        values.push(norms.iter().map(|x| x * x).sum::<f64>() / t as f64);
        sup_norms.push(norms.iter().cloned().fold(0.0, f64::max));
    }
    let report = RateReport::new("upsilon_sq_mean", t_grid.to_vec(), values, vec![0.0; t_grid.len()])?;
    Ok(UpsilonDecay { report, sup_norms })
}

/// Ensemble estimate of `E‖θ_k − θ*‖²` at each `k` in the grid, one run per
/// replicate read at the grid points.
pub fn delta_moment_curve(
    model: &TdModel,
    k_grid: &[u64],
    replicates: usize,
    seed: u64,
    theta0: &[f64],
    start: &Start,
) -> Result<RateReport> {
    if replicates == 0 {
        return Err(Error::Domain("replicates must be ≥ 1".into()));
    }
    if theta0.len() != model.dim() {
        return Err(Error::Dimension("θ0 length does not match the model".into()));
    }
    let Some(&k_max) = k_grid.last() else {
        return Err(Error::Domain("empty k grid".into()));
    };
    let target = mean_dynamics(model)?;
    let kernel = TdKernel::new(model, start)?;
    let key = StreamKey::new(seed, StreamRole::ChainStart).experiment(label_id("delta-moments", 0));
    let per_rep: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let key = key.replicate(r as u64);
            let mut theta = theta0.to_vec();
            let mut out = Vec::with_capacity(k_grid.len());
            let mut next = 0;
            kernel.run(
                k_max as usize,
                &mut theta,
                &mut key.stream(),
                &mut key.role(StreamRole::ChainSteps).stream(),
                |k, _, t| {
                    if next < k_grid.len() && k as u64 == k_grid[next] {
                        out.push(t.iter().zip(&target.theta_star).map(|(a, b)| (a - b).powi(2)).sum());
                        next += 1;
                    }
                },
            );
            out
        })
        .collect();
    let mut values = Vec::with_capacity(k_grid.len());
    let mut stderrs = Vec::with_capacity(k_grid.len());
    for g in 0..k_grid.len() {
        let column: Vec<f64> = per_rep.iter().map(|r| r[g]).collect();
        let e = Estimate::from_values(&column);
        values.push(e.value);
        stderrs.push(e.stderr);
    }
    RateReport::new("delta_sq_mean", k_grid.to_vec(), values, stderrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(a: [f64; 2], b: [f64; 2], delta: f64) -> TdModel {
        let chain = FiniteMarkovChain::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        TdModel::new(
            chain,
            a.iter().map(|&x| Matrix::scalar(x)).collect(),
            b.iter().map(|&x| vec![x]).collect(),
            delta,
        )
        .unwrap()
    }

    fn one() -> Matrix {
        Matrix::scalar(1.0)
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(step_size(0, 0.7).unwrap(), 1.0);
        assert!(step_size(3, 0.5).is_err());
        assert!((step_size(3, 0.51).unwrap() - 4f64.powf(-0.51)).abs() < 1e-15);
        for delta in [0.55, 0.75, 0.95] {
            for j in 0..200 {
                let (e0, e1) = (eps(j, delta), eps(j + 1, delta));
                let x = (j + 1) as f64;
                assert!((e0 - e1) / e0 <= delta / (x + delta) + 1e-15);
                assert!((e0 - e1) / e0 <= delta / x);
            }
        }
        // the looser-looking δ/(j+2) is not a bound at j = 0
        assert!(1.0 - 2f64.powf(-0.75) > 0.75 / 2.0);
    }

    #[test]
    fn model_validation() {
        let chain = FiniteMarkovChain::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let unstable = TdModel::new(
            chain.clone(),
            vec![Matrix::scalar(-1.0), Matrix::scalar(0.5)],
            vec![vec![0.0], vec![0.0]],
            0.75,
        );
        assert!(matches!(unstable, Err(Error::Stability(_))));
        let bad_delta = TdModel::new(chain, vec![one(), one()], vec![vec![0.0], vec![0.0]], 0.4);
        assert!(matches!(bad_delta, Err(Error::Config { .. })));
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"chain": {"P": [[0.7, 0.3], [0.3, 0.7]]}, "A": [[[1.0]], [[3.0]]], "b": [[-2.0], [-2.0]], "delta": 0.75}"#;
        let m = TdModel::from_json(text).unwrap();
        assert_eq!(m.a_bar()[(0, 0)], 2.0);
        let typo = text.replace("\"delta\"", "\"detla\"");
        assert!(TdModel::from_json(&typo).is_err());
    }

    #[test]
    fn mean_dynamics_examples() {
        let m = scalar_model([1.0, 3.0], [-2.0, -2.0], 0.75);
        let t = mean_dynamics(&m).unwrap();
        assert!((t.a_bar[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((t.theta_star[0] - 1.0).abs() < 1e-14);
        assert!(t.sigma_inf.positive_definite);
        assert!((t.limit_cov[(0, 0)] - t.sigma_inf.matrix[(0, 0)] / 4.0).abs() < 1e-14);

        let quiet = scalar_model([2.0, 2.0], [-1.0, -1.0], 0.75);
        let t = mean_dynamics(&quiet).unwrap();
        assert!((t.theta_star[0] - 0.5).abs() < 1e-14);
        assert!(!t.sigma_inf.positive_definite);
        assert!(t.sigma_inf.matrix.max_abs() < 1e-20);
    }

    #[test]
    fn fixed_point_trajectory_is_constant() {
        let quiet = scalar_model([2.0, 2.0], [-1.0, -1.0], 0.75);
        let traj = simulate_td(&quiet, 100, &[0.5], &Start::Stationary, 3).unwrap();
        assert!(traj.theta.iter().all(|t| t[0] == 0.5));
        assert_eq!(traj.scaled_error, vec![0.0]);
    }

    #[test]
    fn noise_free_trajectory_follows_product_formula() {
        let m = scalar_model([1.0, 1.0], [-1.0, -1.0], 0.75);
        let traj = simulate_td(&m, 200, &[0.0], &Start::State(0), 1).unwrap();
        // ε_0 = 1 lands on θ* after one step, so the gap is exactly zero after that
        let mut gap = -1.0;
        for k in 1..=200 {
            gap *= 1.0 - eps(k - 1, 0.75);
            let theta = traj.theta[k][0];
            assert!((theta - 1.0 - gap).abs() < 1e-12);
            assert!(theta >= traj.theta[k - 1][0] && theta <= 1.0);
        }
    }

    #[test]
    fn trajectories_are_reproducible_and_averaged() {
        let m = scalar_model([1.0, 3.0], [-2.0, -2.0], 0.75);
        let a = simulate_td(&m, 500, &[0.0], &Start::Stationary, 9).unwrap();
        let b = simulate_td(&m, 500, &[0.0], &Start::Stationary, 9).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.states, b.states);
        for k in [1, 10, 500] {
            let mean = a.theta[1..=k].iter().map(|t| t[0]).sum::<f64>() / k as f64;
            assert!((a.theta_bar[k - 1][0] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn telescoping_identity_holds() {
        let chain = FiniteMarkovChain::from_rows(&[
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.6, 0.3],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        let a = vec![
            Matrix::from_rows(&[vec![1.0, 0.2], vec![0.0, 1.5]]).unwrap(),
            Matrix::from_rows(&[vec![2.0, -0.3], vec![0.1, 0.5]]).unwrap(),
            Matrix::from_rows(&[vec![0.5, 0.0], vec![0.4, 2.0]]).unwrap(),
        ];
        let b = vec![vec![1.0, -1.0], vec![0.0, 2.0], vec![-1.0, 0.5]];
        let m = TdModel::new(chain, a, b, 0.7).unwrap();
        let target = mean_dynamics(&m).unwrap();
        let traj = simulate_td(&m, 300, &[0.0, 0.0], &Start::State(1), 4).unwrap();
        let (lhs, rhs) = telescoping_sides(&m, &traj, &target.theta_star).unwrap();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-10 * r.abs().max(1.0));
        }
        let residual = linalg::hs_norm(&(&(&target.a_bar * &Matrix::new(2, 1, target.theta_star.clone()).unwrap())
            + &Matrix::new(2, 1, target.b_bar.clone()).unwrap()));
        assert!(residual < 1e-10);
    }

    #[test]
    fn upsilon_phi_boundaries() {
        let a = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let a_inv = linalg::inverse(&a).unwrap();
        let n = 12;
        let expected = &Matrix::identity(2).scale(eps(n - 1, 0.75)) - &a_inv;
        assert!(linalg::hs_norm(&(&upsilon(n - 1, n, 0.75, &a).unwrap() - &expected)) < 1e-14);
        for j in [0, 4, 9] {
            let expected = &Matrix::identity(2).scale(eps(j, 0.75)) - &a_inv;
            assert!(linalg::hs_norm(&(&phi(j, j + 1, 0.75, &a).unwrap() - &expected)) < 1e-14);
        }
        assert!(matches!(upsilon(5, 5, 0.75, &a), Err(Error::Domain(_))));
        assert!(matches!(phi(6, 5, 0.75, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn upsilon_matches_naive_double_loop() {
        let (j, n, delta) = (0usize, 100usize, 0.75);
        let mut sum = 0.0;
        for k in j + 1..=n {
            let mut prod = 1.0;
            for l in j + 1..k {
                prod *= 1.0 - ((l + 1) as f64).powf(-delta);
            }
            sum += prod;
        }
        let oracle = ((j + 1) as f64).powf(-delta) * sum - 1.0;
        assert!((upsilon(j, n, delta, &one()).unwrap()[(0, 0)] - oracle).abs() < 1e-12);
    }

    #[test]
    fn upsilon_recurrence_matches_direct_products() {
        let a = Matrix::from_rows(&[vec![1.5, 0.3], vec![-0.2, 0.8]]).unwrap();
        let all = upsilon_all(40, 0.7, &a).unwrap();
        for j in [0, 1, 17, 38, 39] {
            let direct = upsilon(j, 40, 0.7, &a).unwrap();
            assert!(linalg::hs_norm(&(&all[j] - &direct)) < 1e-10, "j = {j}");
        }
    }

    #[test]
    fn upsilon_phi_relations() {
        // definition-derived: Υ_j^n + Ā⁻¹ = (ε_j/ε_{j+1})(Φ_{j+1}^{n+1} + Ā⁻¹)
        for a in [0.5, 1.0, 2.0] {
            let a_bar = Matrix::scalar(a);
            for n in [5usize, 30, 120] {
                for j in [0, n / 2, n - 1] {
                    let ratio = eps(j, 0.75) / eps(j + 1, 0.75);
                    let lhs = upsilon(j, n, 0.75, &a_bar).unwrap()[(0, 0)] + 1.0 / a;
                    let rhs = ratio * (phi(j + 1, n + 1, 0.75, &a_bar).unwrap()[(0, 0)] + 1.0 / a);
                    assert!((lhs - rhs).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn literal_upsilon_phi_relation_does_not_hold() {
        // Υ_j^n = (ε_j/ε_{j+1})Φ_j^{n+1} fails at the first grid point
        let a_bar = one();
        let (j, n) = (0, 5);
        let lhs = upsilon(j, n, 0.75, &a_bar).unwrap()[(0, 0)];
        let rhs = eps(j, 0.75) / eps(j + 1, 0.75) * phi(j, n + 1, 0.75, &a_bar).unwrap()[(0, 0)];
        assert!((lhs - rhs).abs() > 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsilon_difference_closed_form() {
        let a_bar = one();
        let (j, n) = (5, 50);
        let direct = &upsilon(j + 1, n, 0.75, &a_bar).unwrap() - &upsilon(j, n, 0.75, &a_bar).unwrap();
        let closed = upsilon_difference(j, n, 0.75, &a_bar).unwrap();
        assert!((direct[(0, 0)] - closed[(0, 0)]).abs() < 1e-10);
        assert!(upsilon_difference(n - 2, n, 0.75, &a_bar).is_ok());
        assert!(upsilon_difference(n - 1, n, 0.75, &a_bar).is_err());

        let a_bar = Matrix::from_rows(&[vec![1.2, 0.4], vec![0.0, 0.9]]).unwrap();
        let mut kappa = 0.0_f64;
        for n in [20usize, 80, 300] {
            for j in (0..n - 1).step_by(7) {
                let direct = &upsilon(j + 1, n, 0.7, &a_bar).unwrap() - &upsilon(j, n, 0.7, &a_bar).unwrap();
                let closed = upsilon_difference(j, n, 0.7, &a_bar).unwrap();
                assert!(linalg::hs_norm(&(&direct - &closed)) < 1e-10);
                kappa = kappa.max(linalg::operator_norm(&direct) / eps(j, 0.7));
            }
        }
        assert!(kappa.is_finite() && kappa < 10.0, "κ = {kappa}");
    }

    #[test]
    fn upsilon_decay_is_bounded() {
        let r = upsilon_decay_curve(&[50, 500], 0.7, &one()).unwrap();
        assert!(r.sup_norms.iter().all(|&s| s < 2.0));
        assert!(r.report.values[1] < r.report.values[0]);
    }

    #[test]
    fn noise_free_delta_moments_match_product_formula() {
        let m = scalar_model([1.0, 1.0], [-1.0, -1.0], 0.75);
        let grid = [1u64, 10, 100];
        let r = delta_moment_curve(&m, &grid, 4, 1, &[0.0], &Start::Stationary).unwrap();
        for (g, v) in grid.iter().zip(&r.values) {
            let prod: f64 = (0..*g as usize).map(|l| 1.0 - eps(l, 0.75)).product();
            assert!((v - prod * prod).abs() < 1e-14);
        }
        assert!(r.stderrs.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn ensembles_do_not_depend_on_thread_count() {
        let m = scalar_model([1.0, 3.0], [-2.0, -2.0], 0.75);
        let run = || delta_moment_curve(&m, &[10, 100], 64, 5, &[0.0], &Start::Stationary).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(single.values, many.values);
        assert_eq!(single.stderrs, many.stderrs);
    }
}
