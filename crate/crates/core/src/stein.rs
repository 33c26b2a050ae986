//! Stein-method regularity constants and the non-asymptotic martingale CLT
//! bound.
//!
//! The bound is evaluated with the trace term replaced by its majorant
//! `C·√d·‖Σ∞^{1/2}‖_op·‖Σ∞^{−1/2}E(Σ_k)Σ∞^{−1/2} − I‖_HS`, where `C` is the
//! unspecified universal constant (`c_universal`, default 1).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::markov::{self, FiniteMarkovChain, PoissonSolution, Start};
use crate::rng::{StreamKey, StreamRole};
use crate::stats::{self, Estimate};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

fn lanczos_sum(x: f64) -> f64 {
    LANCZOS[1..]
        .iter()
        .enumerate()
        .fold(LANCZOS[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0))
}

/// Γ(x) by the Lanczos approximation, with reflection below 1/2.
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let t = x + LANCZOS_G + 0.5;
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * lanczos_sum(x)
    }
}

/// ln Γ(x) for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0, "ln_gamma needs a positive argument");
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + lanczos_sum(x).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteinConstants {
    pub d: usize,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub c1_tilde: f64,
    pub c2_tilde: f64,
    pub c_universal: f64,
}

impl SteinConstants {
    pub fn with_c_universal(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Domain(format!("c_universal must be positive, got {c}")));
        }
        self.c_universal = c;
        Ok(self)
    }
}

pub fn stein_constants(d: usize, beta: f64) -> Result<SteinConstants> {
    if d == 0 {
        return Err(Error::Dimension("dimension must be ≥ 1".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta must lie in (0, 1), got {beta}")));
    }
    let df = d as f64;
    let half = ln_gamma(df / 2.0);
    let c1 = 2f64.powf(1.5)
        * ((-df.ln() - half).exp() + 2.0 * (ln_gamma((1.0 + df) / 2.0) - half).exp());
    let c2 = 2.0 * (2.0 * df / std::f64::consts::PI).sqrt();
    Ok(SteinConstants {
        d,
        beta,
        c1,
        c2,
        c1_tilde: c1 + 2.0 / (1.0 - beta),
        c2_tilde: c2 + 2.0 * df / (1.0 - beta),
        c_universal: 1.0,
    })
}

/// `β = 1 − 2/ln n`, defined for `n ≥ 8`.
pub fn beta_schedule(n: u64) -> Result<f64> {
    let log_n = (n as f64).ln();
    if n < 8 {
        return Err(Error::Domain(format!(
            "beta schedule needs ln n > 2, got n = {n}"
        )));
    }
    Ok(1.0 - 2.0 / log_n)
}

/// Per-step ingredients of the bound for a martingale of length `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleStats {
    /// `E‖Σ∞^{−1/2}m_k‖^{2+β}`.
    pub moment_2beta: Vec<f64>,
    /// `E‖Σ∞^{−1/2}m_k‖^{β}`.
    pub moment_beta: Vec<f64>,
    /// `‖Σ∞^{−1/2}E(Σ_k)Σ∞^{−1/2} − I‖_HS`.
    pub cov_error_hs: Vec<f64>,
    pub sigma_inf_sqrt_opnorm: f64,
}

impl MartingaleStats {
    pub fn new(
        moment_2beta: Vec<f64>,
        moment_beta: Vec<f64>,
        cov_error_hs: Vec<f64>,
        sigma_inf_sqrt_opnorm: f64,
    ) -> Result<Self> {
        let n = moment_2beta.len();
        if moment_beta.len() != n || cov_error_hs.len() != n {
            return Err(Error::Dimension(format!(
                "sequence lengths differ: {n}, {}, {}",
                moment_beta.len(),
                cov_error_hs.len()
            )));
        }
        let all = moment_2beta.iter().chain(&moment_beta).chain(&cov_error_hs);
        if let Some(v) = all.clone().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("statistic {v} is not a finite non-negative number")));
        }
        if !(sigma_inf_sqrt_opnorm >= 0.0) || !sigma_inf_sqrt_opnorm.is_finite() {
            return Err(Error::Domain("‖Σ∞^{1/2}‖_op must be finite and non-negative".into()));
        }
        Ok(Self {
            moment_2beta,
            moment_beta,
            cov_error_hs,
            sigma_inf_sqrt_opnorm,
        })
    }

    pub fn len(&self) -> usize {
        self.moment_2beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moment_2beta.is_empty()
    }

    /// Exact statistics of the Poisson martingale `m_k = V(X_k) − PV(X_{k−1})`,
    /// obtained by propagating the law of `X_{k−1}` from `start`.
    pub fn exact(
        chain: &FiniteMarkovChain,
        sol: &PoissonSolution,
        sigma_inf: &Matrix,
        start: &Start,
        n: usize,
        beta: f64,
    ) -> Result<Self> {
        let whiten = linalg::inv_sqrt_pd(sigma_inf)?;
        if whiten.rows() != sol.dim() {
            return Err(Error::Dimension(format!(
                "Σ∞ is {}x{} but increments have dimension {}",
                whiten.rows(),
                whiten.cols(),
                sol.dim()
            )));
        }
        let s = chain.n_states();
        let mut g_2beta = vec![0.0; s];
        let mut g_beta = vec![0.0; s];
        let mut white_cov = Vec::with_capacity(s);
        for i in 0..s {
            for j in 0..s {
                let p = chain.prob(i, j);
                if p == 0.0 {
                    continue;
                }
                let len = linalg::norm(&whiten.mul_vec(&sol.increment(i, j)));
                g_2beta[i] += p * len.powf(2.0 + beta);
                g_beta[i] += p * len.powf(beta);
            }
            let cov = markov::conditional_covariance(chain, sol, i)?;
            white_cov.push(&(&whiten * &cov) * &whiten);
        }

        let identity = Matrix::identity(sol.dim());
        let mut law = start.distribution(chain)?;
        let mut moment_2beta = Vec::with_capacity(n);
        let mut moment_beta = Vec::with_capacity(n);
        let mut cov_error_hs = Vec::with_capacity(n);
        for _ in 0..n {
            let dot = |g: &[f64]| g.iter().zip(&law).map(|(a, b)| a * b).sum::<f64>();
            moment_2beta.push(dot(&g_2beta));
            moment_beta.push(dot(&g_beta));
            let mut mean = identity.scale(-1.0);
            for (p, c) in law.iter().zip(&white_cov) {
                mean.add_scaled(*p, c);
            }
            cov_error_hs.push(linalg::hs_norm(&mean));
            law = chain.propagate(&law);
        }
        Self::new(
            moment_2beta,
            moment_beta,
            cov_error_hs,
            linalg::operator_norm(&linalg::sqrt_psd(sigma_inf)?),
        )
    }

    /// Monte Carlo statistics from `replicates[r][k] = m_{k+1}` of replicate `r`.
    pub fn from_increments(increments: &[Vec<Vec<f64>>], sigma_inf: &Matrix, beta: f64) -> Result<Self> {
        let reps = increments.len();
        if reps == 0 {
            return Err(Error::Domain("no replicates".into()));
        }
        let n = increments[0].len();
        if increments.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("replicates have different lengths".into()));
        }
        let whiten = linalg::inv_sqrt_pd(sigma_inf)?;
        let d = whiten.rows();
        let identity = Matrix::identity(d);
        let mut moment_2beta = Vec::with_capacity(n);
        let mut moment_beta = Vec::with_capacity(n);
        let mut cov_error_hs = Vec::with_capacity(n);
        for k in 0..n {
            let mut m2 = 0.0;
            let mut m0 = 0.0;
            let mut second = Matrix::zeros(d, d);
            for rep in increments {
                let m = &rep[k];
                if m.len() != d {
                    return Err(Error::Dimension(format!(
                        "increment of dimension {} for a {d}x{d} Σ∞",
                        m.len()
                    )));
                }
                let w = whiten.mul_vec(m);
                let len = linalg::norm(&w);
                m2 += len.powf(2.0 + beta);
                m0 += len.powf(beta);
                second.add_scaled(1.0, &Matrix::outer(&w, &w));
            }
            let r = reps as f64;
            moment_2beta.push(m2 / r);
            moment_beta.push(m0 / r);
            cov_error_hs.push(linalg::hs_norm(&(&second.scale(1.0 / r) - &identity)));
        }
        Self::new(
            moment_2beta,
            moment_beta,
            cov_error_hs,
            linalg::operator_norm(&linalg::sqrt_psd(sigma_inf)?),
        )
    }
}

/// The martingale CLT bound on `d_W(W_n, Σ∞^{1/2}Z)`.
pub fn martingale_clt_bound(stats: &MartingaleStats, constants: &SteinConstants) -> Result<f64> {
    let n = stats.len();
    if n == 0 {
        return Err(Error::Dimension("empty statistics".into()));
    }
    let s = stats.sigma_inf_sqrt_opnorm;
    let exponent = (1.0 + constants.beta) / 2.0;
    let cov_coeff = constants.c_universal * (constants.d as f64).sqrt() * s;
    let mut total = 0.0;
    for k in 0..n {
        let weight = ((n - k) as f64).powf(-exponent);
        total += (constants.c1_tilde * stats.moment_2beta[k] + constants.c2_tilde * stats.moment_beta[k])
            * s
            * weight
            + cov_coeff * stats.cov_error_hs[k];
    }
    Ok(total / (n as f64).sqrt())
}

/// Monte Carlo check that the Ornstein-Uhlenbeck generator
/// `𝒜f = ∇fᵀAx + ½Tr(∇²f BBᵀ)` has zero mean under `N(0, Σ)` with
/// `AΣ + ΣAᵀ + BBᵀ = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct OuCheck {
    pub sigma: Matrix,
    /// One estimate per test function: `‖x‖²` first, then `xᵀQx` for the
    /// symmetric basis matrices `Q = e_a e_bᵀ + e_b e_aᵀ` (`a ≤ b`).
    pub estimates: Vec<Estimate>,
    /// Largest `|estimate| / stderr`.
    pub worst_z: f64,
}

pub fn ou_generator_check(a: &Matrix, bbt: &Matrix, samples: usize, seed: u64) -> Result<OuCheck> {
    let sigma = linalg::solve_lyapunov(a, bbt)?;
    let scale = bbt.max_abs().max(1.0);
    let min = linalg::min_eigenvalue(bbt)?;
    if min < -1e-12 * scale {
        return Err(Error::NotPsd(format!("BBᵀ has eigenvalue {min:e}")));
    }
    if samples < 2 {
        return Err(Error::Domain("generator check needs at least two samples".into()));
    }
    let d = a.rows();
    let mut basis = vec![Matrix::identity(d)];
    for i in 0..d {
        for j in i..d {
            let mut q = Matrix::zeros(d, d);
            q[(i, j)] += 1.0;
            q[(j, i)] += 1.0;
            basis.push(q);
        }
    }

    let mut stream = StreamKey::new(seed, StreamRole::Gaussian).stream();
    let z = stats::gaussian_samples(&sigma, samples, &mut stream)?;
    let mut estimates = Vec::with_capacity(basis.len());
    for q in &basis {
        // f = xᵀQx: ∇f = 2Qx, ∇²f = 2Q
        let trace_term = (q * bbt).trace();
        let qa = q * a;
        let values: Vec<f64> = z
            .iter()
            .map(|x| {
                let qax = qa.mul_vec(x);
                2.0 * x.iter().zip(&qax).map(|(u, v)| u * v).sum::<f64>() + trace_term
            })
            .collect();
        estimates.push(Estimate::from_values(&values));
    }
    let worst_z = estimates
        .iter()
        .map(|e| {
            if e.stderr > 0.0 {
                e.value.abs() / e.stderr
            } else if e.value.abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(OuCheck {
        sigma,
        estimates,
        worst_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{solve_poisson, RewardMap};

    #[test]
    fn gamma_matches_statrs() {
        let mut x = 0.5;
        while x <= 20.0 {
            let oracle = statrs::function::gamma::gamma(x);
            assert!((gamma(x) - oracle).abs() <= 1e-12 * oracle, "Γ({x})");
            let ln_oracle = statrs::function::gamma::ln_gamma(x);
            assert!((ln_gamma(x) - ln_oracle).abs() <= 1e-12 * ln_oracle.abs().max(1.0), "lnΓ({x})");
            x += 0.25;
        }
        assert!((gamma(0.5) - std::f64::consts::PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn constants_for_d1() {
        let c = stein_constants(1, 0.5).unwrap();
        let pi = std::f64::consts::PI;
        assert!((c.c2 - 2.0 * (2.0 / pi).sqrt()).abs() < 1e-14);
        assert!((c.c2 - 1.595769).abs() < 1e-6);
        let c1 = 2f64.powf(1.5) * 3.0 / pi.sqrt();
        assert!((c.c1 - c1).abs() < 1e-12);
        assert!((c.c1 - 4.787_307_364_817).abs() < 1e-9);
        assert!((c.c1_tilde - (c.c1 + 4.0)).abs() < 1e-12);
        assert!((c.c2_tilde - (c.c2 + 4.0)).abs() < 1e-12);
        assert_eq!(c.c_universal, 1.0);
    }

    #[test]
    fn constants_blow_up_like_one_over_one_minus_beta() {
        for d in [1, 3, 7] {
            for beta in [0.99, 0.999, 0.999_999] {
                let c = stein_constants(d, beta).unwrap();
                let tol = 20.0 * (1.0 - beta) * d as f64;
                assert!(((1.0 - beta) * c.c1_tilde - 2.0).abs() < tol);
                assert!(((1.0 - beta) * c.c2_tilde - 2.0 * d as f64).abs() < tol);
            }
        }
    }

    #[test]
    fn constants_reject_bad_beta() {
        for beta in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(stein_constants(2, beta), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn schedule_examples() {
        assert!((beta_schedule(55).unwrap() - 0.5).abs() < 2e-3);
        assert!(matches!(beta_schedule(7), Err(Error::Domain(_))));
        let betas: Vec<f64> = [8, 100, 10_000, 1_000_000].iter().map(|&n| beta_schedule(n).unwrap()).collect();
        assert!(betas.windows(2).all(|w| w[0] < w[1]));
        assert!(betas.iter().all(|b| *b > 0.0 && *b < 1.0));
    }

    #[test]
    fn scheduled_constants_grow_logarithmically() {
        for n in [8u64, 55, 100, 1000, 10_000, 100_000] {
            for d in 1..=5 {
                let c = stein_constants(d, beta_schedule(n).unwrap()).unwrap();
                assert!(c.c1_tilde <= c.c1 + (n as f64).ln() + 1e-12);
            }
        }
    }

    fn unit_stats(n: usize) -> MartingaleStats {
        MartingaleStats::new(vec![1.0; n], vec![1.0; n], vec![0.0; n], 1.0).unwrap()
    }

    #[test]
    fn bound_with_unit_moments_reindexes() {
        let c = stein_constants(1, 0.5).unwrap();
        for n in [1usize, 2, 17, 300] {
            let sum: f64 = (1..=n).map(|j| (j as f64).powf(-0.75)).sum();
            let expected = (c.c1_tilde + c.c2_tilde) / (n as f64).sqrt() * sum;
            let got = martingale_clt_bound(&unit_stats(n), &c).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected);
        }
        let one = martingale_clt_bound(&unit_stats(1), &c).unwrap();
        assert!((one - (c.c1_tilde + c.c2_tilde)).abs() < 1e-12);
    }

    #[test]
    fn bound_rejects_length_mismatch() {
        assert!(matches!(
            MartingaleStats::new(vec![1.0; 3], vec![1.0; 2], vec![0.0; 3], 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bound_slope_with_geometric_covariance_error() {
        let beta = 0.5;
        let c = stein_constants(1, beta).unwrap();
        let grid = [100usize, 1000, 10_000];
        let values: Vec<f64> = grid
            .iter()
            .map(|&n| {
                let cov: Vec<f64> = (0..n).map(|k| 0.8f64.powi(k as i32)).collect();
                let s = MartingaleStats::new(vec![2.0; n], vec![0.7; n], cov, 1.3).unwrap();
                martingale_clt_bound(&s, &c).unwrap()
            })
            .collect();
        let g: Vec<f64> = grid.iter().map(|&n| n as f64).collect();
        let slope = stats::fit_rate(&g, &values).unwrap().slope;
        assert!((-0.55..=-beta / 2.0 + 0.05).contains(&slope), "slope {slope}");
    }

    fn two_state_pipeline() -> (FiniteMarkovChain, PoissonSolution, Matrix) {
        let chain = FiniteMarkovChain::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let sol = solve_poisson(&chain, &RewardMap::scalar(&[1.0, 0.0])).unwrap();
        let sigma = markov::asymptotic_covariance(&chain, &sol).unwrap().matrix;
        (chain, sol, sigma)
    }

    #[test]
    fn exact_stats_from_stationarity_have_zero_covariance_error() {
        let (chain, sol, sigma) = two_state_pipeline();
        let s = MartingaleStats::exact(&chain, &sol, &sigma, &Start::Stationary, 50, 0.5).unwrap();
        assert!(s.cov_error_hs.iter().all(|&e| e < 1e-12));
        assert!((s.sigma_inf_sqrt_opnorm - sigma[(0, 0)].sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_stats_agree_with_simulated_increments() {
        let (chain, sol, sigma) = two_state_pipeline();
        let n = 20;
        let exact = MartingaleStats::exact(&chain, &sol, &sigma, &Start::State(0), n, 0.5).unwrap();
        let reps: Vec<Vec<Vec<f64>>> = (0..20_000u64)
            .map(|r| {
                let mut stream = StreamKey::new(4, StreamRole::ChainSteps).replicate(r).stream();
                let path = chain.simulate(n, &Start::State(0), &mut stream).unwrap();
                markov::martingale_increments(&chain, &sol, &path).unwrap()
            })
            .collect();
        let mc = MartingaleStats::from_increments(&reps, &sigma, 0.5).unwrap();
        for k in 0..n {
            assert!((mc.moment_beta[k] - exact.moment_beta[k]).abs() < 0.03, "k = {k}");
            assert!((mc.moment_2beta[k] - exact.moment_2beta[k]).abs() < 0.08, "k = {k}");
            assert!((mc.cov_error_hs[k] - exact.cov_error_hs[k]).abs() < 0.05, "k = {k}");
        }
    }

    #[test]
    fn bound_from_chain_decreases_in_n() {
        let (chain, sol, sigma) = two_state_pipeline();
        let c = stein_constants(1, 0.5).unwrap();
        let bound = |n| {
            let s = MartingaleStats::exact(&chain, &sol, &sigma, &Start::State(0), n, 0.5).unwrap();
            martingale_clt_bound(&s, &c).unwrap()
        };
        let (b3, b4) = (bound(1000), bound(10_000));
        assert!(b3.is_finite() && b4 < b3);
    }

    #[test]
    fn ou_check_examples() {
        let a = Matrix::identity(2).scale(-1.0);
        let r = ou_generator_check(&a, &Matrix::identity(2).scale(2.0), 100_000, 1).unwrap();
        assert!(linalg::hs_norm(&(&r.sigma - &Matrix::identity(2))) < 1e-12);
        assert!(r.worst_z <= 5.0, "{}", r.worst_z);

        let a = Matrix::from_diag(&[-1.0, -2.0]);
        let r = ou_generator_check(&a, &Matrix::identity(2), 100_000, 2).unwrap();
        assert!(linalg::hs_norm(&(&r.sigma - &Matrix::from_diag(&[0.5, 0.25]))) < 1e-12);
        assert!(r.worst_z <= 5.0, "{}", r.worst_z);

        let bad = Matrix::from_diag(&[1.0, -1.0]);
        assert!(ou_generator_check(&a, &bad, 100, 3).is_err());
    }
}
