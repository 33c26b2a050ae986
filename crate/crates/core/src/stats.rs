//! Distance estimators and rate fitting.
//!
//! On the line, Wasserstein-1 between two empirical laws is the integral of
//! the gap between their quantile functions, which is computed exactly here.
//! For `d > 1` the sliced estimator averages that quantity over random
//! projection directions.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{RandomStream, StreamKey, StreamRole};

/// `n` points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    d: usize,
    points: Vec<f64>,
}

impl SampleSet {
    pub fn new(d: usize, points: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("sample dimension must be ≥ 1".into()));
        }
        if points.is_empty() {
            return Err(Error::Domain("sample set is empty".into()));
        }
        if !points.len().is_multiple_of(d) {
            return Err(Error::Dimension(format!(
                "{} coordinates do not split into points of dimension {d}",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("sample contains a non-finite coordinate".into()));
        }
        Ok(Self { d, points })
    }

    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Dimension("sample points have mixed dimensions".into()));
        }
        Self::new(d, vectors.concat())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.d)
    }

    pub fn coordinates(&self) -> &[f64] {
        &self.points
    }

    /// `⟨u, x_i⟩` for every point.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.d);
        self.iter()
            .map(|x| x.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Every point shifted by `c`.
    pub fn translated(&self, c: &[f64]) -> Self {
        assert_eq!(c.len(), self.d);
        let points = self
            .points
            .chunks(self.d)
            .flat_map(|x| x.iter().zip(c).map(|(a, b)| a + b))
            .collect();
        Self { d: self.d, points }
    }
}

/// Exact W1 between two one-dimensional empirical laws.
pub fn w1_exact_1d(xs: &SampleSet, ys: &SampleSet) -> Result<f64> {
    if xs.dim() != 1 || ys.dim() != 1 {
        return Err(Error::Dimension(format!(
            "exact W1 needs scalar samples, got d = {} and d = {}",
            xs.dim(),
            ys.dim()
        )));
    }
    Ok(w1_sorted(&sorted(xs.coordinates()), &sorted(ys.coordinates())))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Integral of `|F⁻¹ − G⁻¹|` over the merged quantile grid. Breakpoints are
/// tracked as integers over the common denominator `n·m`, so the result is
/// symmetric in its arguments bit for bit.
fn w1_sorted(x: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len(), y.len());
    if n == m {
        return x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    }
    let total = (n * m) as f64;
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0usize);
    let mut acc = 0.0;
    while i < n && j < m {
        let next_x = (i + 1) * m;
        let next_y = (j + 1) * n;
        let next = next_x.min(next_y);
        acc += (next - pos) as f64 * (x[i] - y[j]).abs();
        pos = next;
        if next_x == next {
            i += 1;
        }
        if next_y == next {
            j += 1;
        }
    }
    acc / total
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean and standard error of the mean.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        assert!(n > 0, "estimate of an empty sample");
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            value: mean,
            stderr,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlicedW1 {
    pub estimate: Estimate,
    pub per_direction: Vec<f64>,
}

/// Uniformly random unit vector in `R^d`.
pub fn random_direction(d: usize, stream: &mut RandomStream) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..d).map(|_| stream.standard_normal()).collect();
        let len = linalg::norm(&u);
        if len > 1e-12 {
            return u.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Sliced W1: average exact W1 of the projections onto `directions` random
/// unit vectors. Direction `k` is drawn from its own stream, so the result
/// does not depend on how the loop is scheduled.
pub fn sliced_w1(xs: &SampleSet, ys: &SampleSet, directions: usize, seed: u64) -> Result<SlicedW1> {
    if xs.dim() != ys.dim() {
        return Err(Error::Dimension(format!(
            "sample dimensions differ: {} vs {}",
            xs.dim(),
            ys.dim()
        )));
    }
    if directions == 0 {
        return Err(Error::Domain("sliced W1 needs at least one direction".into()));
    }
    if xs.dim() == 1 {
        // every unit direction is ±1 and W1 is reflection invariant
        let value = w1_exact_1d(xs, ys)?;
        return Ok(SlicedW1 {
            estimate: Estimate { value, stderr: 0.0 },
            per_direction: vec![value; directions],
        });
    }
    let d = xs.dim();
    let per_direction: Vec<f64> = (0..directions)
        .into_par_iter()
        .map(|k| {
            let mut stream = StreamKey::new(seed, StreamRole::Directions)
                .replicate(k as u64)
                .stream();
            let u = random_direction(d, &mut stream);
            w1_sorted(&sorted(&xs.project(&u)), &sorted(&ys.project(&u)))
        })
        .collect();
    Ok(SlicedW1 {
        estimate: Estimate::from_values(&per_direction),
        per_direction,
    })
}

/// W1 for scalar samples, sliced W1 otherwise.
pub fn distance(xs: &SampleSet, ys: &SampleSet, directions: usize, seed: u64) -> Result<Estimate> {
    if xs.dim() == 1 && ys.dim() == 1 {
        Ok(Estimate {
            value: w1_exact_1d(xs, ys)?,
            stderr: 0.0,
        })
    } else {
        Ok(sliced_w1(xs, ys, directions, seed)?.estimate)
    }
}

/// `n` draws of `cov^{1/2} Z` with `Z ~ N(0, I)`.
pub fn gaussian_samples(cov: &Matrix, n: usize, stream: &mut RandomStream) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Domain("cannot draw zero samples".into()));
    }
    let root = linalg::sqrt_psd(cov)?;
    let d = root.rows();
    let mut points = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|zi| *zi = stream.standard_normal());
        points.extend(root.mul_vec(&z));
    }
    SampleSet::new(d, points)
}

/// Unbiased sample covariance (two-pass).
pub fn empirical_covariance(xs: &SampleSet) -> Result<Matrix> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::Domain("empirical covariance needs at least two points".into()));
    }
    let d = xs.dim();
    let mut mean = vec![0.0; d];
    for x in xs.iter() {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for x in xs.iter() {
        centered
            .iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(c, (v, m))| *c = v - m);
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Least-squares line through `(log n, log value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
}

impl RateFit {
    pub fn predict(&self, n: f64) -> f64 {
        (self.intercept + self.slope * n.ln()).exp()
    }
}

pub fn fit_rate(grid: &[f64], values: &[f64]) -> Result<RateFit> {
    if grid.len() != values.len() {
        return Err(Error::Dimension(format!(
            "{} grid points but {} values",
            grid.len(),
            values.len()
        )));
    }
    if grid.len() < 2 {
        return Err(Error::Domain("rate fit needs at least two points".into()));
    }
    if let Some(i) = values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "value {} at grid point {} is not positive",
            values[i], grid[i]
        )));
    }
    if let Some(&g) = grid.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::Domain(format!("grid point {g} is not positive")));
    }
    let xs: Vec<f64> = grid.iter().map(|g| g.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("rate fit needs at least two distinct grid points".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Estimates along an increasing grid, with a log-log fit when one exists.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub estimator: String,
    pub grid: Vec<u64>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub fit: Option<RateFit>,
}

impl RateReport {
    pub fn new(estimator: impl Into<String>, grid: Vec<u64>, values: Vec<f64>, stderrs: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() || grid.len() != stderrs.len() {
            return Err(Error::Dimension("rate report columns differ in length".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("rate report grid must be strictly increasing".into()));
        }
        let g: Vec<f64> = grid.iter().map(|&n| n as f64).collect();
        let fit = fit_rate(&g, &values).ok();
        Ok(Self {
            estimator: estimator.into(),
            grid,
            values,
            stderrs,
            fit,
        })
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}
