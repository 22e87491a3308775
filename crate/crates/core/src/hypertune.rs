//! Bayesian optimization of `(w0, λ)`: a Gaussian-process surrogate with an
//! RBF kernel and expected improvement over seeded random candidates.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// RBF length scale in unit-box coordinates.
pub const LENGTH_SCALE: f64 = 0.2;
/// Observation noise variance on standardized scores.
pub const NOISE: f64 = 1e-6;
/// Largest diagonal jitter tried before a kernel matrix is rejected.
pub const MAX_JITTER: f64 = 1e-3;
/// Random candidates scored per acquisition step.
pub const CANDIDATES: usize = 1024;

/// Search box for `(w0, λ)`. A range with equal ends pins that coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub w0: [f64; 2],
    pub lambda: [f64; 2],
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            w0: [10.0, 50.0],
            lambda: [0.0, 100.0],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("w0", self.w0), ("lambda", self.lambda)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.lambda[0] < 0.0 {
            return Err(Error::invalid("lambda range must be non-negative"));
        }
        Ok(())
    }

    /// `w0` to the nearest integer, `λ` to one decimal, both kept in range.
    pub fn round(&self, point: [f64; 2]) -> [f64; 2] {
        let w0 = point[0].round().clamp(self.w0[0], self.w0[1]);
        let lambda = ((point[1] * 10.0).round() / 10.0).clamp(self.lambda[0], self.lambda[1]);
        [w0, lambda]
    }

    fn ranges(&self) -> [[f64; 2]; 2] {
        [self.w0, self.lambda]
    }

    /// Maps a point to the unit box; pinned coordinates map to 0.
    pub fn to_unit(&self, point: [f64; 2]) -> [f64; 2] {
        let r = self.ranges();
        std::array::from_fn(|i| {
            let [lo, hi] = r[i];
            if hi > lo {
                (point[i] - lo) / (hi - lo)
            } else {
                0.0
            }
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let r = self.ranges();
        std::array::from_fn(|i| {
            let [lo, hi] = r[i];
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
    }
}

/// Gaussian-process regression on unit-box inputs. Scores are centred on
/// their mean and scaled by their sample standard deviation, so the prior
/// mean is the score mean and the prior variance the score variance.
#[derive(Clone, Debug)]
pub struct GaussianProcess {
    points: Vec<Vec<f64>>,
    mean: f64,
    scale: f64,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub length_scale: f64,
    pub noise: f64,
    pub jitter: f64,
}

fn rbf(a: &[f64], b: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

impl GaussianProcess {
    pub fn fit(points: &[Vec<f64>], scores: &[f64], length_scale: f64, noise: f64) -> Result<Self> {
        if points.is_empty() || points.len() != scores.len() {
            return Err(Error::invalid(format!(
                "GP needs matching, non-empty observations ({} points, {} scores)",
                points.len(),
                scores.len()
            )));
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::invalid("GP scores must be finite"));
        }
        let n = points.len();
        let mean = scores.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, scores.iter().map(|s| (s - mean) / scale));
        let kernel = DMatrix::from_fn(n, n, |i, j| rbf(&points[i], &points[j], length_scale));
        let mut jitter = 0.0;
        loop {
            let mut k = kernel.clone();
            for i in 0..n {
                k[(i, i)] += noise + jitter;
            }
            if let Some(chol) = k.cholesky() {
                let alpha = chol.solve(&y);
                return Ok(Self {
                    points: points.to_vec(),
                    mean,
                    scale,
                    alpha,
                    chol,
                    length_scale,
                    noise,
                    jitter,
                });
            }
            jitter = if jitter == 0.0 { 1e-9 } else { jitter * 10.0 };
            if jitter > MAX_JITTER * (1.0 + 1e-9) {
                return Err(Error::IllConditioned { jitter: jitter / 10.0 });
            }
        }
    }

    /// Posterior mean and latent variance at `query`, in score units.
    pub fn predict(&self, query: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| rbf(p, query, self.length_scale)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(0.0);
        (self.mean + self.scale * mu, self.scale * self.scale * var)
    }
}

/// Mean and variance at each query after fitting the observations.
pub fn gp_posterior(points: &[Vec<f64>], scores: &[f64], queries: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let gp = GaussianProcess::fit(points, scores, LENGTH_SCALE, NOISE)?;
    Ok(queries.iter().map(|q| gp.predict(q)).collect())
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sd = variance.max(0.0).sqrt();
    let gain = mean - best;
    if sd <= 1e-12 * (1.0 + best.abs()) {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    (gain * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub iteration: usize,
    pub w0: f64,
    pub lambda: f64,
    /// `-∞` when the objective returned a non-finite value.
    pub score: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub records: Vec<TuneRecord>,
}

impl TuneTrace {
    /// The best-scoring record; the earliest wins ties.
    pub fn best(&self) -> Option<&TuneRecord> {
        self.records
            .iter()
            .fold(None, |acc: Option<&TuneRecord>, r| match acc {
                Some(a) if a.score >= r.score => Some(a),
                _ => Some(r),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,w0,lambda,score\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.iteration, r.w0, r.lambda, r.score).unwrap();
        }
        out
    }
}

/// Maximizes `objective` over `space` with `total` evaluations, the first
/// `init` of them uniformly random. Every point is rounded before it is
/// evaluated.
pub fn bayes_optimize<F>(mut objective: F, space: &SearchSpace, total: usize, init: usize, seed: u64) -> Result<TuneTrace>
where
    F: FnMut([f64; 2]) -> f64,
{
    space.validate()?;
    if init < 1 || total < init {
        return Err(Error::invalid(format!("need total ≥ init ≥ 1, got total {total}, init {init}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = TuneTrace::default();
    let mut best = f64::NEG_INFINITY;
    for iteration in 0..total {
        let point = if iteration < init {
            space.round(space.sample(&mut rng))
        } else {
            propose(&trace, space, &mut rng)?
        };
        let raw = objective(point);
        let score = if raw.is_finite() { raw } else { f64::NEG_INFINITY };
        best = best.max(score);
        trace.records.push(TuneRecord {
            iteration,
            w0: point[0],
            lambda: point[1],
            score,
            best_so_far: best,
        });
    }
    Ok(trace)
}

fn propose(trace: &TuneTrace, space: &SearchSpace, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
    let candidates: Vec<[f64; 2]> = (0..CANDIDATES).map(|_| space.round(space.sample(rng))).collect();
    let finite: Vec<&TuneRecord> = trace.records.iter().filter(|r| r.score.is_finite()).collect();
    if finite.is_empty() {
        return Ok(candidates[0]);
    }
    let points: Vec<Vec<f64>> = finite.iter().map(|r| space.to_unit([r.w0, r.lambda]).to_vec()).collect();
    let scores: Vec<f64> = finite.iter().map(|r| r.score).collect();
    let gp = GaussianProcess::fit(&points, &scores, LENGTH_SCALE, NOISE)?;
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut choice = candidates[0];
    let mut top = f64::NEG_INFINITY;
    for c in candidates {
        let (m, v) = gp.predict(&space.to_unit(c));
        let ei = expected_improvement(m, v, best);
        if ei > top {
            top = ei;
            choice = c;
        }
    }
    Ok(choice)
}
