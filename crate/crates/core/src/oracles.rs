//! Closed-form synthetic processes: a multivariate exponential-kernel Hawkes
//! process for time and mark, and mark-conditioned diagonal Gaussian mixtures
//! for location. Both expose analytic scores used as ground truth in tests.

use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Dataset, Event, EventSequence};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    /// `alpha[l][k]`: jump in the mark-`k` intensity caused by a mark-`l` event.
    pub alpha: Vec<Vec<f64>>,
    pub beta: f64,
}

impl HawkesParams {
    pub fn num_marks(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mu.len();
        if m == 0 {
            return Err(Error::InvalidConfig("hawkes: mu is empty".into()));
        }
        if self.mu.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("hawkes: mu must be positive and finite".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("hawkes: beta must be positive".into()));
        }
        if self.alpha.len() != m || self.alpha.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidConfig(format!("hawkes: alpha must be {m}x{m}")));
        }
        if self.alpha.iter().flatten().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidConfig("hawkes: alpha must be non-negative".into()));
        }
        let rho = self.branching_radius();
        if rho >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "hawkes: spectral radius of alpha/beta is {rho:.4} (must be < 1)"
            )));
        }
        Ok(())
    }

    /// Spectral radius of `alpha / beta`, via Gelfand's formula with
    /// repeated squaring (exact in the limit for non-negative matrices).
    pub fn branching_radius(&self) -> f64 {
        let m = self.mu.len();
        let mut b: Vec<f64> = self.alpha.iter().flatten().map(|a| a / self.beta).collect();
        let mut log_scale = 0.0;
        let mut power = 1.0;
        for _ in 0..40 {
            let max = b.iter().cloned().fold(0.0, f64::max);
            if max == 0.0 {
                return 0.0;
            }
            b.iter_mut().for_each(|v| *v /= max);
            log_scale += max.ln() / power;
            let mut sq = vec![0.0; m * m];
            for i in 0..m {
                for k in 0..m {
                    let bik = b[i * m + k];
                    for j in 0..m {
                        sq[i * m + j] += bik * b[k * m + j];
                    }
                }
            }
            b = sq;
            power *= 2.0;
        }
        let max = b.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return 0.0;
        }
        (log_scale + max.ln() / power).exp()
    }

    /// Long-run event rate per mark, `(I - alpha^T / beta)^{-1} mu`.
    pub fn stationary_rates(&self) -> Vec<f64> {
        let m = self.mu.len();
        let mut a = vec![vec![0.0; m + 1]; m];
        for k in 0..m {
            for l in 0..m {
                a[k][l] = if k == l { 1.0 } else { 0.0 } - self.alpha[l][k] / self.beta;
            }
            a[k][m] = self.mu[k];
        }
        solve_augmented(a)
    }

    /// Excitation part of each mark's intensity at `t`, from events before `t`.
    fn excitation(&self, history: &[Event], t: f64) -> Vec<f64> {
        let mut exc = vec![0.0; self.mu.len()];
        for e in history.iter().filter(|e| e.t < t) {
            let decay = (-self.beta * (t - e.t)).exp();
            for (k, x) in exc.iter_mut().enumerate() {
                *x += self.alpha[e.k][k] * decay;
            }
        }
        exc
    }

    fn check_after(history: &[Event], t: f64) -> Result<()> {
        match history.last() {
            Some(last) if t <= last.t => Err(Error::InvalidData(format!(
                "query time {t} is not after last history time {}",
                last.t
            ))),
            _ => Ok(()),
        }
    }

    /// All mark intensities at `t` given `history`.
    pub fn intensities(&self, history: &[Event], t: f64) -> Result<Vec<f64>> {
        Self::check_after(history, t)?;
        Ok(self
            .excitation(history, t)
            .into_iter()
            .zip(&self.mu)
            .map(|(e, m)| m + e)
            .collect())
    }

    pub fn intensity(&self, history: &[Event], t: f64, k: usize) -> Result<f64> {
        Ok(self.intensities(history, t)?[k])
    }

    /// `d/dt log p(t | k, history)`: the time score of the next event.
    pub fn time_score(&self, history: &[Event], t: f64, k: usize) -> Result<f64> {
        Self::check_after(history, t)?;
        let exc = self.excitation(history, t);
        let lam_k = self.mu[k] + exc[k];
        let total: f64 = self.mu.iter().sum::<f64>() + exc.iter().sum::<f64>();
        Ok(-self.beta * exc[k] / lam_k - total)
    }

    /// Integrated total intensity from the last history event to `t`.
    pub fn compensator(&self, history: &[Event], t: f64) -> Result<f64> {
        Self::check_after(history, t)?;
        let start = history.last().map_or(0.0, |e| e.t);
        let mu_total: f64 = self.mu.iter().sum();
        let mut acc = mu_total * (t - start);
        for e in history {
            let jump: f64 = self.alpha[e.k].iter().sum();
            acc += jump / self.beta
                * ((-self.beta * (start - e.t)).exp() - (-self.beta * (t - e.t)).exp());
        }
        Ok(acc)
    }

    /// `log λ(t,k) - Λ(t)`: log density of the next event landing at `(t, k)`.
    pub fn log_density(&self, history: &[Event], t: f64, k: usize) -> Result<f64> {
        Ok(self.intensity(history, t, k)?.ln() - self.compensator(history, t)?)
    }

    /// Draws the next event after `history` by thinning. Returns the absolute
    /// time and mark, or `None` if nothing occurs before `horizon`.
    pub fn sample_next(&self, history: &[Event], horizon: f64, rng: &mut Rng) -> Option<(f64, usize)> {
        let mut t = history.last().map_or(0.0, |e| e.t);
        let mut exc = vec![0.0; self.mu.len()];
        for e in history {
            let decay = (-self.beta * (t - e.t)).exp();
            for (k, x) in exc.iter_mut().enumerate() {
                *x += self.alpha[e.k][k] * decay;
            }
        }
        self.thin_once(&mut t, &mut exc, horizon, rng)
    }

    /// One thinning proposal loop. `exc` holds the excitation at `*t` and is
    /// decayed in place to the accepted time.
    fn thin_once(&self, t: &mut f64, exc: &mut [f64], horizon: f64, rng: &mut Rng) -> Option<(f64, usize)> {
        let mu_total: f64 = self.mu.iter().sum();
        loop {
            // Exponential kernels only decay between events, so the current
            // total intensity dominates until the next acceptance.
            let bound = mu_total + exc.iter().sum::<f64>();
            let w: f64 = Exp::new(bound).expect("positive rate").sample(rng);
            let decay = (-self.beta * w).exp();
            *t += w;
            exc.iter_mut().for_each(|x| *x *= decay);
            if *t > horizon {
                return None;
            }
            let total = mu_total + exc.iter().sum::<f64>();
            assert!(
                total <= bound * (1.0 + 1e-12),
                "thinning bound violated: {total} > {bound}"
            );
            let u: f64 = rng.random();
            if u * bound <= total {
                let mut r = rng.random::<f64>() * total;
                for k in 0..self.mu.len() {
                    r -= self.mu[k] + exc[k];
                    if r <= 0.0 {
                        return Some((*t, k));
                    }
                }
                return Some((*t, self.mu.len() - 1));
            }
        }
    }

    /// Ogata thinning on `[0, horizon]`. The result may be empty.
    pub fn simulate(&self, horizon: f64, seed: u64) -> EventSequence {
        let mut rng = rng::rng_for(seed, &[0x4A3E]);
        let mut t = 0.0;
        let mut exc = vec![0.0; self.mu.len()];
        let mut events = Vec::new();
        while let Some((te, k)) = self.thin_once(&mut t, &mut exc, horizon, &mut rng) {
            for (j, x) in exc.iter_mut().enumerate() {
                *x += self.alpha[k][j];
            }
            events.push(Event { t: te, k, x: Vec::new() });
        }
        EventSequence { events, horizon }
    }
}

pub fn simulate_hawkes(p: &HawkesParams, horizon: f64, seed: u64) -> EventSequence {
    p.simulate(horizon, seed)
}

fn solve_augmented(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=n {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal covariance.
    pub var: Vec<f64>,
}

/// Per-mark diagonal Gaussian mixtures for `p(x | k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMixtureParams {
    pub marks: Vec<Vec<MixtureComponent>>,
}

impl SpatialMixtureParams {
    pub fn dim(&self) -> usize {
        self.marks
            .iter()
            .flatten()
            .next()
            .map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self, num_marks: usize) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Ok(());
        }
        if self.marks.len() != num_marks {
            return Err(Error::InvalidConfig(format!(
                "mixture: expected {num_marks} marks, got {}",
                self.marks.len()
            )));
        }
        for (k, comps) in self.marks.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::InvalidConfig(format!("mixture: mark {k} has no components")));
            }
            let wsum: f64 = comps.iter().map(|c| c.weight).sum();
            if (wsum - 1.0).abs() > 1e-9 || comps.iter().any(|c| !(c.weight > 0.0)) {
                return Err(Error::InvalidConfig(format!(
                    "mixture: mark {k} weights must be positive and sum to 1"
                )));
            }
            for c in comps {
                if c.mean.len() != d || c.var.len() != d {
                    return Err(Error::InvalidConfig(format!("mixture: mark {k} dimension mismatch")));
                }
                if c.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidConfig(format!("mixture: mark {k} variance must be positive")));
                }
            }
        }
        Ok(())
    }

    fn log_terms(&self, k: usize, x: &[f64]) -> Vec<f64> {
        self.marks[k]
            .iter()
            .map(|c| {
                let mut lp = c.weight.ln();
                for j in 0..x.len() {
                    let z = x[j] - c.mean[j];
                    lp -= 0.5 * (z * z / c.var[j] + (2.0 * std::f64::consts::PI * c.var[j]).ln());
                }
                lp
            })
            .collect()
    }

    pub fn log_density(&self, k: usize, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(k, x))
    }

    /// `∇_x log p(x | k)`.
    pub fn score(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let terms = self.log_terms(k, x);
        let lse = log_sum_exp(&terms);
        let mut g = vec![0.0; x.len()];
        for (c, lt) in self.marks[k].iter().zip(terms) {
            let r = (lt - lse).exp();
            for j in 0..x.len() {
                g[j] -= r * (x[j] - c.mean[j]) / c.var[j];
            }
        }
        g
    }

    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<f64> {
        let d = self.dim();
        if d == 0 {
            return Vec::new();
        }
        let comps = &self.marks[k];
        let mut u: f64 = rng.random();
        let mut chosen = &comps[comps.len() - 1];
        for c in comps {
            u -= c.weight;
            if u <= 0.0 {
                chosen = c;
                break;
            }
        }
        (0..d)
            .map(|j| {
                let z: f64 = rng.sample(StandardNormal);
                chosen.mean[j] + chosen.var[j].sqrt() * z
            })
            .collect()
    }

    /// The mixture convolved with independent `N(0, sigma_j^2)` noise.
    pub fn perturbed(&self, sigma: &[f64]) -> Self {
        SpatialMixtureParams {
            marks: self
                .marks
                .iter()
                .map(|comps| {
                    comps
                        .iter()
                        .map(|c| MixtureComponent {
                            weight: c.weight,
                            mean: c.mean.clone(),
                            var: c.var.iter().zip(sigma).map(|(v, s)| v + s * s).collect(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn mean(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.marks[k] {
            for j in 0..m.len() {
                m[j] += c.weight * c.mean[j];
            }
        }
        m
    }

    /// Full covariance of mark `k`'s mixture, row-major `d x d`.
    pub fn covariance(&self, k: usize) -> Vec<f64> {
        let d = self.dim();
        let m = self.mean(k);
        let mut cov = vec![0.0; d * d];
        for c in &self.marks[k] {
            for i in 0..d {
                for j in 0..d {
                    let diag = if i == j { c.var[i] } else { 0.0 };
                    cov[i * d + j] += c.weight * (diag + c.mean[i] * c.mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= m[i] * m[j];
            }
        }
        cov
    }
}

pub fn spatial_mixture_score(p: &SpatialMixtureParams, k: usize, x: &[f64]) -> Vec<f64> {
    p.score(k, x)
}

pub fn sample_spatial_mixture(p: &SpatialMixtureParams, k: usize, rng: &mut Rng) -> Vec<f64> {
    p.sample(k, rng)
}

/// Hawkes times and marks; each location is drawn from its mark's mixture
/// on a separate stream, so `d = 0` reproduces [`simulate_hawkes`] exactly.
pub fn simulate_marked_stpp(
    hawkes: &HawkesParams,
    mixture: &SpatialMixtureParams,
    horizon: f64,
    seed: u64,
) -> EventSequence {
    let mut seq = hawkes.simulate(horizon, seed);
    let mut rng = rng::rng_for(seed, &[0x10C]);
    for e in &mut seq.events {
        e.x = mixture.sample(e.k, &mut rng);
    }
    seq
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Parameter file consumed by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: f64,
    #[serde(default)]
    pub mixtures: Vec<Vec<MixtureComponent>>,
}

impl OracleConfig {
    pub fn hawkes(&self) -> HawkesParams {
        HawkesParams {
            mu: self.mu.clone(),
            alpha: self.alpha.clone(),
            beta: self.beta,
        }
    }

    pub fn mixture(&self) -> SpatialMixtureParams {
        SpatialMixtureParams {
            marks: self.mixtures.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hawkes().validate()?;
        self.mixture().validate(self.mu.len())
    }

    /// `n` sequences on `[0, horizon]`; sequence `i` uses a seed derived from
    /// `(seed, i)`. Empty draws are skipped and re-drawn with the next index.
    pub fn synthesize(&self, horizon: f64, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if !(horizon > 0.0) {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        let hawkes = self.hawkes();
        let mixture = self.mixture();
        let mut seqs = Vec::with_capacity(n);
        let mut idx = 0u64;
        while seqs.len() < n {
            let s = simulate_marked_stpp(&hawkes, &mixture, horizon, rng::derive_seed(seed, &[idx]));
            idx += 1;
            if !s.is_empty() {
                seqs.push(s);
            }
            if idx > 1000 + 100 * n as u64 {
                return Err(Error::InvalidConfig(
                    "oracle produced too many empty sequences".into(),
                ));
            }
        }
        Dataset::new(seqs, hawkes.num_marks(), mixture.dim())
    }
}
