//! Langevin sampling of the next event with a Tweedie correction, run in
//! normalized space (log-gap for time), plus a generic score-driven harness
//! and an exact oracle sampler used as a calibrated reference.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence, NormStats};
use crate::model::{EventContext, HeadScratch, HeadWeights, HistoryEncoding};
use crate::oracles::{HawkesParams, SpatialMixtureParams};
use crate::rng::{rng_for, Rng};

/// Multiplier applied to the score in the final denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TweedieScale {
    /// `σ²`, the exact Tweedie constant.
    #[default]
    Variance,
    /// `σ`, as the update is sometimes printed.
    Literal,
}

impl TweedieScale {
    pub fn factor(self, sigma: f64) -> f64 {
        match self {
            TweedieScale::Variance => sigma * sigma,
            TweedieScale::Literal => sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub sigma_t: f64,
    pub sigma_x: Vec<f64>,
    pub num_samples: usize,
    #[serde(default)]
    pub tweedie: TweedieScale,
    /// Half-width of the uniform initial box for normalized locations.
    #[serde(default = "default_init_halfwidth")]
    pub init_loc_halfwidth: f64,
}

fn default_init_halfwidth() -> f64 {
    2.0
}

pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const MAX_RESTARTS: usize = 100;

impl SamplerConfig {
    /// Earthquake sampling defaults.
    pub fn earthquake() -> Self {
        SamplerConfig {
            epsilon: 0.005,
            steps: 2000,
            sigma_t: 0.2,
            sigma_x: vec![0.25, 0.25],
            num_samples: 300,
            tweedie: TweedieScale::Variance,
            init_loc_halfwidth: 2.0,
        }
    }

    pub fn validate(&self, spatial_dim: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig("num_samples must be at least 1".into()));
        }
        if !(self.sigma_t >= 0.0 && self.sigma_t.is_finite()) {
            return Err(Error::InvalidConfig("sigma_t must be non-negative".into()));
        }
        if spatial_dim > 0 && self.sigma_x.len() != spatial_dim {
            return Err(Error::InvalidConfig(format!(
                "sigma_x has {} entries, expected {spatial_dim}",
                self.sigma_x.len()
            )));
        }
        if !(self.init_loc_halfwidth > 0.0) {
            return Err(Error::InvalidConfig("init_loc_halfwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Scores of the next event's distribution in normalized coordinates.
pub trait NextEventScore {
    fn num_marks(&self) -> usize;
    fn spatial_dim(&self) -> usize;
    /// Time score for every mark, and the mark pmf, at gap `tau`.
    fn time(&mut self, tau: f64, psi: &mut [f64], pmf: &mut [f64]);
    /// Location score at `x` given the gap and mark.
    fn space(&mut self, x: &[f64], tau: f64, k: usize, out: &mut [f64]);
}

/// The trained network at one history position.
pub struct ModelScore<'w> {
    ctx: EventContext<'w>,
    dim: usize,
    lam: Vec<f64>,
    dlam: Vec<f64>,
    scratch: HeadScratch,
}

impl<'w> ModelScore<'w> {
    pub fn new(weights: &'w HeadWeights, enc: &HistoryEncoding, row: usize, spatial_dim: usize) -> Self {
        let m = weights.num_marks();
        ModelScore {
            ctx: weights.context(enc, row),
            dim: spatial_dim,
            lam: vec![0.0; m],
            dlam: vec![0.0; m],
            scratch: HeadScratch::default(),
        }
    }
}

impl NextEventScore for ModelScore<'_> {
    fn num_marks(&self) -> usize {
        self.lam.len()
    }

    fn spatial_dim(&self) -> usize {
        self.dim
    }

    fn time(&mut self, tau: f64, psi: &mut [f64], pmf: &mut [f64]) {
        self.ctx.intensity(tau, &mut self.lam, &mut self.dlam, &mut self.scratch);
        let total: f64 = self.lam.iter().sum();
        for k in 0..self.lam.len() {
            psi[k] = self.dlam[k] / self.lam[k] - total;
            pmf[k] = self.lam[k] / total;
        }
    }

    fn space(&mut self, x: &[f64], tau: f64, k: usize, out: &mut [f64]) {
        self.ctx.spatial_score(x, tau, k, out, &mut self.scratch);
    }
}

/// The analytic oracle density of the next event, mapped to normalized
/// coordinates. `mixture` may be a perturbed copy.
pub struct OracleScore<'a> {
    pub hawkes: &'a HawkesParams,
    pub mixture: Option<&'a SpatialMixtureParams>,
    pub history: &'a [Event],
    pub stats: &'a NormStats,
}

impl NextEventScore for OracleScore<'_> {
    fn num_marks(&self) -> usize {
        self.hawkes.num_marks()
    }

    fn spatial_dim(&self) -> usize {
        self.mixture.map_or(0, |m| m.dim())
    }

    fn time(&mut self, tau: f64, psi: &mut [f64], pmf: &mut [f64]) {
        let s = self.stats.gap_scale();
        let gap = (tau * s + self.stats.mean_log_gap).exp();
        let start = self.history.last().map_or(0.0, |e| e.t);
        let t = start + gap.max(f64::MIN_POSITIVE);
        let h = self.hawkes;
        let mut exc = vec![0.0; h.num_marks()];
        for e in self.history {
            let decay = (-h.beta * (t - e.t)).exp();
            for (k, x) in exc.iter_mut().enumerate() {
                *x += h.alpha[e.k][k] * decay;
            }
        }
        let total: f64 = h.mu.iter().sum::<f64>() + exc.iter().sum::<f64>();
        for k in 0..h.num_marks() {
            let lam = h.mu[k] + exc[k];
            let score_gap = -h.beta * exc[k] / lam - total;
            // density of u = (log g - m)/s picks up the Jacobian s·g
            psi[k] = s * (gap * score_gap + 1.0);
            pmf[k] = lam / total;
        }
    }

    fn space(&mut self, x: &[f64], _tau: f64, k: usize, out: &mut [f64]) {
        let mix = self.mixture.expect("spatial oracle present");
        let orig = self.stats.denormalize_location(x);
        let score = mix.score(k, &orig);
        for j in 0..out.len() {
            out[j] = score[j] * self.stats.std_x[j];
        }
    }
}

fn categorical(pmf: &[f64], rng: &mut Rng) -> usize {
    let mut r: f64 = rng.random::<f64>();
    for (k, &p) in pmf.iter().enumerate() {
        r -= p;
        if r < 0.0 {
            return k;
        }
    }
    pmf.len() - 1
}

fn init_time(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn init_loc(d: usize, half: f64, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-half..half)).collect()
}

fn diverged(v: f64) -> bool {
    !v.is_finite() || v.abs() > DIVERGENCE_LIMIT
}

/// One chain's output in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub tau: f64,
    pub mark: usize,
    pub x: Vec<f64>,
    pub restarts: usize,
}

/// Time/mark chain followed by the location chain for one sample.
pub fn sample_chain<S: NextEventScore + ?Sized>(score: &mut S, cfg: &SamplerConfig, rng: &mut Rng) -> Result<ChainSample> {
    let m = score.num_marks();
    let (mut psi, mut pmf) = (vec![0.0; m], vec![0.0; m]);
    let uniform = vec![1.0 / m as f64; m];
    let sqrt_eps = cfg.epsilon.sqrt();
    let mut restarts = 0;

    let (tau_hat, k_hat) = 'time: loop {
        let mut tau = init_time(rng);
        let mut k = categorical(&uniform, rng);
        for _ in 0..cfg.steps {
            score.time(tau, &mut psi, &mut pmf);
            let w: f64 = StandardNormal.sample(rng);
            tau += 0.5 * cfg.epsilon * psi[k] + sqrt_eps * w;
            k = categorical(&pmf, rng);
            if diverged(tau) {
                restarts += 1;
                if restarts > MAX_RESTARTS {
                    return Err(Error::NonFinite(format!("time chain diverged {restarts} times")));
                }
                continue 'time;
            }
        }
        score.time(tau, &mut psi, &mut pmf);
        let tau_hat = tau + cfg.tweedie.factor(cfg.sigma_t) * psi[k];
        if diverged(tau_hat) {
            restarts += 1;
            if restarts > MAX_RESTARTS {
                return Err(Error::NonFinite(format!("time chain diverged {restarts} times")));
            }
            continue;
        }
        score.time(tau_hat, &mut psi, &mut pmf);
        break (tau_hat, categorical(&pmf, rng));
    };

    let d = score.spatial_dim();
    let x_hat = if d == 0 {
        Vec::new()
    } else {
        let mut g = vec![0.0; d];
        'space: loop {
            let mut x = init_loc(d, cfg.init_loc_halfwidth, rng);
            for _ in 0..cfg.steps {
                score.space(&x, tau_hat, k_hat, &mut g);
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    x[j] += 0.5 * cfg.epsilon * g[j] + sqrt_eps * z;
                }
                if x.iter().any(|&v| diverged(v)) {
                    restarts += 1;
                    if restarts > MAX_RESTARTS {
                        return Err(Error::NonFinite(format!("location chain diverged {restarts} times")));
                    }
                    continue 'space;
                }
            }
            score.space(&x, tau_hat, k_hat, &mut g);
            for j in 0..d {
                x[j] += cfg.tweedie.factor(cfg.sigma_x[j]) * g[j];
            }
            if x.iter().all(|&v| !diverged(v)) {
                break x;
            }
            restarts += 1;
            if restarts > MAX_RESTARTS {
                return Err(Error::NonFinite(format!("location chain diverged {restarts} times")));
            }
        }
    };
    Ok(ChainSample {
        tau: tau_hat,
        mark: k_hat,
        x: x_hat,
        restarts,
    })
}

/// `Q` samples of one event in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub gaps: Vec<f64>,
    pub marks: Vec<usize>,
    pub locs: Vec<Vec<f64>>,
    pub restarts: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// Draws `cfg.num_samples` independent chains. Chain `c` uses the stream
/// `rng_for(seed, [tag, c])`, so results do not depend on execution order.
pub fn sample_event<S: NextEventScore + ?Sized>(
    score: &mut S,
    cfg: &SamplerConfig,
    stats: &NormStats,
    seed: u64,
    tag: u64,
) -> Result<SampleSet> {
    cfg.validate(score.spatial_dim())?;
    let q = cfg.num_samples;
    let mut out = SampleSet {
        gaps: Vec::with_capacity(q),
        marks: Vec::with_capacity(q),
        locs: Vec::with_capacity(q),
        restarts: 0,
    };
    for c in 0..q {
        let mut rng = rng_for(seed, &[tag, c as u64]);
        let s = sample_chain(score, cfg, &mut rng)?;
        out.gaps.push(stats.denormalize_gap(s.tau)?);
        out.marks.push(s.mark);
        out.locs.push(stats.denormalize_location(&s.x));
        out.restarts += s.restarts;
    }
    Ok(out)
}

/// Where a generic chain starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    StandardNormal,
    Uniform { half_width: f64 },
    Fixed(Vec<f64>),
}

/// Settings for [`sample_with_score`].
#[derive(Debug, Clone, PartialEq)]
pub struct LangevinConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Per-coordinate Tweedie multiplier; all zeros disables the correction.
    pub tweedie: Vec<f64>,
}

/// Unadjusted Langevin with a caller-supplied score, followed by
/// `x + tweedie ⊙ score(x)`. Chain `c` uses `rng_for(seed, [c])`.
pub fn sample_with_score<F>(score: F, dim: usize, init: &Init, cfg: &LangevinConfig, chains: usize, seed: u64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if cfg.tweedie.len() != dim {
        return Err(Error::InvalidConfig("tweedie multipliers must match dimension".into()));
    }
    let sqrt_eps = cfg.epsilon.sqrt();
    let mut out = Vec::with_capacity(chains);
    for c in 0..chains {
        let mut rng = rng_for(seed, &[c as u64]);
        let mut restarts = 0;
        let x = 'chain: loop {
            let mut x: Vec<f64> = match init {
                Init::StandardNormal => (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                Init::Uniform { half_width } => init_loc(dim, *half_width, &mut rng),
                Init::Fixed(v) => v.clone(),
            };
            for _ in 0..cfg.steps {
                let g = score(&x);
                for j in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[j] += 0.5 * cfg.epsilon * g[j] + sqrt_eps * z;
                }
                if x.iter().any(|&v| diverged(v)) {
                    restarts += 1;
                    if restarts > MAX_RESTARTS {
                        return Err(Error::NonFinite(format!("chain {c} diverged")));
                    }
                    continue 'chain;
                }
            }
            let g = score(&x);
            for j in 0..dim {
                x[j] += cfg.tweedie[j] * g[j];
            }
            break x;
        };
        out.push(x);
    }
    Ok(out)
}

/// Tag of the random streams used for event `i` of sequence `seq`.
pub fn event_tag(seq: usize, i: usize) -> u64 {
    crate::rng::derive_seed(seq as u64, &[i as u64])
}

/// Something that produces `Q` samples for every predictable event of a
/// sequence (original units).
pub trait EventSampler {
    /// Sample sets for events `1..L` of `seq`, each conditioned on the
    /// events before it.
    fn sample_sequence(&self, seq: &EventSequence, seq_index: usize, q: usize, seed: u64) -> Result<Vec<SampleSet>>;
}

/// Exact draws from the generating process, conditioned on the next event
/// landing inside the observation window. Calibrated by construction.
pub struct OracleSampler {
    pub hawkes: HawkesParams,
    pub mixture: Option<SpatialMixtureParams>,
}

const ORACLE_MAX_TRIES: usize = 100_000;

impl OracleSampler {
    pub fn sample(&self, seq: &EventSequence, i: usize, q: usize, seed: u64, tag: u64) -> Result<SampleSet> {
        let history = &seq.events[..i];
        let last = history.last().map_or(0.0, |e| e.t);
        let mut out = SampleSet {
            gaps: Vec::with_capacity(q),
            marks: Vec::with_capacity(q),
            locs: Vec::with_capacity(q),
            restarts: 0,
        };
        for c in 0..q {
            let mut rng = rng_for(seed, &[tag, c as u64]);
            let mut tries = 0;
            let (t, k) = loop {
                if let Some(v) = self.hawkes.sample_next(history, seq.horizon, &mut rng) {
                    break v;
                }
                tries += 1;
                if tries > ORACLE_MAX_TRIES {
                    return Err(Error::InvalidData(format!(
                        "oracle could not place an event before the horizon after {tries} tries"
                    )));
                }
            };
            out.gaps.push(t - last);
            out.marks.push(k);
            out.locs.push(match &self.mixture {
                Some(m) => m.sample(k, &mut rng),
                None => Vec::new(),
            });
        }
        Ok(out)
    }
}

impl EventSampler for OracleSampler {
    fn sample_sequence(&self, seq: &EventSequence, seq_index: usize, q: usize, seed: u64) -> Result<Vec<SampleSet>> {
        (1..seq.len())
            .map(|i| self.sample(seq, i, q, seed, event_tag(seq_index, i)))
            .collect()
    }
}

/// The trained network driving Langevin chains.
pub struct ModelSampler<'a> {
    pub model: &'a crate::model::Model,
    pub stats: &'a NormStats,
    pub config: SamplerConfig,
}

impl EventSampler for ModelSampler<'_> {
    fn sample_sequence(&self, seq: &EventSequence, seq_index: usize, q: usize, seed: u64) -> Result<Vec<SampleSet>> {
        let d = self.model.config.spatial_dim;
        let norm = self.stats.normalize_sequence(seq)?;
        let enc = self.model.encode(&norm)?;
        let weights = self.model.head_weights()?;
        let cfg = SamplerConfig {
            num_samples: q,
            ..self.config.clone()
        };
        (1..seq.len())
            .map(|i| {
                let mut score = ModelScore::new(&weights, &enc, i - 1, d);
                sample_event(&mut score, &cfg, self.stats, seed, event_tag(seq_index, i))
            })
            .collect()
    }
}

/// One line of a sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seq: usize,
    pub i: usize,
    pub t_true: f64,
    pub k_true: usize,
    pub x_true: Vec<f64>,
    pub t_samp: Vec<f64>,
    pub k_samp: Vec<usize>,
    pub x_samp: Vec<Vec<f64>>,
}

impl SampleRecord {
    pub fn new(seq_index: usize, seq: &EventSequence, i: usize, set: &SampleSet) -> Self {
        let prev = seq.events[i - 1].t;
        let e = &seq.events[i];
        SampleRecord {
            seq: seq_index,
            i,
            t_true: e.t,
            k_true: e.k,
            x_true: e.x.clone(),
            t_samp: set.gaps.iter().map(|g| prev + g).collect(),
            k_samp: set.marks.clone(),
            x_samp: set.locs.clone(),
        }
    }

    /// JSON with every real written to 17 significant digits.
    pub fn to_json_line(&self) -> String {
        use crate::events::{push_f64, push_f64_array};
        let mut s = format!("{{\"seq\":{},\"i\":{},\"t_true\":", self.seq, self.i);
        push_f64(&mut s, self.t_true);
        s.push_str(&format!(",\"k_true\":{},\"x_true\":", self.k_true));
        push_f64_array(&mut s, &self.x_true);
        s.push_str(",\"t_samp\":");
        push_f64_array(&mut s, &self.t_samp);
        s.push_str(",\"k_samp\":[");
        let ks: Vec<String> = self.k_samp.iter().map(|k| k.to_string()).collect();
        s.push_str(&ks.join(","));
        s.push_str("],\"x_samp\":[");
        for (j, x) in self.x_samp.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            push_f64_array(&mut s, x);
        }
        s.push_str("]}");
        s
    }
}
