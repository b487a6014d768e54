//! Confidence intervals and regions built from samples, and the metrics
//! computed from them: calibration score, MAE, mark accuracy, ECE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SampleSet;

/// Confidence levels in `(0, 1]`, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LevelGrid {
    levels: Vec<f64>,
}

impl TryFrom<Vec<f64>> for LevelGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LevelGrid::new(v)
    }
}

impl From<LevelGrid> for Vec<f64> {
    fn from(g: LevelGrid) -> Self {
        g.levels
    }
}

impl LevelGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidConfig("level grid is empty".into()));
        }
        if levels.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(Error::InvalidConfig("levels must lie in (0, 1]".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("levels must be strictly increasing".into()));
        }
        Ok(LevelGrid { levels })
    }

    /// `start, start+step, …` up to `stop`, which is included when reached
    /// within 1e-9.
    pub fn range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !start.is_finite() || !stop.is_finite() {
            return Err(Error::InvalidConfig("level range needs finite bounds and a positive step".into()));
        }
        let n = ((stop - start) / step + 1e-9).floor();
        if n < 0.0 {
            return Err(Error::InvalidConfig("level range stop is below start".into()));
        }
        // Round away the accumulated binary error so 0.1-steps print cleanly.
        let levels = (0..=n as usize)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect();
        LevelGrid::new(levels)
    }

    /// Parses `start:stop:step`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidConfig(format!("level grid {spec:?} is not start:stop:step")));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("level grid {spec:?}: bad number {s:?}")))
        };
        LevelGrid::range(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }

    /// `{0.5, 0.6, …, 1.0}`.
    pub fn stpp() -> Self {
        LevelGrid::range(0.5, 1.0, 0.1).expect("valid grid")
    }

    /// `{0.8, 0.9, 1.0}`.
    pub fn tpp() -> Self {
        LevelGrid::range(0.8, 1.0, 0.1).expect("valid grid")
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

pub fn quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidData("quantile of empty samples".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("quantile level {q} outside [0, 1]")));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&s, q))
}

/// `[0, t_q]` with `t_q` the q-quantile of the sampled gaps.
pub fn time_interval(samples: &[f64], q: f64) -> Result<(f64, f64)> {
    Ok((0.0, quantile(samples, q)?))
}

pub const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Gaussian product-kernel density estimate with Scott's bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    points: Vec<Vec<f64>>,
    bandwidth: Vec<f64>,
    log_norm: f64,
    /// True when some dimension had zero spread and the floor was used.
    pub degenerate: bool,
}

impl Kde {
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        let d = points.first().map_or(0, |p| p.len());
        if d == 0 || n < 2 {
            return Err(Error::InvalidData("KDE needs at least two points of dimension ≥ 1".into()));
        }
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape {
                op: "kde",
                detail: "points of mixed dimension".into(),
            });
        }
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let mut degenerate = false;
        let bandwidth: Vec<f64> = (0..d)
            .map(|j| {
                let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
                let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let h = factor * var.sqrt();
                if h < BANDWIDTH_FLOOR || !h.is_finite() {
                    degenerate = true;
                    BANDWIDTH_FLOOR
                } else {
                    h
                }
            })
            .collect();
        let log_norm = -(n as f64).ln()
            - bandwidth
                .iter()
                .map(|h| h.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
                .sum::<f64>();
        Ok(Kde {
            points: points.to_vec(),
            bandwidth,
            log_norm,
            degenerate,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for p in &self.points {
            let mut e = 0.0;
            for ((xi, pi), h) in x.iter().zip(p).zip(&self.bandwidth) {
                let z = (xi - pi) / h;
                e += z * z;
            }
            acc += (-0.5 * e).exp();
        }
        acc * self.log_norm.exp()
    }
}

/// HDR regions of one sample set at any level: a KDE and the sorted
/// densities at the samples themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFamily {
    pub kde: Kde,
    sorted_density: Vec<f64>,
}

impl RegionFamily {
    pub fn new(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples.first().map_or(0, |p| p.len());
        if samples.len() <= d + 1 {
            return Err(Error::InvalidData(format!(
                "location region needs more than {} samples, got {}",
                d + 1,
                samples.len()
            )));
        }
        let kde = Kde::new(samples)?;
        let mut sorted_density: Vec<f64> = samples.iter().map(|s| kde.density(s)).collect();
        sorted_density.sort_by(f64::total_cmp);
        Ok(RegionFamily { kde, sorted_density })
    }

    /// Density threshold of the level-q region.
    pub fn threshold(&self, q: f64) -> f64 {
        quantile_sorted(&self.sorted_density, 1.0 - q)
    }

    pub fn covers_density(&self, density: f64, q: f64) -> bool {
        density >= self.threshold(q)
    }

    pub fn covers(&self, x: &[f64], q: f64) -> bool {
        self.covers_density(self.kde.density(x), q)
    }
}

/// `(kde, threshold)` for a single level.
pub fn location_region(samples: &[Vec<f64>], q: f64) -> Result<(Kde, f64)> {
    let f = RegionFamily::new(samples)?;
    let t = f.threshold(q);
    Ok((f.kde, t))
}

/// Per-level coverage of true gaps by `[0, t_q]`.
pub fn time_coverage(samples: &[Vec<f64>], truths: &[f64], grid: &LevelGrid) -> Result<Vec<f64>> {
    if samples.len() != truths.len() || samples.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} sample sets for {} truths",
            samples.len(),
            truths.len()
        )));
    }
    let mut hits = vec![0usize; grid.levels().len()];
    for (s, &t) in samples.iter().zip(truths) {
        if s.is_empty() {
            return Err(Error::InvalidData("empty sample set".into()));
        }
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        for (h, &q) in hits.iter_mut().zip(grid.levels()) {
            if t >= 0.0 && t <= quantile_sorted(&sorted, q) {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / truths.len() as f64).collect())
}

/// Per-level coverage of true locations by KDE/HDR regions. Returns the
/// coverage and the number of events whose bandwidth needed the floor.
pub fn space_coverage(samples: &[Vec<Vec<f64>>], truths: &[Vec<f64>], grid: &LevelGrid) -> Result<(Vec<f64>, usize)> {
    if samples.len() != truths.len() || samples.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} sample sets for {} truths",
            samples.len(),
            truths.len()
        )));
    }
    let mut hits = vec![0usize; grid.levels().len()];
    let mut degenerate = 0;
    for (s, t) in samples.iter().zip(truths) {
        let fam = RegionFamily::new(s)?;
        if fam.kde.degenerate {
            degenerate += 1;
        }
        let dens = fam.kde.density(t);
        for (h, &q) in hits.iter_mut().zip(grid.levels()) {
            if fam.covers_density(dens, q) {
                *h += 1;
            }
        }
    }
    Ok((hits.iter().map(|&h| h as f64 / truths.len() as f64).collect(), degenerate))
}

/// Mean over levels of `|coverage(q) - q|`.
pub fn calibration_from_coverage(coverage: &[f64], grid: &LevelGrid) -> f64 {
    let levels = grid.levels();
    coverage.iter().zip(levels).map(|(c, q)| (c - q).abs()).sum::<f64>() / levels.len() as f64
}

/// What a calibration score is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Time,
    Space,
}

/// Calibration score over events; `sets[i]` are the samples for `truths`'
/// event `i`.
pub fn calibration_score(sets: &[SampleSet], truths: &[Truth], grid: &LevelGrid, target: Target) -> Result<f64> {
    let cov = match target {
        Target::Time => time_coverage(
            &sets.iter().map(|s| s.gaps.clone()).collect::<Vec<_>>(),
            &truths.iter().map(|t| t.gap).collect::<Vec<_>>(),
            grid,
        )?,
        Target::Space => {
            space_coverage(
                &sets.iter().map(|s| s.locs.clone()).collect::<Vec<_>>(),
                &truths.iter().map(|t| t.loc.clone()).collect::<Vec<_>>(),
                grid,
            )?
            .0
        }
    };
    Ok(calibration_from_coverage(&cov, grid))
}

/// The observed event a sample set is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub gap: f64,
    pub mark: usize,
    pub loc: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae_time(samples: &[Vec<f64>], truths: &[f64]) -> Result<f64> {
    if samples.is_empty() || samples.len() != truths.len() {
        return Err(Error::InvalidData("MAE needs matching, nonempty inputs".into()));
    }
    Ok(mean(
        &samples
            .iter()
            .zip(truths)
            .map(|(s, t)| (mean(s) - t).abs())
            .collect::<Vec<_>>(),
    ))
}

pub fn mae_space(samples: &[Vec<Vec<f64>>], truths: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() || samples.len() != truths.len() {
        return Err(Error::InvalidData("MAE needs matching, nonempty inputs".into()));
    }
    let errs: Vec<f64> = samples
        .iter()
        .zip(truths)
        .map(|(s, t)| {
            (0..t.len())
                .map(|j| {
                    let m = s.iter().map(|p| p[j]).sum::<f64>() / s.len() as f64;
                    (m - t[j]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(mean(&errs))
}

/// Modal mark (ties go to the smallest index) and its sample proportion.
pub fn mark_mode(marks: &[usize]) -> (usize, f64) {
    let m = marks.iter().copied().max().map_or(1, |v| v + 1);
    let mut counts = vec![0usize; m];
    for &k in marks {
        counts[k] += 1;
    }
    let mut best = 0;
    for k in 1..m {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    (best, counts[best] as f64 / marks.len().max(1) as f64)
}

pub fn mark_accuracy(samples: &[Vec<usize>], truths: &[usize]) -> Result<f64> {
    if samples.is_empty() || samples.len() != truths.len() {
        return Err(Error::InvalidData("accuracy needs matching, nonempty inputs".into()));
    }
    let correct = samples.iter().zip(truths).filter(|(s, &t)| mark_mode(s).0 == t).count();
    Ok(correct as f64 / truths.len() as f64)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece_from(confidence: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = confidence.len();
    let mut cnt = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        cnt[b] += 1;
        conf[b] += c;
        if ok {
            acc[b] += 1.0;
        }
    }
    (0..bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| {
            let nb = cnt[b] as f64;
            nb / n as f64 * (acc[b] / nb - conf[b] / nb).abs()
        })
        .sum()
}

pub fn ece(samples: &[Vec<usize>], truths: &[usize], bins: usize) -> Result<f64> {
    if samples.is_empty() || samples.len() != truths.len() || bins == 0 {
        return Err(Error::InvalidData("ECE needs matching, nonempty inputs".into()));
    }
    let (conf, correct): (Vec<f64>, Vec<bool>) = samples
        .iter()
        .zip(truths)
        .map(|(s, &t)| {
            let (k, c) = mark_mode(s);
            (c, k == t)
        })
        .unzip();
    Ok(ece_from(&conf, &correct, bins))
}

pub const ECE_BINS: usize = 10;

/// Stated in every report so readers do not compare against published
/// benchmark numbers.
pub const PROVENANCE_NOTE: &str = "Published benchmark values (for example SMASH on Earthquake, CS_time 3.53%) \
come from real datasets at GPU scale. They are external references only and are not targets of this \
implementation's acceptance suite, which checks synthetic oracle properties instead.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub space: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cs_time: f64,
    pub mae_time: f64,
    pub cs_space: Option<f64>,
    pub mae_space: Option<f64>,
    pub acc: f64,
    pub ece: f64,
    /// Level (formatted) to coverage.
    pub coverage: BTreeMap<String, LevelCoverage>,
    pub num_events: usize,
    pub sampler_restarts: usize,
    pub degenerate_bandwidths: usize,
    pub provenance: String,
}

impl MetricsReport {
    /// Computes every metric from per-event samples and truths.
    pub fn compute(
        sets: &[SampleSet],
        truths: &[Truth],
        time_grid: &LevelGrid,
        space_grid: Option<&LevelGrid>,
    ) -> Result<Self> {
        if sets.is_empty() || sets.len() != truths.len() {
            return Err(Error::InvalidData(format!(
                "{} sample sets for {} truths",
                sets.len(),
                truths.len()
            )));
        }
        let gaps: Vec<Vec<f64>> = sets.iter().map(|s| s.gaps.clone()).collect();
        let tg: Vec<f64> = truths.iter().map(|t| t.gap).collect();
        let cov_t = time_coverage(&gaps, &tg, time_grid)?;
        let marks: Vec<Vec<usize>> = sets.iter().map(|s| s.marks.clone()).collect();
        let tm: Vec<usize> = truths.iter().map(|t| t.mark).collect();
        let mut coverage = BTreeMap::new();
        for (q, c) in time_grid.levels().iter().zip(&cov_t) {
            coverage.insert(format_level(*q), LevelCoverage { time: *c, space: None });
        }
        let (cs_space, mae_sp, degenerate) = match space_grid {
            Some(grid) => {
                let locs: Vec<Vec<Vec<f64>>> = sets.iter().map(|s| s.locs.clone()).collect();
                let tl: Vec<Vec<f64>> = truths.iter().map(|t| t.loc.clone()).collect();
                let (cov_s, deg) = space_coverage(&locs, &tl, grid)?;
                for (q, c) in grid.levels().iter().zip(&cov_s) {
                    coverage
                        .entry(format_level(*q))
                        .or_insert(LevelCoverage { time: f64::NAN, space: None })
                        .space = Some(*c);
                }
                (
                    Some(calibration_from_coverage(&cov_s, grid)),
                    Some(mae_space(&locs, &tl)?),
                    deg,
                )
            }
            None => (None, None, 0),
        };
        Ok(MetricsReport {
            cs_time: calibration_from_coverage(&cov_t, time_grid),
            mae_time: mae_time(&gaps, &tg)?,
            cs_space,
            mae_space: mae_sp,
            acc: mark_accuracy(&marks, &tm)?,
            ece: ece(&marks, &tm, ECE_BINS)?,
            coverage,
            num_events: sets.len(),
            sampler_restarts: sets.iter().map(|s| s.restarts).sum(),
            degenerate_bandwidths: degenerate,
            provenance: PROVENANCE_NOTE.to_string(),
        })
    }

    /// `level,coverage_time,coverage_space` rows, ascending level.
    pub fn calibration_csv(&self) -> String {
        let mut rows: Vec<(f64, &LevelCoverage)> = self
            .coverage
            .iter()
            .map(|(k, v)| (k.parse::<f64>().unwrap_or(f64::NAN), v))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = String::from("level,coverage_time,coverage_space\n");
        for (q, c) in rows {
            let space = c.space.map_or(String::new(), |s| s.to_string());
            let time = if c.time.is_nan() { String::new() } else { c.time.to_string() };
            out.push_str(&format!("{q},{time},{space}\n"));
        }
        out
    }
}

pub fn format_level(q: f64) -> String {
    let s = format!("{q:.6}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').map_or(s.to_string(), |v| format!("{v}.0"))
}
