//! Event-sequence data model, JSONL ingestion, normalization and splitting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub k: usize,
    /// Empty for purely temporal data.
    pub x: Vec<f64>,
}

/// Events ordered by strictly increasing time, observed on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub horizon: f64,
}

impl EventSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Inter-event gaps, the first measured from time 0.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.events
            .iter()
            .map(|e| {
                let g = e.t - prev;
                prev = e.t;
                g
            })
            .collect()
    }

    fn validate(&self, num_marks: usize, spatial_dim: usize) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::InvalidData("empty sequence".into()));
        }
        if !self.horizon.is_finite() {
            return Err(Error::InvalidData("non-finite horizon".into()));
        }
        for (i, e) in self.events.iter().enumerate() {
            if !e.t.is_finite() {
                return Err(Error::InvalidData(format!("non-finite time at index {i}")));
            }
            if i > 0 && e.t <= self.events[i - 1].t {
                return Err(Error::InvalidData(format!(
                    "non-increasing times at index {i}"
                )));
            }
            if e.k >= num_marks {
                return Err(Error::InvalidData(format!(
                    "mark {} out of range at index {i} (M = {num_marks})",
                    e.k
                )));
            }
            if e.x.len() != spatial_dim {
                return Err(Error::InvalidData(format!(
                    "dimension mismatch at index {i}: expected {spatial_dim}, got {}",
                    e.x.len()
                )));
            }
            if e.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite location at index {i}"
                )));
            }
        }
        let last = self.events[self.events.len() - 1].t;
        if last > self.horizon {
            return Err(Error::InvalidData(format!(
                "last event time {last} exceeds horizon {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_marks: usize,
    pub spatial_dim: usize,
}

#[derive(Deserialize)]
struct Header {
    #[serde(rename = "M")]
    m: usize,
    d: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    #[serde(rename = "T")]
    horizon: f64,
    t: Vec<f64>,
    k: Vec<usize>,
    #[serde(default)]
    x: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_marks: usize, spatial_dim: usize) -> Result<Self> {
        if num_marks == 0 {
            return Err(Error::InvalidData("num_marks must be at least 1".into()));
        }
        for (i, s) in sequences.iter().enumerate() {
            s.validate(num_marks, spatial_dim)
                .map_err(|e| Error::InvalidData(format!("sequence {i}: {e}")))?;
        }
        Ok(Dataset {
            sequences,
            num_marks,
            spatial_dim,
        })
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::InvalidData("no sequences".into()))?;
        let header: Header = serde_json::from_str(header).map_err(|e| Error::Parse {
            line: hline + 1,
            msg: e.to_string(),
        })?;
        if header.m == 0 {
            return Err(Error::Parse {
                line: hline + 1,
                msg: "M must be at least 1".into(),
            });
        }
        let mut sequences = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let rec: SequenceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let seq = record_to_sequence(rec, header.d).map_err(|msg| Error::Parse {
                line: lineno,
                msg,
            })?;
            seq.validate(header.m, header.d).map_err(|e| Error::Parse {
                line: lineno,
                msg: match e {
                    Error::InvalidData(m) => m,
                    other => other.to_string(),
                },
            })?;
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(Error::InvalidData("no sequences".into()));
        }
        Ok(Dataset {
            sequences,
            num_marks: header.m,
            spatial_dim: header.d,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = format!("{{\"M\":{},\"d\":{}}}\n", self.num_marks, self.spatial_dim);
        for s in &self.sequences {
            out.push_str("{\"T\":");
            push_f64(&mut out, s.horizon);
            out.push_str(",\"t\":[");
            for (i, e) in s.events.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                push_f64(&mut out, e.t);
            }
            out.push_str("],\"k\":[");
            for (i, e) in s.events.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", e.k);
            }
            out.push(']');
            if self.spatial_dim > 0 {
                out.push_str(",\"x\":[");
                for (i, e) in s.events.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    push_f64_array(&mut out, &e.x);
                }
                out.push(']');
            }
            out.push_str("}\n");
        }
        out
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Random 0.8/0.1/0.1 partition by sequence count. Valid and test sizes
    /// are floored; the remainder goes to train.
    pub fn split(&self, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let n = self.sequences.len();
        if n < 3 {
            return Err(Error::InvalidData(format!(
                "split needs at least 3 sequences, got {n}"
            )));
        }
        let n_valid = n / 10;
        let n_test = n / 10;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::rng_for(seed, &[0x5EED]));
        let take = |ids: &[usize]| Dataset {
            sequences: ids.iter().map(|&i| self.sequences[i].clone()).collect(),
            num_marks: self.num_marks,
            spatial_dim: self.spatial_dim,
        };
        let train = take(&idx[..n - n_valid - n_test]);
        let valid = take(&idx[n - n_valid - n_test..n - n_test]);
        let test = take(&idx[n - n_test..]);
        Ok((train, valid, test))
    }
}

fn record_to_sequence(rec: SequenceRecord, d: usize) -> std::result::Result<EventSequence, String> {
    if rec.t.len() != rec.k.len() {
        return Err(format!(
            "t has {} entries but k has {}",
            rec.t.len(),
            rec.k.len()
        ));
    }
    let xs = match (rec.x, d) {
        (None, 0) => vec![Vec::new(); rec.t.len()],
        (Some(x), 0) if x.iter().all(Vec::is_empty) => vec![Vec::new(); rec.t.len()],
        (Some(_), 0) => return Err("dimension mismatch: locations given but d = 0".into()),
        (None, _) => return Err(format!("dimension mismatch: missing locations for d = {d}")),
        (Some(x), _) => x,
    };
    if xs.len() != rec.t.len() {
        return Err(format!(
            "x has {} entries but t has {}",
            xs.len(),
            rec.t.len()
        ));
    }
    Ok(EventSequence {
        events: rec
            .t
            .into_iter()
            .zip(rec.k)
            .zip(xs)
            .map(|((t, k), x)| Event { t, k, x })
            .collect(),
        horizon: rec.horizon,
    })
}

/// 17 significant digits; round-trips every binary64 exactly.
pub(crate) fn push_f64(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

pub(crate) fn push_f64_array(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (j, v) in vs.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        push_f64(out, *v);
    }
    out.push(']');
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormDivisor {
    /// Divide centered log-gaps by their variance.
    #[default]
    Variance,
    StdDev,
}

/// Frozen training-corpus statistics for log-gap and location normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_log_gap: f64,
    pub var_log_gap: f64,
    #[serde(default)]
    pub divisor: NormDivisor,
    pub mean_x: Vec<f64>,
    pub std_x: Vec<f64>,
}

impl NormStats {
    /// Pools log-gaps and locations over every event of `ds`.
    pub fn fit(ds: &Dataset, divisor: NormDivisor) -> Result<Self> {
        let mut log_gaps = Vec::with_capacity(ds.num_events());
        for (si, s) in ds.sequences.iter().enumerate() {
            for (i, g) in s.gaps().into_iter().enumerate() {
                if g <= 0.0 || !g.is_finite() {
                    return Err(Error::InvalidData(format!(
                        "non-positive gap {g} at sequence {si}, index {i}"
                    )));
                }
                log_gaps.push(g.ln());
            }
        }
        if log_gaps.len() < 2 {
            return Err(Error::InvalidData(
                "normalization needs at least 2 events".into(),
            ));
        }
        let (mean_log_gap, var_log_gap) = mean_var(&log_gaps);
        if var_log_gap <= 0.0 {
            return Err(Error::InvalidData("log-gaps have zero variance".into()));
        }
        let d = ds.spatial_dim;
        let mut mean_x = vec![0.0; d];
        let mut std_x = vec![1.0; d];
        for j in 0..d {
            let col: Vec<f64> = ds
                .sequences
                .iter()
                .flat_map(|s| s.events.iter().map(move |e| e.x[j]))
                .collect();
            let (m, v) = mean_var(&col);
            if v <= 0.0 {
                return Err(Error::InvalidData(format!(
                    "location coordinate {j} has zero variance"
                )));
            }
            mean_x[j] = m;
            std_x[j] = v.sqrt();
        }
        Ok(NormStats {
            mean_log_gap,
            var_log_gap,
            divisor,
            mean_x,
            std_x,
        })
    }

    pub fn gap_scale(&self) -> f64 {
        match self.divisor {
            NormDivisor::Variance => self.var_log_gap,
            NormDivisor::StdDev => self.var_log_gap.sqrt(),
        }
    }

    pub fn normalize_gap(&self, g: f64) -> f64 {
        (g.ln() - self.mean_log_gap) / self.gap_scale()
    }

    pub fn denormalize_gap(&self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::NonFinite("denormalize_gap input".into()));
        }
        Ok((v * self.gap_scale() + self.mean_log_gap).exp())
    }

    pub fn denormalize_gaps(&self, vs: &[f64]) -> Result<Vec<f64>> {
        vs.iter().map(|&v| self.denormalize_gap(v)).collect()
    }

    pub fn normalize_location(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean_x.iter().zip(&self.std_x))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_location(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean_x.iter().zip(&self.std_x))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_sequence(&self, s: &EventSequence) -> Result<NormalizedSequence> {
        let gaps = s.gaps();
        if let Some((i, g)) = gaps.iter().enumerate().find(|(_, g)| **g <= 0.0) {
            return Err(Error::InvalidData(format!("non-positive gap {g} at index {i}")));
        }
        let gaps: Vec<f64> = gaps.iter().map(|&g| self.normalize_gap(g)).collect();
        let unit = self.mean_log_gap.exp();
        let times = s.events.iter().map(|e| e.t / unit).collect();
        Ok(NormalizedSequence {
            gaps,
            times,
            marks: s.events.iter().map(|e| e.k).collect(),
            locs: s
                .events
                .iter()
                .map(|e| self.normalize_location(&e.x))
                .collect(),
        })
    }

    pub fn normalize_dataset(&self, ds: &Dataset) -> Result<NormalizedDataset> {
        Ok(NormalizedDataset {
            sequences: ds
                .sequences
                .iter()
                .map(|s| self.normalize_sequence(s))
                .collect::<Result<_>>()?,
            num_marks: ds.num_marks,
            spatial_dim: ds.spatial_dim,
        })
    }
}

/// A sequence in model coordinates. `times` are absolute times in units of
/// the typical gap `exp(mean log-gap)`; they feed the temporal encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub gaps: Vec<f64>,
    pub times: Vec<f64>,
    pub marks: Vec<usize>,
    pub locs: Vec<Vec<f64>>,
}

impl NormalizedSequence {
    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDataset {
    pub sequences: Vec<NormalizedSequence>,
    pub num_marks: usize,
    pub spatial_dim: usize,
}

/// Fits statistics on `ds` and returns it in normalized coordinates.
pub fn normalize(ds: &Dataset, divisor: NormDivisor) -> Result<(NormalizedDataset, NormStats)> {
    let stats = NormStats::fit(ds, divisor)?;
    Ok((stats.normalize_dataset(ds)?, stats))
}

/// Population mean and variance.
pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn seq(ts: &[f64], ks: &[usize], xs: &[&[f64]]) -> EventSequence {
        EventSequence {
            events: ts
                .iter()
                .zip(ks)
                .enumerate()
                .map(|(i, (&t, &k))| Event {
                    t,
                    k,
                    x: xs.get(i).map(|x| x.to_vec()).unwrap_or_default(),
                })
                .collect(),
            horizon: ts.last().copied().unwrap_or(0.0) + 1.0,
        }
    }

    #[test]
    fn parses_single_sequence() {
        let text = "{\"M\":2,\"d\":2}\n{\"T\":3.0,\"t\":[1.0,2.5],\"k\":[0,1],\"x\":[[0,0],[1,1]]}\n";
        let ds = Dataset::parse_jsonl(text).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        assert_eq!(ds.sequences[0].len(), 2);
        assert_eq!(ds.num_marks, 2);
        assert_eq!(ds.spatial_dim, 2);
        assert_eq!(ds.sequences[0].events[1].x, vec![1.0, 1.0]);
    }

    #[test]
    fn empty_file_has_no_sequences() {
        let err = Dataset::parse_jsonl("").unwrap_err();
        assert!(err.to_string().contains("no sequences"), "{err}");
        let err = Dataset::parse_jsonl("{\"M\":1,\"d\":0}\n").unwrap_err();
        assert!(err.to_string().contains("no sequences"), "{err}");
    }

    #[test]
    fn rejects_non_increasing_times() {
        let text = "{\"M\":1,\"d\":0}\n{\"T\":3.0,\"t\":[2.0,1.0],\"k\":[0,0]}\n";
        let err = Dataset::parse_jsonl(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-increasing times at index 1"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn rejects_bad_marks_and_dimensions() {
        let text = "{\"M\":2,\"d\":0}\n{\"T\":3.0,\"t\":[1.0],\"k\":[2]}\n";
        assert!(Dataset::parse_jsonl(text)
            .unwrap_err()
            .to_string()
            .contains("out of range"));
        let text = "{\"M\":2,\"d\":2}\n{\"T\":3.0,\"t\":[1.0],\"k\":[0],\"x\":[[1.0]]}\n";
        assert!(Dataset::parse_jsonl(text)
            .unwrap_err()
            .to_string()
            .contains("dimension mismatch"));
        let text = "{\"M\":2,\"d\":0}\n{\"T\":3.0,\"t\":[1.0],\"k\":[0]\n";
        assert!(matches!(
            Dataset::parse_jsonl(text).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let ds = Dataset::new(
            vec![
                seq(&[0.1, 0.2 + 1e-17, 1.0 / 3.0], &[0, 1, 1], &[&[0.1, -2.0], &[1e-300, 7.0], &[3.0, 1.0 / 7.0]]),
                seq(&[2.0], &[0], &[&[0.0, 0.0]]),
            ],
            2,
            2,
        )
        .unwrap();
        let text = ds.to_jsonl();
        let back = Dataset::parse_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn constant_log_gaps_center_to_zero() {
        let ds = Dataset::new(vec![seq(&[E, 2.0 * E, 3.0 * E], &[0, 0, 0], &[])], 1, 0).unwrap();
        for div in [NormDivisor::Variance, NormDivisor::StdDev] {
            // zero variance is rejected, so add a second sequence with symmetric spread
            let mut ds = ds.clone();
            ds.sequences.push(seq(&[1.0, 1.0 + E * E], &[0, 0], &[]));
            let (nd, _) = normalize(&ds, div).unwrap();
            for g in &nd.sequences[0].gaps {
                assert!(g.abs() < 1e-12, "{g}");
            }
        }
    }

    #[test]
    fn two_gap_statistics() {
        let ds = Dataset::new(vec![seq(&[1.0, 1.0 + E * E], &[0, 0], &[])], 1, 0).unwrap();
        let (nd, st) = normalize(&ds, NormDivisor::Variance).unwrap();
        assert!((st.mean_log_gap - 1.0).abs() < 1e-12);
        assert!((st.var_log_gap - 1.0).abs() < 1e-12);
        let g = &nd.sequences[0].gaps;
        assert!((g[0] + 1.0).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12, "{g:?}");
        assert!((nd.sequences[0].times[1] - (1.0 + E * E) / E).abs() < 1e-12);
    }

    #[test]
    fn location_standardization() {
        let ds = Dataset::new(
            vec![seq(&[1.0, 3.0], &[0, 0], &[&[0.0, 0.0], &[2.0, 2.0]])],
            1,
            2,
        )
        .unwrap();
        let (nd, st) = normalize(&ds, NormDivisor::Variance).unwrap();
        assert_eq!(st.mean_x, vec![1.0, 1.0]);
        assert_eq!(st.std_x, vec![1.0, 1.0]);
        assert_eq!(nd.sequences[0].locs, vec![vec![-1.0, -1.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn denormalize_values() {
        let st = NormStats {
            mean_log_gap: 1.0,
            var_log_gap: 1.0,
            divisor: NormDivisor::Variance,
            mean_x: vec![],
            std_x: vec![],
        };
        assert!((st.denormalize_gap(0.0).unwrap() - E).abs() < 1e-15);
        assert!((st.denormalize_gap(-1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(st.denormalize_gap(f64::NAN).is_err());
    }

    #[test]
    fn normalize_rejects_degenerate_input() {
        let ds = Dataset::new(vec![seq(&[1.0], &[0], &[])], 1, 0).unwrap();
        assert!(normalize(&ds, NormDivisor::Variance).is_err());
    }

    #[test]
    fn split_proportions_and_partition() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&[1.0 + i as f64], &[0], &[])).collect();
        let ds = Dataset::new(seqs, 1, 0).unwrap();
        let (tr, va, te) = ds.split(3).unwrap();
        assert_eq!((tr.sequences.len(), va.sequences.len(), te.sequences.len()), (8, 1, 1));
        let mut all: Vec<f64> = tr
            .sequences
            .iter()
            .chain(&va.sequences)
            .chain(&te.sequences)
            .map(|s| s.events[0].t)
            .collect();
        all.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        assert_eq!(all, want);
        assert_eq!(ds.split(3).unwrap(), (tr, va, te));
        assert!(Dataset::new(vec![seq(&[1.0], &[0], &[])], 1, 0)
            .unwrap()
            .split(0)
            .is_err());
    }
}
