//! Training and diagnostic losses: exact score matching for times and
//! locations, their denoising counterparts, mark cross-entropy, and the
//! combined objective.
//!
//! Prediction targets are events `1..L` of a sequence; event `i` is
//! conditioned on encoding row `i - 1`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffkit::{Dual, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::NormalizedSequence;
use crate::model::{EncodingVars, Model};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_t: f64,
    pub sigma_x: Vec<f64>,
    pub num_perturbations: usize,
}

impl NoiseConfig {
    pub fn validate(&self, spatial_dim: usize) -> Result<()> {
        if !(self.sigma_t > 0.0 && self.sigma_t.is_finite()) {
            return Err(Error::InvalidConfig("sigma_t must be positive".into()));
        }
        if spatial_dim > 0 && self.sigma_x.len() != spatial_dim {
            return Err(Error::InvalidConfig(format!(
                "sigma_x has {} entries, expected {spatial_dim}",
                self.sigma_x.len()
            )));
        }
        if self.sigma_x.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("sigma_x entries must be positive".into()));
        }
        if self.num_perturbations == 0 {
            return Err(Error::InvalidConfig("num_perturbations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5 }
    }
}

/// How per-row terms are combined inside one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply(self, g: &mut Graph, total: Var, count: usize) -> Var {
        match self {
            Reduction::Sum => total,
            Reduction::Mean => g.scale(total, 1.0 / count.max(1) as f64),
        }
    }
}

/// The prediction targets of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Encoding row each target conditions on.
    pub rows: Vec<usize>,
    pub tau: Vec<f64>,
    pub marks: Vec<usize>,
    pub locs: Vec<Vec<f64>>,
}

impl Targets {
    pub fn of(seq: &NormalizedSequence) -> Self {
        let n = seq.len().saturating_sub(1);
        Targets {
            rows: (0..n).collect(),
            tau: seq.gaps.iter().skip(1).copied().collect(),
            marks: seq.marks.iter().skip(1).copied().collect(),
            locs: seq.locs.iter().skip(1).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `Q` noisy copies of every target, laid out target-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub rows: Vec<usize>,
    pub marks: Vec<usize>,
    pub tau: Vec<f64>,
    pub tau_tilde: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_tilde: Vec<Vec<f64>>,
}

impl Perturbation {
    pub fn draw(targets: &Targets, noise: &NoiseConfig, rng: &mut Rng) -> Self {
        let q = noise.num_perturbations;
        let n = targets.len() * q;
        let mut p = Perturbation {
            rows: Vec::with_capacity(n),
            marks: Vec::with_capacity(n),
            tau: Vec::with_capacity(n),
            tau_tilde: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
            x_tilde: Vec::with_capacity(n),
        };
        for i in 0..targets.len() {
            for _ in 0..q {
                let xi: f64 = StandardNormal.sample(rng);
                p.rows.push(targets.rows[i]);
                p.marks.push(targets.marks[i]);
                p.tau.push(targets.tau[i]);
                p.tau_tilde.push(targets.tau[i] + noise.sigma_t * xi);
                let x = &targets.locs[i];
                let xt = x
                    .iter()
                    .zip(&noise.sigma_x)
                    .map(|(v, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        v + s * z
                    })
                    .collect();
                p.x.push(x.clone());
                p.x_tilde.push(xt);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Denoising target `-(ṽ - v) / σ²`.
pub fn dsm_target(tilde: f64, clean: f64, sigma: f64) -> f64 {
    -(tilde - clean) / (sigma * sigma)
}

/// `½ Σ_r ‖s_r - target_r‖²` for precomputed scores, with one σ per
/// coordinate.
pub fn dsm_loss_value(scores: &[Vec<f64>], tilde: &[Vec<f64>], clean: &[Vec<f64>], sigma: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((s, t), c) in scores.iter().zip(tilde).zip(clean) {
        for j in 0..s.len() {
            let r = s[j] - dsm_target(t[j], c[j], sigma[j]);
            total += 0.5 * r * r;
        }
    }
    total
}

/// `Σ_r [½ s(v_r)² + s'(v_r)]` for one-dimensional scores.
pub fn exact_sm_value(scores: &[f64], derivs: &[f64]) -> f64 {
    scores.iter().zip(derivs).map(|(s, d)| 0.5 * s * s + d).sum()
}

fn check_spatial(model: &Model) -> Result<()> {
    if model.has_spatial_head() {
        Ok(())
    } else {
        Err(Error::InvalidConfig("spatial loss requested with d = 0".into()))
    }
}

fn locs_tensor(rows: &[Vec<f64>], d: usize) -> Result<Tensor> {
    Tensor::from_vec(rows.len(), d, rows.concat())
}

/// Denoising time loss over all perturbed rows.
pub fn time_denoise_graph(
    g: &mut Graph,
    model: &Model,
    enc: &EncodingVars,
    p: &Perturbation,
    sigma_t: f64,
    reduction: Reduction,
) -> Result<Var> {
    let (psi, _) = model.time_score_graph(g, enc, &p.rows, &p.tau_tilde, &p.marks)?;
    let shift: Vec<f64> = p
        .tau_tilde
        .iter()
        .zip(&p.tau)
        .map(|(&t, &c)| -dsm_target(t, c, sigma_t))
        .collect();
    let shift = g.constant(Tensor::column(shift));
    let r = g.add(psi, shift)?;
    let r = g.square(r);
    let total = g.sum(r);
    let total = g.scale(total, 0.5);
    Ok(reduction.apply(g, total, p.len()))
}

/// Denoising spatial loss; the score is conditioned on the clean gap and mark.
pub fn spatial_denoise_graph(
    g: &mut Graph,
    model: &Model,
    enc: &EncodingVars,
    p: &Perturbation,
    sigma_x: &[f64],
    reduction: Reduction,
) -> Result<Var> {
    check_spatial(model)?;
    let d = model.config.spatial_dim;
    let xt = locs_tensor(&p.x_tilde, d)?;
    let psi = model.spatial_score_graph(g, enc, &p.rows, xt, &p.tau, &p.marks)?;
    let mut shift = Vec::with_capacity(p.len() * d);
    for (t, c) in p.x_tilde.iter().zip(&p.x) {
        for j in 0..d {
            shift.push(-dsm_target(t[j], c[j], sigma_x[j]));
        }
    }
    let shift = g.constant(Tensor::from_vec(p.len(), d, shift)?);
    let r = g.add(psi, shift)?;
    let r = g.square(r);
    let total = g.sum(r);
    let total = g.scale(total, 0.5);
    Ok(reduction.apply(g, total, p.len()))
}

/// Mark cross-entropy at the clean gaps.
pub fn mark_graph(g: &mut Graph, model: &Model, enc: &EncodingVars, t: &Targets, reduction: Reduction) -> Result<Var> {
    let tau = g.constant(Tensor::column(t.tau.clone()));
    let lam = model.intensity_graph(g, enc, &t.rows, Dual::constant(tau))?;
    let total = g.sum_cols(lam.val);
    let lk = g.pick_cols(lam.val, t.marks.clone())?;
    let lt = g.log(total);
    let lkl = g.log(lk);
    let nll = g.sub(lt, lkl)?;
    let s = g.sum(nll);
    Ok(reduction.apply(g, s, t.len()))
}

pub const EXACT_FD_STEP: f64 = 1e-4;

/// `Σ_i [½ ψ_t² + ∂τ ψ_t]` at the observed gaps, `∂τ ψ_t` by central
/// differences on the tape.
pub fn time_exact_graph(g: &mut Graph, model: &Model, enc: &EncodingVars, t: &Targets) -> Result<Var> {
    let h = EXACT_FD_STEP;
    let (psi, _) = model.time_score_graph(g, enc, &t.rows, &t.tau, &t.marks)?;
    let up: Vec<f64> = t.tau.iter().map(|v| v + h).collect();
    let dn: Vec<f64> = t.tau.iter().map(|v| v - h).collect();
    let (pu, _) = model.time_score_graph(g, enc, &t.rows, &up, &t.marks)?;
    let (pd, _) = model.time_score_graph(g, enc, &t.rows, &dn, &t.marks)?;
    let diff = g.sub(pu, pd)?;
    let deriv = g.scale(diff, 1.0 / (2.0 * h));
    let sq = g.square(psi);
    let sq = g.scale(sq, 0.5);
    let per = g.add(sq, deriv)?;
    Ok(g.sum(per))
}

/// `(1/L) Σ_i [½‖ψ_x‖² + div ψ_x]` at the observed locations.
pub fn spatial_exact_graph(g: &mut Graph, model: &Model, enc: &EncodingVars, t: &Targets) -> Result<Var> {
    check_spatial(model)?;
    let d = model.config.spatial_dim;
    let h = EXACT_FD_STEP;
    let x = locs_tensor(&t.locs, d)?;
    let psi = model.spatial_score_graph(g, enc, &t.rows, x.clone(), &t.tau, &t.marks)?;
    let sq = g.square(psi);
    let mut acc = g.sum(sq);
    acc = g.scale(acc, 0.5);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        for r in 0..x.rows {
            xp.data[r * d + j] += h;
            xm.data[r * d + j] -= h;
        }
        let sp = model.spatial_score_graph(g, enc, &t.rows, xp, &t.tau, &t.marks)?;
        let sm = model.spatial_score_graph(g, enc, &t.rows, xm, &t.tau, &t.marks)?;
        let sp = g.slice_cols(sp, j, 1)?;
        let sm = g.slice_cols(sm, j, 1)?;
        let diff = g.sub(sp, sm)?;
        let s = g.sum(diff);
        let s = g.scale(s, 1.0 / (2.0 * h));
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 1.0 / t.len().max(1) as f64))
}

/// Which combined objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Stpp,
    Tpp,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stpp" => Ok(Mode::Stpp),
            "tpp" => Ok(Mode::Tpp),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?} (expected stpp or tpp)"))),
        }
    }
}

/// Combined-loss graph nodes; component values are kept for reporting.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub time: Var,
    pub spatial: Option<Var>,
    pub mark: Var,
}

/// `L_time + L_spatial + α L_mark` (stpp) or `L_time + α L_mark` (tpp) for
/// one sequence. Returns `None` for sequences without prediction targets.
#[allow(clippy::too_many_arguments)]
pub fn smash_graph(
    g: &mut Graph,
    model: &Model,
    seq: &NormalizedSequence,
    p: &Perturbation,
    noise: &NoiseConfig,
    weights: LossWeights,
    mode: Mode,
    reduction: Reduction,
) -> Result<Option<LossParts>> {
    if mode == Mode::Stpp {
        check_spatial(model)?;
    }
    let t = Targets::of(seq);
    if t.is_empty() {
        return Ok(None);
    }
    let enc = model.encode_graph(g, seq)?;
    let time = time_denoise_graph(g, model, &enc, p, noise.sigma_t, reduction)?;
    let mark = mark_graph(g, model, &enc, &t, reduction)?;
    let spatial = match mode {
        Mode::Stpp => Some(spatial_denoise_graph(g, model, &enc, p, &noise.sigma_x, reduction)?),
        Mode::Tpp => None,
    };
    let mut total = time;
    if let Some(s) = spatial {
        total = g.add(total, s)?;
    }
    let wm = g.scale(mark, weights.alpha);
    total = g.add(total, wm)?;
    Ok(Some(LossParts {
        total,
        time,
        spatial,
        mark,
    }))
}

/// Scalar helpers for evaluation outside a training step.
fn eval_scalar(model: &Model, f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let v = f(&mut g)?;
    let s = g.scalar(v);
    if !s.is_finite() {
        return Err(Error::NonFinite("loss value".into()));
    }
    Ok(s)
}

fn nonempty(seq: &NormalizedSequence) -> Result<Targets> {
    let t = Targets::of(seq);
    if t.is_empty() {
        return Err(Error::InvalidData("sequence has no prediction targets".into()));
    }
    Ok(t)
}

pub fn loss_time_exact(model: &Model, seq: &NormalizedSequence) -> Result<f64> {
    let t = nonempty(seq)?;
    eval_scalar(model, |g| {
        let enc = model.encode_graph(g, seq)?;
        time_exact_graph(g, model, &enc, &t)
    })
}

pub fn loss_spatial_exact(model: &Model, seq: &NormalizedSequence) -> Result<f64> {
    let t = nonempty(seq)?;
    eval_scalar(model, |g| {
        let enc = model.encode_graph(g, seq)?;
        spatial_exact_graph(g, model, &enc, &t)
    })
}

pub fn loss_time_denoise(model: &Model, seq: &NormalizedSequence, noise: &NoiseConfig, rng: &mut Rng, reduction: Reduction) -> Result<f64> {
    let t = nonempty(seq)?;
    let p = Perturbation::draw(&t, noise, rng);
    eval_scalar(model, |g| {
        let enc = model.encode_graph(g, seq)?;
        time_denoise_graph(g, model, &enc, &p, noise.sigma_t, reduction)
    })
}

pub fn loss_spatial_denoise(model: &Model, seq: &NormalizedSequence, noise: &NoiseConfig, rng: &mut Rng, reduction: Reduction) -> Result<f64> {
    check_spatial(model)?;
    let t = nonempty(seq)?;
    let p = Perturbation::draw(&t, noise, rng);
    eval_scalar(model, |g| {
        let enc = model.encode_graph(g, seq)?;
        spatial_denoise_graph(g, model, &enc, &p, &noise.sigma_x, reduction)
    })
}

pub fn loss_mark(model: &Model, seq: &NormalizedSequence, reduction: Reduction) -> Result<f64> {
    let t = nonempty(seq)?;
    eval_scalar(model, |g| {
        let enc = model.encode_graph(g, seq)?;
        mark_graph(g, model, &enc, &t, reduction)
    })
}

#[allow(clippy::too_many_arguments)]
pub fn loss_smash(
    model: &Model,
    seq: &NormalizedSequence,
    noise: &NoiseConfig,
    weights: LossWeights,
    mode: Mode,
    rng: &mut Rng,
    reduction: Reduction,
) -> Result<f64> {
    let t = nonempty(seq)?;
    let p = Perturbation::draw(&t, noise, rng);
    eval_scalar(model, |g| {
        let parts = smash_graph(g, model, seq, &p, noise, weights, mode, reduction)?;
        Ok(parts.expect("targets checked").total)
    })
}

pub fn loss_smash_tpp(
    model: &Model,
    seq: &NormalizedSequence,
    noise: &NoiseConfig,
    weights: LossWeights,
    rng: &mut Rng,
    reduction: Reduction,
) -> Result<f64> {
    loss_smash(model, seq, noise, weights, Mode::Tpp, rng, reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{grad_check, softplus};
    use crate::model::ModelConfig;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn config(m: usize, d: usize) -> ModelConfig {
        ModelConfig {
            n_heads: 1,
            n_layers: 1,
            d_model: 6,
            d_k: 3,
            d_v: 3,
            d_hidden: 8,
            num_marks: m,
            spatial_dim: d,
            head_layers: 3,
            dropout: 0.0,
        }
    }

    fn seq(l: usize, m: usize, d: usize, seed: u64) -> NormalizedSequence {
        let mut rng = rng_for(seed, &[3]);
        let gaps: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        NormalizedSequence {
            times: gaps.iter().map(|g| { acc += g; acc }).collect(),
            gaps,
            marks: (0..l).map(|_| rng.random_range(0..m)).collect(),
            locs: (0..l).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        }
    }

    /// Intensity head outputs `softplus(c)` for every mark, independent of τ.
    fn constant_model(m: usize, d: usize, c: f64) -> Model {
        let mut model = Model::new(config(m, d), 1).unwrap();
        for p in model.params.iter_mut() {
            if p.name.starts_with("int.") || p.name.starts_with("sp.w3") {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        model.params.by_name_mut("int.out.b").unwrap().value.data.iter_mut().for_each(|v| *v = c);
        model
    }

    fn noise(d: usize, q: usize) -> NoiseConfig {
        NoiseConfig {
            sigma_t: 0.3,
            sigma_x: vec![0.25; d],
            num_perturbations: q,
        }
    }

    #[test]
    fn dsm_target_examples() {
        assert!((dsm_target(1.2, 1.0, 0.5) + 0.8).abs() < 1e-12);
        assert!((dsm_target(0.3, 0.0, 0.3) + 10.0 / 3.0).abs() < 1e-12);
        assert!((dsm_target(-0.3, 0.0, 0.3) - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_time_loss_of_constant_model() {
        let c = 0.4;
        let m = 3;
        let model = constant_model(m, 0, c);
        let s = seq(6, m, 0, 2);
        let lam = softplus(c);
        let want = 5.0 * 0.5 * (m as f64 * lam).powi(2);
        let got = loss_time_exact(&model, &s).unwrap();
        assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
    }

    #[test]
    fn zero_score_spatial_exact_is_zero() {
        let model = constant_model(2, 2, 0.0);
        let s = seq(5, 2, 2, 3);
        assert!(loss_spatial_exact(&model, &s).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn zero_noise_denoise_loss_is_half_squared_score() {
        let c = 0.2;
        let model = constant_model(2, 2, c);
        let s = seq(4, 2, 2, 4);
        let t = Targets::of(&s);
        let mut p = Perturbation::draw(&t, &noise(2, 2), &mut rng_for(1, &[]));
        p.tau_tilde = p.tau.clone();
        p.x_tilde = p.x.clone();
        let mut g = Graph::new(&model.params);
        let enc = model.encode_graph(&mut g, &s).unwrap();
        let v = time_denoise_graph(&mut g, &model, &enc, &p, 0.3, Reduction::Sum).unwrap();
        let psi = -2.0 * softplus(c);
        assert!((g.scalar(v) - p.len() as f64 * 0.5 * psi * psi).abs() < 1e-10);
        let v = spatial_denoise_graph(&mut g, &model, &enc, &p, &[0.25, 0.25], Reduction::Sum).unwrap();
        assert!(g.scalar(v).abs() < 1e-14);
    }

    #[test]
    fn mark_loss_examples() {
        let s = seq(5, 1, 0, 5);
        let model = Model::new(config(1, 0), 3).unwrap();
        assert_eq!(loss_mark(&model, &s, Reduction::Sum).unwrap(), 0.0);
        let model = constant_model(4, 0, 0.7);
        let s = seq(5, 4, 0, 5);
        let v = loss_mark(&model, &s, Reduction::Mean).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mark_loss_of_known_intensities() {
        // Output bias (b0, b1) with softplus(b) = (1, 3) and zero trunk.
        let mut model = constant_model(2, 0, 0.0);
        let inv = |y: f64| (y.exp() - 1.0).ln();
        model.params.by_name_mut("int.out.b").unwrap().value.data = vec![inv(1.0), inv(3.0)];
        let mut s = seq(2, 2, 0, 6);
        s.marks[1] = 1;
        let v = loss_mark(&model, &s, Reduction::Sum).unwrap();
        assert!((v + 0.75f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn alpha_zero_is_sum_of_denoise_losses() {
        let model = Model::new(config(3, 2), 9).unwrap();
        let s = seq(5, 3, 2, 9);
        let nz = noise(2, 3);
        let w = LossWeights { alpha: 0.0 };
        let total = loss_smash(&model, &s, &nz, w, Mode::Stpp, &mut rng_for(4, &[]), Reduction::Mean).unwrap();
        let mut rng = rng_for(4, &[]);
        let t = Targets::of(&s);
        let p = Perturbation::draw(&t, &nz, &mut rng);
        let mut g = Graph::new(&model.params);
        let enc = model.encode_graph(&mut g, &s).unwrap();
        let a = time_denoise_graph(&mut g, &model, &enc, &p, nz.sigma_t, Reduction::Mean).unwrap();
        let b = spatial_denoise_graph(&mut g, &model, &enc, &p, &nz.sigma_x, Reduction::Mean).unwrap();
        assert_eq!(total, g.scalar(a) + g.scalar(b));
    }

    #[test]
    fn tpp_variant_rejects_nothing_and_stpp_requires_space() {
        let model = Model::new(config(2, 0), 9).unwrap();
        let s = seq(5, 2, 0, 9);
        let nz = noise(0, 2);
        assert!(loss_smash_tpp(&model, &s, &nz, LossWeights::default(), &mut rng_for(1, &[]), Reduction::Mean).is_ok());
        assert!(loss_smash(&model, &s, &nz, LossWeights::default(), Mode::Stpp, &mut rng_for(1, &[]), Reduction::Mean).is_err());
    }

    #[test]
    fn losses_are_deterministic() {
        let model = Model::new(config(2, 2), 10).unwrap();
        let s = seq(6, 2, 2, 10);
        let nz = noise(2, 2);
        let run = || loss_smash(&model, &s, &nz, LossWeights::default(), Mode::Stpp, &mut rng_for(7, &[]), Reduction::Mean).unwrap();
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn combined_loss_gradients_pass_grad_check() {
        let model = Model::new(config(3, 2), 12).unwrap();
        let s = seq(5, 3, 2, 12);
        let nz = noise(2, 2);
        let t = Targets::of(&s);
        let p = Perturbation::draw(&t, &nz, &mut rng_for(2, &[]));
        let r = grad_check(&model.params, 1e-5, |g| {
            let parts = smash_graph(g, &model, &s, &p, &nz, LossWeights::default(), Mode::Stpp, Reduction::Mean)?;
            Ok(parts.unwrap().total)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
        // The exact losses already contain a difference quotient; a larger
        // outer step keeps the nested roundoff below the tolerance.
        let r = grad_check(&model.params, 1e-4, |g| {
            let enc = model.encode_graph(g, &s)?;
            let a = time_exact_graph(g, &model, &enc, &t)?;
            let b = spatial_exact_graph(g, &model, &enc, &t)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
