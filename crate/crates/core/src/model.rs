//! The network: a causal self-attention history encoder, a per-mark
//! intensity head `λ(τ, k)` with its exact time score, the mark pmf, and a
//! conditional spatial score head.
//!
//! Two evaluation paths exist. The graph path (`*_graph` methods) builds
//! differentiable tape nodes for training; the fast path ([`HeadWeights`],
//! [`EventContext`]) evaluates the same functions on plain slices for the
//! Langevin sampler. Tests pin the two together.

use serde::{Deserialize, Serialize};

use crate::diffkit::{sigmoid, softplus, Dual, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::NormalizedSequence;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_hidden: usize,
    pub num_marks: usize,
    pub spatial_dim: usize,
    #[serde(default = "default_head_layers")]
    pub head_layers: usize,
    /// Accepted for compatibility; dropout is never applied.
    #[serde(default)]
    pub dropout: f64,
}

fn default_head_layers() -> usize {
    3
}

impl ModelConfig {
    /// Backbone sizes for the Earthquake benchmark.
    pub fn earthquake(num_marks: usize, spatial_dim: usize) -> Self {
        ModelConfig {
            n_heads: 4,
            n_layers: 4,
            d_model: 16,
            d_k: 16,
            d_v: 16,
            d_hidden: 64,
            num_marks,
            spatial_dim,
            head_layers: 3,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_hidden", self.d_hidden),
            ("num_marks", self.num_marks),
            ("head_layers", self.head_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Hidden vectors per event; row `i` summarizes events `0..=i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEncoding {
    pub h: Tensor,
    pub h_t: Tensor,
    pub h_x: Tensor,
    pub h_k: Tensor,
}

impl HistoryEncoding {
    pub fn len(&self) -> usize {
        self.h.rows
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows == 0
    }
}

/// Encoder outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncodingVars {
    pub h: Var,
    pub h_t: Var,
    pub h_x: Var,
    pub h_k: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const TIME_ENCODING_BASE: f64 = 10_000.0;

/// Sinusoidal encoding of (normalized) absolute times, `L x d_model`.
pub fn temporal_encoding(times: &[f64], d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(times.len(), d_model);
    for (i, &time) in times.iter().enumerate() {
        for j in 0..d_model {
            let freq = TIME_ENCODING_BASE.powf(-((j / 2 * 2) as f64) / d_model as f64);
            t.data[i * d_model + j] = if j % 2 == 0 {
                (time * freq).sin()
            } else {
                (time * freq).cos()
            };
        }
    }
    t
}

fn p(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, &[0x1417]);
        let mut s = ParamStore::new();
        let (dm, m, d) = (config.d_model, config.num_marks, config.spatial_dim);
        let (hk, hv) = (config.n_heads * config.d_k, config.n_heads * config.d_v);
        s.insert_random("emb.mark", m, dm, 1.0, &mut rng)?;
        if d > 0 {
            s.insert_random("emb.loc.w", d, dm, 1.0, &mut rng)?;
            s.insert("emb.loc.b", Tensor::zeros(1, dm))?;
        }
        for l in 0..config.n_layers {
            let e = format!("enc.{l}");
            s.insert_random(&p(&e, "wq"), dm, hk, 1.0, &mut rng)?;
            s.insert_random(&p(&e, "wk"), dm, hk, 1.0, &mut rng)?;
            s.insert_random(&p(&e, "wv"), dm, hv, 1.0, &mut rng)?;
            s.insert_random(&p(&e, "wo"), hv, dm, 1.0, &mut rng)?;
            s.insert_random(&p(&e, "ffn.w1"), dm, config.d_hidden, 1.0, &mut rng)?;
            s.insert(&p(&e, "ffn.b1"), Tensor::zeros(1, config.d_hidden))?;
            s.insert_random(&p(&e, "ffn.w2"), config.d_hidden, dm, 1.0, &mut rng)?;
            s.insert(&p(&e, "ffn.b2"), Tensor::zeros(1, dm))?;
        }
        for j in 0..config.head_layers {
            let e = format!("int.{j}");
            s.insert_random(&p(&e, "wt"), 1, dm, 1.0, &mut rng)?;
            s.insert_random(&p(&e, "wh"), dm, dm, 1.0, &mut rng)?;
            s.insert_random(&p(&e, "wtk"), dm, dm, 1.0, &mut rng)?;
            s.insert(&p(&e, "b"), Tensor::zeros(1, dm))?;
        }
        s.insert_random("int.out.w", dm, m, 0.1, &mut rng)?;
        s.insert("int.out.b", Tensor::zeros(1, m))?;
        if d > 0 {
            let dh = config.d_hidden;
            s.insert_random("sp.w1x", d, dh, 1.0, &mut rng)?;
            s.insert_random("sp.w1t", 1, dh, 1.0, &mut rng)?;
            s.insert_random("sp.w1c", 5 * dm, dh, 1.0, &mut rng)?;
            s.insert("sp.b1", Tensor::zeros(1, dh))?;
            s.insert_random("sp.w2", dh, dh, 1.0, &mut rng)?;
            s.insert("sp.b2", Tensor::zeros(1, dh))?;
            s.insert_random("sp.w3", dh, d, 0.1, &mut rng)?;
            s.insert("sp.b3", Tensor::zeros(1, d))?;
        }
        Ok(Model { config, params: s })
    }

    pub fn has_spatial_head(&self) -> bool {
        self.config.spatial_dim > 0
    }

    /// Checks that every parameter the config implies exists with its shape.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Model::new(self.config.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                reference.params.len(),
                self.params.len()
            )));
        }
        for r in reference.params.iter() {
            let have = self
                .params
                .by_name(&r.name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {}", r.name)))?;
            if have.value.shape() != r.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    r.name,
                    have.value.shape(),
                    r.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &NormalizedSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::InvalidData("cannot encode an empty sequence".into()));
        }
        let c = &self.config;
        if let Some(&k) = seq.marks.iter().find(|&&k| k >= c.num_marks) {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("mark {k} with num_marks {}", c.num_marks),
            });
        }
        if seq.locs.iter().any(|x| x.len() != c.spatial_dim) || seq.locs.len() != seq.len() {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("locations must have dimension {}", c.spatial_dim),
            });
        }
        Ok(())
    }

    /// Stacked masked multi-head attention + position-wise FFN, each with a
    /// residual connection; weights shared across the four embedding streams.
    fn encoder_stack(&self, g: &mut Graph, mut x: Var, stream: &str) -> Result<Var> {
        let c = &self.config;
        for l in 0..c.n_layers {
            let e = format!("enc.{l}");
            let wq = g.param(&p(&e, "wq"))?;
            let wk = g.param(&p(&e, "wk"))?;
            let wv = g.param(&p(&e, "wv"))?;
            let wo = g.param(&p(&e, "wo"))?;
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let qh = g.slice_cols(q, h * c.d_k, c.d_k)?;
                let kh = g.slice_cols(k, h * c.d_k, c.d_k)?;
                let vh = g.slice_cols(v, h * c.d_v, c.d_v)?;
                heads.push(g.attention(qh, kh, vh, true)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let att = g.matmul(cat, wo)?;
            let a = g.add(x, att)?;
            let w1 = g.param(&p(&e, "ffn.w1"))?;
            let b1 = g.param(&p(&e, "ffn.b1"))?;
            let w2 = g.param(&p(&e, "ffn.w2"))?;
            let b2 = g.param(&p(&e, "ffn.b2"))?;
            let hdn = g.linear(a, w1, b1)?;
            let hdn = g.relu(hdn);
            let f = g.linear(hdn, w2, b2)?;
            x = g.add(a, f)?;
            g.checked(x, &format!("encoder block {l} ({stream} stream)"))?;
        }
        Ok(x)
    }

    /// Encodes the whole sequence as graph nodes.
    pub fn encode_graph(&self, g: &mut Graph, seq: &NormalizedSequence) -> Result<EncodingVars> {
        self.check_sequence(seq)?;
        let c = &self.config;
        let l = seq.len();
        let c_t = g.constant(temporal_encoding(&seq.times, c.d_model));
        let table = g.param("emb.mark")?;
        let c_k = g.gather_rows(table, seq.marks.clone())?;
        let mut c_all = g.add(c_t, c_k)?;
        let c_x = if c.spatial_dim > 0 {
            let locs = Tensor::from_vec(l, c.spatial_dim, seq.locs.concat())?;
            let xv = g.constant(locs);
            let w = g.param("emb.loc.w")?;
            let b = g.param("emb.loc.b")?;
            let cx = g.linear(xv, w, b)?;
            c_all = g.add(c_all, cx)?;
            Some(cx)
        } else {
            None
        };
        let h = self.encoder_stack(g, c_all, "joint")?;
        let h_t = self.encoder_stack(g, c_t, "time")?;
        let h_k = self.encoder_stack(g, c_k, "mark")?;
        let h_x = match c_x {
            Some(cx) => self.encoder_stack(g, cx, "location")?,
            None => g.constant(Tensor::zeros(l, c.d_model)),
        };
        Ok(EncodingVars { h, h_t, h_x, h_k })
    }

    pub fn encode(&self, seq: &NormalizedSequence) -> Result<HistoryEncoding> {
        let mut g = Graph::new(&self.params);
        let e = self.encode_graph(&mut g, seq)?;
        Ok(HistoryEncoding {
            h: g.value(e.h).clone(),
            h_t: g.value(e.h_t).clone(),
            h_x: g.value(e.h_x).clone(),
            h_k: g.value(e.h_k).clone(),
        })
    }

    /// Per-mark intensities at gaps `tau` (one per row), conditioned on the
    /// encoding rows `rows`. Returns `R x M` intensities with their
    /// derivative in `τ`.
    pub fn intensity_graph(&self, g: &mut Graph, enc: &EncodingVars, rows: &[usize], tau: Dual) -> Result<Dual> {
        let htk = g.add(enc.h_t, enc.h_k)?;
        let mut act: Option<Dual> = None;
        for j in 0..self.config.head_layers {
            let e = format!("int.{j}");
            let wt = g.param(&p(&e, "wt"))?;
            let wh = g.param(&p(&e, "wh"))?;
            let wtk = g.param(&p(&e, "wtk"))?;
            let b = g.param(&p(&e, "b"))?;
            // Terms constant in τ are computed once per event, then gathered.
            let mut ctx = g.matmul(htk, wtk)?;
            if j == 0 {
                let hh = g.matmul(enc.h, wh)?;
                ctx = g.add(ctx, hh)?;
            }
            let ctx = g.add_row(ctx, b)?;
            let ctx = g.gather_rows(ctx, rows.to_vec())?;
            let mut z = g.dual_matmul(tau, wt)?;
            z = g.dual_add(z, Dual::constant(ctx))?;
            if let Some(a) = act {
                let za = g.dual_matmul(a, wh)?;
                z = g.dual_add(z, za)?;
            }
            act = Some(g.dual_relu(z)?);
        }
        let w = g.param("int.out.w")?;
        let b = g.param("int.out.b")?;
        let o = g.dual_matmul(act.expect("head_layers >= 1"), w)?;
        let o = g.dual_add_row(o, b)?;
        let lam = g.dual_softplus(o)?;
        g.checked(lam.val, "intensity head")?;
        Ok(lam)
    }

    /// `ψ_t(τ | k) = ∂τ log λ(τ,k) - Σ_l λ(τ,l)` per row, plus the full
    /// intensity matrix.
    pub fn time_score_graph(&self, g: &mut Graph, enc: &EncodingVars, rows: &[usize], tau: &[f64], marks: &[usize]) -> Result<(Var, Var)> {
        let input = g.dual_input(Tensor::column(tau.to_vec()));
        let lam = self.intensity_graph(g, enc, rows, input)?;
        let dlam = g.tangent(lam);
        let lk = g.pick_cols(lam.val, marks.to_vec())?;
        let dlk = g.pick_cols(dlam, marks.to_vec())?;
        let dlog = g.div(dlk, lk)?;
        let total = g.sum_cols(lam.val);
        let psi = g.sub(dlog, total)?;
        Ok((psi, lam.val))
    }

    /// Conditional spatial score `ψ_x(x | τ, k, history)` per row.
    #[allow(clippy::too_many_arguments)]
    pub fn spatial_score_graph(
        &self,
        g: &mut Graph,
        enc: &EncodingVars,
        rows: &[usize],
        x: Tensor,
        tau: &[f64],
        marks: &[usize],
    ) -> Result<Var> {
        if !self.has_spatial_head() {
            return Err(Error::InvalidConfig("spatial head absent (d = 0)".into()));
        }
        let dm = self.config.d_model;
        let w1c = g.param("sp.w1c")?;
        // Event-level context [h; h_t; h_x; h_k] · W, and mark part separately.
        let w_mark = g.slice_rows_param(w1c, 0, dm)?;
        let w_hist = g.slice_rows_param(w1c, dm, 4 * dm)?;
        let hist = g.concat_cols(&[enc.h, enc.h_t, enc.h_x, enc.h_k])?;
        let ctx_ev = g.matmul(hist, w_hist)?;
        let ctx = g.gather_rows(ctx_ev, rows.to_vec())?;
        let table = g.param("emb.mark")?;
        let memb = g.matmul(table, w_mark)?;
        let mctx = g.gather_rows(memb, marks.to_vec())?;
        let xv = g.constant(x);
        let tv = g.constant(Tensor::column(tau.to_vec()));
        let w1x = g.param("sp.w1x")?;
        let w1t = g.param("sp.w1t")?;
        let b1 = g.param("sp.b1")?;
        let zx = g.matmul(xv, w1x)?;
        let zt = g.matmul(tv, w1t)?;
        let z = g.add(zx, zt)?;
        let z = g.add(z, ctx)?;
        let z = g.add(z, mctx)?;
        let z = g.add_row(z, b1)?;
        let a1 = g.softplus(z);
        let w2 = g.param("sp.w2")?;
        let b2 = g.param("sp.b2")?;
        let z2 = g.linear(a1, w2, b2)?;
        let a2 = g.softplus(z2);
        let w3 = g.param("sp.w3")?;
        let b3 = g.param("sp.b3")?;
        let out = g.linear(a2, w3, b3)?;
        g.checked(out, "spatial head")
    }

    /// Weights of both heads copied out for the fast path.
    pub fn head_weights(&self) -> Result<HeadWeights> {
        let s = &self.params;
        let get = |n: &str| -> Result<Tensor> { Ok(s.by_name(n)?.value.clone()) };
        let mut layers = Vec::with_capacity(self.config.head_layers);
        for j in 0..self.config.head_layers {
            let e = format!("int.{j}");
            layers.push(HeadLayer {
                wt: get(&p(&e, "wt"))?.data,
                wh: get(&p(&e, "wh"))?,
                wtk: get(&p(&e, "wtk"))?,
                b: get(&p(&e, "b"))?.data,
            });
        }
        let spatial = if self.has_spatial_head() {
            let dm = self.config.d_model;
            let w1c = get("sp.w1c")?;
            let table = get("emb.mark")?;
            let dh = self.config.d_hidden;
            // mark part: emb(k) · W1c[0..dm]
            let mut mark_ctx = Tensor::zeros(self.config.num_marks, dh);
            for k in 0..self.config.num_marks {
                for (r, &e) in table.row_slice(k).iter().enumerate() {
                    for c in 0..dh {
                        mark_ctx.data[k * dh + c] += e * w1c.get(r, c);
                    }
                }
            }
            Some(SpatialWeights {
                w1x: get("sp.w1x")?,
                w1t: get("sp.w1t")?.data,
                w1_hist: Tensor::from_vec(4 * dm, dh, w1c.data[dm * dh..].to_vec())?,
                mark_ctx,
                b1: get("sp.b1")?.data,
                w2: get("sp.w2")?,
                b2: get("sp.b2")?.data,
                w3: get("sp.w3")?,
                b3: get("sp.b3")?.data,
            })
        } else {
            None
        };
        Ok(HeadWeights {
            num_marks: self.config.num_marks,
            d_model: self.config.d_model,
            layers,
            out_w: get("int.out.w")?,
            out_b: get("int.out.b")?.data,
            spatial,
        })
    }
}

impl Graph<'_> {
    /// Rows `start..start+len` of a matrix, as a differentiable slice.
    pub(crate) fn slice_rows_param(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx = (start..start + len).collect();
        self.gather_rows(a, idx)
    }
}

#[derive(Debug, Clone)]
struct HeadLayer {
    wt: Vec<f64>,
    wh: Tensor,
    wtk: Tensor,
    b: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SpatialWeights {
    w1x: Tensor,
    w1t: Vec<f64>,
    w1_hist: Tensor,
    mark_ctx: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
    w3: Tensor,
    b3: Vec<f64>,
}

/// Plain-slice copy of the head parameters.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    num_marks: usize,
    d_model: usize,
    layers: Vec<HeadLayer>,
    out_w: Tensor,
    out_b: Vec<f64>,
    spatial: Option<SpatialWeights>,
}

/// `out += x · w` for a row vector `x`.
#[inline]
fn vec_mat_acc(x: &[f64], w: &Tensor, out: &mut [f64]) {
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row_slice(r)) {
            *o += xv * wv;
        }
    }
}

/// Head inputs for one history position, with all τ-independent terms
/// folded in.
#[derive(Debug, Clone)]
pub struct EventContext<'w> {
    w: &'w HeadWeights,
    layer_ctx: Vec<Vec<f64>>,
    spatial_ctx: Option<Vec<f64>>,
}

/// Scratch buffers for [`EventContext::intensity`].
#[derive(Debug, Clone, Default)]
pub struct HeadScratch {
    a: Vec<f64>,
    da: Vec<f64>,
    z: Vec<f64>,
    dz: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl HeadWeights {
    pub fn num_marks(&self) -> usize {
        self.num_marks
    }

    /// Context for predicting the event after encoding row `row`.
    pub fn context<'w>(&'w self, enc: &HistoryEncoding, row: usize) -> EventContext<'w> {
        let dm = self.d_model;
        let h = enc.h.row_slice(row);
        let htk: Vec<f64> = enc
            .h_t
            .row_slice(row)
            .iter()
            .zip(enc.h_k.row_slice(row))
            .map(|(a, b)| a + b)
            .collect();
        let layer_ctx = self
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let mut c = l.b.clone();
                vec_mat_acc(&htk, &l.wtk, &mut c);
                if j == 0 {
                    vec_mat_acc(h, &l.wh, &mut c);
                }
                c
            })
            .collect();
        let spatial_ctx = self.spatial.as_ref().map(|sw| {
            let mut c = sw.b1.clone();
            let hist: Vec<f64> = [&enc.h, &enc.h_t, &enc.h_x, &enc.h_k]
                .iter()
                .flat_map(|t| t.row_slice(row).iter().copied())
                .collect();
            debug_assert_eq!(hist.len(), 4 * dm);
            vec_mat_acc(&hist, &sw.w1_hist, &mut c);
            c
        });
        EventContext {
            w: self,
            layer_ctx,
            spatial_ctx,
        }
    }
}

impl EventContext<'_> {
    /// Fills `lam` and `dlam` (length M) with `λ(τ, ·)` and `∂τ λ(τ, ·)`.
    pub fn intensity(&self, tau: f64, lam: &mut [f64], dlam: &mut [f64], s: &mut HeadScratch) {
        let dm = self.w.d_model;
        s.a.clear();
        s.da.clear();
        for (j, (l, ctx)) in self.w.layers.iter().zip(&self.layer_ctx).enumerate() {
            s.z.clear();
            s.dz.clear();
            s.z.extend(ctx.iter().zip(&l.wt).map(|(c, w)| c + tau * w));
            s.dz.extend_from_slice(&l.wt);
            if j > 0 {
                vec_mat_acc(&s.a, &l.wh, &mut s.z);
                vec_mat_acc(&s.da, &l.wh, &mut s.dz);
            }
            s.a.clear();
            s.da.clear();
            for i in 0..dm {
                if s.z[i] > 0.0 {
                    s.a.push(s.z[i]);
                    s.da.push(s.dz[i]);
                } else {
                    s.a.push(0.0);
                    s.da.push(0.0);
                }
            }
        }
        lam.copy_from_slice(&self.w.out_b);
        dlam.iter_mut().for_each(|v| *v = 0.0);
        vec_mat_acc(&s.a, &self.w.out_w, lam);
        vec_mat_acc(&s.da, &self.w.out_w, dlam);
        for (l, d) in lam.iter_mut().zip(dlam.iter_mut()) {
            *d *= sigmoid(*l);
            *l = softplus(*l);
        }
    }

    /// `ψ_t(τ | k)` from already-evaluated intensities.
    pub fn score_from(lam: &[f64], dlam: &[f64], k: usize) -> f64 {
        dlam[k] / lam[k] - lam.iter().sum::<f64>()
    }

    /// `ψ_x(x | τ, k)`, written into `out` (length d).
    pub fn spatial_score(&self, x: &[f64], tau: f64, k: usize, out: &mut [f64], s: &mut HeadScratch) {
        let sw = self.w.spatial.as_ref().expect("spatial head present");
        let ctx = self.spatial_ctx.as_ref().expect("spatial head present");
        s.s1.clear();
        s.s1.extend(
            ctx.iter()
                .zip(sw.mark_ctx.row_slice(k))
                .zip(&sw.w1t)
                .map(|((c, m), wt)| c + m + tau * wt),
        );
        vec_mat_acc(x, &sw.w1x, &mut s.s1);
        s.s1.iter_mut().for_each(|v| *v = softplus(*v));
        s.s2.clear();
        s.s2.extend_from_slice(&sw.b2);
        vec_mat_acc(&s.s1, &sw.w2, &mut s.s2);
        s.s2.iter_mut().for_each(|v| *v = softplus(*v));
        out.copy_from_slice(&sw.b3);
        vec_mat_acc(&s.s2, &sw.w3, out);
    }
}

/// Convenience wrappers over the fast path for single queries.
impl Model {
    pub fn intensity(&self, enc: &HistoryEncoding, row: usize, tau: f64) -> Result<Vec<f64>> {
        if !tau.is_finite() {
            return Err(Error::NonFinite("intensity input τ".into()));
        }
        let w = self.head_weights()?;
        let ctx = w.context(enc, row);
        let m = self.config.num_marks;
        let (mut lam, mut dlam) = (vec![0.0; m], vec![0.0; m]);
        ctx.intensity(tau, &mut lam, &mut dlam, &mut HeadScratch::default());
        Ok(lam)
    }

    pub fn time_score(&self, enc: &HistoryEncoding, row: usize, tau: f64, k: usize) -> Result<f64> {
        if !tau.is_finite() {
            return Err(Error::NonFinite("time score input τ".into()));
        }
        let w = self.head_weights()?;
        let ctx = w.context(enc, row);
        let m = self.config.num_marks;
        let (mut lam, mut dlam) = (vec![0.0; m], vec![0.0; m]);
        ctx.intensity(tau, &mut lam, &mut dlam, &mut HeadScratch::default());
        let psi = EventContext::score_from(&lam, &dlam, k);
        if !psi.is_finite() {
            return Err(Error::NonFinite("time score".into()));
        }
        Ok(psi)
    }

    pub fn mark_pmf(&self, enc: &HistoryEncoding, row: usize, tau: f64) -> Result<Vec<f64>> {
        let lam = self.intensity(enc, row, tau)?;
        Ok(pmf_from(&lam))
    }

    pub fn spatial_score(&self, enc: &HistoryEncoding, row: usize, x: &[f64], tau: f64, k: usize) -> Result<Vec<f64>> {
        if !self.has_spatial_head() {
            return Err(Error::InvalidConfig("spatial head absent (d = 0)".into()));
        }
        if x.len() != self.config.spatial_dim {
            return Err(Error::Shape {
                op: "spatial_score",
                detail: format!("x has {} entries, d = {}", x.len(), self.config.spatial_dim),
            });
        }
        let w = self.head_weights()?;
        let ctx = w.context(enc, row);
        let mut out = vec![0.0; x.len()];
        ctx.spatial_score(x, tau, k, &mut out, &mut HeadScratch::default());
        Ok(out)
    }
}

/// `λ_k / Σ_l λ_l`.
pub fn pmf_from(lam: &[f64]) -> Vec<f64> {
    let total: f64 = lam.iter().sum();
    lam.iter().map(|l| l / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{grad_check, rel_err};
    use crate::rng::rng_for;
    use rand::Rng as _;

    pub(crate) fn tiny_config(m: usize, d: usize) -> ModelConfig {
        ModelConfig {
            n_heads: 2,
            n_layers: 2,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            d_hidden: 12,
            num_marks: m,
            spatial_dim: d,
            head_layers: 3,
            dropout: 0.0,
        }
    }

    pub(crate) fn random_sequence(l: usize, m: usize, d: usize, seed: u64) -> NormalizedSequence {
        let mut rng = rng_for(seed, &[77]);
        let gaps: Vec<f64> = (0..l).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut acc = 0.0;
        let times = gaps
            .iter()
            .map(|g| {
                acc += g;
                acc
            })
            .collect();
        NormalizedSequence {
            gaps,
            times,
            marks: (0..l).map(|_| rng.random_range(0..m)).collect(),
            locs: (0..l).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        }
    }

    #[test]
    fn earthquake_config_produces_16_dim_encodings() {
        let model = Model::new(ModelConfig::earthquake(3, 2), 1).unwrap();
        let enc = model.encode(&random_sequence(7, 3, 2, 1)).unwrap();
        assert_eq!(enc.h.shape(), (7, 16));
        assert_eq!(enc.h_x.shape(), (7, 16));
    }

    #[test]
    fn encoding_is_causal() {
        let model = Model::new(tiny_config(3, 2), 4).unwrap();
        let seq = random_sequence(6, 3, 2, 2);
        let enc = model.encode(&seq).unwrap();
        let mut other = seq.clone();
        other.gaps[4] = 0.9;
        other.times[4] += 3.0;
        other.times[5] -= 1.0;
        other.marks.swap(4, 5);
        other.locs[5] = vec![5.0, -5.0];
        let enc2 = model.encode(&other).unwrap();
        for t in [(&enc.h, &enc2.h), (&enc.h_t, &enc2.h_t), (&enc.h_x, &enc2.h_x), (&enc.h_k, &enc2.h_k)] {
            assert_eq!(&t.0.data[..4 * 8], &t.1.data[..4 * 8]);
        }
        let short = NormalizedSequence {
            gaps: seq.gaps[..1].to_vec(),
            times: seq.times[..1].to_vec(),
            marks: seq.marks[..1].to_vec(),
            locs: seq.locs[..1].to_vec(),
        };
        assert_eq!(model.encode(&short).unwrap().h.row_slice(0), enc.h.row_slice(0));
    }

    #[test]
    fn tpp_mode_zeroes_location_stream() {
        let model = Model::new(tiny_config(2, 0), 4).unwrap();
        let enc = model.encode(&random_sequence(5, 2, 0, 3)).unwrap();
        assert!(enc.h_x.data.iter().all(|&v| v == 0.0));
        assert!(model.spatial_score(&enc, 0, &[], 0.0, 0).is_err());
    }

    #[test]
    fn intensities_are_positive() {
        let mut rng = rng_for(5, &[]);
        for seed in 0..20 {
            let model = Model::new(tiny_config(3, 2), seed).unwrap();
            let enc = model.encode(&random_sequence(4, 3, 2, seed)).unwrap();
            let w = model.head_weights().unwrap();
            let (mut lam, mut dlam) = (vec![0.0; 3], vec![0.0; 3]);
            let mut s = HeadScratch::default();
            for _ in 0..500 {
                let ctx = w.context(&enc, rng.random_range(0..4));
                ctx.intensity(rng.random_range(-20.0..20.0), &mut lam, &mut dlam, &mut s);
                assert!(lam.iter().all(|&l| l > 0.0), "{lam:?}");
            }
        }
    }

    fn zero_heads(model: &mut Model) {
        for p in model.params.iter_mut() {
            if p.name.starts_with("int.") || p.name.starts_with("sp.w3") || p.name.starts_with("sp.b3") {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn zero_head_gives_ln2_and_constant_score() {
        let mut model = Model::new(tiny_config(3, 2), 2).unwrap();
        zero_heads(&mut model);
        let enc = model.encode(&random_sequence(3, 3, 2, 1)).unwrap();
        let lam = model.intensity(&enc, 1, 0.7).unwrap();
        assert!(lam.iter().all(|&l| (l - std::f64::consts::LN_2).abs() < 1e-15));
        let psi = model.time_score(&enc, 1, 0.7, 2).unwrap();
        assert!((psi + 3.0 * std::f64::consts::LN_2).abs() <= 1e-12);
        let pmf = model.mark_pmf(&enc, 1, 0.7).unwrap();
        assert!(pmf.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(model.spatial_score(&enc, 1, &[0.3, 0.1], 0.2, 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_intensity_score_identity() {
        // W_t = 0 everywhere: λ does not depend on τ, so ψ = -Σλ exactly.
        let mut model = Model::new(tiny_config(4, 0), 8).unwrap();
        for j in 0..3 {
            model.params.by_name_mut(&format!("int.{j}.wt")).unwrap().value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        model.params.by_name_mut("int.out.w").unwrap().value.data.iter_mut().for_each(|v| *v = 0.0);
        model.params.by_name_mut("int.out.b").unwrap().value.data.iter_mut().for_each(|v| *v = 0.4);
        let enc = model.encode(&random_sequence(3, 4, 0, 1)).unwrap();
        let c = softplus(0.4);
        for tau in [-3.0, 0.0, 2.5] {
            let psi = model.time_score(&enc, 2, tau, 1).unwrap();
            assert!((psi + 4.0 * c).abs() <= 1e-12, "{psi}");
        }
    }

    #[test]
    fn pmf_of_known_intensities() {
        assert_eq!(pmf_from(&[1.0, 3.0]), vec![0.25, 0.75]);
        let mut rng = rng_for(3, &[]);
        for _ in 0..100 {
            let lam: Vec<f64> = (0..5).map(|_| rng.random_range(1e-3..10.0)).collect();
            assert!((pmf_from(&lam).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn intensity_is_continuous_in_tau() {
        let model = Model::new(tiny_config(3, 0), 9).unwrap();
        let enc = model.encode(&random_sequence(5, 3, 0, 9)).unwrap();
        let mut rng = rng_for(9, &[1]);
        for _ in 0..200 {
            let tau = rng.random_range(-5.0..5.0);
            let a = model.intensity(&enc, 3, tau).unwrap();
            let b = model.intensity(&enc, 3, tau + 1e-9).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
        }
    }

    #[test]
    fn time_score_matches_log_intensity_differences() {
        for seed in 0..10 {
            let model = Model::new(tiny_config(3, 2), seed).unwrap();
            let enc = model.encode(&random_sequence(5, 3, 2, seed)).unwrap();
            let tau = -0.3 + 0.17 * seed as f64;
            let eps = 1e-5;
            for k in 0..3 {
                let psi = model.time_score(&enc, 4, tau, k).unwrap();
                let lp = model.intensity(&enc, 4, tau + eps).unwrap()[k].ln();
                let lm = model.intensity(&enc, 4, tau - eps).unwrap()[k].ln();
                let total: f64 = model.intensity(&enc, 4, tau).unwrap().iter().sum();
                let fd = (lp - lm) / (2.0 * eps) - total;
                assert!(rel_err(psi, fd) <= 1e-5, "seed {seed} k {k}: {psi} vs {fd}");
            }
        }
    }

    #[test]
    fn graph_and_fast_paths_agree() {
        let model = Model::new(tiny_config(3, 2), 21).unwrap();
        let seq = random_sequence(6, 3, 2, 21);
        let enc = model.encode(&seq).unwrap();
        let mut g = Graph::new(&model.params);
        let ev = model.encode_graph(&mut g, &seq).unwrap();
        let rows = vec![0, 2, 5, 5];
        let taus = vec![0.1, -1.2, 0.8, 2.0];
        let marks = vec![2, 0, 1, 1];
        let (psi, lam) = model.time_score_graph(&mut g, &ev, &rows, &taus, &marks).unwrap();
        let x = Tensor::from_vec(4, 2, vec![0.1, 0.2, -1.0, 0.5, 0.0, 0.0, 2.0, -2.0]).unwrap();
        let sp = model.spatial_score_graph(&mut g, &ev, &rows, x.clone(), &taus, &marks).unwrap();
        for r in 0..4 {
            let fast = model.time_score(&enc, rows[r], taus[r], marks[r]).unwrap();
            assert!((g.value(psi).data[r] - fast).abs() <= 1e-12 * fast.abs().max(1.0));
            let fl = model.intensity(&enc, rows[r], taus[r]).unwrap();
            for k in 0..3 {
                assert!((g.value(lam).get(r, k) - fl[k]).abs() <= 1e-12);
            }
            let fs = model.spatial_score(&enc, rows[r], x.row_slice(r), taus[r], marks[r]).unwrap();
            for j in 0..2 {
                assert!((g.value(sp).get(r, j) - fs[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn head_gradients_pass_grad_check() {
        let model = Model::new(tiny_config(3, 2), 31).unwrap();
        let seq = random_sequence(5, 3, 2, 31);
        let rows = vec![0, 1, 3, 4];
        let taus = vec![0.3, -0.4, 1.1, 0.05];
        let marks = vec![1, 2, 0, 1];
        let r = grad_check(&model.params, 1e-5, |g| {
            let ev = model.encode_graph(g, &seq)?;
            let (psi, lam) = model.time_score_graph(g, &ev, &rows, &taus, &marks)?;
            let x = Tensor::from_vec(4, 2, vec![0.5, -0.1, 0.2, 0.3, -1.0, 1.0, 0.0, 0.7])?;
            let sp = model.spatial_score_graph(g, &ev, &rows, x, &taus, &marks)?;
            let a = g.sum(psi);
            let b = g.log(lam);
            let b = g.sum(b);
            let c = g.square(sp);
            let c = g.sum(c);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
