//! Hypergraph transformer encoder.
//!
//! The stack is a sequence of units, each a spatial block followed by a
//! temporally gated block. Every block fuses two hypergraph convolutions
//! into hyperedge features, then attends over joints with three score
//! terms: query-key, query-hyperedge-feature and query-bone-offset. After
//! the first group of units the in-phase quantizer replaces the second
//! convolution's hypergraph with per-sample learned hyperedges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{Adjacency, Hypergraph};
use crate::nn::{init_weight, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{Tensor, Var};
use crate::quantizer::{InPhaseHypergraph, InPhaseQuantizer, QuantMode, QuantizerOutput};

/// Threshold below which a literal ratio-normalised attention row is
/// rejected.
pub const ATTENTION_DENOMINATOR_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Row softmax of the aggregated scores.
    Softmax,
    /// Scores divided by their row sum.
    Literal,
}

/// Which score terms enter the aggregated attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTerms {
    pub joint: bool,
    pub hyperedge: bool,
    pub bone: bool,
}

impl Default for ScoreTerms {
    fn default() -> Self {
        ScoreTerms {
            joint: true,
            hyperedge: true,
            bone: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub units: usize,
    /// Units before and after the quantizer.
    pub split: [usize; 2],
    pub hidden: usize,
    pub heads: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub trainable_lambdas: bool,
    pub attention_mode: AttentionMode,
    pub scores: ScoreTerms,
    pub temporal_attention: bool,
    /// Frame-count reduction inside the temporal gate.
    pub temporal_reduction: usize,
    pub inphase: bool,
    /// 1-based units after which the frame count is halved.
    pub pool_after: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            units: 5,
            split: [2, 3],
            hidden: 216,
            heads: 9,
            lambda1: 1.0,
            lambda2: 1.0,
            trainable_lambdas: false,
            attention_mode: AttentionMode::Softmax,
            scores: ScoreTerms::default(),
            temporal_attention: true,
            temporal_reduction: 4,
            inphase: true,
            pool_after: vec![2, 4],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.units == 0 || self.split[0] + self.split[1] != self.units {
            return bad(format!("split {:?} must sum to {} units", self.split, self.units));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if !(self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return bad("lambda coefficients must be finite".into());
        }
        if !(self.scores.joint || self.scores.hyperedge || self.scores.bone) {
            return bad("at least one attention score term must be enabled".into());
        }
        if self.temporal_reduction == 0 {
            return bad("temporal_reduction must be >= 1".into());
        }
        if let Some(&u) = self.pool_after.iter().find(|&&u| u == 0 || u > self.units) {
            return bad(format!("pool_after entry {u} outside 1..={}", self.units));
        }
        let factor = 1usize << self.pool_after.len();
        if frames == 0 || !frames.is_multiple_of(factor) {
            return bad(format!("frame count {frames} must be a positive multiple of {factor}"));
        }
        Ok(())
    }

    /// Frame count seen by 0-based unit `u`.
    pub fn frames_at(&self, frames: usize, u: usize) -> usize {
        frames >> self.pool_after.iter().filter(|&&p| p <= u).count()
    }
}

/// Fixed or learned mixing coefficient.
#[derive(Clone, Copy)]
pub enum Coef<'t> {
    Fixed(f64),
    Learned(Var<'t>),
}

impl<'t> Coef<'t> {
    fn apply(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Coef::Fixed(c) => Ok(x.scale(c)),
            Coef::Learned(c) => x.scale_by(c),
        }
    }
}

/// Source of the second hypergraph in the feature fusion.
#[derive(Clone, Copy)]
pub enum InPhaseSource<'a> {
    /// Term dropped.
    Off,
    /// Before the quantizer the in-phase hypergraph is the out-phase one.
    SameAsOut,
    /// One hypergraph per sample; each covers `B / len` consecutive frames.
    PerSample(&'a [Hypergraph]),
}

/// Stacked per-frame propagation matrices, `[B, V, V]`.
fn propagation_stack(graphs: &[Hypergraph], frames: usize) -> Result<Tensor> {
    let v = graphs.first().map_or(0, Hypergraph::nodes);
    let mut data = Vec::with_capacity(graphs.len() * frames * v * v);
    for g in graphs {
        let prop = g.propagation()?;
        for _ in 0..frames {
            data.extend_from_slice(prop.data());
        }
    }
    Tensor::new(vec![graphs.len() * frames, v, v], data)
}

/// `λ₁·hyperconv(x, out) + λ₂·hyperconv(x, in)` on `x` of shape `[B, V, C]`
/// with a shared filter `theta`.
pub fn fuse_hyperedge_features<'t>(
    x: Var<'t>,
    out_graph: &Hypergraph,
    in_graph: InPhaseSource<'_>,
    theta: Var<'t>,
    lambdas: (Coef<'t>, Coef<'t>),
) -> Result<Var<'t>> {
    let shape = x.shape();
    let [b, v, _] = shape[..] else {
        return Err(Error::dim("fuse_hyperedge_features", &shape, &[3]));
    };
    if v != out_graph.nodes() {
        return Err(Error::dim("fuse_hyperedge_features", &shape, &[out_graph.nodes()]));
    }
    let tape = x.tape();
    let projected = x.matmul(theta)?;
    let out_term = tape.constant(out_graph.propagation()?).matmul(projected)?;
    let first = lambdas.0.apply(out_term)?;
    match in_graph {
        InPhaseSource::Off => Ok(first),
        InPhaseSource::SameAsOut => first.add(lambdas.1.apply(out_term)?),
        InPhaseSource::PerSample(graphs) => {
            if graphs.is_empty() || b % graphs.len() != 0 {
                return Err(Error::dim("fuse_hyperedge_features", &shape, &[graphs.len()]));
            }
            if let Some(g) = graphs.iter().find(|g| g.nodes() != v) {
                return Err(Error::dim("fuse_hyperedge_features", &shape, &[g.nodes()]));
            }
            let stack = propagation_stack(graphs, b / graphs.len())?;
            let in_term = tape.constant(stack).matmul(projected)?;
            first.add(lambdas.1.apply(in_term)?)
        }
    }
}

/// Row-normalises `scores` (`[R, V, V]`).
///
/// Literal mode divides by the row sum and fails on a near-zero sum,
/// reporting `row / rows_per_sample` as the sample index.
pub fn normalize_scores<'t>(scores: Var<'t>, mode: AttentionMode, rows_per_sample: usize) -> Result<Var<'t>> {
    match mode {
        AttentionMode::Softmax => Ok(scores.softmax_rows()),
        AttentionMode::Literal => {
            let shape = scores.shape();
            let v = *shape.last().unwrap();
            let sums = scores.sum_axis(shape.len() - 1)?;
            let bad = sums.with_value(|s| {
                s.iter()
                    .position(|r| r.abs() < ATTENTION_DENOMINATOR_EPS)
                    .map(|i| (i, s[i]))
            });
            if let Some((row, row_sum)) = bad {
                return Err(Error::DegenerateAttention {
                    sample: row / rows_per_sample.max(1),
                    row_sum,
                });
            }
            scores.div(sums.expand(shape.len() - 1, v)?)
        }
    }
}

/// Single-head attention with explicit bone features.
///
/// `q`, `k`, `v` and `hyperedge` are `[V, d]`; `bones` is `[V, V, d]`.
/// Scores are `q·kᵀ + q·hyperedgeᵀ + (q_i·bones_ij)` scaled by `1/√d`.
pub fn attention_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    hyperedge: Var<'t>,
    bones: Var<'t>,
    terms: ScoreTerms,
    mode: AttentionMode,
) -> Result<Var<'t>> {
    let [n, d] = q.shape()[..] else {
        return Err(Error::dim("attention_head", &q.shape(), &[2]));
    };
    let mut parts = Vec::new();
    if terms.joint {
        parts.push(q.matmul(k.transpose()?)?);
    }
    if terms.hyperedge {
        parts.push(q.matmul(hyperedge.transpose()?)?);
    }
    if terms.bone {
        let per_row = q.reshape(&[n, 1, d])?.matmul(bones.transpose()?)?;
        parts.push(per_row.reshape(&[n, n])?);
    }
    let scores = sum_terms(parts)?.scale(1.0 / (d as f64).sqrt());
    let weights = normalize_scores(scores.reshape(&[1, n, n])?, mode, n)?;
    weights.reshape(&[n, n])?.matmul(v)
}

fn sum_terms(parts: Vec<Var<'_>>) -> Result<Var<'_>> {
    let mut it = parts.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Argument("no attention score terms enabled".into()))?;
    it.try_fold(first, |acc, p| acc.add(p))
}

/// Squeeze-excitation over frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalGate {
    pub reduce: Linear,
    pub expand: Linear,
}

impl TemporalGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        frames: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let squeezed = (frames / reduction).max(1);
        TemporalGate {
            reduce: Linear::new(
                store,
                &format!("{name}.reduce"),
                frames,
                squeezed,
                true,
                2f64.sqrt(),
                rng,
            ),
            expand: Linear::new(store, &format!("{name}.expand"), squeezed, frames, true, 1.0, rng),
        }
    }
}

/// `x + x ⊙ w` with per-frame weights `w ∈ (0,1)` from the `(V, C)`-pooled
/// frame means. `x` is `[S, T, V, C]`.
pub fn temporal_attention<'t>(p: &Bound<'t>, gate: &TemporalGate, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let [s, t, v, c] = shape[..] else {
        return Err(Error::dim("temporal_attention", &shape, &[4]));
    };
    let flat = x.reshape(&[s, t, v * c])?;
    let pooled = flat.mean_axis(2)?;
    let weights = gate
        .expand
        .forward(p, gate.reduce.forward(p, pooled)?.relu())?
        .sigmoid();
    flat.add(flat.mul(weights.expand(2, v * c)?)?)?.reshape(&shape)
}

/// One hypergraph transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub theta: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `[3, C]` projection of joint offsets, split across heads.
    pub bone: ParamId,
    pub gate: Option<TemporalGate>,
    /// Applied to the block input before every projection; the residual
    /// path stays unnormalised.
    pub norm: LayerNorm,
}

/// Inputs shared by every block of one forward pass.
pub struct BlockContext<'a, 't> {
    pub params: &'a Bound<'t>,
    pub out_graph: &'a Hypergraph,
    pub in_graph: InPhaseSource<'a>,
    /// Joint coordinates at the block's frame rate, `[S, T, V, 3]`.
    pub coords: &'a Tensor,
    pub lambdas: (Coef<'t>, Coef<'t>),
    pub heads: usize,
    pub mode: AttentionMode,
    pub terms: ScoreTerms,
    pub temporal: bool,
    /// Persons per batch sample, to report degenerate rows by sample.
    pub persons: usize,
}

fn split_heads<'t>(x: Var<'t>, b: usize, v: usize, h: usize) -> Result<Var<'t>> {
    let d = x.shape()[2] / h;
    x.reshape(&[b, v, h, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * h, v, d])
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        gate: Option<TemporalGate>,
        value_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = |suffix: &str, rows: usize, gain: f64| {
            store.add(format!("{name}.{suffix}"), init_weight(rows, channels, gain, rng))
        };
        Block {
            theta: w("theta", channels, 1.0),
            query: w("query", channels, 1.0),
            key: w("key", channels, 1.0),
            value: w("value", channels, value_gain),
            bone: w("bone", 3, 1.0),
            gate,
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels),
        }
    }

    /// `x` is `[S, T, V, C]`; the output has the same shape.
    pub fn forward<'t>(&self, ctx: &BlockContext<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let p = ctx.params;
        let shape = x.shape();
        let [s, t, v, c] = shape[..] else {
            return Err(Error::dim("block", &shape, &[4]));
        };
        if ctx.coords.shape() != [s, t, v, 3] {
            return Err(Error::dim("block coordinates", ctx.coords.shape(), &[s, t, v, 3]));
        }
        let (b, h) = (s * t, ctx.heads);
        let d = c / h;
        let tape = x.tape();
        let residual = x.reshape(&[b, v, c])?;
        let flat = self.norm.forward(p, residual)?;

        let mut features = fuse_hyperedge_features(flat, ctx.out_graph, ctx.in_graph, p.get(self.theta), ctx.lambdas)?;
        if let (Some(gate), true) = (&self.gate, ctx.temporal) {
            if t > 1 {
                features = temporal_attention(p, gate, features.reshape(&[s, t, v, c])?)?.reshape(&[b, v, c])?;
            }
        }

        let q = split_heads(flat.matmul(p.get(self.query))?, b, v, h)?;
        let mut parts = Vec::new();
        if ctx.terms.joint {
            let k = split_heads(flat.matmul(p.get(self.key))?, b, v, h)?;
            parts.push(q.matmul(k.transpose()?)?);
        }
        if ctx.terms.hyperedge {
            parts.push(q.matmul(split_heads(features, b, v, h)?.transpose()?)?);
        }
        if ctx.terms.bone {
            // q_i·((x_i − x_j)W) = r_i·x_i − r_i·x_j with r_i = q_i Wᵀ per head
            let per_head_w = p.get(self.bone).reshape(&[3, h, d])?.permute(&[1, 2, 0])?;
            let q_by_head = q
                .reshape(&[b, h, v, d])?
                .permute(&[1, 0, 2, 3])?
                .reshape(&[h, b * v, d])?;
            let r = q_by_head
                .matmul(per_head_w)?
                .reshape(&[h, b, v, 3])?
                .permute(&[1, 0, 2, 3])?
                .reshape(&[b * h, v, 3])?;
            let xyz = tape
                .constant(ctx.coords.clone())
                .reshape(&[b, v, 3])?
                .expand(1, h)?
                .reshape(&[b * h, v, 3])?;
            let own = r.mul(xyz)?.sum_axis(2)?.expand(2, v)?;
            parts.push(own.sub(r.matmul(xyz.transpose()?)?)?);
        }
        let scores = sum_terms(parts)?.scale(1.0 / (d as f64).sqrt());
        let weights = normalize_scores(scores, ctx.mode, t * h * v * ctx.persons.max(1))?;
        let values = split_heads(flat.matmul(p.get(self.value))?, b, v, h)?;
        let attended = weights
            .matmul(values)?
            .reshape(&[b, h, v, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, v, c])?;
        attended.add(residual)?.reshape(&shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub spatial: Block,
    pub temporal: Block,
}

/// Halves the frame axis of `[S, T, V, C]` by averaging frame pairs.
pub fn pool_frames<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let [s, t, v, c] = shape[..] else {
        return Err(Error::dim("pool_frames", &shape, &[4]));
    };
    x.reshape(&[s, t / 2, 2, v * c])?
        .mean_axis(2)?
        .reshape(&[s, t / 2, v, c])
}

/// Same pooling on a plain tensor.
pub fn pool_frames_tensor(x: &Tensor) -> Tensor {
    let sh = x.shape();
    let (s, t, inner) = (sh[0], sh[1], sh[2..].iter().product::<usize>());
    let mut out = Vec::with_capacity(s * (t / 2) * inner);
    for si in 0..s {
        for ti in 0..t / 2 {
            let a = &x.data()[(si * t + 2 * ti) * inner..(si * t + 2 * ti + 1) * inner];
            let b = &x.data()[(si * t + 2 * ti + 1) * inner..(si * t + 2 * ti + 2) * inner];
            out.extend(a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)));
        }
    }
    let mut shape = sh.to_vec();
    shape[1] = t / 2;
    Tensor::new(shape, out).expect("pooled shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: Linear,
    pub units: Vec<Unit>,
    pub lambdas: Option<(ParamId, ParamId)>,
    pub output_norm: LayerNorm,
}

pub struct EncoderOutput<'t> {
    /// `[S, T', V, C']`.
    pub encoded: Var<'t>,
    pub quantizer: Option<QuantizerOutput<'t>>,
    pub inphase: Option<InPhaseHypergraph>,
}

/// Everything the encoder reads besides its own parameters.
pub struct EncoderInput<'a> {
    /// Centred joint coordinates `[S, T, V, 3]`.
    pub coords: &'a Tensor,
    pub out_graph: &'a Hypergraph,
    pub adjacency: &'a Adjacency,
    pub quantizer: &'a InPhaseQuantizer,
    pub store: &'a ParamStore,
    pub quant_mode: QuantMode<'a>,
    pub persons: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        in_channels: usize,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(frames)?;
        let c = config.hidden;
        let embed = Linear::new(store, "embed", in_channels, c, true, 1.0, rng);
        // the centred root joint embeds to the bias alone; a constant row
        // would sit where the block norm is singular
        if let Some(bias) = embed.bias {
            *store.get_mut(bias) = Tensor::randn(&[c], 0.5, rng);
        }
        let value_gain = 1.0 / ((2 * config.units) as f64).sqrt();
        let units = (0..config.units)
            .map(|u| {
                let t = config.frames_at(frames, u);
                let spatial = Block::new(store, &format!("unit{u}.spatial"), c, None, value_gain, rng);
                let gate = TemporalGate::new(
                    store,
                    &format!("unit{u}.temporal.gate"),
                    t,
                    config.temporal_reduction,
                    rng,
                );
                let temporal = Block::new(store, &format!("unit{u}.temporal"), c, Some(gate), value_gain, rng);
                Unit { spatial, temporal }
            })
            .collect();
        let lambdas = config.trainable_lambdas.then(|| {
            (
                store.add("lambda1", Tensor::new(vec![1], vec![config.lambda1]).unwrap()),
                store.add("lambda2", Tensor::new(vec![1], vec![config.lambda2]).unwrap()),
            )
        });
        let output_norm = LayerNorm::new(store, "output_norm", c);
        Ok(Encoder {
            config,
            embed,
            units,
            lambdas,
            output_norm,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, input: &EncoderInput<'_>) -> Result<EncoderOutput<'t>> {
        let cfg = &self.config;
        let shape = input.coords.shape();
        if shape.len() != 4 || shape[2] != input.out_graph.nodes() {
            return Err(Error::dim("encoder input", shape, &[input.out_graph.nodes()]));
        }
        let tape = p
            .vars()
            .first()
            .map(|v| v.tape())
            .ok_or_else(|| Error::Argument("no parameters".into()))?;
        let lambdas = match self.lambdas {
            Some((a, b)) => (Coef::Learned(p.get(a)), Coef::Learned(p.get(b))),
            None => (Coef::Fixed(cfg.lambda1), Coef::Fixed(cfg.lambda2)),
        };
        let mut coords = input.coords.clone();
        let mut x = self.embed.forward(p, tape.constant(coords.clone()))?;
        let mut quantizer = None;
        let mut inphase: Option<InPhaseHypergraph> = None;
        for (u, unit) in self.units.iter().enumerate() {
            if u == cfg.split[0] && cfg.inphase {
                let s = x.shape();
                let pooled = x.mean_axis(1)?;
                let out = input.quantizer.forward(p, input.adjacency, pooled, input.quant_mode)?;
                inphase = Some(
                    input
                        .quantizer
                        .hypergraphs(input.store, &out.quantized.assignments, s[0], s[2])?,
                );
                quantizer = Some(out);
            }
            let in_graph = match (&inphase, cfg.inphase) {
                (_, false) => InPhaseSource::Off,
                (None, true) => InPhaseSource::SameAsOut,
                (Some(g), true) => InPhaseSource::PerSample(&g.graphs),
            };
            let ctx = BlockContext {
                params: p,
                out_graph: input.out_graph,
                in_graph,
                coords: &coords,
                lambdas,
                heads: cfg.heads,
                mode: cfg.attention_mode,
                terms: cfg.scores,
                temporal: cfg.temporal_attention,
                persons: input.persons,
            };
            x = unit.spatial.forward(&ctx, x)?;
            x = unit.temporal.forward(&ctx, x)?;
            if cfg.pool_after.contains(&(u + 1)) {
                x = pool_frames(x)?;
                coords = pool_frames_tensor(&coords);
            }
        }
        if quantizer.is_none() && cfg.inphase && cfg.split[0] == cfg.units {
            // quantizer placed after the last unit
            let s = x.shape();
            let out = input
                .quantizer
                .forward(p, input.adjacency, x.mean_axis(1)?, input.quant_mode)?;
            inphase = Some(
                input
                    .quantizer
                    .hypergraphs(input.store, &out.quantized.assignments, s[0], s[2])?,
            );
            quantizer = Some(out);
        }
        Ok(EncoderOutput {
            encoded: self.output_norm.forward(p, x)?,
            quantizer,
            inphase,
        })
    }
}

#[cfg(test)]
mod tests;
