//! Full network assembly, the training step and the persistent out-phase
//! hypergraph.

mod checkpoint;
mod gradcheck;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    gradcheck_model, toy_batch, toy_model_config, GradcheckReport, GroupReport, GRADCHECK_EPS, GRADCHECK_TOLERANCE,
};
pub use optim::{lr_schedule, sgd_update, OptimConfig};
pub use train::{
    evaluate, run_training, train_epoch, EpochMetrics, EvalMetrics, TrainOptions, TrainSummary, METRICS_HEADER,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_decoder::{fuse_residual, generate_outphase, HyperedgeAttention, HypergraphDecoder};
use crate::data::{Layout, SkeletonBatch};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::losses::{cross_entropy, reconstruction, total_loss, Betas, LossBundle};
use crate::nn::{Bound, Linear, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::quantizer::{InPhaseQuantizer, QuantFreeze, QuantMode};

/// When a freshly generated out-phase hypergraph replaces the current one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateCadence {
    #[default]
    PerBatch,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layout: Layout,
    pub classes: usize,
    pub frames: usize,
    pub in_channels: usize,
    pub encoder: EncoderConfig,
    pub hyperedges: usize,
    pub low_dim: usize,
    pub alpha: f64,
    /// Decoder widths between the encoder width and `low_dim`.
    pub decoder_hidden: Vec<usize>,
    /// Decoder widths between `low_dim` and the coordinate output.
    pub decoder_tail: Vec<usize>,
    /// Regenerate the out-phase hypergraph by clustering during training.
    pub outphase_update: bool,
    pub hypergraph_update: UpdateCadence,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layout: Layout::Nwucla20,
            classes: 10,
            frames: 64,
            in_channels: 3,
            encoder: EncoderConfig::default(),
            hyperedges: 5,
            low_dim: 8,
            alpha: 0.2,
            decoder_hidden: vec![128, 64],
            decoder_tail: vec![32],
            outphase_update: true,
            hypergraph_update: UpdateCadence::PerBatch,
        }
    }
}

impl ModelConfig {
    pub fn joints(&self) -> usize {
        self.layout.joints()
    }

    /// Width schedule shared by the decoder and the quantizer stack, and the
    /// index of the low-dimensional layer.
    pub fn decoder_widths(&self) -> (Vec<usize>, usize) {
        let mut w = vec![self.encoder.hidden];
        w.extend(&self.decoder_hidden);
        w.push(self.low_dim);
        let tap = w.len() - 1;
        w.extend(&self.decoder_tail);
        w.push(self.in_channels);
        (w, tap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        self.encoder.validate(self.frames)?;
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.in_channels != 3 {
            return bad(format!("in_channels must be 3 (x, y, z), got {}", self.in_channels));
        }
        if self.hyperedges < 2 || self.hyperedges > self.joints() {
            return bad(format!(
                "hyperedges must lie in 2..={}, got {}",
                self.joints(),
                self.hyperedges
            ));
        }
        if self.low_dim == 0 || self.decoder_hidden.contains(&0) || self.decoder_tail.contains(&0) {
            return bad("decoder widths must be positive".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        Ok(())
    }
}

/// Layer handles into a [`ParamStore`]. Rebuilt deterministically from the
/// config, so checkpoints only need the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub encoder: Encoder,
    pub quantizer: InPhaseQuantizer,
    pub han: HyperedgeAttention,
    pub decoder: HypergraphDecoder,
    pub classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
    /// Momentum buffers, one per parameter.
    pub velocity: Vec<Tensor>,
    /// Hypergraph used by the next forward pass.
    pub outphase: Hypergraph,
    /// Generated hypergraph awaiting installation at epoch end.
    pub pending: Option<Hypergraph>,
    pub iteration: u64,
    pub epoch: usize,
    pub seed: u64,
}

/// Independent stream seed from a base seed, a purpose tag and an index.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_HYPERGRAPH: u64 = 2;
const STREAM_CLUSTER: u64 = 3;
pub(crate) const STREAM_SHUFFLE: u64 = 4;

pub struct ForwardOutput<'t> {
    /// `[N, classes]` class probabilities, person-averaged logits through softmax.
    pub probs: Var<'t>,
    /// `[N, classes]` person-averaged logits.
    pub logits: Tensor,
    /// Quantizer-branch reconstruction `[S, V, 3]`, absent when in-phase is off.
    pub recon1: Option<Tensor>,
    /// Decoder reconstruction `[S, V, 3]`.
    pub recon2: Tensor,
    pub loss: Var<'t>,
    pub losses: LossBundle,
    /// Only produced by training-mode passes with out-phase updates on.
    pub next_hypergraph: Option<Hypergraph>,
    /// `[N, C]` pooled features.
    pub embeddings: Tensor,
    /// `[S, V]` per-joint attention.
    pub attention: Tensor,
    pub quant_freeze: Option<QuantFreeze>,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 0));
        let mut params = ParamStore::new();
        let v = config.joints();
        let c = config.encoder.hidden;
        let encoder = Encoder::new(
            &mut params,
            config.encoder.clone(),
            config.in_channels,
            config.frames,
            &mut rng,
        )?;
        let (widths, tap) = config.decoder_widths();
        let quantizer = InPhaseQuantizer::new(&mut params, &widths, tap, config.hyperedges, &mut rng);
        let han = HyperedgeAttention::new(&mut params, c, v, &mut rng);
        let decoder = HypergraphDecoder::new(&mut params, &widths, tap, &mut rng);
        let classifier = Linear::new(&mut params, "classifier", c, config.classes, true, 1.0, &mut rng);
        let outphase = Hypergraph::new_random(v, config.hyperedges, derive_seed(seed, STREAM_HYPERGRAPH, 0))?;
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(ModelState {
            config,
            arch: Architecture {
                encoder,
                quantizer,
                han,
                decoder,
                classifier,
            },
            params,
            velocity,
            outphase,
            pending: None,
            iteration: 0,
            epoch: 0,
            seed,
        })
    }

    /// Runs the network on `batch`. Training mode additionally clusters the
    /// decoder features into the next out-phase hypergraph; state is never
    /// modified here.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &SkeletonBatch,
        betas: Betas,
        train: bool,
        quant_mode: QuantMode<'_>,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.config;
        let (n, m, v, t) = (batch.samples(), batch.persons(), batch.joints(), batch.frames());
        if v != cfg.joints() || t != cfg.frames || batch.x.shape()[4] != cfg.in_channels {
            return Err(Error::dim(
                "model input",
                batch.x.shape(),
                &[n, m, cfg.joints(), cfg.frames, cfg.in_channels],
            ));
        }
        let s = n * m;
        let coords = tape
            .constant(batch.x.clone())
            .reshape(&[s, v, t, cfg.in_channels])?
            .permute(&[0, 2, 1, 3])?
            .value();
        let input = EncoderInput {
            coords: &coords,
            out_graph: &self.outphase,
            adjacency: &batch.adjacency,
            quantizer: &self.arch.quantizer,
            store: &self.params,
            quant_mode,
            persons: m,
        };
        let enc = self.arch.encoder.forward(p, &input)?;
        let han = self.arch.han.forward(p, enc.encoded)?;
        let fused = fuse_residual(enc.encoded, han.features, cfg.alpha)?;
        let pooled = fused.mean_axis(1)?;
        let dec = self.arch.decoder.forward(p, &batch.adjacency, pooled)?;

        let per_person = pooled.mean_axis(1)?;
        let c = cfg.encoder.hidden;
        let embeddings = per_person.reshape(&[n, m, c])?.mean_axis(1)?.value();
        let logits = self
            .arch
            .classifier
            .forward(p, per_person)?
            .reshape(&[n, m, cfg.classes])?
            .mean_axis(1)?;
        let probs = logits.softmax_rows();

        let target = tape.constant(coords).mean_axis(1)?;
        let ce = cross_entropy(probs, &batch.labels)?;
        let rec2 = reconstruction(target, dec.reconstruction)?;
        let zero = || tape.constant(Tensor::scalar(0.0));
        let (rec1, quant, recon1, freeze) = match &enc.quantizer {
            Some(q) => (
                reconstruction(target, q.reconstruction)?,
                q.quantized.loss,
                Some(q.reconstruction.value()),
                Some(q.quantized.freeze.clone()),
            ),
            None => (zero(), zero(), None, None),
        };
        let (loss, losses) = total_loss(ce, rec1, rec2, quant, betas)?;

        let attention = han.attention.value();
        let next_hypergraph = if train && cfg.outphase_update {
            let seed = derive_seed(self.seed, STREAM_CLUSTER, self.iteration);
            Some(generate_outphase(
                &attention,
                &dec.low_dim.value(),
                cfg.hyperedges,
                seed,
            )?)
        } else {
            None
        };
        Ok(ForwardOutput {
            probs,
            logits: logits.value(),
            recon1,
            recon2: dec.reconstruction.value(),
            loss,
            losses,
            next_hypergraph,
            embeddings,
            attention,
            quant_freeze: freeze,
        })
    }

    /// Inference-mode pass returning `(probabilities, embeddings, losses)`.
    pub fn predict(&self, batch: &SkeletonBatch, betas: Betas) -> Result<(Tensor, Tensor, LossBundle)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&tape, &p, batch, betas, false, QuantMode::Live)?;
        Ok((out.probs.value(), out.embeddings, out.losses))
    }

    /// One optimisation step: backward, SGD update, hypergraph installation.
    pub fn train_step(
        &mut self,
        batch: &SkeletonBatch,
        lr: f64,
        optim: &OptimConfig,
        betas: Betas,
    ) -> Result<LossBundle> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&tape, &p, batch, betas, true, QuantMode::Live)?;
        if !out.losses.is_finite() {
            let b = out.losses;
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: ce={} rec1={} rec2={} quant={} total={}",
                self.iteration, b.ce, b.rec1, b.rec2, b.quant, b.total
            )));
        }
        let grads = tape.backward(out.loss)?;
        let grads: Vec<Tensor> = self.params.ids().map(|id| grads.get(p.get(id))).collect();
        drop(p);
        sgd_update(self.params.tensors_mut(), &mut self.velocity, &grads, lr, optim)?;
        if let Some(next) = out.next_hypergraph {
            match self.config.hypergraph_update {
                UpdateCadence::PerBatch => self.outphase = next,
                UpdateCadence::PerEpoch => self.pending = Some(next),
            }
        }
        self.iteration += 1;
        Ok(out.losses)
    }

    /// Installs a hypergraph deferred by per-epoch cadence.
    pub fn end_epoch(&mut self) {
        if let Some(next) = self.pending.take() {
            self.outphase = next;
        }
        self.epoch += 1;
    }
}
