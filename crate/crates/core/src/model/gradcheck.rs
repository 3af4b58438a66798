//! Finite-difference verification of every parameter gradient of the full
//! model.
//!
//! Analytic gradients come from a normal backward pass. The numeric side
//! replays the forward with the quantizer frozen at the base point (fixed
//! assignments, straight-through residual held constant, commitment target
//! held constant), which is the smooth function whose derivative the
//! straight-through and stop-gradient rules define.

use super::{ModelConfig, ModelState};
use crate::data::{assemble_batch, synth_generate, Layout, SkeletonBatch};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::Betas;
use crate::numerics::{central_difference, max_relative_error, Tape};
use crate::quantizer::QuantMode;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Step for the full-model differences. The loss is O(1) while many
/// gradient entries are O(1e-6), so roundoff `~1e-16·|f|/eps` dominates at
/// smaller steps; truncation error at this step is still below 1e-7 relative.
pub const GRADCHECK_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub max_relative_error: f64,
    /// The analytic gradient is identically zero (inactive relu, or a
    /// parameter the loss cancels out of); the differences must agree.
    pub zero_gradient: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn offending(&self) -> Vec<&GroupReport> {
        self.groups
            .iter()
            .filter(|g| !(g.max_relative_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offending().is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }
}

/// Small model on an 8-joint chain with 8 frames and 3 classes.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        layout: Layout::Chain(8),
        classes: 3,
        frames: 8,
        encoder: EncoderConfig {
            hidden: 8,
            heads: 2,
            // with 8 frames a larger reduction leaves one or two squeeze
            // units, which are often all inactive at initialisation
            temporal_reduction: 1,
            ..EncoderConfig::default()
        },
        hyperedges: 3,
        low_dim: 4,
        decoder_hidden: vec![6],
        decoder_tail: vec![4],
        ..ModelConfig::default()
    }
}

/// Two synthetic sequences of different classes for `config`'s layout and
/// frame count.
pub fn toy_batch(config: &ModelConfig, seed: u64) -> Result<SkeletonBatch> {
    let seqs = synth_generate(config.layout, config.classes.max(2), 1, config.frames, 0.02, seed)?;
    let root = config.layout.root();
    let picked: Vec<_> = seqs
        .iter()
        .filter(|s| s.label < 2)
        .map(|s| s.preprocess(root, config.frames))
        .collect();
    let refs: Vec<_> = picked.iter().collect();
    assemble_batch(&refs, &config.layout.adjacency())
}

/// Compares analytic and central-difference gradients for every named
/// parameter. `corrupt` scales one group's analytic gradient, to exercise
/// the detector.
pub fn gradcheck_model(
    state: &ModelState,
    batch: &SkeletonBatch,
    betas: Betas,
    corrupt: Option<(&str, f64)>,
) -> Result<GradcheckReport> {
    if let Some((name, _)) = corrupt {
        if state.params.find(name).is_none() {
            return Err(Error::Argument(format!("unknown parameter group {name}")));
        }
    }
    let tape = Tape::new();
    let p = state.params.bind(&tape);
    let out = state.forward(&tape, &p, batch, betas, false, QuantMode::Live)?;
    let grads = tape.backward(out.loss)?;
    let freeze = out.quant_freeze.clone();
    let mode = match &freeze {
        Some(f) => QuantMode::Frozen(f),
        None => QuantMode::Live,
    };

    let mut probe = state.clone();
    let mut groups = Vec::with_capacity(state.params.len());
    for id in state.params.ids() {
        let name = state.params.name(id).to_string();
        let mut analytic = grads.get(p.get(id)).into_data();
        if let Some((_, factor)) = corrupt.filter(|(n, _)| *n == name) {
            analytic.iter_mut().for_each(|g| *g *= factor);
        }
        let base = state.params.get(id).data().to_vec();
        let numeric = central_difference(
            |w| {
                probe.params.get_mut(id).data_mut().copy_from_slice(w);
                let tape = Tape::new();
                let bound = probe.params.bind(&tape);
                Ok(probe.forward(&tape, &bound, batch, betas, false, mode)?.loss.item())
            },
            &base,
            GRADCHECK_EPS,
        )?;
        probe.params.get_mut(id).data_mut().copy_from_slice(&base);
        let max_relative_error = max_relative_error(&analytic, &numeric);
        let zero_gradient = analytic.iter().all(|&g| g == 0.0);
        log::debug!("{name}: {max_relative_error:e}");
        groups.push(GroupReport {
            name,
            numel: base.len(),
            max_relative_error,
            zero_gradient,
        });
    }
    Ok(GradcheckReport {
        groups,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
