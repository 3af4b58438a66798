//! In-phase hyperedges from nearest-prototype assignment of mid-encoder
//! node embeddings.
//!
//! Each sample's time-pooled node features are projected to a low dimension
//! by a graph-convolution stack, snapped to the closest codebook row, and the
//! resulting partition becomes that sample's hypergraph. Gradients cross the
//! snap with the straight-through rule, and the codebook learns from a
//! stop-gradient commitment loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{Adjacency, Hypergraph};
use crate::nn::{standardize_last_axis, Bound, GraphConvStack, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{Tensor, Var};

/// `K × d` prototype vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    prototypes: Tensor,
}

impl Codebook {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        let shape = prototypes.shape();
        if shape.len() != 2 || shape[0] < 2 || shape[1] < 1 {
            return Err(Error::Argument(format!(
                "codebook must be K×d with K >= 2, got {shape:?}"
            )));
        }
        if !prototypes.is_finite() {
            return Err(Error::Argument("codebook has non-finite entries".into()));
        }
        Ok(Codebook { prototypes })
    }

    pub fn size(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.prototypes.row(k)
    }
}

/// Index of the nearest prototype for every row of `embeddings` (any shape
/// ending in `d`). Ties go to the lowest index.
pub fn assign(embeddings: &Tensor, codebook: &Codebook) -> Result<Vec<usize>> {
    let d = codebook.dim();
    if embeddings.shape().last() != Some(&d) {
        return Err(Error::dim("assign", embeddings.shape(), codebook.prototypes.shape()));
    }
    Ok(embeddings
        .data()
        .chunks(d)
        .map(|e| {
            let mut best = (0, f64::INFINITY);
            for k in 0..codebook.size() {
                let dist: f64 = e.iter().zip(codebook.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Per-sample in-phase hypergraphs.
#[derive(Clone, Debug, PartialEq)]
pub struct InPhaseHypergraph {
    pub graphs: Vec<Hypergraph>,
}

/// Builds one hypergraph per sample from flat `[samples × nodes]`
/// assignments. Hyperedge `k` gets `edge_weights[k]` when it has members and
/// 0 when empty.
pub fn build_inphase(
    assignments: &[usize],
    samples: usize,
    nodes: usize,
    edge_weights: &[f64],
) -> Result<InPhaseHypergraph> {
    if assignments.len() != samples * nodes {
        return Err(Error::dim("build_inphase", &[samples, nodes], &[assignments.len()]));
    }
    let k = edge_weights.len();
    let graphs = assignments
        .chunks(nodes)
        .map(|he| {
            let weights = (0..k)
                .map(|e| if he.contains(&e) { edge_weights[e] } else { 0.0 })
                .collect();
            Hypergraph::from_assignment(he, k, weights)
        })
        .collect::<Result<_>>()?;
    Ok(InPhaseHypergraph { graphs })
}

/// `mean_rows ‖Q[he] − sg(E)‖²`; only the codebook receives gradient.
pub fn quantization_loss<'t>(embeddings: Var<'t>, codebook: Var<'t>, assignments: &[usize]) -> Result<Var<'t>> {
    let target = embeddings.stop_gradient();
    commitment(target, codebook, assignments)
}

fn commitment<'t>(target: Var<'t>, codebook: Var<'t>, assignments: &[usize]) -> Result<Var<'t>> {
    let d = codebook.shape()[1];
    let rows = assignments.len();
    let target = target.reshape(&[rows, d])?;
    let diff = codebook.gather_rows(assignments)?.sub(target)?;
    Ok(diff.mul(diff)?.sum_all()?.scale(1.0 / rows.max(1) as f64))
}

/// Base-point quantities held fixed when the quantizer is replayed as a
/// smooth surrogate for finite-difference checks.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantFreeze {
    pub assignments: Vec<usize>,
    /// `Q[he] − E` at the base point.
    pub residual: Tensor,
    pub embeddings: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub enum QuantMode<'a> {
    Live,
    Frozen(&'a QuantFreeze),
}

pub struct Quantized<'t> {
    /// Codebook rows forward, straight-through to the embeddings backward.
    pub values: Var<'t>,
    pub assignments: Vec<usize>,
    pub loss: Var<'t>,
    pub freeze: QuantFreeze,
}

/// Snaps `embeddings` to the codebook.
pub fn quantize<'t>(embeddings: Var<'t>, codebook: Var<'t>, mode: QuantMode<'_>) -> Result<Quantized<'t>> {
    let tape = embeddings.tape();
    match mode {
        QuantMode::Live => {
            let e = embeddings.value();
            let assignments = assign(&e, &Codebook::new(codebook.value())?)?;
            let chosen = codebook.gather_rows(&assignments)?.reshape(&embeddings.shape())?;
            let values = chosen.straight_through(embeddings)?;
            let loss = quantization_loss(embeddings, codebook, &assignments)?;
            let residual = Tensor::new(
                e.shape().to_vec(),
                chosen.value().data().iter().zip(e.data()).map(|(q, x)| q - x).collect(),
            )?;
            Ok(Quantized {
                values,
                loss,
                freeze: QuantFreeze {
                    assignments: assignments.clone(),
                    residual,
                    embeddings: e,
                },
                assignments,
            })
        }
        QuantMode::Frozen(f) => {
            if f.residual.shape() != embeddings.shape().as_slice() {
                return Err(Error::dim("frozen quantizer", f.residual.shape(), &embeddings.shape()));
            }
            let values = embeddings.add(tape.constant(f.residual.clone()))?;
            let loss = commitment(tape.constant(f.embeddings.clone()), codebook, &f.assignments)?;
            Ok(Quantized {
                values,
                assignments: f.assignments.clone(),
                loss,
                freeze: f.clone(),
            })
        }
    }
}

/// Projection stack, codebook and hyperedge-weight MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InPhaseQuantizer {
    /// Graph-conv stack whose `tap`-th layer emits the low-dimensional
    /// embedding; the remaining layers reconstruct the input joints.
    pub decoder: GraphConvStack,
    pub tap: usize,
    pub input_norm: LayerNorm,
    pub codebook: ParamId,
    pub weight_hidden: Linear,
    pub weight_out: Linear,
}

pub struct QuantizerOutput<'t> {
    pub embeddings: Var<'t>,
    pub quantized: Quantized<'t>,
    pub reconstruction: Var<'t>,
}

impl InPhaseQuantizer {
    /// `widths` runs from the encoder width down to `d` at `tap` and out to
    /// the input coordinate width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        widths: &[usize],
        tap: usize,
        hyperedges: usize,
        rng: &mut R,
    ) -> Self {
        let d = widths[tap];
        let input_norm = LayerNorm::new(store, "quantizer.input_norm", widths[0]);
        let decoder = GraphConvStack::new(store, "quantizer.decoder", widths, rng);
        let codebook = store.add("quantizer.codebook", Tensor::randn(&[hyperedges, d], 1.0, rng));
        let weight_hidden = Linear::new(store, "quantizer.edge_weight.hidden", d, d, true, 2f64.sqrt(), rng);
        let weight_out = Linear::new(store, "quantizer.edge_weight.out", d, 1, true, 1.0, rng);
        InPhaseQuantizer {
            decoder,
            tap,
            input_norm,
            codebook,
            weight_hidden,
            weight_out,
        }
    }

    /// `pooled` is `[S, V, C]` time-averaged encoder features.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        adjacency: &Adjacency,
        pooled: Var<'t>,
        mode: QuantMode<'_>,
    ) -> Result<QuantizerOutput<'t>> {
        let depth = self.decoder.depth();
        let normed = self.input_norm.forward(p, pooled)?;
        // fixed-scale embeddings: the straight-through gradient never
        // changes the forward value, so unnormalised embeddings drift away
        // from their prototypes without bound
        let embeddings = standardize_last_axis(self.decoder.run(p, adjacency, normed, 0..self.tap)?)?;
        let quantized = quantize(embeddings, p.get(self.codebook), mode)?;
        let reconstruction = self
            .decoder
            .run(p, adjacency, quantized.values.relu(), self.tap..depth)?;
        Ok(QuantizerOutput {
            embeddings,
            quantized,
            reconstruction,
        })
    }

    /// Positive per-hyperedge weight from each prototype.
    ///
    /// Every member of hyperedge `k` carries prototype `k`, so the mean over
    /// members equals the MLP applied to the prototype itself.
    pub fn edge_weights(&self, store: &ParamStore) -> Vec<f64> {
        let q = store.get(self.codebook);
        let dense = |lin: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(lin.weight);
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..cols)
                .map(|o| {
                    let b = lin.bias.map_or(0.0, |b| store.get(b).data()[o]);
                    b + (0..rows).map(|i| x[i] * w.data()[i * cols + o]).sum::<f64>()
                })
                .collect()
        };
        (0..q.shape()[0])
            .map(|k| {
                let h: Vec<f64> = dense(&self.weight_hidden, q.row(k))
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let z = dense(&self.weight_out, &h)[0];
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }

    pub fn hypergraphs(
        &self,
        store: &ParamStore,
        assignments: &[usize],
        samples: usize,
        nodes: usize,
    ) -> Result<InPhaseHypergraph> {
        build_inphase(assignments, samples, nodes, &self.edge_weights(store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_difference, max_relative_error, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb(rows: &[Vec<f64>]) -> Codebook {
        Codebook::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn assignment_examples() {
        let q = cb(&[vec![0.0, 0.0], vec![2.0, 2.0]]);
        let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.5, 1.5]]).unwrap();
        assert_eq!(assign(&e, &q).unwrap(), vec![0, 1]);
        let tie = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(assign(&tie, &q).unwrap(), vec![0]);
        assert_eq!(assign(q.prototypes(), &q).unwrap(), vec![0, 1]);
        assert!(Codebook::new(Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn inphase_incidence_and_weights() {
        let g = build_inphase(&[0, 0, 0, 1, 0, 1], 2, 3, &[0.7, 0.2, 0.9]).unwrap();
        assert_eq!(g.graphs.len(), 2);
        assert_eq!(g.graphs[0].incidence_matrix(), &[1, 0, 0, 1, 0, 0, 1, 0, 0]);
        assert_eq!(g.graphs[0].weights(), &[0.7, 0.0, 0.0]);
        assert_eq!(g.graphs[1].weights(), &[0.7, 0.2, 0.0]);
        for h in &g.graphs {
            assert!(h.assignment().is_some());
        }
    }

    #[test]
    fn loss_examples_and_stop_gradient() {
        let tape = Tape::new();
        let e = tape.param(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let q = tape.param(&Tensor::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap());
        let loss = quantization_loss(e, q, &[0]).unwrap();
        assert_eq!(loss.item(), 2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(e).data(), &[0.0, 0.0]);
        assert_eq!(g.get(q).data(), &[2.0, 2.0, 0.0, 0.0]);

        let exact = tape.param(&Tensor::from_rows(&[vec![5.0, 5.0]]).unwrap());
        assert_eq!(quantization_loss(exact, q, &[1]).unwrap().item(), 0.0);
    }

    #[test]
    fn quantize_forward_is_lookup_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let code = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let e = tape.param(&Tensor::randn(&[2, 4, 3], 1.0, &mut rng));
        let q = quantize(e, tape.param(&code), QuantMode::Live).unwrap();
        let vals = q.values.value();
        for (r, &k) in q.assignments.iter().enumerate() {
            assert_eq!(&vals.data()[r * 3..r * 3 + 3], code.row(k));
        }
        assert_eq!(assign(&vals, &Codebook::new(code).unwrap()).unwrap(), q.assignments);
        // copy rule: d sum(values·w)/dE = w
        let w = tape.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng));
        let g = tape.backward(q.values.mul(w).unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(g.get(e).data(), w.value().data());
    }

    #[test]
    fn codebook_step_toward_members_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let e = Tensor::randn(&[12, 2], 1.0, &mut rng);
            let mut code = Tensor::randn(&[3, 2], 1.0, &mut rng);
            let he = assign(&e, &Codebook::new(code.clone()).unwrap()).unwrap();
            let loss = |c: &Tensor| {
                let tape = Tape::new();
                quantization_loss(tape.param(&e), tape.param(c), &he).unwrap().item()
            };
            let before = loss(&code);
            for k in 0..3 {
                let members: Vec<usize> = (0..12).filter(|&i| he[i] == k).collect();
                if members.is_empty() {
                    continue;
                }
                for c in 0..2 {
                    let mean = members.iter().map(|&i| e.at(&[i, c])).sum::<f64>() / members.len() as f64;
                    let cur = code.at(&[k, c]);
                    code.data_mut()[k * 2 + c] = cur + 0.1 * (mean - cur);
                }
            }
            assert!(loss(&code) <= before);
        }
    }

    #[test]
    fn edge_weights_ignore_embeddings_within_a_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let quant = InPhaseQuantizer::new(&mut store, &[4, 3, 2, 3, 3], 2, 3, &mut rng);
        let w = quant.edge_weights(&store);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        let code = Codebook::new(store.get(quant.codebook).clone()).unwrap();
        let e = Tensor::randn(&[6, 2], 1.0, &mut rng);
        let he = assign(&e, &code).unwrap();
        let mut nudged = e.clone();
        nudged.data_mut().iter_mut().for_each(|v| *v += 1e-9);
        assert_eq!(assign(&nudged, &code).unwrap(), he);
        let a = quant.hypergraphs(&store, &he, 1, 6).unwrap();
        let b = quant
            .hypergraphs(&store, &assign(&nudged, &code).unwrap(), 1, 6)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn low_dim_projection_shape_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let quant = InPhaseQuantizer::new(&mut store, &[6, 8, 8, 8, 4, 3], 3, 5, &mut rng);
        let adj = crate::data::Layout::Chain(5).adjacency();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::randn(&[2, 5, 6], 1.0, &mut rng));
        let out = quant.forward(&p, &adj, x, QuantMode::Live).unwrap();
        assert_eq!(out.embeddings.shape(), vec![2, 5, 8]);
        assert_eq!(out.reconstruction.shape(), vec![2, 5, 3]);
        let g = tape
            .backward(out.reconstruction.mul(out.reconstruction).unwrap().sum_all().unwrap())
            .unwrap();
        assert!(g.get(p.get(quant.decoder.layers[0])).data().iter().any(|&v| v != 0.0));
        assert!(g.get(p.get(quant.codebook)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_through_matches_surrogate_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let code = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let target = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let x0 = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let pipeline = |x: &Tensor, mode: QuantMode<'_>| -> (f64, Option<Tensor>, QuantFreeze) {
            let tape = Tape::new();
            let xv = tape.param(x);
            let e = xv.matmul(tape.constant(w.clone())).unwrap();
            let q = quantize(e, tape.param(&code), mode).unwrap();
            let d = q.values.sub(tape.constant(target.clone())).unwrap();
            let loss = d.mul(d).unwrap().sum_all().unwrap().add(q.loss).unwrap();
            let g = tape.backward(loss).unwrap();
            (loss.item(), Some(g.get(xv)), q.freeze)
        };
        let (_, analytic, freeze) = pipeline(&x0, QuantMode::Live);
        let numeric = central_difference(
            |v| {
                Ok(pipeline(
                    &Tensor::new(vec![5, 2], v.to_vec()).unwrap(),
                    QuantMode::Frozen(&freeze),
                )
                .0)
            },
            x0.data(),
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(analytic.unwrap().data(), &numeric);
        assert!(err < 1e-4, "{err}");
    }
}
