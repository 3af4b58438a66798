//! Post-encoder path: hyperedge attention, residual fusion, the tapped
//! graph-convolution decoder and the k-means out-phase hypergraph generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{Adjacency, Hypergraph};
use crate::nn::{Bound, GraphConvStack, Linear, ParamStore};
use crate::numerics::{Tensor, Var};

/// Squeeze-excitation over joints producing per-joint attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperedgeAttention {
    pub squeeze: Linear,
    pub expand: Linear,
    pub joint_reduce: Linear,
    pub joint_expand: Linear,
}

pub struct HanOutput<'t> {
    /// Attentive features, same shape as the encoder output.
    pub features: Var<'t>,
    /// `[S, V]` weights in (0, 1).
    pub attention: Var<'t>,
}

impl HyperedgeAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, joints: usize, rng: &mut R) -> Self {
        let half = (channels / 2).max(1);
        let reduced = (joints / 2).max(1);
        HyperedgeAttention {
            squeeze: Linear::new(store, "han.conv2", channels, half, true, 2f64.sqrt(), rng),
            expand: Linear::new(store, "han.conv1", half, channels, true, 1.0, rng),
            joint_reduce: Linear::new(store, "han.lin1", joints, reduced, true, 2f64.sqrt(), rng),
            joint_expand: Linear::new(store, "han.lin2", reduced, joints, true, 1.0, rng),
        }
    }

    /// `x` is `[S, T, V, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<HanOutput<'t>> {
        let shape = x.shape();
        let [_, t, _, c] = shape[..] else {
            return Err(Error::dim("hyperedge attention", &shape, &[4]));
        };
        let mixed = self.expand.forward(p, self.squeeze.forward(p, x)?.gelu())?;
        let pooled = mixed.mean_axis(1)?.mean_axis(2)?;
        let attention = self
            .joint_expand
            .forward(p, self.joint_reduce.forward(p, pooled)?.relu())?
            .sigmoid();
        let features = mixed.mul(attention.expand(1, t)?.expand(3, c)?)?;
        Ok(HanOutput { features, attention })
    }
}

/// `E_enc + α·A_t`.
pub fn fuse_residual<'t>(encoded: Var<'t>, attentive: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if alpha == 0.0 {
        if encoded.shape() != attentive.shape() {
            return Err(Error::dim("fuse_residual", &encoded.shape(), &attentive.shape()));
        }
        return Ok(encoded);
    }
    encoded.add(attentive.scale(alpha))
}

/// Graph-convolution decoder with a low-dimensional tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypergraphDecoder {
    pub stack: GraphConvStack,
    pub tap: usize,
}

pub struct DecoderOutput<'t> {
    pub reconstruction: Var<'t>,
    /// Output of the tapped layer, the clustering input.
    pub low_dim: Var<'t>,
}

impl HypergraphDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, widths: &[usize], tap: usize, rng: &mut R) -> Self {
        HypergraphDecoder {
            stack: GraphConvStack::new(store, "decoder", widths, rng),
            tap,
        }
    }

    /// `pooled` is `[S, V, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, adjacency: &Adjacency, pooled: Var<'t>) -> Result<DecoderOutput<'t>> {
        let low_dim = self.stack.run(p, adjacency, pooled, 0..self.tap)?;
        let reconstruction = self
            .stack
            .run(p, adjacency, low_dim.relu(), self.tap..self.stack.depth())?;
        Ok(DecoderOutput {
            reconstruction,
            low_dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after every assignment step, then the final value.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn inertia(points: &[&[f64]], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm on the rows of `points` (`[V, d]`) with seeded
/// k-means++ initialisation.
///
/// An empty cluster takes the point of the largest cluster that lies
/// farthest from its centroid. Stops when no centroid moves by more than
/// `tol` or after `max_iter` rounds.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let shape = points.shape();
    if shape.len() != 2 {
        return Err(Error::dim("kmeans", shape, &[k]));
    }
    let (n, d) = (shape[0], shape[1]);
    if k == 0 || n < k {
        return Err(Error::Argument(format!("k-means needs 1 <= K <= V, got K={k}, V={n}")));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("k-means input is not finite".into()));
    }
    let pts: Vec<&[f64]> = (0..n).map(|i| points.row(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let weights: Vec<f64> = pts
            .iter()
            .map(|p| chosen.iter().map(|&c| sq_dist(p, pts[c])).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap();
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // all remaining points coincide with a centre
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&c| pts[c].to_vec()).collect();

    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        for (i, p) in pts.iter().enumerate() {
            assignments[i] = nearest(p, &centroids).0;
        }
        loop {
            let mut counts = vec![0usize; k];
            assignments.iter().for_each(|&a| counts[a] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            let victim = (0..n)
                .filter(|&i| assignments[i] == largest)
                .max_by(|&a, &b| {
                    sq_dist(pts[a], &centroids[largest])
                        .total_cmp(&sq_dist(pts[b], &centroids[largest]))
                        .then(b.cmp(&a))
                })
                .unwrap();
            assignments[victim] = empty;
            centroids[empty] = pts[victim].to_vec();
        }
        history.push(inertia(&pts, &assignments, &centroids));

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let mean: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[j]).sqrt());
            centroids[j] = mean;
        }
        if shift < tol {
            break;
        }
    }
    let final_inertia = inertia(&pts, &assignments, &centroids);
    history.push(final_inertia);
    Ok(KMeansResult {
        assignments,
        centroids: Tensor::new(vec![k, d], centroids.concat())?,
        inertia: final_inertia,
        history,
    })
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-10;

/// Rescales each channel of every sample to [0, 1] across joints, then
/// averages over samples. `low_dim` is `[S, V, d]`; constant channels map to 0.
pub fn normalized_batch_mean(low_dim: &Tensor) -> Result<Tensor> {
    let shape = low_dim.shape();
    let [s, v, d] = shape[..] else {
        return Err(Error::dim("normalized_batch_mean", shape, &[3]));
    };
    let mut out = vec![0.0; v * d];
    for sample in 0..s {
        let block = &low_dim.data()[sample * v * d..(sample + 1) * v * d];
        for c in 0..d {
            let col = (0..v).map(|i| block[i * d + c]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            for i in 0..v {
                let z = if range > 0.0 {
                    (block[i * d + c] - lo) / range
                } else {
                    0.0
                };
                out[i * d + c] += z / s as f64;
            }
        }
    }
    Tensor::new(vec![v, d], out)
}

/// Next out-phase hypergraph: joints clustered on the batch-averaged
/// low-dimensional features, each hyperedge weighted by its share of the
/// batch-averaged joint attention.
pub fn generate_outphase(attention: &Tensor, low_dim: &Tensor, k: usize, seed: u64) -> Result<Hypergraph> {
    let points = normalized_batch_mean(low_dim)?;
    let v = points.shape()[0];
    let ashape = attention.shape();
    if ashape.len() != 2 || ashape[1] != v || ashape[0] != low_dim.shape()[0] {
        return Err(Error::dim("generate_outphase", ashape, low_dim.shape()));
    }
    let clusters = kmeans(&points, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
    let samples = ashape[0];
    let joint_attention: Vec<f64> = (0..v)
        .map(|i| (0..samples).map(|s| attention.data()[s * v + i]).sum::<f64>() / samples as f64)
        .collect();
    let total: f64 = joint_attention.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric(format!("joint attention sums to {total}")));
    }
    let mut weights = vec![0.0; k];
    for (i, &a) in joint_attention.iter().enumerate() {
        weights[clusters.assignments[i]] += a;
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Hypergraph::from_assignment(&clusters.assignments, k, weights)
}
