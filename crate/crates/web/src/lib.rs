//! Browser bindings: each export takes plain arguments or a JSON string and
//! returns a JSON string. The `*_json` functions hold the logic and are
//! callable natively.

use hgformer::adaptive_decoder::{generate_outphase, kmeans, KMEANS_MAX_ITER, KMEANS_TOL};
use hgformer::data::{rest_pose, Layout};
use hgformer::encoder::{normalize_scores, AttentionMode};
use hgformer::hypergraph::Hypergraph;
use hgformer::numerics::{Tape, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

#[derive(Serialize)]
struct SkeletonHypergraph {
    joints: usize,
    bones: Vec<(usize, usize)>,
    /// Rest pose projected onto its first two axes.
    positions: Vec<[f64; 2]>,
    assignment: Vec<usize>,
    weights: Vec<f64>,
    propagation: Vec<Vec<f64>>,
}

/// Partitions a skeleton's joints into `hyperedges` groups, either uniformly
/// at random (`"random"`) or by clustering rest-pose positions
/// (`"clustered"`), and returns the groups with their propagation matrix.
pub fn skeleton_hypergraph_json(layout: &str, hyperedges: usize, seed: u64, mode: &str) -> Result<String> {
    let layout: Layout = layout.parse().map_err(err)?;
    let pose = rest_pose(layout);
    let v = layout.joints();
    let graph = match mode {
        "random" => Hypergraph::new_random(v, hyperedges, seed).map_err(err)?,
        "clustered" => {
            let coords = Tensor::new(vec![1, v, 3], pose.iter().flatten().copied().collect()).map_err(err)?;
            let attention = Tensor::filled(&[1, v], 1.0);
            generate_outphase(&attention, &coords, hyperedges, seed).map_err(err)?
        }
        other => return Err(format!("unknown mode {other:?}, expected \"random\" or \"clustered\"")),
    };
    let out = SkeletonHypergraph {
        joints: v,
        bones: layout.bones(),
        positions: pose.iter().map(|p| [p[0], p[1]]).collect(),
        assignment: graph.assignment().ok_or("hypergraph is not a partition")?,
        weights: graph.weights().to_vec(),
        propagation: rows(&graph.propagation().map_err(err)?),
    };
    serde_json::to_string(&out).map_err(err)
}

#[derive(Serialize)]
struct Clustering {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    history: Vec<f64>,
}

/// Seeded k-means on `points_json`, an array of equal-length coordinate arrays.
pub fn kmeans_json(points_json: &str, k: usize, seed: u64) -> Result<String> {
    let points: Vec<Vec<f64>> = serde_json::from_str(points_json).map_err(err)?;
    let d = points.first().map_or(0, |p| p.len());
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err("points must be non-empty arrays of equal length".into());
    }
    let t = Tensor::new(vec![points.len(), d], points.concat()).map_err(err)?;
    let r = kmeans(&t, k, seed, KMEANS_MAX_ITER, KMEANS_TOL).map_err(err)?;
    let out = Clustering {
        assignments: r.assignments,
        centroids: rows(&r.centroids),
        inertia: r.inertia,
        history: r.history,
    };
    serde_json::to_string(&out).map_err(err)
}

#[derive(Serialize)]
struct AttentionComparison {
    softmax: Vec<Vec<f64>>,
    /// `None` when some row sums to (nearly) zero.
    literal: Option<Vec<Vec<f64>>>,
    literal_error: Option<String>,
}

/// Normalises a square score matrix both ways: softmax per row, and the
/// literal division by the row sum.
pub fn attention_json(scores_json: &str) -> Result<String> {
    let scores: Vec<Vec<f64>> = serde_json::from_str(scores_json).map_err(err)?;
    let v = scores.len();
    if v == 0 || scores.iter().any(|r| r.len() != v) {
        return Err("scores must be a non-empty square matrix".into());
    }
    let t = Tensor::new(vec![1, v, v], scores.concat()).map_err(err)?;
    let tape = Tape::new();
    let run = |mode| normalize_scores(tape.constant(t.clone()), mode, v).map(|w| rows(&w.value()));
    let softmax = run(AttentionMode::Softmax).map_err(err)?;
    let (literal, literal_error) = match run(AttentionMode::Literal) {
        Ok(w) => (Some(w), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let out = AttentionComparison {
        softmax,
        literal,
        literal_error,
    };
    serde_json::to_string(&out).map_err(err)
}

#[wasm_bindgen]
pub fn skeleton_hypergraph(
    layout: &str,
    hyperedges: usize,
    seed: u32,
    mode: &str,
) -> std::result::Result<String, JsError> {
    skeleton_hypergraph_json(layout, hyperedges, seed as u64, mode).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cluster_points(points_json: &str, k: usize, seed: u32) -> std::result::Result<String, JsError> {
    kmeans_json(points_json, k, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare_attention(scores_json: &str) -> std::result::Result<String, JsError> {
    attention_json(scores_json).map_err(|e| JsError::new(&e))
}
