//! Hypergraph structure and the two graph convolutions used by the model.
//!
//! `hyperconv` applies `Dv^{-1/2} H Hw De^{-1} Hᵀ Dv^{-1/2} X θ`;
//! `adjacency_conv` applies `D^{-1/2} A D^{-1/2} X W` over the skeleton graph.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

const MAX_RESAMPLES: usize = 1_000_000;

/// Binary incidence matrix plus diagonal hyperedge weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypergraph {
    nodes: usize,
    edges: usize,
    /// Row-major `nodes × edges`, entries 0 or 1.
    incidence: Vec<u8>,
    /// Diagonal of `Hw`.
    weights: Vec<f64>,
}

/// Diagonals of the node- and hyperedge-degree matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreePair {
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
}

impl Hypergraph {
    /// Builds a hypergraph, checking binarity, node coverage and finite weights.
    pub fn new(nodes: usize, edges: usize, incidence: Vec<u8>, weights: Vec<f64>) -> Result<Self> {
        if incidence.len() != nodes * edges {
            return Err(Error::dim("hypergraph incidence", &[nodes, edges], &[incidence.len()]));
        }
        if weights.len() != edges {
            return Err(Error::dim("hypergraph weights", &[edges], &[weights.len()]));
        }
        if incidence.iter().any(|&h| h > 1) {
            return Err(Error::Argument("incidence entries must be 0 or 1".into()));
        }
        if let Some(e) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Argument(format!("hyperedge weight {e} is not finite")));
        }
        let g = Hypergraph {
            nodes,
            edges,
            incidence,
            weights,
        };
        if let Some(i) = (0..nodes).find(|&i| g.memberships(i) == 0) {
            return Err(Error::Argument(format!("node {i} belongs to no hyperedge")));
        }
        Ok(g)
    }

    /// Exactly-one membership hypergraph from a node → hyperedge assignment.
    pub fn from_assignment(assignment: &[usize], edges: usize, weights: Vec<f64>) -> Result<Self> {
        let nodes = assignment.len();
        let mut incidence = vec![0u8; nodes * edges];
        for (i, &e) in assignment.iter().enumerate() {
            if e >= edges {
                return Err(Error::Argument(format!(
                    "node {i} assigned to hyperedge {e} >= {edges}"
                )));
            }
            incidence[i * edges + e] = 1;
        }
        Hypergraph::new(nodes, edges, incidence, weights)
    }

    /// Uniformly random exactly-one allocation with no empty hyperedge and
    /// identity weights.
    pub fn new_random(nodes: usize, edges: usize, seed: u64) -> Result<Self> {
        if edges == 0 || nodes < edges {
            return Err(Error::Argument(format!(
                "random hypergraph needs V >= E_h >= 1, got V={nodes}, E_h={edges}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assignment = if nodes == edges {
            // uniform over surjections is uniform over bijections here
            let mut perm: Vec<usize> = (0..nodes).collect();
            perm.shuffle(&mut rng);
            perm
        } else {
            let mut found = None;
            for _ in 0..MAX_RESAMPLES {
                let draw: Vec<usize> = (0..nodes).map(|_| rng.random_range(0..edges)).collect();
                let mut seen = vec![false; edges];
                draw.iter().for_each(|&e| seen[e] = true);
                if seen.iter().all(|&s| s) {
                    found = Some(draw);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Argument(format!(
                    "could not draw a covering allocation for V={nodes}, E_h={edges}"
                ))
            })?
        };
        Hypergraph::from_assignment(&assignment, edges, vec![1.0; edges])
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn incidence(&self, node: usize, edge: usize) -> u8 {
        self.incidence[node * self.edges + edge]
    }

    pub fn incidence_matrix(&self) -> &[u8] {
        &self.incidence
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.edges {
            return Err(Error::dim("hypergraph weights", &[self.edges], &[weights.len()]));
        }
        self.weights = weights;
        Ok(self)
    }

    fn memberships(&self, node: usize) -> usize {
        self.incidence[node * self.edges..(node + 1) * self.edges]
            .iter()
            .map(|&h| h as usize)
            .sum()
    }

    /// Hyperedge of each node when membership is exactly one.
    pub fn assignment(&self) -> Option<Vec<usize>> {
        (0..self.nodes)
            .map(|i| {
                let row = &self.incidence[i * self.edges..(i + 1) * self.edges];
                (row.iter().map(|&h| h as usize).sum::<usize>() == 1).then(|| row.iter().position(|&h| h == 1).unwrap())
            })
            .collect()
    }

    pub fn edge_sizes(&self) -> Vec<usize> {
        (0..self.edges)
            .map(|e| (0..self.nodes).filter(|&i| self.incidence(i, e) == 1).count())
            .collect()
    }

    pub fn has_empty_edge(&self) -> bool {
        self.edge_sizes().contains(&0)
    }

    pub fn degree_pair(&self) -> DegreePair {
        let node = (0..self.nodes)
            .map(|i| {
                (0..self.edges)
                    .map(|e| self.incidence(i, e) as f64 * self.weights[e])
                    .sum()
            })
            .collect();
        let edge = self.edge_sizes().into_iter().map(|s| s as f64).collect();
        DegreePair { node, edge }
    }

    /// The `V×V` operator `Dv^{-1/2} H Hw De^{-1} Hᵀ Dv^{-1/2}`.
    ///
    /// Empty hyperedges contribute nothing. A node with non-positive degree
    /// cannot be normalised and is reported as singular.
    pub fn propagation(&self) -> Result<Tensor> {
        let deg = self.degree_pair();
        let inv_sqrt: Vec<f64> = deg
            .node
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if d > 0.0 {
                    Ok(1.0 / d.sqrt())
                } else {
                    Err(Error::SingularDegree {
                        op: "hyperconv",
                        node: i,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let v = self.nodes;
        let mut out = vec![0.0; v * v];
        for e in 0..self.edges {
            if deg.edge[e] == 0.0 {
                continue;
            }
            let members: Vec<usize> = (0..v).filter(|&i| self.incidence(i, e) == 1).collect();
            let scale = self.weights[e] / deg.edge[e];
            for &i in &members {
                for &j in &members {
                    out[i * v + j] += inv_sqrt[i] * scale * inv_sqrt[j];
                }
            }
        }
        Tensor::new(vec![v, v], out)
    }
}

/// Applies a constant `V×V` mixing matrix to `x` of shape `[V,C]` or `[B,V,C]`.
fn mix_nodes<'t>(mixer: Tensor, x: Var<'t>) -> Result<Var<'t>> {
    let v = mixer.shape()[0];
    let xs = x.shape();
    let node_axis = xs.len().checked_sub(2).map(|a| xs[a]);
    if node_axis != Some(v) || !(2..=3).contains(&xs.len()) {
        return Err(Error::dim("node mixing", &[v, v], &xs));
    }
    x.tape().constant(mixer).matmul(x)
}

/// Hypergraph convolution of `x` (`[V,C1]` or `[B,V,C1]`) with filter `theta`.
pub fn hyperconv<'t>(x: Var<'t>, g: &Hypergraph, theta: Var<'t>) -> Result<Var<'t>> {
    let projected = x.matmul(theta)?;
    mix_nodes(g.propagation()?, projected)
}

/// Binary symmetric skeleton adjacency.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    nodes: usize,
    entries: Vec<u8>,
}

impl Adjacency {
    pub fn new(nodes: usize, entries: Vec<u8>) -> Result<Self> {
        if entries.len() != nodes * nodes {
            return Err(Error::dim("adjacency", &[nodes, nodes], &[entries.len()]));
        }
        if entries.iter().any(|&a| a > 1) {
            return Err(Error::Argument("adjacency entries must be 0 or 1".into()));
        }
        for i in 0..nodes {
            for j in 0..i {
                if entries[i * nodes + j] != entries[j * nodes + i] {
                    return Err(Error::Argument(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Adjacency { nodes, entries })
    }

    /// Undirected graph from an edge list, with self-loops on every node.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut entries = vec![0u8; nodes * nodes];
        for i in 0..nodes {
            entries[i * nodes + i] = 1;
        }
        for &(a, b) in edges {
            if a >= nodes || b >= nodes {
                return Err(Error::Argument(format!("edge ({a},{b}) outside {nodes} nodes")));
            }
            entries[a * nodes + b] = 1;
            entries[b * nodes + a] = 1;
        }
        Ok(Adjacency { nodes, entries })
    }

    pub fn identity(nodes: usize) -> Self {
        Adjacency::from_edges(nodes, &[]).expect("identity adjacency")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.nodes + j]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    /// Number of undirected edges, self-loops excluded.
    pub fn edge_count(&self) -> usize {
        (0..self.nodes)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j) == 1)
            .count()
    }

    /// `D^{-1/2} A D^{-1/2}`.
    pub fn normalized(&self) -> Result<Tensor> {
        let v = self.nodes;
        let deg: Vec<f64> = (0..v).map(|i| (0..v).map(|j| self.get(i, j) as f64).sum()).collect();
        if let Some(node) = deg.iter().position(|&d| d == 0.0) {
            return Err(Error::SingularDegree {
                op: "adjacency_conv",
                node,
            });
        }
        let mut out = vec![0.0; v * v];
        for i in 0..v {
            for j in 0..v {
                if self.get(i, j) == 1 {
                    out[i * v + j] = 1.0 / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        Tensor::new(vec![v, v], out)
    }
}

/// Symmetric-normalised graph convolution of `x` (`[V,C1]` or `[B,V,C1]`).
pub fn adjacency_conv<'t>(x: Var<'t>, a: &Adjacency, w: Var<'t>) -> Result<Var<'t>> {
    let projected = x.matmul(w)?;
    mix_nodes(a.normalized()?, projected)
}
