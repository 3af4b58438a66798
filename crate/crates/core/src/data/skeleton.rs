use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Adjacency;

/// Joint layout of a skeleton dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Kinect v1, 20 joints.
    Nwucla20,
    /// Kinect v2, 25 joints.
    Ntu25,
    /// Test layout: joint `i` connected to `i+1`.
    Chain(usize),
}

// 1-based bone lists as published with the datasets.
const NWUCLA_BONES: [(usize, usize); 19] = [
    (1, 2),
    (2, 3),
    (4, 3),
    (5, 3),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 3),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
];

const NTU_BONES: [(usize, usize); 24] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (22, 23),
    (23, 8),
    (24, 25),
    (25, 12),
];

impl Layout {
    pub fn joints(&self) -> usize {
        match self {
            Layout::Nwucla20 => 20,
            Layout::Ntu25 => 25,
            Layout::Chain(v) => *v,
        }
    }

    /// Index of the hip/root joint used for centring.
    pub fn root(&self) -> usize {
        0
    }

    /// Undirected bones as 0-based joint pairs.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        match self {
            Layout::Nwucla20 => NWUCLA_BONES.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
            Layout::Ntu25 => NTU_BONES.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
            Layout::Chain(v) => (1..*v).map(|i| (i - 1, i)).collect(),
        }
    }

    /// Symmetric parent-child adjacency with self-loops.
    pub fn adjacency(&self) -> Adjacency {
        Adjacency::from_edges(self.joints(), &self.bones()).expect("layout bones in range")
    }

    /// Parent of every joint in the tree rooted at [`Layout::root`].
    pub fn parents(&self) -> Vec<Option<usize>> {
        let v = self.joints();
        let bones = self.bones();
        let mut parent = vec![None; v];
        let mut seen = vec![false; v];
        let mut queue = std::collections::VecDeque::from([self.root()]);
        seen[self.root()] = true;
        while let Some(j) = queue.pop_front() {
            for &(a, b) in &bones {
                let other = if a == j {
                    b
                } else if b == j {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some(j);
                    queue.push_back(other);
                }
            }
        }
        parent
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Nwucla20 => write!(f, "nwucla20"),
            Layout::Ntu25 => write!(f, "ntu25"),
            Layout::Chain(v) => write!(f, "chain-{v}"),
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nwucla20" => Ok(Layout::Nwucla20),
            "ntu25" => Ok(Layout::Ntu25),
            _ => s
                .strip_prefix("chain-")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(Layout::Chain)
                .ok_or_else(|| Error::Argument(format!("unknown skeleton layout `{s}`"))),
        }
    }
}

impl Serialize for Layout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Layout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Adjacency for a named layout (`nwucla20`, `ntu25`, `chain-V`).
pub fn skeleton_adjacency(layout: &str) -> Result<Adjacency> {
    Ok(layout.parse::<Layout>()?.adjacency())
}

/// Pairwise joint offsets `x_i − x_j` for every frame.
///
/// `coords` is `[frames, V, C]` row-major; the result is `[frames, V, V, C]`.
pub fn bone_offsets(coords: &[f64], frames: usize, joints: usize, channels: usize) -> Vec<f64> {
    debug_assert_eq!(coords.len(), frames * joints * channels);
    let mut out = Vec::with_capacity(frames * joints * joints * channels);
    for f in 0..frames {
        let frame = &coords[f * joints * channels..(f + 1) * joints * channels];
        for i in 0..joints {
            let xi = &frame[i * channels..(i + 1) * channels];
            for j in 0..joints {
                let xj = &frame[j * channels..(j + 1) * channels];
                out.extend(xi.iter().zip(xj).map(|(a, b)| a - b));
            }
        }
    }
    out
}
