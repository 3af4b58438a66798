//! Parametric synthetic action generator.
//!
//! Each class raises and waves one joint subtree along a class-specific
//! axis at a class-specific frequency. Individual sequences differ only by a
//! whole-frame phase shift plus optional Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sequence::{SkeletonSequence, COORDS};
use super::skeleton::Layout;
use crate::error::{Error, Result};

const BONE_LENGTH: f64 = 0.25;
const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Joint positions of the neutral pose.
pub fn rest_pose(layout: Layout) -> Vec<[f64; 3]> {
    let parents = layout.parents();
    let v = layout.joints();
    let mut pos = vec![[0.0; 3]; v];
    // parents precede children in BFS order
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by_key(|&j| depth(&parents, j));
    for j in order {
        if let Some(p) = parents[j] {
            let a = j as f64 * GOLDEN_ANGLE;
            let d = [a.cos(), a.sin(), 0.5 * (3.0 * a).sin()];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            for c in 0..3 {
                pos[j][c] = pos[p][c] + BONE_LENGTH * d[c] / n;
            }
        }
    }
    pos
}

fn depth(parents: &[Option<usize>], mut j: usize) -> usize {
    let mut d = 0;
    while let Some(p) = parents[j] {
        d += 1;
        j = p;
    }
    d
}

/// Hops from `root` to each member of its subtree.
fn subtree(parents: &[Option<usize>], root: usize) -> Vec<(usize, usize)> {
    (0..parents.len())
        .filter_map(|j| {
            let mut hops = 0;
            let mut cur = j;
            loop {
                if cur == root {
                    return Some((j, hops));
                }
                cur = parents[cur]?;
                hops += 1;
            }
        })
        .collect()
}

/// Motion parameters of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPattern {
    pub subtree_root: usize,
    pub frequency: f64,
    pub amplitude: f64,
    pub axis: usize,
}

pub fn class_pattern(layout: Layout, class: usize) -> ClassPattern {
    let parents = layout.parents();
    let mut candidates: Vec<(usize, usize)> = (0..layout.joints())
        .filter(|&j| Some(j) != Some(layout.root()))
        .map(|j| (j, subtree(&parents, j).len()))
        .collect();
    if candidates.iter().any(|&(_, s)| s >= 2) {
        candidates.retain(|&(_, s)| s >= 2);
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let subtree_root = candidates
        .get(class % candidates.len().max(1))
        .map_or(layout.root(), |c| c.0);
    ClassPattern {
        subtree_root,
        frequency: (1 + class % 4) as f64,
        amplitude: 0.2 + 0.05 * (class % 5) as f64,
        axis: class % 3,
    }
}

/// Noise-free sequence of `class`, cyclically shifted by `shift` frames.
pub fn synth_sequence(layout: Layout, class: usize, shift: usize, frames: usize) -> SkeletonSequence {
    let rest = rest_pose(layout);
    let pattern = class_pattern(layout, class);
    let members = subtree(&layout.parents(), pattern.subtree_root);
    let max_hops = members.iter().map(|m| m.1).max().unwrap_or(0);
    let v = layout.joints();
    let mut gain = vec![0.0; v];
    for (j, hops) in members {
        gain[j] = (hops + 1) as f64 / (max_hops + 1) as f64;
    }
    let mut coords = Vec::with_capacity(v * frames * COORDS);
    for (j, base) in rest.iter().enumerate() {
        for t in 0..frames {
            let phase = 2.0 * std::f64::consts::PI * pattern.frequency * ((t + shift) % frames) as f64 / frames as f64;
            let lift = pattern.amplitude * gain[j] * (0.5 + 0.5 * phase.sin());
            for (c, b) in base.iter().enumerate() {
                coords.push(if c == pattern.axis { b + lift } else { *b });
            }
        }
    }
    SkeletonSequence::new(class, 1, v, frames, coords).expect("synthetic shape")
}

/// `n_classes × per_class` sequences with random phase and Gaussian noise.
pub fn synth_generate(
    layout: Layout,
    n_classes: usize,
    per_class: usize,
    frames: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<SkeletonSequence>> {
    if n_classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {n_classes}")));
    }
    if frames == 0 {
        return Err(Error::Argument("synthetic sequences need at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;
    let mut out = Vec::with_capacity(n_classes * per_class);
    for k in 0..per_class {
        for class in 0..n_classes {
            let shift = rng.random_range(0..frames);
            let clean = synth_sequence(layout, class, shift, frames);
            let coords = clean
                .coords()
                .iter()
                .map(|c| if noise > 0.0 { c + normal.sample(&mut rng) } else { *c })
                .collect();
            let mut s = SkeletonSequence::new(class, 1, layout.joints(), frames, coords)?;
            s.subject = (k % 10) as u32;
            out.push(s);
        }
    }
    Ok(out)
}
