//! Skeleton sequence ingestion, preprocessing and batching.

mod sequence;
mod skeleton;
mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sequence::{load_jsonl, save_jsonl, SkeletonSequence, COORDS};
pub use skeleton::{bone_offsets, skeleton_adjacency, Layout};
pub use synth::{class_pattern, rest_pose, synth_generate, synth_sequence, ClassPattern};

use crate::error::{Error, Result};
use crate::hypergraph::Adjacency;
use crate::numerics::Tensor;

/// A preprocessed batch, `x` shaped `[N, M, V, T, C]`.
#[derive(Clone, Debug)]
pub struct SkeletonBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub adjacency: Adjacency,
}

impl SkeletonBatch {
    pub fn samples(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn persons(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[3]
    }
}

/// Stacks already-preprocessed sequences; missing persons are zero-filled.
pub fn assemble_batch(sequences: &[&SkeletonSequence], adjacency: &Adjacency) -> Result<SkeletonBatch> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::Argument("cannot batch zero sequences".into()))?;
    let (v, t) = (first.joints(), first.frames());
    if v != adjacency.nodes() {
        return Err(Error::dim("batch joints", &[v], &[adjacency.nodes()]));
    }
    let m = sequences.iter().map(|s| s.persons()).max().unwrap_or(1);
    let per_person = v * t * COORDS;
    let mut data = Vec::with_capacity(sequences.len() * m * per_person);
    for s in sequences {
        if s.joints() != v || s.frames() != t {
            return Err(Error::dim("batch", &[v, t], &[s.joints(), s.frames()]));
        }
        data.extend_from_slice(s.coords());
        data.extend(std::iter::repeat_n(0.0, (m - s.persons()) * per_person));
    }
    Ok(SkeletonBatch {
        x: Tensor::new(vec![sequences.len(), m, v, t, COORDS], data)?,
        labels: sequences.iter().map(|s| s.label).collect(),
        adjacency: adjacency.clone(),
    })
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Split listing for a dataset on disk. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout: Layout,
    pub class_names: Vec<String>,
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: Layout,
    pub class_names: Vec<String>,
    pub train: Vec<SkeletonSequence>,
    pub val: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Centres and resizes every sequence.
    pub fn preprocess(mut self, frames: usize) -> Self {
        let root = self.layout.root();
        for s in self.train.iter_mut().chain(self.val.iter_mut()) {
            *s = s.preprocess(root, frames);
        }
        self
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        let v = self.layout.joints();
        let read = |files: &[PathBuf]| -> Result<Vec<SkeletonSequence>> {
            let mut all = Vec::new();
            for f in files {
                let seqs = load_jsonl(&base.join(f), Some(v))?;
                if let Some(s) = seqs.iter().find(|s| s.label >= self.class_names.len()) {
                    return Err(Error::Argument(format!(
                        "{}: label {} outside {} classes",
                        f.display(),
                        s.label,
                        self.class_names.len()
                    )));
                }
                all.extend(seqs);
            }
            Ok(all)
        };
        Ok(Dataset {
            layout: self.layout,
            class_names: self.class_names.clone(),
            train: read(&self.train)?,
            val: read(&self.val)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_shape_and_person_padding() {
        let a = SkeletonSequence::new(1, 1, 3, 4, vec![1.0; 36]).unwrap();
        let b = SkeletonSequence::new(2, 2, 3, 4, vec![2.0; 72]).unwrap();
        let adj = Layout::Chain(3).adjacency();
        let batch = assemble_batch(&[&a, &b], &adj).unwrap();
        assert_eq!(batch.x.shape(), &[2, 2, 3, 4, 3]);
        assert_eq!(batch.labels, vec![1, 2]);
        assert_eq!(batch.x.at(&[0, 1, 0, 0, 0]), 0.0);
        assert_eq!(batch.x.at(&[1, 1, 2, 3, 2]), 2.0);
    }

    #[test]
    fn shuffling_keeps_sequence_label_pairs() {
        let seqs = synth_generate(Layout::Chain(4), 3, 3, 4, 0.0, 0).unwrap();
        let adj = Layout::Chain(4).adjacency();
        let order = shuffled_indices(seqs.len(), 17);
        let picked: Vec<&SkeletonSequence> = order.iter().map(|&i| &seqs[i]).collect();
        let batch = assemble_batch(&picked, &adj).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(batch.labels[k], seqs[i].label);
            let row = &batch.x.data()[k * 48..(k + 1) * 48];
            assert_eq!(row, seqs[i].coords());
        }
    }

    #[test]
    fn manifest_loads_relative_files() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = synth_generate(Layout::Chain(5), 2, 2, 6, 0.01, 1).unwrap();
        save_jsonl(&dir.path().join("train.jsonl"), &seqs).unwrap();
        let m = Manifest {
            layout: Layout::Chain(5),
            class_names: vec!["a".into(), "b".into()],
            train: vec!["train.jsonl".into()],
            val: vec![],
        };
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        let ds = loaded.load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 4);

        let bad = Manifest {
            class_names: vec!["only".into()],
            ..m
        };
        assert!(bad.load_dataset(dir.path()).is_err());
    }
}
