use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COORDS: usize = 3;

/// One recorded action: `persons × joints × frames` 3-D joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub label: usize,
    pub subject: u32,
    pub view: u32,
    persons: usize,
    joints: usize,
    frames: usize,
    /// Row-major `[persons, joints, frames, 3]`.
    coords: Vec<f64>,
}

/// Line format of the JSON-lines dataset files.
#[derive(Serialize, Deserialize)]
struct Record {
    label: usize,
    #[serde(default)]
    subject: u32,
    #[serde(default)]
    view: u32,
    joints: Vec<Vec<Vec<[f64; 3]>>>,
}

impl SkeletonSequence {
    pub fn new(label: usize, persons: usize, joints: usize, frames: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != persons * joints * frames * COORDS {
            return Err(Error::dim(
                "skeleton sequence",
                &[persons, joints, frames, COORDS],
                &[coords.len()],
            ));
        }
        if frames == 0 || joints == 0 || persons == 0 {
            return Err(Error::Argument("empty skeleton sequence".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Argument("non-finite joint coordinate".into()));
        }
        Ok(SkeletonSequence {
            label,
            subject: 0,
            view: 0,
            persons,
            joints,
            frames,
            coords,
        })
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, person: usize, joint: usize, frame: usize) -> [f64; 3] {
        let o = ((person * self.joints + joint) * self.frames + frame) * COORDS;
        [self.coords[o], self.coords[o + 1], self.coords[o + 2]]
    }

    fn from_record(r: Record) -> std::result::Result<Self, String> {
        let persons = r.joints.len();
        let joints = r.joints.first().map_or(0, Vec::len);
        let frames = r.joints.first().and_then(|p| p.first()).map_or(0, Vec::len);
        if persons == 0 || joints == 0 || frames == 0 {
            return Err("empty joints array".into());
        }
        let mut coords = Vec::with_capacity(persons * joints * frames * COORDS);
        for (m, person) in r.joints.iter().enumerate() {
            if person.len() != joints {
                return Err(format!("person {m} has {} joints, expected {joints}", person.len()));
            }
            for (v, track) in person.iter().enumerate() {
                if track.len() != frames {
                    return Err(format!(
                        "person {m} joint {v} has {} frames, expected {frames}",
                        track.len()
                    ));
                }
                coords.extend(track.iter().flatten());
            }
        }
        let mut s = SkeletonSequence::new(r.label, persons, joints, frames, coords).map_err(|e| e.to_string())?;
        s.subject = r.subject;
        s.view = r.view;
        Ok(s)
    }

    fn to_record(&self) -> Record {
        let joints = (0..self.persons)
            .map(|m| {
                (0..self.joints)
                    .map(|v| (0..self.frames).map(|t| self.point(m, v, t)).collect())
                    .collect()
            })
            .collect();
        Record {
            label: self.label,
            subject: self.subject,
            view: self.view,
            joints,
        }
    }

    /// Linear interpolation along time to exactly `target` frames.
    pub fn resize_temporal(&self, target: usize) -> SkeletonSequence {
        if target == self.frames {
            return self.clone();
        }
        let mut coords = Vec::with_capacity(self.persons * self.joints * target * COORDS);
        for m in 0..self.persons {
            for v in 0..self.joints {
                for t in 0..target {
                    let pos = if target > 1 && self.frames > 1 {
                        t as f64 * (self.frames - 1) as f64 / (target - 1) as f64
                    } else {
                        0.0
                    };
                    let lo = (pos.floor() as usize).min(self.frames - 1);
                    let hi = (lo + 1).min(self.frames - 1);
                    let frac = pos - lo as f64;
                    let (a, b) = (self.point(m, v, lo), self.point(m, v, hi));
                    coords.extend((0..COORDS).map(|c| a[c] + (b[c] - a[c]) * frac));
                }
            }
        }
        SkeletonSequence {
            frames: target,
            coords,
            ..self.clone()
        }
    }

    /// Translates every person so the first frame's root joint of person 0
    /// sits at the origin.
    pub fn centered(&self, root: usize) -> SkeletonSequence {
        let origin = self.point(0, root, 0);
        let coords = self
            .coords
            .iter()
            .enumerate()
            .map(|(k, c)| c - origin[k % COORDS])
            .collect();
        SkeletonSequence { coords, ..self.clone() }
    }

    /// Centring followed by temporal resizing.
    pub fn preprocess(&self, root: usize, frames: usize) -> SkeletonSequence {
        self.centered(root).resize_temporal(frames)
    }
}

/// Reads a JSON-lines dataset. When `joints` is given, every sequence must
/// have exactly that many joints. Blank lines are skipped.
pub fn load_jsonl(path: &Path, joints: Option<usize>) -> Result<Vec<SkeletonSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let seq = SkeletonSequence::from_record(record).map_err(|msg| Error::Parse { line: lineno, msg })?;
        if let Some(v) = joints {
            if seq.joints != v {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("sequence has {} joints, layout expects {v}", seq.joints),
                });
            }
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, sequences: &[SkeletonSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sequences {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> SkeletonSequence {
        // one joint moving from 0 to 1 on every axis over two frames
        SkeletonSequence::new(0, 1, 1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn resize_identity_and_constants() {
        let s = ramp().resize_temporal(64);
        assert_eq!(s.resize_temporal(64), s);
        let c = SkeletonSequence::new(0, 1, 2, 3, vec![1.5; 18])
            .unwrap()
            .resize_temporal(64);
        assert!(c.coords().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn resize_linear_ramp() {
        let s = ramp().resize_temporal(64);
        assert_eq!(s.frames(), 64);
        let p = s.point(0, 0, 31);
        assert!((p[0] - 31.0 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn single_frame_resizes_to_constant() {
        let s = SkeletonSequence::new(0, 1, 1, 1, vec![1.0, 2.0, 3.0])
            .unwrap()
            .resize_temporal(4);
        assert_eq!(s.point(0, 0, 3), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn preprocessing_is_idempotent_at_target() {
        let s = SkeletonSequence::new(1, 1, 2, 5, (0..30).map(|k| k as f64 * 0.1).collect()).unwrap();
        let once = s.preprocess(0, 8);
        assert_eq!(once.point(0, 0, 0), [0.0; 3]);
        assert_eq!(once.preprocess(0, 8), once);
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_jsonl(f.path(), None).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let mut s = SkeletonSequence::new(
            2,
            1,
            2,
            3,
            vec![
                0.1,
                -0.2,
                1.0 / 3.0,
                4.0,
                5e-17,
                6.0,
                7.0,
                8.0,
                9.0,
                1.0,
                2.0,
                std::f64::consts::PI,
                1.0,
                1.0,
                1.0,
                2.0,
                2.0,
                2.0,
            ],
        )
        .unwrap();
        s.subject = 4;
        s.view = 2;
        save_jsonl(f.path(), std::slice::from_ref(&s)).unwrap();
        let back = load_jsonl(f.path(), Some(2)).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn joint_count_mismatch_names_line() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let good = SkeletonSequence::new(0, 1, 20, 1, vec![0.0; 60]).unwrap();
        let bad = SkeletonSequence::new(0, 1, 19, 1, vec![0.0; 57]).unwrap();
        save_jsonl(f.path(), &[good, bad]).unwrap();
        match load_jsonl(f.path(), Some(20)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_and_missing_fields_are_parse_errors() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "{\"label\":0,\"joints\":[[[[0,0,0],[1,1,1]],[[0,0,0]]]]}\n").unwrap();
        assert!(matches!(load_jsonl(f.path(), None), Err(Error::Parse { line: 1, .. })));
        std::fs::write(f.path(), "\n{\"joints\":[[[[0,0,0]]]]}\n").unwrap();
        assert!(matches!(load_jsonl(f.path(), None), Err(Error::Parse { line: 2, .. })));
    }
}
