//! Newline-delimited JSON dataset files.
//!
//! Every line is one object with a `kind` field:
//!
//! | kind    | fields                                                               |
//! |---------|----------------------------------------------------------------------|
//! | `meta`  | `version`, `dt` (s), `sequences`, `sim` (generator config or null)   |
//! | `frame` | `seq`, `t`, `pose` {`x`,`y` m, `yaw` rad}, `points` [x,y,z,...] m    |
//! | `label` | `seq`, `t`, `track`, `cx`,`cy`,`w`,`h` m, `theta` rad, `points`      |
//!
//! The `meta` record comes first. Frames appear in `(seq, t)` order, each
//! followed by its labels. Points and boxes are in the ego frame of their
//! sweep. Floats are written in shortest round-trip form, so export and
//! import are lossless.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::error::{Error, Result};
use crate::geom::{Pose, RotatedBox};
use crate::voxel::LidarFrame;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub track: u32,
    pub bbox: RotatedBox,
    /// LiDAR points returned by this vehicle in the sweep.
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequence {
    pub frames: Vec<LidarFrame>,
    pub labels: Vec<Vec<Label>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn label(&self, t: usize, track: u32) -> Option<&Label> {
        self.labels.get(t)?.iter().find(|l| l.track == track)
    }

    /// Box of `track` at frame `t + h`, expressed in the ego frame of `t`.
    pub fn future_box(&self, t: usize, track: u32, h: usize) -> Option<RotatedBox> {
        let l = self.label(t + h, track)?;
        let rel = self.frames[t + h].pose.relative_to(&self.frames[t].pose);
        Some(l.bbox.transformed(&rel))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dt: f64,
    pub sim: Option<SimConfig>,
    pub sequences: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Meta {
        version: u32,
        dt: f64,
        sequences: usize,
        sim: Option<SimConfig>,
    },
    Frame {
        seq: usize,
        t: usize,
        pose: Pose,
        points: Vec<f64>,
    },
    Label {
        seq: usize,
        t: usize,
        track: u32,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        theta: f64,
        points: usize,
    },
}

fn line(out: &mut String, r: &Record) {
    out.push_str(&serde_json::to_string(r).expect("records serialise"));
    out.push('\n');
}

impl Dataset {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        line(
            &mut out,
            &Record::Meta {
                version: DATASET_VERSION,
                dt: self.dt,
                sequences: self.sequences.len(),
                sim: self.sim.clone(),
            },
        );
        for (seq, s) in self.sequences.iter().enumerate() {
            for (t, (f, labels)) in s.frames.iter().zip(&s.labels).enumerate() {
                line(
                    &mut out,
                    &Record::Frame {
                        seq,
                        t,
                        pose: f.pose,
                        points: f.points.iter().flatten().copied().collect(),
                    },
                );
                for l in labels {
                    line(
                        &mut out,
                        &Record::Label {
                            seq,
                            t,
                            track: l.track,
                            cx: l.bbox.cx,
                            cy: l.bbox.cy,
                            w: l.bbox.w,
                            h: l.bbox.h,
                            theta: l.bbox.theta,
                            points: l.points,
                        },
                    );
                }
            }
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Record { line, detail };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (dt, sim, n_seq) = match lines.next() {
            None => return Err(err(1, "empty file, expected a meta record".into())),
            Some((i, l)) => match serde_json::from_str::<Record>(l).map_err(|e| err(i + 1, e.to_string()))? {
                Record::Meta {
                    version,
                    dt,
                    sequences,
                    sim,
                } => {
                    if version != DATASET_VERSION {
                        return Err(err(i + 1, format!("unsupported dataset version {version}")));
                    }
                    (dt, sim, sequences)
                }
                _ => return Err(err(i + 1, "first record must be `meta`".into())),
            },
        };
        let mut sequences: Vec<Sequence> = Vec::new();
        for (i, l) in lines {
            let lineno = i + 1;
            match serde_json::from_str::<Record>(l).map_err(|e| err(lineno, e.to_string()))? {
                Record::Meta { .. } => return Err(err(lineno, "duplicate meta record".into())),
                Record::Frame { seq, t, pose, points } => {
                    if seq == sequences.len() && seq < n_seq {
                        sequences.push(Sequence::default());
                    }
                    if seq + 1 != sequences.len() {
                        return Err(err(lineno, format!("frame for sequence {seq} out of order")));
                    }
                    let s = &mut sequences[seq];
                    if t != s.frames.len() {
                        return Err(err(lineno, format!("expected frame {}, found {t}", s.frames.len())));
                    }
                    if points.len() % 3 != 0 {
                        return Err(err(
                            lineno,
                            format!("{} point coordinates is not a multiple of 3", points.len()),
                        ));
                    }
                    s.frames.push(LidarFrame {
                        timestamp: t,
                        pose,
                        points: points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    });
                    s.labels.push(Vec::new());
                }
                Record::Label {
                    seq,
                    t,
                    track,
                    cx,
                    cy,
                    w,
                    h,
                    theta,
                    points,
                } => {
                    let s = sequences
                        .get_mut(seq)
                        .filter(|s| s.frames.len() == t + 1)
                        .ok_or_else(|| err(lineno, format!("label for ({seq}, {t}) does not follow its frame")))?;
                    let bbox = RotatedBox::new(cx, cy, w, h, theta).map_err(|e| err(lineno, e.to_string()))?;
                    s.labels[t].push(Label { track, bbox, points });
                }
            }
        }
        if sequences.len() != n_seq {
            return Err(err(
                text.lines().count(),
                format!("meta announces {n_seq} sequences, found {}", sequences.len()),
            ));
        }
        Ok(Dataset { dt, sim, sequences })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ndjson()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ndjson(&text)
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        let frames: usize = self.sequences.iter().map(Sequence::len).sum();
        let labels: usize = self.sequences.iter().flat_map(|s| &s.labels).map(Vec::len).sum();
        let mut s = String::new();
        let _ = write!(
            s,
            "{} sequences, {frames} frames, {labels} labels",
            self.sequences.len()
        );
        s
    }
}
