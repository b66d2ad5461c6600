//! Tracklet decoding from current detections and earlier forecasts, and a
//! frame-to-frame Hungarian baseline.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

mod assignment;

pub use assignment::min_cost_assignment;

use crate::geom::{iou, normalize_angle, RotatedBox};
use crate::net::{Detection, DetectionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// IoU at which candidates are considered the same object.
    pub match_thr: f64,
    /// Score multiplier per elapsed frame for forecast candidates.
    pub decay: f64,
    /// Frames a track may survive on forecasts alone; `None` means `n_out − 1`.
    pub max_coast: Option<usize>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            match_thr: 0.5,
            decay: 0.9,
            max_coast: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    /// Backed by a detection in the current frame.
    Live,
    /// Present only through forecasts from earlier frames.
    Coasting,
    Dead,
}

impl fmt::Display for TrackStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackStatus::Live => "live",
            TrackStatus::Coasting => "coasting",
            TrackStatus::Dead => "dead",
        })
    }
}

/// One track's state at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedBox {
    pub frame: usize,
    pub id: u64,
    pub bbox: RotatedBox,
    pub score: f64,
    pub status: TrackStatus,
    /// Forecast boxes of the backing detection (`[0]` is `bbox`'s detection);
    /// empty while coasting.
    pub forecast: Vec<RotatedBox>,
}

struct Buffered {
    frame: usize,
    set: DetectionSet,
    ids: Vec<u64>,
}

struct Candidate {
    bbox: RotatedBox,
    rank: f64,
    score: f64,
    age: usize,
    track: Option<u64>,
    current: Option<usize>,
}

/// Streaming tracklet decoder. Feed consecutive frames through [`step`].
///
/// [`step`]: TrackerState::step
pub struct TrackerState {
    config: TrackerConfig,
    n_out: usize,
    buffer: VecDeque<Buffered>,
    next_id: u64,
    last_live: HashMap<u64, usize>,
}

/// Component-wise mean; the heading is averaged through its sine and cosine.
pub fn average_boxes(boxes: &[RotatedBox]) -> RotatedBox {
    let n = boxes.len() as f64;
    let mean = |f: fn(&RotatedBox) -> f64| boxes.iter().map(f).sum::<f64>() / n;
    let (s, c) = (mean(|b| b.theta.sin()), mean(|b| b.theta.cos()));
    RotatedBox {
        cx: mean(|b| b.cx),
        cy: mean(|b| b.cy),
        w: mean(|b| b.w),
        h: mean(|b| b.h),
        theta: normalize_angle(s.atan2(c)),
    }
}

impl TrackerState {
    /// `n_out` is the number of timestamps each detection carries.
    pub fn new(config: TrackerConfig, n_out: usize) -> Self {
        TrackerState {
            config,
            n_out: n_out.max(1),
            buffer: VecDeque::new(),
            next_id: 0,
            last_live: HashMap::new(),
        }
    }

    pub fn max_coast(&self) -> usize {
        self.config.max_coast.unwrap_or(self.n_out - 1)
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    fn candidates(&self, current: &DetectionSet) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = current
            .detections
            .iter()
            .enumerate()
            .map(|(i, d)| Candidate {
                bbox: *d.current(),
                rank: d.score,
                score: d.score,
                age: 0,
                track: None,
                current: Some(i),
            })
            .collect();
        for b in &self.buffer {
            let Some(age) = current.frame.checked_sub(b.frame).filter(|&a| a > 0) else {
                continue;
            };
            let rel = b.set.pose.relative_to(&current.pose);
            for (d, &id) in b.set.detections.iter().zip(&b.ids) {
                let Some(f) = d.boxes.get(age) else { continue };
                out.push(Candidate {
                    bbox: f.transformed(&rel),
                    rank: d.score * self.config.decay.powi(age as i32),
                    score: d.score,
                    age,
                    track: Some(id),
                    current: None,
                });
            }
        }
        out
    }

    /// Decodes the tracks present at `current.frame`.
    ///
    /// Candidates are the current detections plus every buffered forecast
    /// addressed to this frame. They are grouped greedily in order of
    /// decayed score, at most one candidate per source frame per group, and
    /// each group is averaged. A group inherits the oldest contributing id
    /// not already taken this frame.
    pub fn step(&mut self, current: &DetectionSet) -> Vec<TrackedBox> {
        let cands = self.candidates(current);
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| {
            cands[b]
                .rank
                .total_cmp(&cands[a].rank)
                .then(cands[a].age.cmp(&cands[b].age))
                .then(a.cmp(&b))
        });
        let mut grouped = vec![false; cands.len()];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (pos, &seed) in order.iter().enumerate() {
            if grouped[seed] {
                continue;
            }
            grouped[seed] = true;
            let mut members = vec![seed];
            let mut ages = HashSet::from([cands[seed].age]);
            for &c in &order[pos + 1..] {
                if grouped[c] || ages.contains(&cands[c].age) {
                    continue;
                }
                if iou(&cands[seed].bbox, &cands[c].bbox) >= self.config.match_thr {
                    grouped[c] = true;
                    ages.insert(cands[c].age);
                    members.push(c);
                }
            }
            groups.push(members);
        }

        let max_coast = self.max_coast();
        let mut taken = HashSet::new();
        let mut out = Vec::new();
        let mut current_ids = vec![0u64; current.detections.len()];
        for members in groups {
            let det = members.iter().find_map(|&m| cands[m].current);
            let mut ids: Vec<u64> = members.iter().filter_map(|&m| cands[m].track).collect();
            ids.sort_unstable();
            let inherited = ids.into_iter().find(|id| !taken.contains(id));
            if det.is_none() {
                let alive = inherited
                    .and_then(|id| self.last_live.get(&id))
                    .is_some_and(|&f| current.frame - f <= max_coast);
                if !alive {
                    continue;
                }
            }
            let id = inherited.unwrap_or_else(|| {
                self.next_id += 1;
                self.next_id - 1
            });
            taken.insert(id);
            let boxes: Vec<RotatedBox> = members.iter().map(|&m| cands[m].bbox).collect();
            let score = members
                .iter()
                .map(|&m| cands[m].score)
                .fold(f64::NEG_INFINITY, f64::max);
            let (status, forecast) = match det {
                Some(i) => {
                    current_ids[i] = id;
                    self.last_live.insert(id, current.frame);
                    (TrackStatus::Live, current.detections[i].boxes.clone())
                }
                None => (TrackStatus::Coasting, Vec::new()),
            };
            out.push(TrackedBox {
                frame: current.frame,
                id,
                bbox: average_boxes(&boxes),
                score,
                status,
                forecast,
            });
        }
        out.sort_by_key(|t| t.id);

        self.buffer.push_back(Buffered {
            frame: current.frame,
            set: current.clone(),
            ids: current_ids,
        });
        while self.buffer.len() > self.n_out - 1 {
            self.buffer.pop_front();
        }
        out
    }
}

/// Runs the decoder over a whole sequence of detection sets.
pub fn decode_tracklets(sets: &[DetectionSet], config: &TrackerConfig, n_out: usize) -> Vec<Vec<TrackedBox>> {
    let mut state = TrackerState::new(config.clone(), n_out);
    sets.iter().map(|s| state.step(s)).collect()
}

/// Frame-to-frame baseline on current boxes: Kuhn–Munkres on `1 − IoU`,
/// pairs below `assoc_thr` rejected, unmatched tracks end immediately.
pub fn hungarian_track(sets: &[DetectionSet], assoc_thr: f64) -> Vec<Vec<TrackedBox>> {
    let mut next_id = 0u64;
    let mut prev: Option<(&DetectionSet, Vec<u64>)> = None;
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let mut ids = vec![None; set.detections.len()];
        if let Some((p, pids)) = &prev {
            let rel = p.pose.relative_to(&set.pose);
            let moved: Vec<RotatedBox> = p.detections.iter().map(|d| d.current().transformed(&rel)).collect();
            let (rows, cols) = (moved.len(), set.detections.len());
            let mut cost = Vec::with_capacity(rows * cols);
            let mut overlap = Vec::with_capacity(rows * cols);
            for m in &moved {
                for d in &set.detections {
                    let v = iou(m, d.current());
                    overlap.push(v);
                    cost.push(1.0 - v);
                }
            }
            for (r, c) in min_cost_assignment(&cost, rows, cols).into_iter().enumerate() {
                if let Some(c) = c.filter(|&c| overlap[r * cols + c] >= assoc_thr) {
                    ids[c] = Some(pids[r]);
                }
            }
        }
        let ids: Vec<u64> = ids
            .into_iter()
            .map(|id| {
                id.unwrap_or_else(|| {
                    next_id += 1;
                    next_id - 1
                })
            })
            .collect();
        let mut frame: Vec<TrackedBox> = set
            .detections
            .iter()
            .zip(&ids)
            .map(|(d, &id)| TrackedBox {
                frame: set.frame,
                id,
                bbox: *d.current(),
                score: d.score,
                status: TrackStatus::Live,
                forecast: d.boxes.clone(),
            })
            .collect();
        frame.sort_by_key(|t| t.id);
        out.push(frame);
        prev = Some((set, ids));
    }
    out
}

/// Per-id view of a decoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub boxes: Vec<TrackedBox>,
    /// Status after the last decoded frame.
    pub status: TrackStatus,
}

impl Tracklet {
    pub fn first_frame(&self) -> usize {
        self.boxes[0].frame
    }

    pub fn last_frame(&self) -> usize {
        self.boxes[self.boxes.len() - 1].frame
    }
}

/// Groups per-frame output by id; tracks absent from the final frame are dead.
pub fn collect_tracklets(frames: &[Vec<TrackedBox>]) -> Vec<Tracklet> {
    let mut by_id: HashMap<u64, Vec<TrackedBox>> = HashMap::new();
    for f in frames {
        for b in f {
            by_id.entry(b.id).or_default().push(b.clone());
        }
    }
    let last = frames.iter().rev().find_map(|f| f.first().map(|b| b.frame));
    let mut out: Vec<Tracklet> = by_id
        .into_iter()
        .map(|(id, boxes)| {
            let tail = &boxes[boxes.len() - 1];
            let status = if Some(tail.frame) == last {
                tail.status
            } else {
                TrackStatus::Dead
            };
            Tracklet { id, boxes, status }
        })
        .collect();
    out.sort_by_key(|t| t.id);
    out
}

pub const TRACKLET_HEADER: &str = "seq\tframe\tid\tcx\tcy\tw\th\ttheta\tscore\tstatus";

/// Tab-separated tracklet dump, one row per `(frame, id)`. Boxes are in the
/// ego frame of their sweep (metres, radians).
pub fn format_tracklets(sequences: &[Vec<Vec<TrackedBox>>]) -> String {
    let mut s = String::from(TRACKLET_HEADER);
    s.push('\n');
    for (seq, frames) in sequences.iter().enumerate() {
        for b in frames.iter().flatten() {
            let r = &b.bbox;
            let _ = writeln!(
                s,
                "{seq}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.frame, b.id, r.cx, r.cy, r.w, r.h, r.theta, b.score, b.status
            );
        }
    }
    s
}

/// Parses [`format_tracklets`] output into `(seq, box)` rows.
pub fn parse_tracklets(text: &str) -> Result<Vec<(usize, TrackedBox)>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACKLET_HEADER => {}
        _ => return Err("missing tracklet header".into()),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || format!("line {}: malformed tracklet row", n + 1);
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let int = |i: usize| f[i].parse::<u64>().map_err(|_| bad());
        let status = match f[9] {
            "live" => TrackStatus::Live,
            "coasting" => TrackStatus::Coasting,
            "dead" => TrackStatus::Dead,
            _ => return Err(bad()),
        };
        out.push((
            int(0)? as usize,
            TrackedBox {
                frame: int(1)? as usize,
                id: int(2)?,
                bbox: RotatedBox {
                    cx: num(3)?,
                    cy: num(4)?,
                    w: num(5)?,
                    h: num(6)?,
                    theta: num(7)?,
                },
                score: num(8)?,
                status,
                forecast: Vec::new(),
            },
        ));
    }
    Ok(out)
}

/// Detections built from boxes alone, for feeding ground truth or external
/// detectors through the decoder.
pub fn detection(score: f64, boxes: Vec<RotatedBox>) -> Detection {
    Detection {
        score,
        boxes,
        anchor: 0,
    }
}

/// Ground truth as detections: every labelled box with score 1 and its true
/// future boxes, truncated where the track or the sequence ends.
pub fn oracle_detections(seq: &crate::sim::Sequence, n_out: usize) -> Vec<DetectionSet> {
    (0..seq.len())
        .map(|t| DetectionSet {
            frame: t,
            pose: seq.frames[t].pose,
            detections: seq.labels[t]
                .iter()
                .map(|l| {
                    let boxes = (0..n_out)
                        .take_while(|&h| t + h < seq.len())
                        .map_while(|h| seq.future_box(t, l.track, h))
                        .collect();
                    detection(1.0, boxes)
                })
                .collect(),
        })
        .collect()
}
