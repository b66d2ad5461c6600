//! Detection AP, CLEAR-MOT tracking metrics and forecast displacement error.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geom::{iou, RotatedBox};
use crate::net::DetectionSet;
use crate::sim::{Label, Sequence};
use crate::track::{min_cost_assignment, TrackedBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Ground truth with fewer points is a don't-care region.
    pub min_points: usize,
    /// Point thresholds for the AP-versus-sparsity sweep.
    pub min_points_sweep: Vec<usize>,
    /// Bin edges in metres of ego distance; bin `b` is `[edges[b], edges[b+1])`.
    pub distance_bins: Vec<f64>,
    pub assoc_iou: f64,
    /// Tracks scoring below this are dropped before CLEAR-MOT.
    pub score_thr: f64,
    /// Forecast horizons in frames.
    pub horizons: Vec<usize>,
    /// IoU threshold used for the distance breakdown.
    pub distance_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            min_points: 3,
            min_points_sweep: vec![0, 1, 3, 5, 10, 20, 50],
            distance_bins: (0..=10).map(|i| 10.0 * i as f64).collect(),
            assoc_iou: 0.5,
            score_thr: 0.9,
            horizons: vec![1, 2, 3, 4],
            distance_iou: 0.7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !self.iou_thresholds.iter().all(|&t| unit(t)) || !unit(self.assoc_iou) || !unit(self.distance_iou) {
            return Err(crate::Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.distance_bins.len() < 2 || self.distance_bins.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(crate::Error::Config(
                "distance bins must be at least two increasing edges".into(),
            ));
        }
        Ok(())
    }
}

/// Detections and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEval {
    pub dets: Vec<(RotatedBox, f64)>,
    pub gts: Vec<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PRCurve {
    /// `(recall, precision)` after each counted detection, in rank order.
    pub points: Vec<(f64, f64)>,
    /// Area under the monotone precision envelope; 0 without ground truth.
    pub ap: f64,
    /// Ground-truth boxes that count (not don't-care).
    pub num_gt: usize,
}

fn content_cmp(a: &RotatedBox, b: &RotatedBox) -> Ordering {
    a.cx.total_cmp(&b.cx)
        .then(a.cy.total_cmp(&b.cy))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
        .then(a.theta.total_cmp(&b.theta))
}

enum Outcome {
    Tp,
    Fp,
    Skip,
}

/// Ranks detections of all frames by score and matches each greedily to the
/// best-overlapping unmatched ground truth at `iou ≥ iou_thr`. A detection
/// whose best match is a don't-care box is dropped.
pub fn average_precision(frames: &[FrameEval], iou_thr: f64, min_points: usize) -> PRCurve {
    ap_with(frames, iou_thr, |fi, g| frames[fi].gts[g].points >= min_points)
}

fn ap_with(frames: &[FrameEval], iou_thr: f64, care: impl Fn(usize, usize) -> bool) -> PRCurve {
    let num_gt = frames
        .iter()
        .enumerate()
        .map(|(fi, f)| (0..f.gts.len()).filter(|&g| care(fi, g)).count())
        .sum();
    let mut ranked: Vec<(usize, &RotatedBox, f64)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| f.dets.iter().map(move |(b, s)| (fi, b, *s)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(content_cmp(a.1, b.1)));
    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut outcomes = Vec::with_capacity(ranked.len());
    for &(fi, b, _) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frames[fi].gts.iter().enumerate() {
            if care(fi, g) && matched[fi][g] {
                continue;
            }
            let v = iou(b, &gt.bbox);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        outcomes.push(match best {
            None => Outcome::Fp,
            Some((g, _)) if !care(fi, g) => Outcome::Skip,
            Some((g, _)) => {
                matched[fi][g] = true;
                Outcome::Tp
            }
        });
    }
    pr_from_outcomes(&outcomes, num_gt)
}

fn pr_from_outcomes(outcomes: &[Outcome], num_gt: usize) -> PRCurve {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Skip => continue,
        }
        let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
        points.push((recall, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    if num_gt > 0 {
        let mut envelope = 0.0f64;
        let mut next_recall = points.last().map_or(0.0, |p| p.0);
        for &(r, p) in points.iter().rev() {
            ap += (next_recall - r) * envelope;
            envelope = envelope.max(p);
            next_recall = r;
        }
        ap += next_recall * envelope;
    }
    PRCurve { points, ap, num_gt }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    /// `None` when the bin holds no countable ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
}

fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    (0..edges.len() - 1).find(|&b| d >= edges[b] && d < edges[b + 1])
}

fn distance(b: &RotatedBox) -> f64 {
    b.cx.hypot(b.cy)
}

/// AP per ego-distance bin. Ground truth is binned by its centre; a
/// detection joins the bin of its best-overlapping ground truth, or of its
/// own centre when it overlaps none. Ground truth outside the bin acts as
/// don't-care for that bin.
pub fn map_by_distance(frames: &[FrameEval], iou_thr: f64, min_points: usize, edges: &[f64]) -> Vec<DistanceBin> {
    let gt_bins: Vec<Vec<Option<usize>>> = frames
        .iter()
        .map(|f| f.gts.iter().map(|g| bin_of(edges, distance(&g.bbox))).collect())
        .collect();
    let det_bins: Vec<Vec<Option<usize>>> = frames
        .iter()
        .zip(&gt_bins)
        .map(|(f, gb)| {
            f.dets
                .iter()
                .map(|d| {
                    let mut best: Option<(usize, f64)> = None;
                    for (g, gt) in f.gts.iter().enumerate() {
                        let v = iou(&d.0, &gt.bbox);
                        if v > 0.0 && best.map_or(true, |(_, bv)| v > bv) {
                            best = Some((g, v));
                        }
                    }
                    match best {
                        Some((g, _)) => gb[g],
                        None => bin_of(edges, distance(&d.0)),
                    }
                })
                .collect()
        })
        .collect();
    (0..edges.len().saturating_sub(1))
        .map(|b| {
            let fs: Vec<FrameEval> = frames
                .iter()
                .enumerate()
                .map(|(fi, f)| FrameEval {
                    dets: f
                        .dets
                        .iter()
                        .zip(&det_bins[fi])
                        .filter(|(_, db)| **db == Some(b))
                        .map(|(d, _)| *d)
                        .collect(),
                    gts: f.gts.clone(),
                })
                .collect();
            let curve = ap_with(&fs, iou_thr, |fi, g| {
                gt_bins[fi][g] == Some(b) && frames[fi].gts[g].points >= min_points
            });
            DistanceBin {
                lo: edges[b],
                hi: edges[b + 1],
                ap: (curve.num_gt > 0).then_some(curve.ap),
                num_gt: curve.num_gt,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotSummary {
    pub mota: f64,
    /// Mean IoU over matched pairs; 0 without matches.
    pub motp: f64,
    /// Fraction of ground-truth tracks matched in at least 80% of their frames.
    pub mt: f64,
    /// Fraction matched in at most 20% of their frames.
    pub ml: f64,
    pub id_switches: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub matches: usize,
    pub num_gt: usize,
    pub gt_tracks: usize,
}

/// Accumulates CLEAR-MOT counts over any number of sequences.
#[derive(Clone, Debug, Default)]
pub struct MotAccumulator {
    fp: usize,
    misses: usize,
    idsw: usize,
    matches: usize,
    iou_sum: f64,
    num_gt: usize,
    coverage: Vec<(usize, usize)>,
}

impl MotAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sequence. `hyp[t]` and `gt[t]` hold frame `t`; tracks
    /// scoring below `score_thr` are ignored.
    pub fn add_sequence(&mut self, hyp: &[Vec<TrackedBox>], gt: &[Vec<Label>], assoc_iou: f64, score_thr: f64) {
        assert_eq!(hyp.len(), gt.len(), "hypothesis and ground truth frame counts differ");
        let mut last: HashMap<u32, u64> = HashMap::new();
        let mut span: HashMap<u32, (usize, usize)> = HashMap::new();
        for (hs, gs) in hyp.iter().zip(gt) {
            let hs: Vec<&TrackedBox> = hs.iter().filter(|h| h.score >= score_thr).collect();
            self.num_gt += gs.len();
            let overlap: Vec<Vec<f64>> = gs
                .iter()
                .map(|g| hs.iter().map(|h| iou(&g.bbox, &h.bbox)).collect())
                .collect();
            let mut gt_match: Vec<Option<usize>> = vec![None; gs.len()];
            let mut hyp_used = vec![false; hs.len()];
            for (g, lab) in gs.iter().enumerate() {
                let Some(&prev) = last.get(&lab.track) else { continue };
                if let Some(h) = (0..hs.len()).find(|&h| hs[h].id == prev && !hyp_used[h]) {
                    if overlap[g][h] >= assoc_iou {
                        gt_match[g] = Some(h);
                        hyp_used[h] = true;
                    }
                }
            }
            let free_g: Vec<usize> = (0..gs.len()).filter(|&g| gt_match[g].is_none()).collect();
            let free_h: Vec<usize> = (0..hs.len()).filter(|&h| !hyp_used[h]).collect();
            let cost: Vec<f64> = free_g
                .iter()
                .flat_map(|&g| free_h.iter().map(move |&h| (g, h)))
                .map(|(g, h)| {
                    if overlap[g][h] >= assoc_iou {
                        1.0 - overlap[g][h]
                    } else {
                        2.0
                    }
                })
                .collect();
            for (r, c) in min_cost_assignment(&cost, free_g.len(), free_h.len())
                .into_iter()
                .enumerate()
            {
                let Some(c) = c else { continue };
                let (g, h) = (free_g[r], free_h[c]);
                if overlap[g][h] >= assoc_iou {
                    gt_match[g] = Some(h);
                    hyp_used[h] = true;
                }
            }
            for (g, lab) in gs.iter().enumerate() {
                let e = span.entry(lab.track).or_insert((0, 0));
                e.0 += 1;
                match gt_match[g] {
                    None => self.misses += 1,
                    Some(h) => {
                        e.1 += 1;
                        self.matches += 1;
                        self.iou_sum += overlap[g][h];
                        if let Some(prev) = last.insert(lab.track, hs[h].id) {
                            if prev != hs[h].id {
                                self.idsw += 1;
                            }
                        }
                    }
                }
            }
            self.fp += hyp_used.iter().filter(|u| !**u).count();
        }
        let mut tracks: Vec<_> = span.into_iter().collect();
        tracks.sort_by_key(|(id, _)| *id);
        self.coverage.extend(tracks.into_iter().map(|(_, c)| c));
    }

    pub fn summary(&self) -> MotSummary {
        let tracks = self.coverage.len();
        let frac = |pred: &dyn Fn(f64) -> bool| {
            if tracks == 0 {
                0.0
            } else {
                self.coverage
                    .iter()
                    .filter(|(n, m)| pred(*m as f64 / *n as f64))
                    .count() as f64
                    / tracks as f64
            }
        };
        MotSummary {
            mota: 1.0 - (self.misses + self.fp + self.idsw) as f64 / self.num_gt.max(1) as f64,
            motp: if self.matches > 0 {
                self.iou_sum / self.matches as f64
            } else {
                0.0
            },
            mt: frac(&|r| r >= 0.8),
            ml: frac(&|r| r <= 0.2),
            id_switches: self.idsw,
            false_positives: self.fp,
            misses: self.misses,
            matches: self.matches,
            num_gt: self.num_gt,
            gt_tracks: tracks,
        }
    }
}

/// CLEAR-MOT on a single sequence.
pub fn clear_mot(hyp: &[Vec<TrackedBox>], gt: &[Vec<Label>], assoc_iou: f64, score_thr: f64) -> MotSummary {
    let mut acc = MotAccumulator::new();
    acc.add_sequence(hyp, gt, assoc_iou, score_thr);
    acc.summary()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonError {
    pub horizon: usize,
    pub l1: f64,
    pub l2: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub horizons: Vec<HorizonError>,
    /// Matched ground truth over countable ground truth at the current frame.
    pub recall: f64,
}

/// Accumulates centre displacement of forecasts over true positives.
#[derive(Clone, Debug, Default)]
pub struct ForecastAccumulator {
    sums: HashMap<usize, (f64, f64, usize)>,
    held: HashMap<usize, (f64, f64, usize)>,
    matched: usize,
    total: usize,
}

impl ForecastAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `sets[k]` holds the detections of frame `sets[k].frame` of `seq`.
    /// Detections are matched one-to-one to ground truth with at least
    /// `min_points` points at `iou ≥ match_iou`; each matched pair
    /// contributes at every horizon both the forecast and the future ground
    /// truth exist.
    pub fn add_sequence(
        &mut self,
        sets: &[DetectionSet],
        seq: &Sequence,
        horizons: &[usize],
        match_iou: f64,
        min_points: usize,
    ) {
        for set in sets {
            let t = set.frame;
            let gts: Vec<&Label> = seq.labels[t].iter().filter(|g| g.points >= min_points).collect();
            self.total += gts.len();
            let overlap: Vec<f64> = gts
                .iter()
                .flat_map(|g| set.detections.iter().map(move |d| iou(&g.bbox, d.current())))
                .collect();
            let cost: Vec<f64> = overlap
                .iter()
                .map(|&v| if v >= match_iou { 1.0 - v } else { 2.0 })
                .collect();
            let cols = set.detections.len();
            for (g, d) in min_cost_assignment(&cost, gts.len(), cols).into_iter().enumerate() {
                let Some(d) = d.filter(|&d| overlap[g * cols + d] >= match_iou) else {
                    continue;
                };
                self.matched += 1;
                let det = &set.detections[d];
                for &h in horizons {
                    let Some(f) = det.boxes.get(h) else { continue };
                    if t + h >= seq.len() {
                        continue;
                    }
                    let Some(truth) = seq.future_box(t, gts[g].track, h) else {
                        continue;
                    };
                    add_error(&mut self.sums, h, f, &truth);
                    add_error(&mut self.held, h, &gts[g].bbox, &truth);
                }
            }
        }
    }

    pub fn report(&self, horizons: &[usize]) -> ForecastReport {
        self.summarize(&self.sums, horizons)
    }

    /// The static baseline on the same pairs: the matched ground truth box
    /// held still, which errs by exactly the distance travelled.
    pub fn static_report(&self, horizons: &[usize]) -> ForecastReport {
        self.summarize(&self.held, horizons)
    }

    fn summarize(&self, sums: &HashMap<usize, (f64, f64, usize)>, horizons: &[usize]) -> ForecastReport {
        ForecastReport {
            horizons: horizons
                .iter()
                .map(|&h| {
                    let (l1, l2, n) = sums.get(&h).copied().unwrap_or((0.0, 0.0, 0));
                    let mean = |s: f64| if n > 0 { s / n as f64 } else { f64::NAN };
                    HorizonError {
                        horizon: h,
                        l1: mean(l1),
                        l2: mean(l2),
                        pairs: n,
                    }
                })
                .collect(),
            recall: if self.total > 0 {
                self.matched as f64 / self.total as f64
            } else {
                0.0
            },
        }
    }
}

fn add_error(sums: &mut HashMap<usize, (f64, f64, usize)>, h: usize, f: &RotatedBox, truth: &RotatedBox) {
    let (dx, dy) = ((f.cx - truth.cx).abs(), (f.cy - truth.cy).abs());
    let e = sums.entry(h).or_insert((0.0, 0.0, 0));
    e.0 += dx + dy;
    e.1 += dx.hypot(dy);
    e.2 += 1;
}

pub fn forecast_error(
    sets: &[DetectionSet],
    seq: &Sequence,
    horizons: &[usize],
    match_iou: f64,
    min_points: usize,
) -> ForecastReport {
    let mut acc = ForecastAccumulator::new();
    acc.add_sequence(sets, seq, horizons, match_iou, min_points);
    acc.report(horizons)
}

/// Ordered `(metric, config, value)` rows; `None` values print as `NA`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, String, Option<f64>)>,
}

pub const REPORT_HEADER: &str = "metric\tconfig\tvalue";

impl Report {
    pub fn push(&mut self, metric: &str, config: impl Into<String>, value: impl Into<Option<f64>>) {
        self.rows.push((metric.to_string(), config.into(), value.into()));
    }

    pub fn get(&self, metric: &str, config: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.0 == metric && r.1 == config)
            .and_then(|r| r.2)
    }

    /// Tab-separated with a header line; values with nine decimals.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for (m, c, v) in &self.rows {
            match v {
                Some(v) if v.is_finite() => {
                    let _ = writeln!(s, "{m}\t{c}\t{v:.9}");
                }
                _ => {
                    let _ = writeln!(s, "{m}\t{c}\tNA");
                }
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err("missing report header".into());
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(format!("line {}: expected 3 fields", n + 2));
            }
            let v = match f[2] {
                "NA" => None,
                x => Some(x.parse().map_err(|_| format!("line {}: bad value", n + 2))?),
            };
            rows.push((f[0].to_string(), f[1].to_string(), v));
        }
        Ok(Report { rows })
    }
}

/// Distinct track ids in per-frame output.
pub fn track_count(hyp: &[Vec<TrackedBox>]) -> usize {
    hyp.iter().flatten().map(|b| b.id).collect::<HashSet<_>>().len()
}
