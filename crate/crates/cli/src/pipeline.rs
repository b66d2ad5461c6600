//! Detection, tracking and evaluation glue shared by the commands.

use anyhow::Result;
use bevtrack::geom::RotatedBox;
use bevtrack::metrics::{
    average_precision, map_by_distance, ForecastAccumulator, ForecastReport, FrameEval, MotAccumulator, MotSummary,
    Report,
};
use bevtrack::net::{decode, AnchorGrid, DetectionSet, Model};
use bevtrack::sim::{Dataset, Label};
use bevtrack::track::{decode_tracklets, hungarian_track, TrackedBox, TrackerConfig};
use bevtrack::train::input_at;
use bevtrack::voxel::GridSpec;

use crate::config::RunConfig;

pub fn in_region(grid: &GridSpec, b: &RotatedBox) -> bool {
    grid.contains_xy(b.cx, b.cy)
}

pub fn region_labels(labels: &[Label], grid: &GridSpec) -> Vec<Label> {
    labels.iter().filter(|l| in_region(grid, &l.bbox)).cloned().collect()
}

/// Runs the detector on frames `first..` of every sequence.
pub fn detect_all(
    model: &Model,
    dataset: &Dataset,
    first: usize,
    score_thr: f64,
    nms_thr: f64,
) -> Result<Vec<Vec<DetectionSet>>> {
    let anchors: AnchorGrid = model.config.build_anchors()?;
    let first = first.max(model.config.n_in - 1);
    dataset
        .sequences
        .iter()
        .enumerate()
        .map(|(si, seq)| {
            (first..seq.len())
                .map(|t| {
                    let out = model.predict(&input_at(dataset, si, t, &model.config)?)?;
                    Ok(DetectionSet {
                        frame: t,
                        pose: seq.frames[t].pose,
                        detections: decode(&out, &anchors, score_thr, nms_thr),
                    })
                })
                .collect()
        })
        .collect()
}

/// Keeps detections scoring at least `thr`.
pub fn threshold(sets: &[Vec<DetectionSet>], thr: f64) -> Vec<Vec<DetectionSet>> {
    sets.iter()
        .map(|seq| {
            seq.iter()
                .map(|s| DetectionSet {
                    detections: s.detections.iter().filter(|d| d.score >= thr).cloned().collect(),
                    ..s.clone()
                })
                .collect()
        })
        .collect()
}

/// Pairs detections with in-region ground truth, frame by frame.
pub fn frame_evals(dataset: &Dataset, sets: &[Vec<DetectionSet>], grid: &GridSpec) -> Vec<FrameEval> {
    let mut out = Vec::new();
    for (seq, frames) in dataset.sequences.iter().zip(sets) {
        for s in frames {
            out.push(FrameEval {
                dets: s
                    .detections
                    .iter()
                    .filter(|d| in_region(grid, d.current()))
                    .map(|d| (*d.current(), d.score))
                    .collect(),
                gts: region_labels(&seq.labels[s.frame], grid),
            });
        }
    }
    out
}

/// Frame evaluations from tracker output instead of raw detections.
pub fn tracked_frame_evals(dataset: &Dataset, tracks: &[Vec<Vec<TrackedBox>>], grid: &GridSpec) -> Vec<FrameEval> {
    let mut out = Vec::new();
    for (seq, frames) in dataset.sequences.iter().zip(tracks) {
        for f in frames {
            let Some(t) = f.first().map(|b| b.frame) else { continue };
            out.push(FrameEval {
                dets: f
                    .iter()
                    .filter(|b| in_region(grid, &b.bbox))
                    .map(|b| (b.bbox, b.score))
                    .collect(),
                gts: region_labels(&seq.labels[t], grid),
            });
        }
    }
    out
}

fn iou_key(t: f64) -> String {
    format!("iou={t}")
}

/// AP at every IoU threshold, AP against the minimum point count and AP
/// per distance bin.
pub fn detection_report(frames: &[FrameEval], cfg: &RunConfig) -> Report {
    let e = &cfg.eval;
    let mut r = Report::default();
    for &t in &e.iou_thresholds {
        r.push("ap", iou_key(t), average_precision(frames, t, e.min_points).ap);
    }
    for &m in &e.min_points_sweep {
        r.push(
            "ap_min_points",
            format!("{};min_points={m}", iou_key(e.distance_iou)),
            average_precision(frames, e.distance_iou, m).ap,
        );
    }
    for b in map_by_distance(frames, e.distance_iou, e.min_points, &e.distance_bins) {
        r.push(
            "ap_distance",
            format!("{};range={}-{}", iou_key(e.distance_iou), b.lo, b.hi),
            b.ap,
        );
    }
    r
}

pub struct TrackingResult {
    pub decoder: MotSummary,
    pub hungarian: MotSummary,
    pub forecast: ForecastReport,
    pub static_forecast: ForecastReport,
    pub decoder_tracks: Vec<Vec<Vec<TrackedBox>>>,
}

fn clip_tracks(tracks: &[Vec<TrackedBox>], grid: &GridSpec) -> Vec<Vec<TrackedBox>> {
    tracks
        .iter()
        .map(|f| f.iter().filter(|b| in_region(grid, &b.bbox)).cloned().collect())
        .collect()
}

/// Runs both trackers on `sets` (already thresholded) and scores them
/// against in-region ground truth; forecasts are scored on true positives.
pub fn tracking_eval(
    dataset: &Dataset,
    sets: &[Vec<DetectionSet>],
    tracker: &TrackerConfig,
    cfg: &RunConfig,
) -> TrackingResult {
    let grid = &cfg.model.grid;
    let e = &cfg.eval;
    let n_out = cfg.model.n_out;
    let mut dec = MotAccumulator::new();
    let mut hun = MotAccumulator::new();
    let mut fc = ForecastAccumulator::new();
    let mut decoder_tracks = Vec::new();
    for (seq, frames) in dataset.sequences.iter().zip(sets) {
        let gt: Vec<Vec<Label>> = frames
            .iter()
            .map(|s| region_labels(&seq.labels[s.frame], grid))
            .collect();
        let d = decode_tracklets(frames, tracker, n_out);
        let h = hungarian_track(frames, e.assoc_iou);
        dec.add_sequence(&clip_tracks(&d, grid), &gt, e.assoc_iou, e.score_thr);
        hun.add_sequence(&clip_tracks(&h, grid), &gt, e.assoc_iou, e.score_thr);
        let in_grid: Vec<DetectionSet> = frames
            .iter()
            .map(|s| DetectionSet {
                detections: s
                    .detections
                    .iter()
                    .filter(|d| in_region(grid, d.current()))
                    .cloned()
                    .collect(),
                ..s.clone()
            })
            .collect();
        let mut seq_in = seq.clone();
        for (t, l) in seq_in.labels.iter_mut().enumerate() {
            if frames.iter().any(|s| s.frame == t) {
                *l = region_labels(l, grid);
            }
        }
        fc.add_sequence(&in_grid, &seq_in, &e.horizons, e.assoc_iou, e.min_points);
        decoder_tracks.push(d);
    }
    TrackingResult {
        decoder: dec.summary(),
        hungarian: hun.summary(),
        forecast: fc.report(&e.horizons),
        static_forecast: fc.static_report(&e.horizons),
        decoder_tracks,
    }
}

pub fn tracking_report(r: &TrackingResult, dt: f64) -> Report {
    let mut rep = Report::default();
    for (name, m) in [("decoder", &r.decoder), ("hungarian", &r.hungarian)] {
        rep.push("mota", name, m.mota);
        rep.push("motp", name, m.motp);
        rep.push("mt", name, m.mt);
        rep.push("ml", name, m.ml);
        rep.push("id_switches", name, m.id_switches as f64);
        rep.push("false_positives", name, m.false_positives as f64);
        rep.push("misses", name, m.misses as f64);
    }
    for (name, f) in [("model", &r.forecast), ("static", &r.static_forecast)] {
        for h in &f.horizons {
            let key = format!("{name};horizon={};seconds={:.3}", h.horizon, h.horizon as f64 * dt);
            rep.push("forecast_l1", key.clone(), h.l1);
            rep.push("forecast_l2", key.clone(), h.l2);
            rep.push("forecast_pairs", key, h.pairs as f64);
        }
        rep.push("forecast_recall", name, f.recall);
    }
    rep
}
