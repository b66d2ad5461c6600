//! Target assignment, hard negative mining, the detection + forecasting
//! loss, and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::net::coder::encode as encode_regression;

use crate::error::{Error, Result};
use crate::geom::{iou, RotatedBox};
use crate::net::{AnchorGrid, HeadVars, Model, ModelConfig, CODE_LEN};
use crate::sim::Dataset;
use crate::tensor::{Adam, ParamGrads, Tape, Tensor, Var};
use crate::voxel::{stack_temporal, InputTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the classification term.
    pub alpha: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Fractions of `iterations` at which the learning rate halves.
    pub milestones: Vec<f64>,
    /// Mined negatives per positive.
    pub hnm_ratio: usize,
    pub iou_match_thr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Ground truth with fewer LiDAR points is treated as don't-care.
    pub min_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lr: 1e-4,
            iterations: 1000,
            milestones: vec![0.6, 0.8],
            hnm_ratio: 3,
            iou_match_thr: 0.4,
            seed: 0,
            batch_size: 2,
            min_points: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("alpha and lr must be positive".into()));
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return Err(Error::Config("milestones must lie strictly between 0 and 1".into()));
        }
        if self.hnm_ratio < 1 || self.batch_size < 1 {
            return Err(Error::Config("hnm_ratio and batch_size must be at least 1".into()));
        }
        if !(self.iou_match_thr > 0.0 && self.iou_match_thr <= 1.0) {
            return Err(Error::Config("iou_match_thr must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let n = self.iterations as f64;
        let halvings = self.milestones.iter().filter(|&&m| iteration as f64 >= m * n).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// A ground-truth object at the current frame with its future boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub id: u32,
    /// `boxes[0]` is the current frame; `None` where the object is absent.
    pub boxes: Vec<Option<RotatedBox>>,
    /// `false` for don't-care objects (too few points).
    pub care: bool,
}

impl GtTrack {
    pub fn current(&self) -> &RotatedBox {
        self.boxes[0]
            .as_ref()
            .expect("ground truth exists at the current frame")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    /// `q` per anchor, laid out `[K, I, J]`.
    pub labels: Vec<f64>,
    /// Index into the ground-truth list for positive anchors.
    pub matched: Vec<Option<usize>>,
    /// Anchors overlapping only don't-care objects; excluded from the loss.
    pub ignore: Vec<bool>,
    /// `[K, n_out, 6, I, J]` regression codes.
    pub targets: Tensor,
    /// Which entries of `targets` contribute to the loss.
    pub mask: Vec<bool>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

fn best_anchor_for(anchors: &AnchorGrid, gt: &RotatedBox, taken: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (a, b) in anchors.boxes().iter().enumerate() {
        if taken[a] {
            continue;
        }
        let v = iou(b, gt);
        let d = (b.cx - gt.cx).hypot(b.cy - gt.cy);
        let better = match best {
            None => true,
            Some((_, bv, bd)) => v > bv || (v == bv && d < bd),
        };
        if better {
            best = Some((a, v, d));
        }
    }
    best.map(|(a, _, _)| a)
}

/// Matches anchors to ground truth on current-frame boxes. An anchor is
/// positive when its best IoU exceeds `iou_thr`; any object left without an
/// anchor is given its best-overlapping free one regardless of the threshold.
pub fn assign_targets(anchors: &AnchorGrid, gt: &[GtTrack], n_out: usize, iou_thr: f64) -> TargetAssignment {
    let n = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; n];
    let mut ignore = vec![false; n];
    for (a, ab) in anchors.boxes().iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        let mut dont_care = false;
        for (g, track) in gt.iter().enumerate() {
            let v = iou(ab, track.current());
            if v <= iou_thr {
                continue;
            }
            if !track.care {
                dont_care = true;
            } else if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        matched[a] = best.map(|(g, _)| g);
        ignore[a] = matched[a].is_none() && dont_care;
    }
    // an anchor already holding another object is never taken from it
    for (g, track) in gt.iter().enumerate() {
        if !track.care || matched.contains(&Some(g)) {
            continue;
        }
        let taken: Vec<bool> = matched.iter().map(Option::is_some).collect();
        if let Some(a) = best_anchor_for(anchors, track.current(), &taken) {
            matched[a] = Some(g);
            ignore[a] = false;
        }
    }

    let (ni, nj) = (anchors.i, anchors.j);
    let plane = ni * nj;
    let mut targets = Tensor::zeros(&[anchors.k, n_out, CODE_LEN, ni, nj]);
    let mut mask = vec![false; targets.len()];
    for (a, m) in matched.iter().enumerate() {
        let Some(g) = m else { continue };
        let (k, i, j) = anchors.unflat(a);
        for t in 0..n_out {
            let Some(Some(b)) = gt[*g].boxes.get(t) else { continue };
            let code = encode_regression(anchors.get(a), b);
            for (c, v) in code.iter().enumerate() {
                let idx = ((k * n_out + t) * CODE_LEN + c) * plane + i * nj + j;
                targets.data_mut()[idx] = *v;
                mask[idx] = true;
            }
        }
    }
    TargetAssignment {
        labels: matched.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 }).collect(),
        matched,
        ignore,
        targets,
        mask,
    }
}

/// Classification mask: every positive plus the `ratio * #positives`
/// highest-scoring eligible negatives (ties by lower index). Without
/// positives the top `ratio` negatives are kept.
pub fn mine_hard_negatives(scores: &[f64], labels: &[f64], ignore: &[bool], ratio: usize) -> Vec<bool> {
    let positives = labels.iter().filter(|&&q| q > 0.5).count();
    let mut negatives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] <= 0.5 && !ignore[i]).collect();
    negatives.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let quota = if positives > 0 { ratio * positives } else { ratio.max(1) };
    let mut mask: Vec<bool> = labels.iter().map(|&q| q > 0.5).collect();
    for &i in negatives.iter().take(quota) {
        mask[i] = true;
    }
    mask
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `alpha * BCE(mined anchors) + Σ smooth-L1(positive anchors, valid timestamps)`.
pub fn total_loss(
    tape: &mut Tape,
    heads: &HeadVars,
    assignment: &TargetAssignment,
    alpha: f64,
    hnm_ratio: usize,
) -> Result<LossVars> {
    let scores = tape.value(heads.cls).data().to_vec();
    let cls_mask = mine_hard_negatives(&scores, &assignment.labels, &assignment.ignore, hnm_ratio);
    let cls = tape.bce_with_logits(heads.logits, &assignment.labels, &cls_mask)?;
    let reg = tape.smooth_l1(heads.reg, assignment.targets.data(), &assignment.mask)?;
    let weighted = tape.scale(cls, alpha)?;
    let total = tape.add(weighted, reg)?;
    Ok(LossVars { total, cls, reg })
}

/// One training example: the history ending at frame `t` of a sequence and
/// its targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seq: usize,
    pub t: usize,
    pub gt: Vec<GtTrack>,
    pub input: Option<InputTensor>,
}

/// Ground truth at frame `t` with boxes for `t .. t + n_out`, all in the ego
/// frame of `t`. Objects whose centre lies outside the grid are skipped.
pub fn ground_truth(dataset: &Dataset, seq: usize, t: usize, config: &ModelConfig, min_points: usize) -> Vec<GtTrack> {
    let s = &dataset.sequences[seq];
    s.labels[t]
        .iter()
        .filter(|l| config.grid.contains_xy(l.bbox.cx, l.bbox.cy))
        .map(|l| GtTrack {
            id: l.track,
            boxes: (0..config.n_out)
                .map(|h| {
                    if t + h < s.len() {
                        s.future_box(t, l.track, h)
                    } else {
                        None
                    }
                })
                .collect(),
            care: l.points >= min_points,
        })
        .collect()
}

pub fn input_at(dataset: &Dataset, seq: usize, t: usize, config: &ModelConfig) -> Result<InputTensor> {
    let frames = &dataset.sequences[seq].frames;
    if t + 1 < config.n_in {
        return Err(Error::FrameCount {
            expected: config.n_in,
            got: t + 1,
        });
    }
    stack_temporal(&frames[t + 1 - config.n_in..=t], &config.grid, config.n_in)
}

/// Inputs are cached when the whole set stays under this many bytes.
const INPUT_CACHE_BYTES: usize = 1 << 30;

/// Every frame with a full history becomes a sample.
pub fn make_samples(dataset: &Dataset, config: &ModelConfig, min_points: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (seq, s) in dataset.sequences.iter().enumerate() {
        for t in config.n_in.saturating_sub(1)..s.len() {
            out.push(Sample {
                seq,
                t,
                gt: ground_truth(dataset, seq, t, config, min_points),
                input: None,
            });
        }
    }
    let g = &config.grid;
    let bytes = out.len() * config.n_in * g.nz() * g.nx() * g.ny() * 8;
    if bytes <= INPUT_CACHE_BYTES {
        for s in &mut out {
            s.input = Some(input_at(dataset, s.seq, s.t, config)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

pub const LOG_HEADER: &str = "iteration\tlr\ttotal\tcls\treg";

/// Tab-separated training log with a header line; one row per iteration,
/// losses summed over the batch.
pub fn format_log(records: &[LogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{:e}\t{:.9e}\t{:.9e}\t{:.9e}",
            r.iteration, r.lr, r.total, r.cls, r.reg
        );
    }
    s
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    model: &Model,
    input: &InputTensor,
    assignment: &TargetAssignment,
    config: &TrainConfig,
) -> Result<(f64, f64, f64, ParamGrads)> {
    let mut tape = Tape::new();
    let heads = model.forward(&mut tape, input)?;
    let loss = total_loss(&mut tape, &heads, assignment, config.alpha, config.hnm_ratio)?;
    let (total, cls, reg) = (
        tape.value(loss.total).item(),
        tape.value(loss.cls).item(),
        tape.value(loss.reg).item(),
    );
    let grads = tape.backward(loss.total)?.for_params(&model.params);
    Ok((total, cls, reg, grads))
}

/// One-sided slopes closer than this mean no kink was crossed and the
/// central difference alone is trusted.
const KINK_SLOPE_GAP: f64 = 1e-4;
/// Step reduction tried when the one-sided slopes disagree.
const KINK_STEP_DIVISOR: f64 = 10.0;

/// Worst relative error between backpropagated and central-difference
/// gradients of the total loss over every parameter entry. The denominator
/// is floored at `1e-3`.
///
/// ReLU, max pooling and hard-negative selection make the loss piecewise
/// smooth. When a kink lies within `h` of an entry the two one-sided slopes
/// disagree and the central difference is meaningless there. Where the
/// one-sided slopes disagree (a kink, or just curvature) the entry is scored
/// against the closest of the central and one-sided differences at steps
/// `h` and `h / 10`.
pub fn finite_difference_error(
    model: &Model,
    input: &InputTensor,
    assignment: &TargetAssignment,
    config: &TrainConfig,
    h: f64,
) -> Result<f64> {
    let (base, _, _, grads) = sample_gradients(model, input, assignment, config)?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for k in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[k];
            let analytic = grads.get(id).data()[k];
            let mut err = f64::INFINITY;
            for step in [h, h / KINK_STEP_DIVISOR] {
                let mut at = |d: f64| {
                    probe.params.get_mut(id).data_mut()[k] = orig + d;
                    let v = sample_loss(&probe, input, assignment, config);
                    probe.params.get_mut(id).data_mut()[k] = orig;
                    v
                };
                let (plus, minus) = (at(step)?, at(-step)?);
                let (right, left) = ((plus - base) / step, (base - minus) / step);
                err = err.min(rel(analytic, (plus - minus) / (2.0 * step)));
                if rel(right, left) <= KINK_SLOPE_GAP {
                    break;
                }
                err = err.min(rel(analytic, right)).min(rel(analytic, left));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn sample_loss(model: &Model, input: &InputTensor, assignment: &TargetAssignment, config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let heads = model.forward(&mut tape, input)?;
    let loss = total_loss(&mut tape, &heads, assignment, config.alpha, config.hnm_ratio)?;
    Ok(tape.value(loss.total).item())
}

pub fn train(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, model_config, config, |_| {})
}

/// Adam training on every sample of `dataset`, visiting samples in a
/// reshuffled order each epoch. `progress` sees each log record.
pub fn train_with(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let model = Model::new(model_config.clone(), config.seed)?;
    train_from(model, dataset, config, progress)
}

/// Like [`train_with`] but starting from `model`'s current parameters.
pub fn train_from(
    mut model: Model,
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = &model.config.clone();
    let samples = make_samples(dataset, model_config, config.min_points)?;
    if samples.is_empty() {
        return Err(Error::Config("dataset yields no training samples".into()));
    }
    let anchors = model_config.build_anchors()?;
    let assignments: Vec<TargetAssignment> = samples
        .iter()
        .map(|s| assign_targets(&anchors, &s.gt, model_config.n_out, config.iou_match_thr))
        .collect();
    let mut adam = Adam::new(&model.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        adam.lr = config.lr_at(iteration);
        let mut grads = ParamGrads::zeros_like(&model.params);
        let (mut total, mut cls, mut reg) = (0.0, 0.0, 0.0);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            let built;
            let input = match &samples[i].input {
                Some(x) => x,
                None => {
                    built = input_at(dataset, samples[i].seq, samples[i].t, model_config)?;
                    &built
                }
            };
            let (l, c, r, g) = sample_gradients(&model, input, &assignments[i], config)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, value: l });
            }
            grads.accumulate(&g);
            total += l;
            cls += c;
            reg += r;
        }
        adam.step(&mut model.params, &grads);
        let rec = LogRecord {
            iteration,
            lr: adam.lr,
            total,
            cls,
            reg,
        };
        progress(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}
