//! Detection and forecasting networks.
//!
//! Both variants share a VGG-style trunk of ten 3x3 convolutions in four
//! groups `(2, 2, 3, 3)` with 2x2 max-pooling after the first three groups
//! (total stride 8), followed by a classification branch and a regression
//! branch. They differ in how the time axis of the input is collapsed:
//!
//! * [`Fusion::Early`]: one weight per time step, shared by all height
//!   channels, sums the frames before the trunk.
//! * [`Fusion::Late`]: the first trunk layers are 3x3x3 convolutions without
//!   temporal padding, shrinking the time axis to one.

mod anchors;
pub mod coder;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use anchors::{AnchorGrid, AnchorSpec, ANCHORS_PER_LOCATION};
pub use coder::CODE_LEN;

use crate::error::{Error, Result};
use crate::geom::{nms, Pose, RotatedBox};
use crate::tensor::{self, kernels, ParamId, ParamStore, Tape, Tensor, Var};
use crate::voxel::{GridSpec, InputTensor};

/// Convolutions per trunk group.
pub const GROUP_LAYERS: [usize; 4] = [2, 2, 3, 3];
pub const TOTAL_STRIDE: usize = 8;
/// Initial classification bias, giving p = sigmoid(-4) ≈ 0.018.
pub const CLS_BIAS_INIT: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Early,
    Late,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub fusion: Fusion,
    pub widths: [usize; 4],
    pub head_width: usize,
    pub grid: GridSpec,
    #[serde(default)]
    pub anchors: AnchorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_in: 5,
            n_out: 5,
            fusion: Fusion::Late,
            widths: [8, 16, 32, 64],
            head_width: 64,
            grid: GridSpec::desk_scale(),
            anchors: AnchorSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.anchors.validate()?;
        if self.n_in == 0 || self.n_out == 0 {
            return Err(Error::Config("n_in and n_out must be at least 1".into()));
        }
        if self.widths.contains(&0) || self.head_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        if nx % TOTAL_STRIDE != 0 || ny % TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "grid {nx}x{ny} cells is not divisible by the total stride {TOTAL_STRIDE}"
            )));
        }
        if self.fusion == Fusion::Late && self.temporal_kernels().len() > GROUP_LAYERS[0] {
            return Err(Error::Config(format!(
                "late fusion collapses time within the first {} layers; n_in = {} needs {}",
                GROUP_LAYERS[0],
                self.n_in,
                self.temporal_kernels().len()
            )));
        }
        Ok(())
    }

    /// Temporal kernel depths of the late-fusion 3D layers: kernel 3 each,
    /// the last one sized to land on a single time step.
    pub fn temporal_kernels(&self) -> Vec<usize> {
        let layers = (self.n_in - 1).div_ceil(2);
        let mut remaining = self.n_in;
        (0..layers)
            .map(|l| {
                let k = if l + 1 == layers { remaining } else { 3 };
                remaining -= k - 1;
                k
            })
            .collect()
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.grid.nx() / TOTAL_STRIDE, self.grid.ny() / TOTAL_STRIDE)
    }

    pub fn build_anchors(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(&self.anchors, &self.grid, TOTAL_STRIDE)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    temporal: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    temporal: Option<ParamId>,
    trunk: Vec<(Conv, bool)>,
    cls_hidden: Conv,
    cls_out: Conv,
    reg_hidden: Conv,
    reg_out: Conv,
}

/// Head outputs as variables on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[K, I, J]` pre-sigmoid scores.
    pub logits: Var,
    /// `[K, I, J]` probabilities.
    pub cls: Var,
    /// `[K, n_out, 6, I, J]` regression codes.
    pub reg: Var,
}

/// Head outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub cls: Tensor,
    pub reg: Tensor,
}

impl HeadOutput {
    pub fn code(&self, k: usize, t: usize, i: usize, j: usize) -> [f64; CODE_LEN] {
        let s = self.reg.shape();
        let (n_out, ni, nj) = (s[1], s[3], s[4]);
        let mut out = [0.0; CODE_LEN];
        for (c, v) in out.iter_mut().enumerate() {
            *v = self.reg.data()[(((k * n_out + t) * CODE_LEN + c) * ni + i) * nj + j];
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, temporal: usize, k: usize) -> Result<Conv> {
        let shape: Vec<usize> = if temporal > 0 {
            vec![cout, cin, temporal, k, k]
        } else {
            vec![cout, cin, k, k]
        };
        let receptive: usize = shape[2..].iter().product();
        let weight = self.glorot(&format!("{name}.weight"), &shape, cin * receptive, cout * receptive)?;
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv {
            weight,
            bias,
            temporal,
            pad: (k - 1) / 2,
        })
    }

    fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit));
        self.store.add(name, t)
    }
}

impl Model {
    /// Fresh model with Glorot-uniform weights, zero biases and the
    /// classification bias at [`CLS_BIAS_INIT`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let nz = config.grid.nz();
        let temporal = match config.fusion {
            Fusion::Early => Some(b.glorot("temporal.weight", &[config.n_in], config.n_in, 1)?),
            Fusion::Late => None,
        };
        let tk = match config.fusion {
            Fusion::Early => Vec::new(),
            Fusion::Late => config.temporal_kernels(),
        };
        let mut trunk = Vec::new();
        let mut cin = nz;
        let mut layer = 0;
        for (g, (&n, &width)) in GROUP_LAYERS.iter().zip(&config.widths).enumerate() {
            for l in 0..n {
                let t = tk.get(layer).copied().unwrap_or(0);
                let conv = b.conv(&format!("trunk.{g}.{l}"), cin, width, t, 3)?;
                trunk.push((conv, l + 1 == n && g + 1 < GROUP_LAYERS.len()));
                cin = width;
                layer += 1;
            }
        }
        let k = ANCHORS_PER_LOCATION;
        let hw = config.head_width;
        let cls_hidden = b.conv("cls.hidden", cin, hw, 0, 3)?;
        let cls_out = b.conv("cls.out", hw, k, 0, 1)?;
        let reg_hidden = b.conv("reg.hidden", cin, hw, 0, 3)?;
        let reg_out = b.conv("reg.out", hw, k * config.n_out * CODE_LEN, 0, 1)?;
        let mut params = b.store;
        params.get_mut(cls_out.bias).data_mut().fill(CLS_BIAS_INIT);
        Ok(Model {
            config,
            params,
            layout: Layout {
                temporal,
                trunk,
                cls_hidden,
                cls_out,
                reg_hidden,
                reg_out,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn apply(&self, tape: &mut Tape, x: Var, conv: &Conv) -> Result<Var> {
        let w = tape.param(&self.params, conv.weight);
        let b = tape.param(&self.params, conv.bias);
        if conv.temporal > 0 {
            tape.conv3d(x, w, b, conv.pad)
        } else {
            tape.conv2d(x, w, b, 1, conv.pad)
        }
    }

    fn check_input(&self, input: &InputTensor) -> Result<()> {
        let g = &self.config.grid;
        let expected = [self.config.n_in, g.nz(), g.nx(), g.ny()];
        if input.occupancy.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {:?} does not match [T, Z, X, Y] = {expected:?}",
                    input.occupancy.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: &InputTensor) -> Result<HeadVars> {
        self.check_input(input)?;
        let g = &self.config.grid;
        let (t, nz, nx, ny) = (self.config.n_in, g.nz(), g.nx(), g.ny());
        let mut x = match self.config.fusion {
            Fusion::Early => {
                let inp = tape.constant(input.occupancy.clone());
                let w = tape.param(
                    &self.params,
                    self.layout.temporal.expect("early fusion has temporal weights"),
                );
                tape.temporal_group_conv(inp, w)?
            }
            Fusion::Late if t == 1 => tape.constant(input.occupancy.clone().reshape(&[nz, nx, ny])?),
            Fusion::Late => {
                // [T, Z, X, Y] -> [Z, T, X, Y]
                let plane = nx * ny;
                let src = input.occupancy.data();
                let mut data = vec![0.0; src.len()];
                for ti in 0..t {
                    for zi in 0..nz {
                        data[(zi * t + ti) * plane..][..plane].copy_from_slice(&src[(ti * nz + zi) * plane..][..plane]);
                    }
                }
                tape.constant(Tensor::new(vec![nz, t, nx, ny], data)?)
            }
        };
        for (conv, pool) in &self.layout.trunk {
            x = self.apply(tape, x, conv)?;
            let s = tape.value(x).shape().to_vec();
            if s.len() == 4 && s[1] == 1 {
                x = tape.reshape(x, &[s[0], s[2], s[3]])?;
            }
            x = tape.relu(x)?;
            if *pool {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        let h = self.apply(tape, x, &self.layout.cls_hidden)?;
        let h = tape.relu(h)?;
        let logits = self.apply(tape, h, &self.layout.cls_out)?;
        let cls = tape.sigmoid(logits)?;
        let r = self.apply(tape, x, &self.layout.reg_hidden)?;
        let r = tape.relu(r)?;
        let reg = self.apply(tape, r, &self.layout.reg_out)?;
        let (fi, fj) = self.config.feature_dims();
        let reg = tape.reshape(reg, &[ANCHORS_PER_LOCATION, self.config.n_out, CODE_LEN, fi, fj])?;
        Ok(HeadVars { logits, cls, reg })
    }

    pub fn predict(&self, input: &InputTensor) -> Result<HeadOutput> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, input)?;
        Ok(HeadOutput {
            cls: tape.value(v.cls).clone(),
            reg: tape.value(v.reg).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serialises");
        tensor::save_checkpoint(path, &self.params, &meta)
    }

    /// Loads a checkpoint, checking that the stored configuration and every
    /// parameter shape match. When `expected` is given it must equal the
    /// stored configuration.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let (store, meta) = tensor::load_checkpoint(path)?;
        let config: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Checkpoint(
                    "checkpoint was trained with a different model configuration".into(),
                ));
            }
        }
        let mut model = Model::new(config, 0)?;
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model expects {}",
                store.len(),
                model.params.len()
            )));
        }
        for (id, name, t) in store.iter() {
            if model.params.name(id) != name || model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    model.params.name(id),
                    model.params.get(id).shape()
                )));
            }
        }
        model.params = store;
        Ok(model)
    }
}

/// One decoded object: score and boxes for the current and future frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f64,
    /// `boxes[0]` is the current frame, `boxes[d]` the forecast `d` frames
    /// ahead, all in the ego frame of the source sweep.
    pub boxes: Vec<RotatedBox>,
    pub anchor: usize,
}

impl Detection {
    pub fn current(&self) -> &RotatedBox {
        &self.boxes[0]
    }
}

/// Detections from one sweep together with the ego pose they are expressed in.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub frame: usize,
    pub pose: Pose,
    pub detections: Vec<Detection>,
}

/// Thresholds, decodes every timestamp and suppresses on current-frame boxes.
pub fn decode(output: &HeadOutput, anchors: &AnchorGrid, score_thr: f64, nms_thr: f64) -> Vec<Detection> {
    let n_out = output.reg.shape()[1];
    let mut cands = Vec::new();
    for (flat, &p) in output.cls.data().iter().enumerate() {
        if p < score_thr {
            continue;
        }
        let (k, i, j) = anchors.unflat(flat);
        let anchor = anchors.get(flat);
        let boxes = (0..n_out)
            .map(|t| coder::decode(anchor, &output.code(k, t, i, j)))
            .collect();
        cands.push(Detection {
            score: p,
            boxes,
            anchor: flat,
        });
    }
    let scored: Vec<(RotatedBox, f64)> = cands.iter().map(|d| (d.boxes[0], d.score)).collect();
    nms(&scored, nms_thr).into_iter().map(|i| cands[i].clone()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_kernel_schedule() {
        let mut c = ModelConfig::default();
        for (n, k) in [
            (1, vec![]),
            (2, vec![2]),
            (3, vec![3]),
            (4, vec![3, 2]),
            (5, vec![3, 3]),
        ] {
            c.n_in = n;
            assert_eq!(c.temporal_kernels(), k, "n_in = {n}");
            assert_eq!(1 + k_sum_shrink(&c.temporal_kernels()), n.max(1));
        }
    }

    fn k_sum_shrink(ks: &[usize]) -> usize {
        ks.iter().map(|k| k - 1).sum()
    }

    #[test]
    fn late_fusion_rejects_long_history() {
        let c = ModelConfig {
            n_in: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_must_divide_by_stride() {
        let mut c = ModelConfig::default();
        c.grid.x_range = (-24.0, 24.2);
        assert!(matches!(Model::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_scale_feature_dims() {
        let c = ModelConfig {
            grid: GridSpec::full_scale(),
            ..ModelConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.feature_dims(), (90, 50));
    }
}
