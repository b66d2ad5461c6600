use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RotatedBox;
use crate::voxel::GridSpec;

/// Predefined box shapes placed at every feature-map location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSpec {
    /// Area-equivalent side `sqrt(w * h)` of the ratio boxes, metres.
    pub base_size: f64,
    /// `w : h` aspect ratios of the base-size boxes.
    pub ratios: Vec<(f64, f64)>,
    /// Side of the extra square box, metres.
    pub large_size: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            base_size: 5.0,
            ratios: vec![(1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (1.0, 6.0), (6.0, 1.0)],
            large_size: 8.0,
        }
    }
}

pub const ANCHORS_PER_LOCATION: usize = 6;

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.len() + 1 != ANCHORS_PER_LOCATION {
            return Err(Error::Config(format!(
                "{} aspect ratios plus the large box give {} anchors per location, expected {ANCHORS_PER_LOCATION}",
                self.ratios.len(),
                self.ratios.len() + 1
            )));
        }
        let ok = self.base_size > 0.0 && self.large_size > 0.0 && self.ratios.iter().all(|&(a, b)| a > 0.0 && b > 0.0);
        if !ok {
            return Err(Error::Config("anchor sizes and ratios must be positive".into()));
        }
        Ok(())
    }

    /// `(w, h)` of each anchor shape in order.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .ratios
            .iter()
            .map(|&(a, b)| {
                let r = b / a;
                (self.base_size / r.sqrt(), self.base_size * r.sqrt())
            })
            .collect();
        out.push((self.large_size, self.large_size));
        out
    }
}

/// Anchors laid out `[K, I, J]` to line up with the classification map.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    boxes: Vec<RotatedBox>,
}

impl AnchorGrid {
    pub fn new(spec: &AnchorSpec, grid: &GridSpec, stride: usize) -> Result<Self> {
        spec.validate()?;
        let (i, j) = (grid.nx() / stride, grid.ny() / stride);
        let step = grid.cell * stride as f64;
        let shapes = spec.shapes();
        let mut boxes = Vec::with_capacity(shapes.len() * i * j);
        for &(w, h) in &shapes {
            for ii in 0..i {
                for jj in 0..j {
                    let cx = grid.x_range.0 + (ii as f64 + 0.5) * step;
                    let cy = grid.y_range.0 + (jj as f64 + 0.5) * step;
                    boxes.push(RotatedBox::new(cx, cy, w, h, 0.0)?);
                }
            }
        }
        Ok(AnchorGrid {
            k: shapes.len(),
            i,
            j,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[RotatedBox] {
        &self.boxes
    }

    pub fn get(&self, flat: usize) -> &RotatedBox {
        &self.boxes[flat]
    }

    pub fn flat(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.i + i) * self.j + j
    }

    /// `(k, i, j)` of a flat anchor index.
    pub fn unflat(&self, flat: usize) -> (usize, usize, usize) {
        let j = flat % self.j;
        let i = (flat / self.j) % self.i;
        (flat / (self.i * self.j), i, j)
    }
}
