//! Ego-motion compensation and binary voxelisation of LiDAR sweeps into the
//! `[T, Z, X, Y]` occupancy tensor consumed by the networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::geom::Pose;
use crate::tensor::Tensor;

/// One LiDAR sweep in its own ego coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarFrame {
    pub timestamp: usize,
    pub pose: Pose,
    pub points: Vec<[f64; 3]>,
}

/// Regular grid over the ego-centred region. Intervals are half-open.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell: f64,
}

fn integral_bins(name: &str, (lo, hi): (f64, f64), cell: f64) -> Result<usize> {
    if !(hi > lo) {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
    }
    let n = (hi - lo) / cell;
    let r = n.round();
    if (n - r).abs() > 1e-6 || r < 1.0 {
        return Err(Error::Config(format!(
            "{name} extent {} is not a whole number of {cell} m cells",
            hi - lo
        )));
    }
    Ok(r as usize)
}

impl GridSpec {
    /// 144 x 80 m at 0.2 m, heights [-2.0, 3.8) giving 29 bins.
    pub fn full_scale() -> Self {
        GridSpec {
            x_range: (-72.0, 72.0),
            y_range: (-40.0, 40.0),
            z_range: (-2.0, 3.8),
            cell: 0.2,
        }
    }

    /// Desk-scale 48 x 32 m region at full resolution.
    pub fn desk_scale() -> Self {
        GridSpec {
            x_range: (-24.0, 24.0),
            y_range: (-16.0, 16.0),
            z_range: (-2.0, 3.8),
            cell: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) {
            return Err(Error::Config(format!("cell size {} must be positive", self.cell)));
        }
        integral_bins("x", self.x_range, self.cell)?;
        integral_bins("y", self.y_range, self.cell)?;
        if !(self.z_range.1 > self.z_range.0) {
            return Err(Error::Config("z range is empty".into()));
        }
        if self.nz() == 0 {
            return Err(Error::Config("z range holds no bins".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.cell).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.cell).round() as usize
    }

    pub fn nz(&self) -> usize {
        ((self.z_range.1 - self.z_range.0) / self.cell).round() as usize
    }

    /// Cell indices `(iz, ix, iy)` of a point, or `None` outside the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let ix = ((p[0] - self.x_range.0) / self.cell).floor();
        let iy = ((p[1] - self.y_range.0) / self.cell).floor();
        let iz = ((p[2] - self.z_range.0) / self.cell).floor();
        let inside = |i: f64, n: usize, v: f64, hi: f64| i >= 0.0 && i < n as f64 && v < hi;
        if inside(ix, self.nx(), p[0], self.x_range.1)
            && inside(iy, self.ny(), p[1], self.y_range.1)
            && inside(iz, self.nz(), p[2], self.z_range.1)
        {
            Some((iz as usize, ix as usize, iy as usize))
        } else {
            None
        }
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1
    }
}

/// Binary occupancy `[T, Z, X, Y]`; `T - 1` is the current sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTensor {
    pub occupancy: Tensor,
}

impl InputTensor {
    pub fn frames(&self) -> usize {
        self.occupancy.shape()[0]
    }
}

/// Expresses `frame`'s points in the ego frame at `current`. Heights are
/// carried through unchanged.
pub fn transform_to_current(frame: &LidarFrame, current: &Pose) -> Vec<[f64; 3]> {
    let rel = frame.pose.relative_to(current);
    frame
        .points
        .iter()
        .map(|&[x, y, z]| {
            let [u, v] = rel.apply([x, y]);
            [u, v, z]
        })
        .collect()
}

fn voxelize_into(points: &[[f64; 3]], spec: &GridSpec, out: &mut [f64]) {
    let (nx, ny) = (spec.nx(), spec.ny());
    for &p in points {
        if let Some((iz, ix, iy)) = spec.cell_of(p) {
            out[(iz * nx + ix) * ny + iy] = 1.0;
        }
    }
}

/// `[Z, X, Y]` binary occupancy. Points outside the grid are dropped.
pub fn voxelize(points: &[[f64; 3]], spec: &GridSpec) -> Tensor {
    let mut t = Tensor::zeros(&[spec.nz(), spec.nx(), spec.ny()]);
    voxelize_into(points, spec, t.data_mut());
    t
}

/// Compensates and voxelises exactly `n_in` sweeps, oldest first.
pub fn stack_temporal(frames: &[LidarFrame], spec: &GridSpec, n_in: usize) -> Result<InputTensor> {
    if frames.len() != n_in || n_in == 0 {
        return Err(Error::FrameCount {
            expected: n_in,
            got: frames.len(),
        });
    }
    let current = frames[n_in - 1].pose;
    let slice = spec.nz() * spec.nx() * spec.ny();
    let mut t = Tensor::zeros(&[n_in, spec.nz(), spec.nx(), spec.ny()]);
    for (i, f) in frames.iter().enumerate() {
        let pts = transform_to_current(f, &current);
        voxelize_into(&pts, spec, &mut t.data_mut()[i * slice..(i + 1) * slice]);
    }
    Ok(InputTensor { occupancy: t })
}
