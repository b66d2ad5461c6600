//! Synthetic BEV traffic scenes and a 2.5D LiDAR model.
//!
//! Vehicles follow constant-speed, constant-turn-rate trajectories and never
//! overlap. The sensor samples points on vehicle edges that face it, with a
//! density falling off as `10 / distance`; rays blocked by another vehicle
//! footprint are dropped. Labels carry boxes in the ego frame of each sweep,
//! track ids and the number of points each vehicle received.

mod dataset;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, Label, Sequence, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::geom::{intersection_area, normalize_angle, Point, Pose, RotatedBox};
use crate::voxel::LidarFrame;

/// Ego footprint `(length along x, width along y)`.
pub const EGO_SIZE: (f64, f64) = (4.5, 2.0);
const PLACEMENT_ATTEMPTS: usize = 400;
const CLEARANCE: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    /// Sweeps per sequence.
    pub frames: usize,
    /// Seconds between sweeps.
    pub dt: f64,
    /// Inclusive range of vehicle counts per scene.
    pub vehicles: (usize, usize),
    /// Vehicle speed range, m/s.
    pub speed: (f64, f64),
    /// Vehicle turn-rate range, rad/s.
    pub turn_rate: (f64, f64),
    /// Fraction of vehicles that stay parked.
    pub static_fraction: f64,
    /// Vehicle width range, metres; within [1.5, 3.0].
    pub width: (f64, f64),
    /// Vehicle length range, metres; within [3.5, 18.0].
    pub length: (f64, f64),
    /// Half extents (x, y) of the spawn area around the ego, metres.
    pub spawn_half_extent: (f64, f64),
    /// Probability that a vehicle exists for the whole sequence; otherwise
    /// it appears and disappears at random frames.
    pub persist_prob: f64,
    pub ego_speed: f64,
    pub ego_turn_rate: f64,
    pub sensor_range: f64,
    /// Points per metre of visible edge for a vehicle 10 m away.
    pub density: f64,
    pub dropout: f64,
    /// Range of sampled point heights, metres.
    pub height: (f64, f64),
    /// Probability that a vehicle gets one injected sensor blackout of 1-3
    /// sweeps.
    pub occlusion_prob: f64,
    /// When set, traffic follows a road along the ego's x axis: vehicles
    /// left of the ego head -x, those right of it +x, each with a uniform
    /// heading jitter of this many radians. Otherwise headings are uniform.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lane_jitter: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            frames: 40,
            dt: 0.1,
            vehicles: (4, 10),
            speed: (2.0, 15.0),
            turn_rate: (-0.3, 0.3),
            static_fraction: 0.2,
            width: (1.6, 2.6),
            length: (3.8, 12.0),
            spawn_half_extent: (26.0, 18.0),
            persist_prob: 0.6,
            ego_speed: 5.0,
            ego_turn_rate: 0.0,
            sensor_range: 60.0,
            density: 20.0,
            dropout: 0.1,
            height: (-1.6, -0.2),
            occlusion_prob: 0.2,
            lane_jitter: None,
        }
    }
}

fn ordered(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

fn prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("frames and dt must be positive".into()));
        }
        if self.vehicles.0 > self.vehicles.1 {
            return Err(Error::Config("vehicle count range is reversed".into()));
        }
        ordered("speed", self.speed)?;
        ordered("turn_rate", self.turn_rate)?;
        ordered("width", self.width)?;
        ordered("length", self.length)?;
        ordered("height", self.height)?;
        if self.speed.0 < 0.0 {
            return Err(Error::Config("speeds must be non-negative".into()));
        }
        if self.width.0 < 1.5 || self.width.1 > 3.0 || self.length.0 < 3.5 || self.length.1 > 18.0 {
            return Err(Error::Config(
                "vehicle sizes must lie within [1.5, 3.0] x [3.5, 18.0] m".into(),
            ));
        }
        if !(self.spawn_half_extent.0 > 0.0 && self.spawn_half_extent.1 > 0.0) {
            return Err(Error::Config("spawn area must be non-empty".into()));
        }
        if !(self.sensor_range > 0.0) || !(self.density >= 0.0) {
            return Err(Error::Config(
                "sensor range must be positive and density non-negative".into(),
            ));
        }
        prob("static_fraction", self.static_fraction)?;
        prob("persist_prob", self.persist_prob)?;
        prob("dropout", self.dropout)?;
        prob("occlusion_prob", self.occlusion_prob)?;
        if let Some(j) = self.lane_jitter {
            if !(0.0..=PI).contains(&j) {
                return Err(Error::Config(format!("lane_jitter = {j} must lie in [0, pi]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub id: u32,
    /// Lateral size, metres.
    pub w: f64,
    /// Longitudinal size, metres.
    pub h: f64,
    /// World-frame box centre and heading per frame; `None` while absent.
    pub poses: Vec<Option<Pose>>,
    /// Frames in which the vehicle returns no points regardless of geometry.
    pub blackout: Vec<bool>,
}

impl Vehicle {
    pub fn world_box(&self, t: usize) -> Option<RotatedBox> {
        self.poses[t].map(|p| RotatedBox {
            cx: p.x,
            cy: p.y,
            w: self.w,
            h: self.h,
            theta: p.yaw,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub dt: f64,
    pub ego: Vec<Pose>,
    pub vehicles: Vec<Vehicle>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.ego.len()
    }

    pub fn ego_box(&self, t: usize) -> RotatedBox {
        let p = self.ego[t];
        RotatedBox {
            cx: p.x,
            cy: p.y,
            w: EGO_SIZE.0,
            h: EGO_SIZE.1,
            theta: p.yaw,
        }
    }

    /// Box of vehicle `v` at frame `t` in the ego frame of sweep `t`.
    pub fn ego_box_of(&self, v: &Vehicle, t: usize) -> Option<RotatedBox> {
        v.world_box(t).map(|b| b.transformed(&self.ego[t].inverse()))
    }
}

fn inflate(b: &RotatedBox) -> RotatedBox {
    RotatedBox {
        w: b.w + CLEARANCE,
        h: b.h + CLEARANCE,
        ..*b
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a scene; placement uses rejection sampling against every vehicle
/// already accepted and the ego footprint, at every frame.
pub fn generate_scene(config: &SimConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.frames;
    let mut ego = Vec::with_capacity(n);
    let mut pose = Pose::identity();
    for _ in 0..n {
        ego.push(pose);
        let yaw = pose.yaw + config.ego_turn_rate * config.dt;
        pose = Pose::new(
            pose.x + config.ego_speed * config.dt * pose.yaw.cos(),
            pose.y + config.ego_speed * config.dt * pose.yaw.sin(),
            yaw,
        );
    }
    let mut scene = Scene {
        dt: config.dt,
        ego,
        vehicles: Vec::new(),
    };
    let count = rng.gen_range(config.vehicles.0..=config.vehicles.1);
    for id in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let v = sample_vehicle(&mut rng, config, &scene, id as u32);
            if fits(&scene, &v) {
                placed = Some(v);
                break;
            }
        }
        match placed {
            Some(v) => scene.vehicles.push(v),
            None => {
                return Err(Error::Placement(format!(
                    "could not place vehicle {} of {count} without overlap after {PLACEMENT_ATTEMPTS} attempts \
                     (seed {}, spawn half extent {:?}); reduce the vehicle count or enlarge the spawn area",
                    id + 1,
                    config.seed,
                    config.spawn_half_extent
                )))
            }
        }
    }
    Ok(scene)
}

fn sample_vehicle(rng: &mut ChaCha8Rng, config: &SimConfig, scene: &Scene, id: u32) -> Vehicle {
    let n = config.frames;
    let w = uniform(rng, config.width);
    let h = uniform(rng, config.length);
    let (start, end) = if n < 4 || rng.gen_bool(config.persist_prob) {
        (0, n)
    } else {
        let a = rng.gen_range(0..n - 3);
        let b = rng.gen_range(a + 3..=n);
        (a, b)
    };
    let moving = !rng.gen_bool(config.static_fraction);
    let speed = if moving { uniform(rng, config.speed) } else { 0.0 };
    let turn = if moving { uniform(rng, config.turn_rate) } else { 0.0 };
    let draw = rng.gen_range(-PI..PI);
    let local = [
        uniform(rng, (-config.spawn_half_extent.0, config.spawn_half_extent.0)),
        uniform(rng, (-config.spawn_half_extent.1, config.spawn_half_extent.1)),
    ];
    let heading = match config.lane_jitter {
        None => draw,
        Some(j) => {
            let base = if local[1] > 0.0 { PI } else { 0.0 };
            normalize_angle(base + draw / PI * j)
        }
    };
    let anchor_pose = scene.ego[start];
    let [x0, y0] = anchor_pose.apply(local);
    let mut poses = vec![None; n];
    let (mut x, mut y, mut phi) = (x0, y0, heading + anchor_pose.yaw);
    for p in poses.iter_mut().take(end).skip(start) {
        // the longitudinal (h) side points along the direction of travel
        *p = Some(Pose::new(x, y, phi - PI / 2.0));
        x += speed * config.dt * phi.cos();
        y += speed * config.dt * phi.sin();
        phi = normalize_angle(phi + turn * config.dt);
    }
    let mut blackout = vec![false; n];
    if end - start > 4 && rng.gen_bool(config.occlusion_prob) {
        let len = rng.gen_range(1..=3usize).min(end - start - 2);
        let at = rng.gen_range(start + 1..end - len);
        blackout[at..at + len].iter_mut().for_each(|b| *b = true);
    }
    Vehicle {
        id,
        w,
        h,
        poses,
        blackout,
    }
}

fn fits(scene: &Scene, v: &Vehicle) -> bool {
    (0..scene.frames()).all(|t| {
        let Some(b) = v.world_box(t) else { return true };
        let b = inflate(&b);
        intersection_area(&b, &scene.ego_box(t)) == 0.0
            && scene
                .vehicles
                .iter()
                .filter_map(|o| o.world_box(t))
                .all(|o| intersection_area(&b, &inflate(&o)) == 0.0)
    })
}

/// Whether the open segment from the sensor to `p` crosses the footprint.
fn ray_blocked(p: Point, footprint: &RotatedBox) -> bool {
    // clip the segment s(t) = t * p, t in [0, 1), against the rectangle slabs
    let (s, c) = footprint.theta.sin_cos();
    let to_local = |q: Point| {
        let (dx, dy) = (q[0] - footprint.cx, q[1] - footprint.cy);
        [c * dx + s * dy, -s * dx + c * dy]
    };
    let a = to_local([0.0, 0.0]);
    let b = to_local(p);
    let d = [b[0] - a[0], b[1] - a[1]];
    let half = [0.5 * footprint.w, 0.5 * footprint.h];
    let (mut t0, mut t1): (f64, f64) = (0.0, 1.0 - 1e-9);
    for k in 0..2 {
        if d[k].abs() < 1e-15 {
            if a[k].abs() >= half[k] {
                return false;
            }
        } else {
            let mut ta = (-half[k] - a[k]) / d[k];
            let mut tb = (half[k] - a[k]) / d[k];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    t1 - t0 > 1e-9
}

/// Per-vehicle sample record of one sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSample {
    pub frame: LidarFrame,
    /// `(vehicle id, points)` for every vehicle present at the frame.
    pub point_counts: Vec<(u32, usize)>,
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Samples the sweep at frame `t` in the ego frame of that sweep.
pub fn simulate_lidar(scene: &Scene, t: usize, config: &SimConfig) -> SweepSample {
    let mut rng = frame_rng(config.seed, t);
    let boxes: Vec<(u32, RotatedBox, bool)> = scene
        .vehicles
        .iter()
        .filter_map(|v| scene.ego_box_of(v, t).map(|b| (v.id, b, v.blackout[t])))
        .collect();
    let mut points = Vec::new();
    let mut counts = Vec::with_capacity(boxes.len());
    for (idx, &(id, b, blackout)) in boxes.iter().enumerate() {
        let dist = b.cx.hypot(b.cy);
        let mut n_pts = 0;
        if dist <= config.sensor_range && dist > 1e-6 {
            let per_metre = config.density * 10.0 / dist;
            let verts = b.corners();
            let verts = verts.vertices();
            for e in 0..4 {
                let (a, q) = (verts[e], verts[(e + 1) % 4]);
                let (dx, dy) = (q[0] - a[0], q[1] - a[1]);
                // outward normal of a counter-clockwise edge
                let normal = [dy, -dx];
                let mid = [0.5 * (a[0] + q[0]), 0.5 * (a[1] + q[1])];
                if normal[0] * mid[0] + normal[1] * mid[1] >= 0.0 {
                    continue;
                }
                let expected = dx.hypot(dy) * per_metre;
                let whole = expected.floor();
                let count = whole as usize + usize::from(rng.gen::<f64>() < expected - whole);
                for _ in 0..count {
                    let s: f64 = rng.gen();
                    let z = uniform(&mut rng, config.height);
                    let keep = rng.gen::<f64>() >= config.dropout;
                    let p = [a[0] + s * dx, a[1] + s * dy];
                    if !keep || blackout {
                        continue;
                    }
                    let occluded = boxes
                        .iter()
                        .enumerate()
                        .any(|(o, (_, ob, _))| o != idx && ray_blocked(p, ob));
                    if !occluded {
                        points.push([p[0], p[1], z]);
                        n_pts += 1;
                    }
                }
            }
        }
        counts.push((id, n_pts));
    }
    SweepSample {
        frame: LidarFrame {
            timestamp: t,
            pose: scene.ego[t],
            points,
        },
        point_counts: counts,
    }
}

/// Generates a scene and all of its sweeps as one labelled sequence.
pub fn simulate_sequence(config: &SimConfig) -> Result<Sequence> {
    let scene = generate_scene(config)?;
    let mut frames = Vec::with_capacity(scene.frames());
    let mut labels = Vec::with_capacity(scene.frames());
    for t in 0..scene.frames() {
        let sweep = simulate_lidar(&scene, t, config);
        let mut frame_labels = Vec::new();
        for (id, n) in sweep.point_counts {
            let v = &scene.vehicles[id as usize];
            let b = scene.ego_box_of(v, t).expect("counted vehicles are present");
            frame_labels.push(Label {
                track: id,
                bbox: b,
                points: n,
            });
        }
        frames.push(sweep.frame);
        labels.push(frame_labels);
    }
    Ok(Sequence { frames, labels })
}

/// `count` sequences with seeds `config.seed, config.seed + 1, ...`.
pub fn generate_dataset(config: &SimConfig, count: usize) -> Result<Dataset> {
    let sequences = (0..count)
        .map(|i| {
            let c = SimConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            simulate_sequence(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        dt: config.dt,
        sim: Some(config.clone()),
        sequences,
    })
}
