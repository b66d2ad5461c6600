//! Bird's-eye raster (binary PPM) and SVG views of a sequence with tracks.
//!
//! Image rows run from the far end of the x range (top) to the near end;
//! columns run from +y (left) to −y (right), so the ego looks up.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use bevtrack::geom::{Point, RotatedBox};
use bevtrack::sim::Sequence;
use bevtrack::track::TrackedBox;
use bevtrack::voxel::GridSpec;

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

pub fn track_color(id: u64) -> [u8; 3] {
    let h = id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    PALETTE[(h >> 32) as usize % PALETTE.len()]
}

pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            pixels: vec![[0, 0, 0]; width * height],
        }
    }

    fn put(&mut self, px: i64, py: i64, c: [u8; 3]) {
        if px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height {
            self.pixels[py as usize * self.width + px as usize] = c;
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

struct View {
    grid: GridSpec,
    scale: f64,
}

impl View {
    /// Metric ego coordinates to continuous pixel coordinates.
    fn px(&self, p: Point) -> (f64, f64) {
        let s = self.scale / self.grid.cell;
        ((self.grid.y_range.1 - p[1]) * s, (self.grid.x_range.1 - p[0]) * s)
    }

    fn size(&self) -> (usize, usize) {
        let s = self.scale as usize;
        (self.grid.ny() * s, self.grid.nx() * s)
    }
}

/// Per-frame drawing content: points, boxes with ids and forecast dots.
pub struct FrameScene {
    pub points: Vec<Point>,
    pub boxes: Vec<(u64, RotatedBox)>,
    pub dots: Vec<(u64, Point)>,
}

/// Collects what to draw at frame `t`: the sweep's points, the tracks
/// present at `t`, and each track's centres at `t .. t + horizon` moved
/// into the ego frame of `t`.
pub fn frame_scene(seq: &Sequence, tracks: &[TrackedBox], t: usize, horizon: usize) -> FrameScene {
    let mut by_id: BTreeMap<u64, BTreeMap<usize, RotatedBox>> = BTreeMap::new();
    for b in tracks {
        by_id.entry(b.id).or_default().insert(b.frame, b.bbox);
    }
    let here = seq.frames[t].pose;
    let mut boxes = Vec::new();
    let mut dots = Vec::new();
    for (&id, frames) in &by_id {
        let Some(b) = frames.get(&t) else { continue };
        boxes.push((id, *b));
        for h in 0..horizon {
            let Some(f) = frames.get(&(t + h)) else { break };
            let rel = seq.frames[t + h].pose.relative_to(&here);
            dots.push((id, rel.apply(f.center())));
        }
    }
    FrameScene {
        points: seq.frames[t].points.iter().map(|p| [p[0], p[1]]).collect(),
        boxes,
        dots,
    }
}

pub fn rasterize(scene: &FrameScene, grid: &GridSpec, scale: usize) -> Raster {
    let view = View {
        grid: *grid,
        scale: scale as f64,
    };
    let (w, h) = view.size();
    let mut img = Raster::new(w, h);
    for &p in &scene.points {
        let (x, y) = view.px(p);
        img.put(x.floor() as i64, y.floor() as i64, [170, 170, 170]);
    }
    for (id, b) in &scene.boxes {
        let c = track_color(*id);
        let corners = b.corners();
        let v = corners.vertices();
        for e in 0..v.len() {
            let (a, q) = (view.px(v[e]), view.px(v[(e + 1) % v.len()]));
            let steps = ((q.0 - a.0).abs().max((q.1 - a.1).abs()) * 2.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                img.put(
                    (a.0 + f * (q.0 - a.0)).floor() as i64,
                    (a.1 + f * (q.1 - a.1)).floor() as i64,
                    c,
                );
            }
        }
    }
    for (id, p) in &scene.dots {
        let c = track_color(*id);
        let (x, y) = view.px(*p);
        let (x, y) = (x.floor() as i64, y.floor() as i64);
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            img.put(x + dx, y + dy, c);
        }
    }
    img
}

pub fn to_svg(scene: &FrameScene, grid: &GridSpec, scale: usize) -> String {
    let view = View {
        grid: *grid,
        scale: scale as f64,
    };
    let (w, h) = view.size();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="black"/>"#);
    for &p in &scene.points {
        let (x, y) = view.px(p);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="1" height="1" fill="#aaaaaa"/>"##
        );
    }
    let hex = |c: [u8; 3]| format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]);
    for (id, b) in &scene.boxes {
        let corners = b.corners();
        let pts: Vec<String> = corners
            .vertices()
            .iter()
            .map(|&v| {
                let (x, y) = view.px(v);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="none" stroke="{}" stroke-width="1"><title>track {id}</title></polygon>"#,
            pts.join(" "),
            hex(track_color(*id))
        );
    }
    for (id, p) in &scene.dots {
        let (x, y) = view.px(*p);
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}"/>"#,
            hex(track_color(*id))
        );
    }
    s.push_str("</svg>\n");
    s
}
