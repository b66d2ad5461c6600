//! One function per subcommand. Each writes into its output directory,
//! which always receives the resolved config and the version string.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bevtrack::metrics::Report;
use bevtrack::net::{Fusion, Model, ModelConfig};
use bevtrack::sim::{generate_dataset, Dataset, SimConfig};
use bevtrack::tensor::Tensor;
use bevtrack::track::{decode_tracklets, format_tracklets, parse_tracklets, TrackedBox};
use bevtrack::train::{format_log, train_with, TrainConfig};
use bevtrack::voxel::{voxelize, GridSpec, InputTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, VERSION};
use crate::pipeline::{detect_all, detection_report, frame_evals, tracked_frame_evals, tracking_eval, tracking_report};
use crate::render::{frame_scene, rasterize, to_svg};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    /// Suppresses progress output on stderr.
    pub quiet: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Ctx {
            cfg,
            out: out.into(),
            quiet: false,
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create output directory {}", self.out.display()))?;
        self.write("config.toml", self.cfg.to_toml())?;
        self.write("VERSION", format!("{VERSION}\n"))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.out.join(name);
        std::fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }
}

fn pick(flag: Option<&Path>, cfg: &Option<PathBuf>, what: &str, key: &str) -> Result<PathBuf> {
    match flag.map(Path::to_path_buf).or_else(|| cfg.clone()) {
        Some(p) => Ok(p),
        None => bail!(
            "no {what} given: pass --{} or set {key}",
            key.trim_start_matches("paths.")
        ),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset file {} does not exist", path.display());
    }
    Dataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_model(path: &Path, expected: &ModelConfig) -> Result<Model> {
    if !path.exists() {
        bail!("checkpoint file {} does not exist", path.display());
    }
    Model::load(path, Some(expected))
        .with_context(|| format!("checkpoint {} does not match the configured model", path.display()))
}

pub fn val_sim(cfg: &RunConfig) -> SimConfig {
    SimConfig {
        seed: cfg.seed.wrapping_add(cfg.data.val_seed_offset),
        ..cfg.sim.clone()
    }
}

/// Writes `dataset.ndjson` and, when validation sequences are configured,
/// `val.ndjson`.
pub fn cmd_generate(ctx: &Ctx) -> Result<PathBuf> {
    ctx.prepare()?;
    let cfg = &ctx.cfg;
    let train = generate_dataset(&cfg.sim, cfg.data.sequences)?;
    let path = ctx.out.join("dataset.ndjson");
    train.save(&path)?;
    ctx.note(format!("wrote {} ({})", path.display(), train.summary()));
    if cfg.data.val_sequences > 0 {
        let val = generate_dataset(&val_sim(cfg), cfg.data.val_sequences)?;
        let vpath = ctx.out.join("val.ndjson");
        val.save(&vpath)?;
        ctx.note(format!("wrote {} ({})", vpath.display(), val.summary()));
    }
    Ok(path)
}

pub fn train_model(
    ctx: &Ctx,
    model: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    label: &str,
) -> Result<(Model, String)> {
    let every = (train.iterations / 20).max(1);
    let t0 = Instant::now();
    let out = train_with(data, model, train, |r| {
        if (r.iteration + 1) % every == 0 {
            ctx.note(format!(
                "[{label}] iter {:>6}  lr {:.2e}  loss {:.4} (cls {:.4}, reg {:.4})  {:.0}s",
                r.iteration + 1,
                r.lr,
                r.total,
                r.cls,
                r.reg,
                t0.elapsed().as_secs_f64()
            ));
        }
    })?;
    Ok((out.model, format_log(&out.log)))
}

/// Trains the configured model; writes `model.ckpt` and `train_log.tsv`.
pub fn cmd_train(ctx: &Ctx, data: Option<&Path>) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let data_path = pick(data, &cfg.paths.data, "training dataset", "paths.data")?;
    let dataset = load_dataset(&data_path)?;
    ctx.prepare()?;
    let (model, log) = train_model(ctx, &cfg.model, &cfg.train, &dataset, "train")?;
    let ckpt = ctx.out.join("model.ckpt");
    model.save(&ckpt)?;
    ctx.write("train_log.tsv", log)?;
    ctx.note(format!("wrote {}", ckpt.display()));
    Ok(ckpt)
}

/// Detection AP report, written to `metrics.tsv`.
pub fn cmd_eval(ctx: &Ctx, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<Report> {
    let cfg = &ctx.cfg;
    let dataset = load_dataset(&pick(data, &cfg.paths.data, "evaluation dataset", "paths.data")?)?;
    let model = load_model(
        &pick(checkpoint, &cfg.paths.checkpoint, "checkpoint", "paths.checkpoint")?,
        &cfg.model,
    )?;
    ctx.prepare()?;
    let sets = detect_all(&model, &dataset, 0, cfg.detect.score_thr, cfg.detect.nms_thr)?;
    let report = detection_report(&frame_evals(&dataset, &sets, &cfg.model.grid), cfg);
    ctx.write("metrics.tsv", report.to_tsv())?;
    Ok(report)
}

/// Tracklet decoder against the Hungarian baseline, plus forecast errors.
/// Writes `tracking.tsv` and the decoder's `tracklets.tsv`.
pub fn cmd_track(ctx: &Ctx, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<Report> {
    let cfg = &ctx.cfg;
    let dataset = load_dataset(&pick(data, &cfg.paths.data, "evaluation dataset", "paths.data")?)?;
    let model = load_model(
        &pick(checkpoint, &cfg.paths.checkpoint, "checkpoint", "paths.checkpoint")?,
        &cfg.model,
    )?;
    ctx.prepare()?;
    let sets = detect_all(&model, &dataset, 0, cfg.detect.track_score_thr, cfg.detect.nms_thr)?;
    let result = tracking_eval(&dataset, &sets, &cfg.tracker, cfg);
    let report = tracking_report(&result, dataset.dt);
    ctx.write("tracking.tsv", report.to_tsv())?;
    ctx.write("tracklets.tsv", format_tracklets(&result.decoder_tracks))?;
    Ok(report)
}

pub const ABLATION_ROWS: [&str; 5] = [
    "single_frame",
    "early_fusion",
    "late_fusion",
    "late_fusion+forecast",
    "late_fusion+forecast+tracking",
];

/// Model configs of the first four ablation rows; the fifth reuses the
/// fourth with tracking on top.
pub fn ablation_models(base: &ModelConfig) -> [ModelConfig; 4] {
    let with = |n_in: usize, fusion: Fusion, n_out: usize| ModelConfig {
        n_in,
        fusion,
        n_out,
        ..base.clone()
    };
    [
        with(1, Fusion::Late, 1),
        with(base.n_in, Fusion::Early, 1),
        with(base.n_in, Fusion::Late, 1),
        with(base.n_in, Fusion::Late, base.n_out),
    ]
}

/// Trains the ladder on the training set and reports validation AP per row
/// in `ablation.tsv`. All rows are scored on the same frames.
pub fn cmd_ablate(ctx: &Ctx, data: Option<&Path>, val: Option<&Path>) -> Result<Report> {
    let cfg = &ctx.cfg;
    let train_set = match data.map(Path::to_path_buf).or_else(|| cfg.paths.data.clone()) {
        Some(p) => load_dataset(&p)?,
        None => generate_dataset(&cfg.sim, cfg.data.sequences)?,
    };
    let val_set = match val.map(Path::to_path_buf).or_else(|| cfg.paths.val.clone()) {
        Some(p) => load_dataset(&p)?,
        None => generate_dataset(&val_sim(cfg), cfg.data.val_sequences.max(1))?,
    };
    ctx.prepare()?;
    let first = cfg.model.n_in - 1;
    let grid = &cfg.model.grid;
    let mut report = Report::default();
    let mut last = None;
    for (row, mc) in ABLATION_ROWS.iter().zip(ablation_models(&cfg.model)) {
        let (model, log) = train_model(ctx, &mc, &cfg.train, &train_set, row)?;
        ctx.write(&format!("train_log_{row}.tsv"), log)?;
        model.save(&ctx.out.join(format!("model_{row}.ckpt")))?;
        let sets = detect_all(&model, &val_set, first, cfg.detect.score_thr, cfg.detect.nms_thr)?;
        push_ap(&mut report, row, &frame_evals(&val_set, &sets, grid), cfg);
        last = Some((model, sets));
    }
    let (model, sets) = last.expect("four trained rows");
    let tracks: Vec<Vec<Vec<TrackedBox>>> = sets
        .iter()
        .map(|s| decode_tracklets(s, &cfg.tracker, model.config.n_out))
        .collect();
    push_ap(
        &mut report,
        ABLATION_ROWS[4],
        &tracked_frame_evals(&val_set, &tracks, grid),
        cfg,
    );
    ctx.write("ablation.tsv", report.to_tsv())?;
    Ok(report)
}

fn push_ap(report: &mut Report, row: &str, frames: &[bevtrack::metrics::FrameEval], cfg: &RunConfig) {
    for &t in &cfg.eval.iou_thresholds {
        let ap = bevtrack::metrics::average_precision(frames, t, cfg.eval.min_points).ap;
        report.push("ap", format!("model={row};iou={t}"), ap);
    }
}

/// Renders one sequence frame by frame as `frame_XXXX.ppm` (and `.svg`).
pub fn cmd_render(ctx: &Ctx, data: Option<&Path>, tracklets: Option<&Path>) -> Result<usize> {
    let cfg = &ctx.cfg;
    let dataset = load_dataset(&pick(data, &cfg.paths.data, "dataset", "paths.data")?)?;
    let tpath = pick(tracklets, &cfg.paths.tracklets, "tracklet dump", "paths.tracklets")?;
    let text =
        std::fs::read_to_string(&tpath).with_context(|| format!("cannot read tracklet dump {}", tpath.display()))?;
    let rows = parse_tracklets(&text)
        .map_err(anyhow::Error::msg)
        .with_context(|| format!("invalid tracklet dump {}", tpath.display()))?;
    let si = cfg.render.sequence;
    let Some(seq) = dataset.sequences.get(si) else {
        bail!(
            "render.sequence {si} is out of range ({} sequences)",
            dataset.sequences.len()
        );
    };
    let tracks: Vec<TrackedBox> = rows.into_iter().filter(|(s, _)| *s == si).map(|(_, b)| b).collect();
    if let Some(b) = tracks.iter().find(|b| b.frame >= seq.len()) {
        bail!(
            "tracklet dump refers to frame {} but sequence {si} has {} frames",
            b.frame,
            seq.len()
        );
    }
    ctx.prepare()?;
    for t in 0..seq.len() {
        let scene = frame_scene(seq, &tracks, t, cfg.model.n_out);
        ctx.write(
            &format!("frame_{t:04}.ppm"),
            rasterize(&scene, &cfg.model.grid, cfg.render.scale).to_ppm(),
        )?;
        if cfg.render.svg {
            ctx.write(
                &format!("frame_{t:04}.svg"),
                to_svg(&scene, &cfg.model.grid, cfg.render.scale),
            )?;
        }
    }
    Ok(seq.len())
}

/// Milliseconds to voxelise `points` uniform random points into the
/// full-scale grid, once per repeat.
pub fn bench_voxelize(points: usize, repeats: usize, seed: u64) -> Vec<f64> {
    let g = GridSpec::full_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud: Vec<[f64; 3]> = (0..points)
        .map(|_| {
            [
                rng.gen_range(g.x_range.0..g.x_range.1),
                rng.gen_range(g.y_range.0..g.y_range.1),
                rng.gen_range(g.z_range.0..g.z_range.1),
            ]
        })
        .collect();
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            let v = voxelize(&cloud, &g);
            let ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(v);
            ms
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn hardware() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {threads} hardware threads; {}", std::env::consts::OS)
}

/// Latency of voxelisation and of one forward pass of the configured model.
/// Timings are reported, not asserted.
pub fn cmd_bench(ctx: &Ctx) -> Result<Report> {
    let cfg = &ctx.cfg;
    ctx.prepare()?;
    let b = &cfg.bench;
    let vox = bench_voxelize(b.points, b.repeats, cfg.seed);
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let g = &cfg.model.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = InputTensor {
        occupancy: Tensor::from_fn(&[cfg.model.n_in, g.nz(), g.nx(), g.ny()], |_| {
            f64::from(rng.gen_bool(0.02))
        }),
    };
    let mut fwd = Vec::new();
    for _ in 0..b.repeats {
        let t = Instant::now();
        std::hint::black_box(model.predict(&input)?);
        fwd.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut r = Report::default();
    let hw = hardware();
    let vox_key = format!("points={};grid=720x400x29", b.points);
    r.push("voxelize_ms_median", vox_key.clone(), median(vox.clone()));
    r.push(
        "voxelize_ms_min",
        vox_key,
        vox.iter().cloned().fold(f64::INFINITY, f64::min),
    );
    let fwd_med = median(fwd);
    let fwd_key = format!(
        "grid={}x{}x{};n_in={};params={}",
        g.nx(),
        g.ny(),
        g.nz(),
        cfg.model.n_in,
        model.num_params()
    );
    r.push("forward_ms_median", fwd_key.clone(), fwd_med);
    r.push("forward_fps", fwd_key, 1e3 / fwd_med);
    r.push(
        "hardware_threads",
        format!("cpu={hw}"),
        std::thread::available_parallelism().map_or(1, |n| n.get()) as f64,
    );
    ctx.write("bench.tsv", r.to_tsv())?;
    Ok(r)
}
