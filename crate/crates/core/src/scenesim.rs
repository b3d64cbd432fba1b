//! Synthetic moving-shapes world: RGB frames at any timestamp,
//! contrast-threshold events between timestamps, analytic boxes.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{read_evs, voxelize, write_evs, EventPoint, EventVoxelGrid, Polarity, VoxelConfig};
use crate::tensor::{Scalar, Tensor};

/// Shape of an object; doubles as its class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        match self {
            Shape::Disc => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// extent `size`.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let h = size / 2.0;
        match self {
            Shape::Disc => dx * dx + dy * dy <= h * h,
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            // apex up, base at the bottom edge of the bounding square
            Shape::Triangle => {
                if dy < -h || dy > h {
                    return false;
                }
                let half_width = h * (dy + h) / size;
                dx.abs() <= half_width
            }
        }
    }
}

/// Analytic trajectory of an object centre (pixels, seconds).
///
/// The linear part reflects inside `bounds` when set; a sinusoid is added
/// on top. During a pause interval the object's clock stops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub origin: [f64; 2],
    pub velocity: [f64; 2],
    #[serde(default)]
    pub sin_amplitude: [f64; 2],
    #[serde(default = "default_period")]
    pub sin_period_s: f64,
    #[serde(default)]
    pub sin_phase: f64,
    /// `[x_min, y_min, x_max, y_max]` for the centre of the linear part.
    #[serde(default)]
    pub bounds: Option<[f64; 4]>,
    /// Intervals `[start, end)` in microseconds during which motion stops.
    #[serde(default)]
    pub pauses: Vec<(i64, i64)>,
}

fn default_period() -> f64 {
    1.0
}

impl Motion {
    pub fn linear(origin: [f64; 2], velocity: [f64; 2]) -> Self {
        Self {
            origin,
            velocity,
            sin_amplitude: [0.0, 0.0],
            sin_period_s: 1.0,
            sin_phase: 0.0,
            bounds: None,
            pauses: Vec::new(),
        }
    }

    pub fn stationary(origin: [f64; 2]) -> Self {
        Self::linear(origin, [0.0, 0.0])
    }

    /// Seconds of motion clock elapsed at `t_us`.
    fn motion_time(&self, t_us: i64) -> f64 {
        let paused: i64 = self
            .pauses
            .iter()
            .map(|&(a, b)| (t_us.min(b) - a).max(0))
            .sum();
        (t_us - paused) as f64 * 1e-6
    }

    pub fn position(&self, t_us: i64) -> [f64; 2] {
        let tau = self.motion_time(t_us);
        let mut p = [0.0; 2];
        for (axis, slot) in p.iter_mut().enumerate() {
            let mut v = self.origin[axis] + self.velocity[axis] * tau;
            if let Some(b) = self.bounds {
                v = reflect(v, b[axis], b[axis + 2]);
            }
            let phase = 2.0 * PI * tau / self.sin_period_s + self.sin_phase;
            *slot = v + self.sin_amplitude[axis] * phase.sin();
        }
        p
    }
}

/// Fold `v` into `[lo, hi]` by mirror reflection.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (v - lo).rem_euclid(2.0 * span);
    if m <= span {
        lo + m
    } else {
        lo + 2.0 * span - m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub intensity: f64,
    pub size: f64,
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub objects: Vec<ObjectSpec>,
    /// Log-intensity change per event.
    pub contrast_threshold: f64,
    /// Simulation micro-steps per base tick.
    pub substeps: usize,
    /// Base tick length that fixes the simulation grid, microseconds.
    pub base_tick_us: i64,
    pub seed: u64,
}

/// Added before taking the log so black pixels stay finite.
const LOG_EPS: f64 = 0.02;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_threshold > 0.0) {
            return Err(Error::Config("contrast threshold must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("at least one substep per tick".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::Config(format!("bad canvas {}x{}", self.width, self.height)));
        }
        if self.base_tick_us <= 0 || self.base_tick_us % self.substeps as i64 != 0 {
            return Err(Error::Config("base tick must be a positive multiple of substeps".into()));
        }
        if let Some(o) = self.objects.iter().find(|o| !(o.size > 0.0)) {
            return Err(Error::Config(format!("object size must be positive: {o:?}")));
        }
        Ok(())
    }

    /// Default desk scene: 128x96 canvas, one object per class with seeded
    /// size, contrast, and mixed linear/sinusoidal motion bouncing inside
    /// the canvas.
    pub fn desk(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (width, height) = (128usize, 96usize);
        let background = 0.45;
        let objects = Shape::ALL
            .iter()
            .map(|&shape| {
                let size = rng.gen_range(12.0..20.0);
                let intensity = if rng.gen_bool(0.5) {
                    rng.gen_range(0.8..0.95)
                } else {
                    rng.gen_range(0.05..0.2)
                };
                let h = size / 2.0 + 2.0;
                let bounds = [h, h, width as f64 - h, height as f64 - h];
                let speed = rng.gen_range(25.0..60.0);
                let angle = rng.gen_range(0.0..2.0 * PI);
                let wobble = if rng.gen_bool(0.5) { rng.gen_range(3.0..8.0) } else { 0.0 };
                ObjectSpec {
                    shape,
                    intensity,
                    size,
                    motion: Motion {
                        origin: [rng.gen_range(bounds[0]..bounds[2]), rng.gen_range(bounds[1]..bounds[3])],
                        velocity: [speed * angle.cos(), speed * angle.sin()],
                        sin_amplitude: [wobble * angle.sin(), wobble * angle.cos()],
                        sin_period_s: rng.gen_range(0.8..2.5),
                        sin_phase: rng.gen_range(0.0..2.0 * PI),
                        bounds: Some(bounds),
                        pauses: Vec::new(),
                    },
                }
            })
            .collect();
        SceneConfig {
            width,
            height,
            background,
            objects,
            contrast_threshold: 0.15,
            substeps: 4,
            base_tick_us: 40_000,
            seed,
        }
    }

    /// Copy with every object frozen during `[start_us, end_us)`.
    pub fn with_pause(mut self, start_us: i64, end_us: i64) -> Self {
        for o in &mut self.objects {
            o.motion.pauses.push((start_us, end_us));
        }
        self
    }

    /// Gray level at every pixel centre at time `t_us`, painter's order.
    pub fn intensity_map(&self, t_us: i64) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut img = vec![self.background; w * h];
        for o in &self.objects {
            let [cx, cy] = o.motion.position(t_us);
            let r = o.size / 2.0 + 1.0;
            let x0 = ((cx - r).floor().max(0.0)) as usize;
            let y0 = ((cy - r).floor().max(0.0)) as usize;
            let x1 = ((cx + r).ceil().min(w as f64)).max(0.0) as usize;
            let y1 = ((cy + r).ceil().min(h as f64)).max(0.0) as usize;
            for y in y0..y1 {
                let dy = y as f64 + 0.5 - cy;
                for x in x0..x1 {
                    let dx = x as f64 + 0.5 - cx;
                    if o.shape.contains(dx, dy, o.size) {
                        img[y * w + x] = o.intensity;
                    }
                }
            }
        }
        img
    }
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c] as f32 / 255.0
    }

    /// `3 x H x W` tensor in `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let n = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / n, i % n);
            F::of(self.data[p * 3 + c] as f64 / 255.0)
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// Render the scene at `t_us` (grayscale replicated to three channels).
pub fn render_frame(scene: &SceneConfig, t_us: i64) -> RgbFrame {
    let img = scene.intensity_map(t_us);
    let mut data = Vec::with_capacity(img.len() * 3);
    for v in img {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        data.extend_from_slice(&[q, q, q]);
    }
    RgbFrame {
        width: scene.width,
        height: scene.height,
        data,
    }
}

/// Contrast-threshold event camera between `t0` and `t1`.
///
/// Every pixel keeps a reference log intensity initialised at `t0`. The
/// interval is walked on the scene's fixed micro-step grid; each full
/// crossing of the threshold emits one event with a linearly interpolated
/// timestamp and moves the reference by one threshold.
pub fn generate_events(scene: &SceneConfig, t0: i64, t1: i64) -> Result<Vec<EventPoint>> {
    scene.validate()?;
    if t0 >= t1 {
        return Err(Error::Range(format!("empty interval [{t0}, {t1}]")));
    }
    let step = scene.base_tick_us / scene.substeps as i64;
    let c = scene.contrast_threshold;
    let log = |v: f64| (v + LOG_EPS).ln();
    let mut reference: Vec<f64> = scene.intensity_map(t0).into_iter().map(log).collect();
    let mut prev = reference.clone();
    let mut events = Vec::new();
    let mut ta = t0;
    while ta < t1 {
        let tb = ((ta.div_euclid(step) + 1) * step).min(t1);
        let cur: Vec<f64> = scene.intensity_map(tb).into_iter().map(log).collect();
        for (i, (&l1, &l0)) in cur.iter().zip(&prev).enumerate() {
            let r = &mut reference[i];
            loop {
                let diff = l1 - *r;
                if diff.abs() < c {
                    break;
                }
                let sign = diff.signum();
                let level = *r + sign * c;
                let frac = if (l1 - l0).abs() > 0.0 {
                    ((level - l0) / (l1 - l0)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let t = ta + (frac * (tb - ta) as f64).round() as i64;
                events.push(EventPoint {
                    x: (i % scene.width) as u16,
                    y: (i / scene.width) as u16,
                    t,
                    p: if sign > 0.0 { Polarity::Positive } else { Polarity::Negative },
                });
                *r = level;
            }
        }
        prev = cur;
        ta = tb;
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    Ok(events)
}

/// Class id, box in pixels and timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub t_us: i64,
}

impl GroundTruthBox {
    pub fn bbox(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Minimum visible extent (pixels) for a clipped object to be annotated.
const MIN_VISIBLE: f64 = 2.0;

/// Tight analytic boxes of on-canvas objects, clipped to the canvas.
pub fn ground_truth(scene: &SceneConfig, t_us: i64) -> Vec<GroundTruthBox> {
    let (w, h) = (scene.width as f64, scene.height as f64);
    scene
        .objects
        .iter()
        .filter_map(|o| {
            let [cx, cy] = o.motion.position(t_us);
            let s = o.size / 2.0;
            let b = GroundTruthBox {
                class_id: o.shape.class_id(),
                x_min: (cx - s).max(0.0),
                y_min: (cy - s).max(0.0),
                x_max: (cx + s).min(w),
                y_max: (cy + s).min(h),
                t_us,
            };
            (b.x_max - b.x_min >= MIN_VISIBLE && b.y_max - b.y_min >= MIN_VISIBLE).then_some(b)
        })
        .collect()
}

/// Tick boundaries `start + floor(k * num / den)` microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickClock {
    pub start: i64,
    pub num: i64,
    pub den: i64,
}

impl TickClock {
    pub fn boundary(&self, k: usize) -> i64 {
        self.start + (k as i64 * self.num).div_euclid(self.den)
    }

    /// Window `[t_a, t_b)` of tick `k`.
    pub fn window(&self, k: usize) -> (i64, i64) {
        (self.boundary(k), self.boundary(k + 1))
    }

    /// Reference time of tick `k`: the end of its window.
    pub fn tick_time(&self, k: usize) -> i64 {
        self.boundary(k + 1)
    }
}

/// Annotations of one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickAnnotations {
    pub tick: usize,
    pub t_us: i64,
    pub boxes: Vec<GroundTruthBox>,
}

/// Materialised events, RGB frames and per-tick annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub scene: SceneConfig,
    pub events: Vec<EventPoint>,
    pub clock: TickClock,
    pub num_ticks: usize,
    pub duration_us: i64,
    pub f_event: f64,
    pub rgb_divisor: usize,
    /// `(tick, frame)` for ticks divisible by `rgb_divisor`.
    pub frames: Vec<(usize, RgbFrame)>,
    pub annotations: Vec<TickAnnotations>,
    ranges: Vec<Range<usize>>,
}

fn tick_ranges(events: &[EventPoint], clock: &TickClock, num_ticks: usize) -> Vec<Range<usize>> {
    let mut lo = events.partition_point(|e| e.t < clock.boundary(0));
    (0..num_ticks)
        .map(|k| {
            let end = clock.boundary(k + 1);
            let hi = lo + events[lo..].partition_point(|e| e.t < end);
            let r = lo..hi;
            lo = hi;
            r
        })
        .collect()
}

/// Number of whole ticks in `duration_s` at `f_event`.
pub fn tick_count(duration_s: f64, f_event: f64) -> Result<usize> {
    let n = duration_s * f_event;
    if !n.is_finite() || (n - n.round()).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "{duration_s} s at {f_event} Hz is not a whole number of ticks"
        )));
    }
    let n = n.round() as usize;
    if n < 2 {
        return Err(Error::Config("need at least two ticks".into()));
    }
    Ok(n)
}

/// Simulate `duration_s` seconds and slice at `f_event` with RGB every
/// `rgb_divisor` ticks.
pub fn make_dataset(scene: &SceneConfig, duration_s: f64, f_event: f64, rgb_divisor: usize) -> Result<SequenceDataset> {
    scene.validate()?;
    let num_ticks = tick_count(duration_s, f_event)?;
    let duration_us = (duration_s * 1e6).round() as i64;
    let events = generate_events(scene, 0, duration_us)?;
    slice_dataset(scene, events, duration_us, num_ticks, f_event, rgb_divisor)
}

fn slice_dataset(
    scene: &SceneConfig,
    events: Vec<EventPoint>,
    duration_us: i64,
    num_ticks: usize,
    f_event: f64,
    rgb_divisor: usize,
) -> Result<SequenceDataset> {
    if rgb_divisor == 0 {
        return Err(Error::Config("rgb divisor must be at least 1".into()));
    }
    let clock = TickClock {
        start: 0,
        num: duration_us,
        den: num_ticks as i64,
    };
    let frames = (0..num_ticks)
        .step_by(rgb_divisor)
        .map(|k| (k, render_frame(scene, clock.tick_time(k))))
        .collect();
    let annotations = (0..num_ticks)
        .map(|k| {
            let t = clock.tick_time(k);
            TickAnnotations {
                tick: k,
                t_us: t,
                boxes: ground_truth(scene, t),
            }
        })
        .collect();
    let ranges = tick_ranges(&events, &clock, num_ticks);
    Ok(SequenceDataset {
        scene: scene.clone(),
        events,
        clock,
        num_ticks,
        duration_us,
        f_event,
        rgb_divisor,
        frames,
        annotations,
        ranges,
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    scene: SceneConfig,
    f_event: f64,
    rgb_divisor: usize,
    seed: u64,
    num_ticks: usize,
    duration_us: i64,
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    tick: usize,
    t_us: i64,
    boxes: Vec<GtBoxLine>,
}

#[derive(Serialize, Deserialize)]
struct GtBoxLine {
    cls: usize,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl SequenceDataset {
    /// Same event stream and scene sliced at a new tick rate, with frames
    /// and labels re-rendered at the new tick times.
    pub fn reslice(&self, f_event: f64, rgb_divisor: usize) -> Result<SequenceDataset> {
        let num_ticks = tick_count(self.duration_us as f64 * 1e-6, f_event)?;
        slice_dataset(&self.scene, self.events.clone(), self.duration_us, num_ticks, f_event, rgb_divisor)
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_us as f64 * 1e-6
    }

    pub fn width(&self) -> usize {
        self.scene.width
    }

    pub fn height(&self) -> usize {
        self.scene.height
    }

    pub fn tick_events(&self, k: usize) -> &[EventPoint] {
        &self.events[self.ranges[k].clone()]
    }

    pub fn voxel(&self, k: usize, cfg: &VoxelConfig) -> Result<EventVoxelGrid> {
        let (a, b) = self.clock.window(k);
        voxelize(self.tick_events(k), a, b, cfg)
    }

    /// Latest frame whose tick is `<= k`.
    pub fn rgb_at_or_before(&self, k: usize) -> Option<(usize, &RgbFrame)> {
        let i = self.frames.partition_point(|(t, _)| *t <= k);
        (i > 0).then(|| (self.frames[i - 1].0, &self.frames[i - 1].1))
    }

    /// Frame of exactly tick `k`, if one was captured.
    pub fn rgb_exact(&self, k: usize) -> Option<&RgbFrame> {
        self.frames
            .binary_search_by_key(&k, |(t, _)| *t)
            .ok()
            .map(|i| &self.frames[i].1)
    }

    pub fn gt(&self, k: usize) -> &[GroundTruthBox] {
        &self.annotations[k].boxes
    }

    /// Write `events.evs`, `frames/NNNNNN.png`, `gt.jsonl`, `meta.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        let f = BufWriter::new(fs::File::create(dir.join("events.evs"))?);
        write_evs(f, self.width() as u16, self.height() as u16, &self.events)?;
        for (k, frame) in &self.frames {
            frame.save_png(&dir.join("frames").join(format!("{k:06}.png")))?;
        }
        let mut gt = BufWriter::new(fs::File::create(dir.join("gt.jsonl"))?);
        for a in &self.annotations {
            let line = GtLine {
                tick: a.tick,
                t_us: a.t_us,
                boxes: a
                    .boxes
                    .iter()
                    .map(|b| GtBoxLine {
                        cls: b.class_id,
                        x_min: b.x_min,
                        y_min: b.y_min,
                        x_max: b.x_max,
                        y_max: b.y_max,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut gt, &line)?;
            gt.write_all(b"\n")?;
        }
        gt.flush()?;
        let meta = Meta {
            scene: self.scene.clone(),
            f_event: self.f_event,
            rgb_divisor: self.rgb_divisor,
            seed: self.scene.seed,
            num_ticks: self.num_ticks,
            duration_us: self.duration_us,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let (header, events) = read_evs(BufReader::new(fs::File::open(dir.join("events.evs"))?))?;
        if (header.width as usize, header.height as usize) != (meta.scene.width, meta.scene.height) {
            return Err(Error::Format("events.evs sensor size differs from meta.json".into()));
        }
        if events.windows(2).any(|w| w[0].t > w[1].t) {
            return Err(Error::Format("events.evs is not time-sorted".into()));
        }
        let mut annotations = Vec::with_capacity(meta.num_ticks);
        for line in BufReader::new(fs::File::open(dir.join("gt.jsonl"))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let g: GtLine = serde_json::from_str(&line)?;
            annotations.push(TickAnnotations {
                tick: g.tick,
                t_us: g.t_us,
                boxes: g
                    .boxes
                    .into_iter()
                    .map(|b| GroundTruthBox {
                        class_id: b.cls,
                        x_min: b.x_min,
                        y_min: b.y_min,
                        x_max: b.x_max,
                        y_max: b.y_max,
                        t_us: g.t_us,
                    })
                    .collect(),
            });
        }
        if annotations.len() != meta.num_ticks || annotations.iter().enumerate().any(|(i, a)| a.tick != i) {
            return Err(Error::Format("gt.jsonl does not cover every tick in order".into()));
        }
        let mut frames = Vec::new();
        for k in (0..meta.num_ticks).step_by(meta.rgb_divisor.max(1)) {
            let frame = RgbFrame::load_png(&dir.join("frames").join(format!("{k:06}.png")))?;
            if (frame.width, frame.height) != (meta.scene.width, meta.scene.height) {
                return Err(Error::Format(format!("frame {k} has the wrong size")));
            }
            frames.push((k, frame));
        }
        let clock = TickClock {
            start: 0,
            num: meta.duration_us,
            den: meta.num_ticks as i64,
        };
        let ranges = tick_ranges(&events, &clock, meta.num_ticks);
        Ok(SequenceDataset {
            scene: meta.scene,
            events,
            clock,
            num_ticks: meta.num_ticks,
            duration_us: meta.duration_us,
            f_event: meta.f_event,
            rgb_divisor: meta.rgb_divisor,
            frames,
            annotations,
            ranges,
        })
    }
}
