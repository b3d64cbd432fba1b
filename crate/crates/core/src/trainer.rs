//! Time Shift training: pairs each event tick with an RGB frame from a
//! random number of ticks earlier while keeping the event tick's labels,
//! and optimizes the detector with alternating full and truncated
//! backpropagation through time.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::detector::{detection_loss_graph, DetectorParams, LossParts, RecurrentState};
use crate::error::{Error, Result};
use crate::events::{EventVoxelGrid, VoxelConfig};
use crate::fusion::FusionMode;
use crate::nn::ParamSet;
use crate::scenesim::{GroundTruthBox, RgbFrame, SequenceDataset};
use crate::tensor::{Scalar, Tensor};

/// OneCycle warmup fraction and start/end divisors.
pub const WARMUP_FRACTION: f64 = 0.3;
pub const START_DIV: f64 = 25.0;
pub const FINAL_DIV: f64 = 1000.0;

/// Boxes narrower or shorter than this after augmentation are dropped.
const MIN_BOX_SIDE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeShiftConfig {
    pub dt_min: usize,
    pub dt_max: usize,
    pub enabled: bool,
}

impl Default for TimeShiftConfig {
    fn default() -> Self {
        Self {
            dt_min: 0,
            dt_max: 10,
            enabled: true,
        }
    }
}

impl TimeShiftConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt_min > self.dt_max {
            return Err(Error::Config(format!(
                "time shift range [{}, {}] is empty",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// Uniform draw from `{dt_min, ..., dt_max}`, or 0 when disabled.
pub fn sample_shift<R: Rng + ?Sized>(config: &TimeShiftConfig, rng: &mut R) -> usize {
    if !config.enabled {
        return 0;
    }
    rng.gen_range(config.dt_min..=config.dt_max)
}

/// One training sample: events and labels of `tick`, RGB from
/// `rgb_tick <= max(tick - dt, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub tick: usize,
    pub event: EventVoxelGrid,
    pub rgb_tick: Option<usize>,
    pub rgb: Option<RgbFrame>,
    pub annotations: Vec<GroundTruthBox>,
    pub dt: usize,
}

pub fn build_pair(seq: &SequenceDataset, tick: usize, dt: usize, voxel: &VoxelConfig) -> Result<PairedSample> {
    if tick >= seq.num_ticks {
        return Err(Error::Range(format!("tick {tick} outside 0..{}", seq.num_ticks)));
    }
    let target = tick.saturating_sub(dt);
    let (rgb_tick, rgb) = match seq.rgb_at_or_before(target) {
        Some((t, f)) => (Some(t), Some(f.clone())),
        None => (None, None),
    };
    Ok(PairedSample {
        tick,
        event: seq.voxel(tick, voxel)?,
        rgb_tick,
        rgb,
        annotations: seq.gt(tick).to_vec(),
        dt,
    })
}

/// Linear rise from `max_lr / 25` to `max_lr` over the first 30% of
/// steps, then cosine decay to `max_lr / 1000`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let start = max_lr / START_DIV;
    let end = max_lr / FINAL_DIV;
    if total_steps == 0 {
        return start;
    }
    let s = step.min(total_steps) as f64;
    let warm = WARMUP_FRACTION * total_steps as f64;
    if s <= warm {
        let a = if warm > 0.0 { s / warm } else { 1.0 };
        return start * (1.0 - a) + max_lr * a;
    }
    let p = (s - warm) / (total_steps as f64 - warm);
    let w = 0.5 * (1.0 + (PI * p).cos());
    end * (1.0 - w) + max_lr * w
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Scalar>(params: &ParamSet<F>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<F: Scalar>(&mut self, params: &mut ParamSet<F>, grads: &[Tensor<F>], lr: f64) {
        self.step += 1;
        let b1 = 1.0 - self.beta1.powi(self.step as i32);
        let b2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(crate::nn::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let step = lr * (m[j] / b1) / ((v[j] / b2).sqrt() + self.eps);
                *w = F::of(w.as_f64() - step);
            }
        }
    }
}

/// Horizontal flip and zoom-in probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub zoom_prob: f64,
    /// Largest zoom factor; crops of `1 / zoom` of each side are
    /// resized back to full size.
    pub zoom_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            zoom_prob: 0.5,
            zoom_max: 1.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            zoom_prob: 0.0,
            zoom_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !p(self.flip_prob) || !p(self.zoom_prob) || !(self.zoom_max >= 1.0) {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Augment {
        let flip = rng.gen_bool(self.flip_prob);
        let (zoom, ox, oy) = if self.zoom_max > 1.0 && rng.gen_bool(self.zoom_prob) {
            let z = rng.gen_range(1.0..=self.zoom_max);
            let free = 1.0 - 1.0 / z;
            (z, rng.gen_range(0.0..=free), rng.gen_range(0.0..=free))
        } else {
            (1.0, 0.0, 0.0)
        };
        Augment {
            flip,
            zoom,
            origin: [ox, oy],
        }
    }
}

/// One geometric augmentation. `origin` is the crop corner as a fraction
/// of the frame size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub zoom: f64,
    pub origin: [f64; 2],
}

impl Augment {
    pub fn identity() -> Self {
        Self {
            flip: false,
            zoom: 1.0,
            origin: [0.0, 0.0],
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.zoom == 1.0
    }

    /// Nearest-neighbour resample of a `C x H x W` tensor.
    pub fn apply_tensor<F: Scalar>(&self, t: &Tensor<F>) -> Tensor<F> {
        if self.is_identity() {
            return t.clone();
        }
        let (c, h, w) = t.dims3();
        let src_x: Vec<usize> = (0..w)
            .map(|x| {
                let x = if self.flip { w - 1 - x } else { x };
                let s = self.origin[0] * w as f64 + (x as f64 + 0.5) / self.zoom;
                (s.floor() as usize).min(w - 1)
            })
            .collect();
        let src_y: Vec<usize> = (0..h)
            .map(|y| {
                let s = self.origin[1] * h as f64 + (y as f64 + 0.5) / self.zoom;
                (s.floor() as usize).min(h - 1)
            })
            .collect();
        let d = t.data();
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            d[(ch * h + src_y[y]) * w + src_x[x]]
        })
    }

    /// Map boxes into the augmented frame, dropping those that fall
    /// (almost) outside.
    pub fn apply_boxes(&self, boxes: &[GroundTruthBox], width: usize, height: usize) -> Vec<GroundTruthBox> {
        let (w, h) = (width as f64, height as f64);
        let ox = self.origin[0] * w;
        let oy = self.origin[1] * h;
        boxes
            .iter()
            .filter_map(|b| {
                let mut x0 = ((b.x_min - ox) * self.zoom).clamp(0.0, w);
                let mut x1 = ((b.x_max - ox) * self.zoom).clamp(0.0, w);
                let y0 = ((b.y_min - oy) * self.zoom).clamp(0.0, h);
                let y1 = ((b.y_max - oy) * self.zoom).clamp(0.0, h);
                if self.flip {
                    (x0, x1) = (w - x1, w - x0);
                }
                (x1 - x0 >= MIN_BOX_SIDE && y1 - y0 >= MIN_BOX_SIDE).then_some(GroundTruthBox {
                    x_min: x0,
                    y_min: y0,
                    x_max: x1,
                    y_max: y1,
                    ..*b
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Ticks per unrolled window.
    pub seq_len: usize,
    /// Gradient truncation interval inside truncated windows.
    pub tbptt_len: usize,
    pub seed: u64,
    /// Must match the detector's fusion mode.
    pub fusion_mode: FusionMode,
    pub time_shift: TimeShiftConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 4,
            max_lr: 1.5e-4,
            seq_len: 8,
            tbptt_len: 4,
            seed: 0,
            fusion_mode: FusionMode::Ef,
            time_shift: TimeShiftConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.tbptt_len == 0 {
            return Err(Error::Config("batch size, sequence and truncation lengths must be positive".into()));
        }
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        self.time_shift.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unroll {
    /// Fresh state, gradients through the whole window.
    Full,
    /// Carried-in state, gradients cut every `tbptt_len` steps.
    Truncated,
}

/// Unroll kind of an iteration: even iterations are full, odd ones
/// truncated.
pub fn unroll_kind(iteration: usize) -> Unroll {
    if iteration % 2 == 0 {
        Unroll::Full
    } else {
        Unroll::Truncated
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_iou: f64,
    pub loss_cls: f64,
    pub loss_obj: f64,
    /// Largest RGB shift drawn in the iteration.
    pub dt_max: usize,
    pub unroll: Unroll,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>().map_err(csv_err)?;
        Ok(Self { rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("training log: {e}"))
}

/// Network-ready inputs of one tick.
#[derive(Clone, Debug)]
pub struct StepInput<F> {
    pub event: Tensor<F>,
    pub rgb: Option<Tensor<F>>,
    pub gts: Vec<GroundTruthBox>,
}

impl<F: Scalar> StepInput<F> {
    pub fn from_pair(s: &PairedSample, aug: &Augment) -> Self {
        let (w, h) = (s.event.width(), s.event.height());
        Self {
            event: aug.apply_tensor(&s.event.to_tensor()),
            rgb: s.rgb.as_ref().map(|f| aug.apply_tensor(&f.to_tensor())),
            gts: aug.apply_boxes(&s.annotations, w, h),
        }
    }
}

/// Gradients and mean loss of one unrolled window.
#[derive(Clone, Debug)]
pub struct WindowResult<F> {
    /// One tensor per parameter, in [`ParamSet`] order.
    pub grads: Vec<Tensor<F>>,
    pub loss: LossParts,
    pub state: RecurrentState<F>,
}

/// Unroll `steps` from `state` on one graph. The loss is the mean of the
/// per-step losses from index `loss_from` on. With `truncate = Some(n)`
/// the state is detached before every step whose index is a positive
/// multiple of `n`.
pub fn window_gradients<F: Scalar>(
    det: &DetectorParams<F>,
    steps: &[StepInput<F>],
    state: &RecurrentState<F>,
    truncate: Option<usize>,
    loss_from: usize,
) -> Result<WindowResult<F>> {
    det.check_state(state)?;
    for s in steps {
        det.check_inputs(&s.event, s.rgb.as_ref())?;
    }
    let g = Graph::new();
    let p = det.params.bind(&g, true);
    let mut st: Vec<_> = state
        .stages
        .iter()
        .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
        .collect();
    let mut total: Option<crate::autograd::Var<'_, F>> = None;
    let mut parts = LossParts::default();
    let counted = steps.len().saturating_sub(loss_from);
    let w = if counted > 0 { 1.0 / counted as f64 } else { 0.0 };
    for (k, s) in steps.iter().enumerate() {
        if let Some(n) = truncate {
            if k > 0 && k % n == 0 {
                st = st.iter().map(|(h, c)| (h.detach(), c.detach())).collect();
            }
        }
        let ev = g.constant(s.event.clone());
        let rgb = s.rgb.as_ref().map(|r| g.constant(r.clone()));
        let out = det.step(&p, ev, rgb, &st);
        st = out.state;
        if k < loss_from {
            continue;
        }
        let l = detection_loss_graph(&out.heads, &s.gts);
        let v = l.values();
        parts.total += w * v.total;
        parts.iou += w * v.iou;
        parts.cls += w * v.cls;
        parts.obj += w * v.obj;
        total = Some(match total {
            None => l.total,
            Some(t) => t.add(l.total),
        });
    }
    let state_out = RecurrentState {
        stages: st.iter().map(|(h, c)| (h.value().clone(), c.value().clone())).collect(),
    };
    let grads = match total {
        Some(t) => {
            let root = t.scale(F::of(w));
            let mut gr = g.backward(root);
            p.vars()
                .iter()
                .map(|v| gr.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
                .collect()
        }
        None => det.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
    };
    Ok(WindowResult {
        grads,
        loss: parts,
        state: state_out,
    })
}

/// Persistent position of one batch slot for truncated iterations.
#[derive(Clone, Debug)]
struct Stream {
    seq: usize,
    pos: usize,
    state: RecurrentState<f32>,
    aug: Augment,
}

struct Sampler<'a> {
    data: &'a [SequenceDataset],
    voxel: VoxelConfig,
    config: &'a TrainConfig,
}

impl Sampler<'_> {
    /// Build `len` consecutive steps of `seq` from `start`, drawing one
    /// shift per step.
    fn window(&self, rng: &mut ChaCha8Rng, seq: usize, start: usize, aug: &Augment) -> Result<(Vec<StepInput<f32>>, usize)> {
        let s = &self.data[seq];
        let mut out = Vec::with_capacity(self.config.seq_len);
        let mut dt_max = 0;
        for k in start..start + self.config.seq_len {
            let dt = sample_shift(&self.config.time_shift, rng);
            dt_max = dt_max.max(dt);
            let pair = build_pair(s, k, dt, &self.voxel)?;
            out.push(StepInput::from_pair(&pair, aug));
        }
        Ok((out, dt_max))
    }

    fn random_start(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let seq = rng.gen_range(0..self.data.len());
        let start = rng.gen_range(0..=self.data[seq].num_ticks - self.config.seq_len);
        (seq, start)
    }
}

fn check_data(data: &[SequenceDataset], det: &DetectorParams<f32>, config: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    if det.config.fusion_mode != config.fusion_mode {
        return Err(Error::Config(format!(
            "training fusion mode {:?} differs from the detector's {:?}",
            config.fusion_mode, det.config.fusion_mode
        )));
    }
    for (i, s) in data.iter().enumerate() {
        if (s.width(), s.height()) != (det.config.width, det.config.height) {
            return Err(Error::Shape(format!(
                "sequence {i} is {}x{}, detector expects {}x{}",
                s.width(),
                s.height(),
                det.config.width,
                det.config.height
            )));
        }
        if s.num_ticks < config.seq_len {
            return Err(Error::Invalid(format!(
                "sequence {i} has {} ticks, shorter than the unroll of {}",
                s.num_ticks, config.seq_len
            )));
        }
    }
    Ok(())
}

/// Train `init` on `data`, calling `progress` after every iteration.
pub fn train_with(
    data: &[SequenceDataset],
    config: &TrainConfig,
    init: DetectorParams<f32>,
    mut progress: impl FnMut(&LogRow),
) -> Result<(DetectorParams<f32>, TrainLog)> {
    config.validate()?;
    check_data(data, &init, config)?;
    let mut det = init;
    let mut log = TrainLog::default();
    if config.iterations == 0 {
        return Ok((det, log));
    }
    let sampler = Sampler {
        data,
        voxel: VoxelConfig::new(det.config.num_bins, det.config.width, det.config.height)?,
        config,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&det.params);
    let mut streams: Vec<Stream> = (0..config.batch_size)
        .map(|_| {
            let (seq, pos) = sampler.random_start(&mut rng);
            Stream {
                seq,
                pos,
                state: det.reset_state(),
                aug: config.augment.sample(&mut rng),
            }
        })
        .collect();
    let scale = 1.0 / config.batch_size as f64;

    for it in 0..config.iterations {
        let lr = onecycle_lr(it, config.iterations, config.max_lr);
        let kind = unroll_kind(it);
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let mut parts = LossParts::default();
        let mut dt_max = 0;
        for slot in 0..config.batch_size {
            let res = match kind {
                Unroll::Full => {
                    let (seq, start) = sampler.random_start(&mut rng);
                    let aug = config.augment.sample(&mut rng);
                    let (steps, dt) = sampler.window(&mut rng, seq, start, &aug)?;
                    dt_max = dt_max.max(dt);
                    window_gradients(&det, &steps, &det.reset_state(), None, 0)?
                }
                Unroll::Truncated => {
                    let s = &mut streams[slot];
                    if s.pos + config.seq_len > data[s.seq].num_ticks {
                        s.seq = rng.gen_range(0..data.len());
                        s.pos = 0;
                        s.state = det.reset_state();
                        s.aug = config.augment.sample(&mut rng);
                    }
                    let (steps, dt) = sampler.window(&mut rng, s.seq, s.pos, &s.aug)?;
                    dt_max = dt_max.max(dt);
                    let r = window_gradients(&det, &steps, &s.state, Some(config.tbptt_len), 0)?;
                    s.pos += config.seq_len;
                    s.state = r.state.clone();
                    r
                }
            };
            parts.total += scale * res.loss.total;
            parts.iou += scale * res.loss.iou;
            parts.cls += scale * res.loss.cls;
            parts.obj += scale * res.loss.obj;
            match &mut grads {
                None => grads = Some(res.grads),
                Some(acc) => acc.iter_mut().zip(&res.grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss is {} ({parts:?})", parts.total),
            });
        }
        let mut grads = grads.expect("batch is non-empty");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale as f32);
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("non-finite gradient for {}", det.params.names()[i]),
            });
        }
        adam.update(&mut det.params, &grads, lr);
        let row = LogRow {
            iteration: it,
            lr,
            loss_total: parts.total,
            loss_iou: parts.iou,
            loss_cls: parts.cls,
            loss_obj: parts.obj,
            dt_max,
            unroll: kind,
        };
        progress(&row);
        log.rows.push(row);
    }
    Ok((det, log))
}

pub fn train(
    data: &[SequenceDataset],
    config: &TrainConfig,
    init: DetectorParams<f32>,
) -> Result<(DetectorParams<f32>, TrainLog)> {
    train_with(data, config, init, |r| {
        if r.iteration % 100 == 0 {
            log::info!(
                "iter {} lr {:.2e} loss {:.4} (iou {:.4} cls {:.4} obj {:.4})",
                r.iteration,
                r.lr,
                r.loss_total,
                r.loss_iou,
                r.loss_cls,
                r.loss_obj
            );
        }
    })
}
