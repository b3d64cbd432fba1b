//! COCO-style mAP, the MDrop metric and the streaming evaluation
//! protocols (paired, RGB-rate sweep, event-rate sweep).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{decode_detections, Detection, DetectorParams, RecurrentState};
use crate::error::{Error, Result};
use crate::events::{EventVoxelGrid, VoxelConfig};
use crate::scenesim::{ground_truth, GroundTruthBox, RgbFrame, SceneConfig, SequenceDataset};

/// Recall points of the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;
/// Detections kept per image, highest score first.
pub const MAX_DETECTIONS: usize = 100;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Intersection over union of `[x_min, y_min, x_max, y_max]` boxes.
pub fn compute_iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !bx.iter().all(|v| v.is_finite()) || bx[2] <= bx[0] || bx[3] <= bx[1] {
            return Err(Error::Invalid(format!("degenerate box {bx:?}")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Interpolated AP of one class at one IoU threshold, or `None` when the
/// class has no ground truth.
fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], class: usize, thr: f64) -> Result<Option<f64>> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class).count()).sum();
    if num_gt == 0 {
        return Ok(None);
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|x| x.class_id == class).map(move |x| (img, x)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (n, (img, d)) in ranked.iter().enumerate() {
        let mut best = None;
        let mut best_iou = thr;
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id != class || taken[*img][j] {
                continue;
            }
            let iou = compute_iou(d.bbox, g.bbox())?;
            if iou >= best_iou {
                best_iou = iou;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            taken[*img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < level);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    Ok(Some(sum / RECALL_POINTS as f64))
}

/// mAP over classes with ground truth and the given IoU thresholds, plus
/// AP at 0.5 and 0.75. Detections beyond [`MAX_DETECTIONS`] per image are
/// ignored.
pub fn compute_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], thresholds: &[f64]) -> Result<MapResult> {
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let dets: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(MAX_DETECTIONS);
            d
        })
        .collect();
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mean_at = |thrs: &[f64]| -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &c in &classes {
            for &t in thrs {
                if let Some(ap) = average_precision(&dets, gts, c, t)? {
                    sum += ap;
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    };
    Ok(MapResult {
        map: mean_at(thresholds)?,
        ap50: mean_at(&[0.5])?,
        ap75: mean_at(&[0.75])?,
    })
}

/// `reference - min(sweep)`.
pub fn compute_mdrop(reference: f64, sweep: &[f64]) -> Result<f64> {
    let min = sweep
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Invalid("empty sweep".into()))?;
    Ok(reference - min)
}

/// Inputs of one streaming step.
pub struct TickInput<'a> {
    pub tick: usize,
    /// End of the tick's window, microseconds.
    pub t_us: i64,
    pub voxel: &'a EventVoxelGrid,
    pub rgb: Option<&'a RgbFrame>,
}

/// A detector consuming one sequence tick by tick.
pub trait StreamDetector {
    fn name(&self) -> String;
    /// Temporal bins per polarity expected in the voxel input.
    fn num_bins(&self) -> usize;
    /// `(width, height)` the model is built for, if fixed.
    fn sensor(&self) -> Option<(usize, usize)>;
    /// Start a new sequence.
    fn reset(&mut self, scene: &SceneConfig);
    fn step(&mut self, input: &TickInput<'_>) -> Result<Vec<Detection>>;
}

/// Trained detector with persistent recurrent state.
pub struct NeuralDetector {
    pub params: DetectorParams<f32>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Reset the recurrent state before every step.
    pub stateless: bool,
    state: RecurrentState<f32>,
}

impl NeuralDetector {
    pub fn new(params: DetectorParams<f32>, score_threshold: f64, nms_iou: f64) -> Self {
        let state = params.reset_state();
        Self {
            params,
            score_threshold,
            nms_iou,
            stateless: false,
            state,
        }
    }
}

impl StreamDetector for NeuralDetector {
    fn name(&self) -> String {
        "detector".into()
    }

    fn num_bins(&self) -> usize {
        self.params.config.num_bins
    }

    fn sensor(&self) -> Option<(usize, usize)> {
        Some((self.params.config.width, self.params.config.height))
    }

    fn reset(&mut self, _scene: &SceneConfig) {
        self.state = self.params.reset_state();
    }

    fn step(&mut self, input: &TickInput<'_>) -> Result<Vec<Detection>> {
        if self.stateless {
            self.state = self.params.reset_state();
        }
        let out = self.params.forward_grid(input.voxel, input.rgb, &self.state)?;
        self.state = out.state;
        let c = &self.params.config;
        Ok(decode_detections(&out.heads, self.score_threshold, self.nms_iou, c.width, c.height))
    }
}

/// Emits the scene's ground truth at each tick time with score 1.
#[derive(Default)]
pub struct GtEcho {
    scene: Option<SceneConfig>,
}

impl StreamDetector for GtEcho {
    fn name(&self) -> String {
        "gt_echo".into()
    }

    fn num_bins(&self) -> usize {
        10
    }

    fn sensor(&self) -> Option<(usize, usize)> {
        None
    }

    fn reset(&mut self, scene: &SceneConfig) {
        self.scene = Some(scene.clone());
    }

    fn step(&mut self, input: &TickInput<'_>) -> Result<Vec<Detection>> {
        let scene = self.scene.as_ref().ok_or_else(|| Error::Invalid("step before reset".into()))?;
        Ok(ground_truth(scene, input.t_us)
            .iter()
            .map(|g| Detection {
                class_id: g.class_id,
                score: 1.0,
                bbox: g.bbox(),
            })
            .collect())
    }
}

/// Never detects anything.
pub struct EmptyDetector;

impl StreamDetector for EmptyDetector {
    fn name(&self) -> String {
        "empty".into()
    }

    fn num_bins(&self) -> usize {
        10
    }

    fn sensor(&self) -> Option<(usize, usize)> {
        None
    }

    fn reset(&mut self, _scene: &SceneConfig) {}

    fn step(&mut self, _input: &TickInput<'_>) -> Result<Vec<Detection>> {
        Ok(Vec::new())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Paired,
    RgbMismatch,
    TrainInfer,
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "rgb_mismatch" => Ok(Self::RgbMismatch),
            "train_infer" => Ok(Self::TrainInfer),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub kind: ProtocolKind,
    /// RGB every N ticks.
    pub rgb_divisors: Vec<usize>,
    /// Event tick-rate multipliers.
    pub multipliers: Vec<usize>,
    /// Fixed RGB rates as divisors of the base tick rate.
    pub rgb_base_divisors: Vec<usize>,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Paired,
            rgb_divisors: vec![1, 2, 4, 6, 8, 10],
            multipliers: vec![1, 2, 4, 6, 8],
            rgb_base_divisors: vec![5, 10],
            score_threshold: 0.01,
            nms_iou: 0.5,
        }
    }
}

impl EvalProtocol {
    pub fn of(kind: ProtocolKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb_divisors.is_empty() || self.rgb_divisors.contains(&0) {
            return Err(Error::Config("RGB divisors must be non-empty and at least 1".into()));
        }
        if self.multipliers.is_empty() || self.multipliers.contains(&0) {
            return Err(Error::Config("multipliers must be non-empty and at least 1".into()));
        }
        if self.rgb_base_divisors.is_empty() || self.rgb_base_divisors.contains(&0) {
            return Err(Error::Config("fixed RGB divisors must be non-empty and at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("score threshold and NMS IoU must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Metrics of one sweep point. AP values are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub point: String,
    /// Event tick-rate multiplier.
    pub multiplier: usize,
    /// RGB every this many ticks of the evaluated rate.
    pub rgb_divisor: usize,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ticks: usize,
    pub seconds_per_step: f64,
}

/// Split of the event-rate drop: pairing loss at `m = 1` and the further
/// loss from raising the event rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSplit {
    pub rgb_base_divisor: usize,
    pub event_rgb: f64,
    pub train_infer: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: ProtocolKind,
    pub model: String,
    /// Reference point first.
    pub points: Vec<PointMetrics>,
    /// Reference mAP minus the worst sweep point; `None` for paired.
    pub mdrop: Option<f64>,
    pub drop_split: Vec<DropSplit>,
    pub seconds_per_step: f64,
    pub config: EvalProtocol,
}

impl MetricsReport {
    pub fn point(&self, name: &str) -> Option<&PointMetrics> {
        self.points.iter().find(|p| p.point == name)
    }

    /// Copy with every AP and drop value scaled to percentage points.
    pub fn in_points(&self) -> Self {
        let mut r = self.clone();
        for p in &mut r.points {
            p.map *= 100.0;
            p.ap50 *= 100.0;
            p.ap75 *= 100.0;
        }
        r.mdrop = r.mdrop.map(|v| v * 100.0);
        for d in &mut r.drop_split {
            d.event_rgb *= 100.0;
            d.train_infer *= 100.0;
            d.total *= 100.0;
        }
        r
    }

    /// `report.json` (percentage points) and `sweep.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let pts = self.in_points();
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&pts)?)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(csv_err)?;
        w.write_record(["protocol", "point", "mAP", "AP50", "AP75"]).map_err(csv_err)?;
        let proto = serde_json::to_value(self.protocol)?;
        let proto = proto.as_str().unwrap_or_default().to_string();
        for p in &pts.points {
            w.write_record([
                proto.clone(),
                p.point.clone(),
                format!("{:.4}", p.map),
                format!("{:.4}", p.ap50),
                format!("{:.4}", p.ap75),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("sweep table: {e}"))
}

/// Tick whose frame is shown at tick `k` when RGB arrives every `n`
/// ticks.
pub fn held_rgb_tick(k: usize, n: usize) -> usize {
    n * (k / n)
}

/// Run `model` over every sequence with RGB held from the latest tick that
/// is a multiple of `rgb_divisor`; labels stay at each tick.
pub fn evaluate_stream(
    model: &mut dyn StreamDetector,
    seqs: &[SequenceDataset],
    rgb_divisor: usize,
) -> Result<(MapResult, usize, f64)> {
    if rgb_divisor == 0 {
        return Err(Error::Config("RGB divisor must be at least 1".into()));
    }
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut elapsed = 0.0;
    for (i, s) in seqs.iter().enumerate() {
        if let Some((w, h)) = model.sensor() {
            if (w, h) != (s.width(), s.height()) {
                return Err(Error::Shape(format!(
                    "model expects {w}x{h}, sequence {i} is {}x{}",
                    s.width(),
                    s.height()
                )));
            }
        }
        if rgb_divisor % s.rgb_divisor != 0 {
            return Err(Error::Invalid(format!(
                "sequence {i} has RGB every {} ticks, cannot serve every {rgb_divisor}",
                s.rgb_divisor
            )));
        }
        let vc = VoxelConfig::new(model.num_bins(), s.width(), s.height())?;
        model.reset(&s.scene);
        for k in 0..s.num_ticks {
            let voxel = s.voxel(k, &vc)?;
            let rgb = s.rgb_exact(held_rgb_tick(k, rgb_divisor));
            let t0 = Instant::now();
            let d = model.step(&TickInput {
                tick: k,
                t_us: s.clock.tick_time(k),
                voxel: &voxel,
                rgb,
            })?;
            elapsed += t0.elapsed().as_secs_f64();
            dets.push(d);
            gts.push(s.gt(k).to_vec());
        }
    }
    let ticks = gts.len();
    let m = compute_map(&dets, &gts, &coco_thresholds())?;
    Ok((m, ticks, elapsed / ticks.max(1) as f64))
}

fn point(name: String, multiplier: usize, rgb_divisor: usize, r: (MapResult, usize, f64)) -> PointMetrics {
    PointMetrics {
        point: name,
        multiplier,
        rgb_divisor,
        map: r.0.map,
        ap50: r.0.ap50,
        ap75: r.0.ap75,
        ticks: r.1,
        seconds_per_step: r.2,
    }
}

fn report(kind: ProtocolKind, model: &dyn StreamDetector, points: Vec<PointMetrics>, protocol: &EvalProtocol) -> MetricsReport {
    let ticks: usize = points.iter().map(|p| p.ticks).sum();
    let secs: f64 = points.iter().map(|p| p.seconds_per_step * p.ticks as f64).sum();
    MetricsReport {
        protocol: kind,
        model: model.name(),
        points,
        mdrop: None,
        drop_split: Vec::new(),
        seconds_per_step: secs / ticks.max(1) as f64,
        config: protocol.clone(),
    }
}

fn check_paired(seqs: &[SequenceDataset]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Invalid("no evaluation sequences".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.rgb_divisor != 1) {
        return Err(Error::Invalid(format!(
            "evaluation sequences need RGB at every tick, found every {}",
            s.rgb_divisor
        )));
    }
    Ok(())
}

/// Every tick with its own frame.
pub fn run_paired_eval(model: &mut dyn StreamDetector, seqs: &[SequenceDataset], protocol: &EvalProtocol) -> Result<MetricsReport> {
    protocol.validate()?;
    check_paired(seqs)?;
    let p = point("paired".into(), 1, 1, evaluate_stream(model, seqs, 1)?);
    Ok(report(ProtocolKind::Paired, model, vec![p], protocol))
}

/// RGB only every N ticks, held in between; MDrop against `N = 1`.
pub fn run_rgb_mismatch_sweep(
    model: &mut dyn StreamDetector,
    seqs: &[SequenceDataset],
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    protocol.validate()?;
    check_paired(seqs)?;
    let mut divs = protocol.rgb_divisors.clone();
    if !divs.contains(&1) {
        divs.insert(0, 1);
    }
    let mut points = Vec::with_capacity(divs.len());
    for &n in &divs {
        points.push(point(format!("N={n}"), 1, n, evaluate_stream(model, seqs, n)?));
    }
    let reference = points.iter().find(|p| p.rgb_divisor == 1).map(|p| p.map).unwrap_or(0.0);
    let sweep: Vec<f64> = points.iter().map(|p| p.map).collect();
    let mut r = report(ProtocolKind::RgbMismatch, model, points, protocol);
    r.mdrop = Some(compute_mdrop(reference, &sweep)?);
    Ok(r)
}

/// Re-slice each sequence at `m` times its tick rate with RGB fixed at
/// `1 / b` of the base rate, for every multiplier `m` and fixed divisor
/// `b`. MDrop is measured against the paired point at the base rate.
pub fn run_train_infer_sweep(
    model: &mut dyn StreamDetector,
    seqs: &[SequenceDataset],
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    protocol.validate()?;
    check_paired(seqs)?;
    let paired = point("paired".into(), 1, 1, evaluate_stream(model, seqs, 1)?);
    let reference = paired.map;
    let mut points = vec![paired];
    let mut splits = Vec::new();
    let mut all = Vec::new();
    for &b in &protocol.rgb_base_divisors {
        let mut group = Vec::new();
        for &m in &protocol.multipliers {
            let div = b * m;
            let resliced = seqs
                .iter()
                .map(|s| s.reslice(s.f_event * m as f64, div))
                .collect::<Result<Vec<_>>>()?;
            let p = point(format!("m={m} rgb=base/{b}"), m, div, evaluate_stream(model, &resliced, div)?);
            group.push(p);
        }
        let maps: Vec<f64> = group.iter().map(|p| p.map).collect();
        let at_one = group.iter().find(|p| p.multiplier == 1).map(|p| p.map).unwrap_or(reference);
        splits.push(DropSplit {
            rgb_base_divisor: b,
            event_rgb: reference - at_one,
            train_infer: at_one - maps.iter().copied().fold(f64::INFINITY, f64::min),
            total: compute_mdrop(reference, &maps)?,
        });
        all.extend(maps);
        points.extend(group);
    }
    let mut r = report(ProtocolKind::TrainInfer, model, points, protocol);
    r.mdrop = Some(compute_mdrop(reference, &all)?);
    r.drop_split = splits;
    Ok(r)
}

pub fn run_protocol(model: &mut dyn StreamDetector, seqs: &[SequenceDataset], protocol: &EvalProtocol) -> Result<MetricsReport> {
    match protocol.kind {
        ProtocolKind::Paired => run_paired_eval(model, seqs, protocol),
        ProtocolKind::RgbMismatch => run_rgb_mismatch_sweep(model, seqs, protocol),
        ProtocolKind::TrainInfer => run_train_infer_sweep(model, seqs, protocol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::make_dataset;
    use proptest::prelude::*;

    fn gt(c: usize, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            class_id: c,
            x_min: b[0],
            y_min: b[1],
            x_max: b[2],
            y_max: b[3],
            t_us: 0,
        }
    }

    fn det(c: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id: c,
            score,
            bbox: b,
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(compute_iou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(compute_iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]).unwrap(), 0.0);
        assert_eq!(compute_iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]).unwrap(), 1.0 / 7.0);
        assert!(compute_iou([0.0, 0.0, 0.0, 2.0], [0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(compute_iou([0.0, 0.0, 1.0, 1.0], [0.0, 3.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn map_hand_cases() {
        let g = vec![vec![gt(0, [10.0, 10.0, 20.0, 20.0])]];
        let t = coco_thresholds();
        let perfect = compute_map(&[vec![det(0, 0.9, [10.0, 10.0, 20.0, 20.0])]], &g, &t).unwrap();
        assert_eq!(perfect, MapResult { map: 1.0, ap50: 1.0, ap75: 1.0 });

        // IoU 0.4: 10x10 GT against a 10x4 box inside it.
        let weak = compute_map(&[vec![det(0, 0.9, [10.0, 10.0, 20.0, 14.0])]], &g, &t).unwrap();
        assert_eq!(weak.ap50, 0.0);

        let miss = [15.0, 40.0, 25.0, 50.0];
        let hit = [10.0, 10.0, 20.0, 20.0];
        let tp_first = compute_map(&[vec![det(0, 0.9, hit), det(0, 0.8, miss)]], &g, &t).unwrap();
        assert_eq!(tp_first.ap50, 1.0);
        let fp_first = compute_map(&[vec![det(0, 0.8, hit), det(0, 0.9, miss)]], &g, &t).unwrap();
        assert_eq!(fp_first.ap50, 0.5);
    }

    #[test]
    fn classes_without_truth_are_skipped() {
        let g = vec![vec![gt(1, [0.0, 0.0, 8.0, 8.0])]];
        let d = vec![vec![det(1, 0.5, [0.0, 0.0, 8.0, 8.0]), det(0, 0.9, [20.0, 20.0, 30.0, 30.0])]];
        assert_eq!(compute_map(&d, &g, &coco_thresholds()).unwrap().map, 1.0);
        assert!(compute_map(&d, &[], &coco_thresholds()).is_err());
    }

    #[test]
    fn mdrop_examples() {
        assert!((compute_mdrop(29.7, &[29.7, 28.9, 28.5, 29.0]).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(compute_mdrop(10.0, &[10.0, 10.0]).unwrap(), 0.0);
        assert_eq!(compute_mdrop(10.0, &[8.0, 9.0]).unwrap(), 2.0);
        assert!(compute_mdrop(1.0, &[]).is_err());
    }

    /// Re-match the `k` best detections from scratch for every `k` and
    /// read the interpolated precision off the resulting points.
    fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], class: usize, thr: f64) -> Option<f64> {
        let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
        if num_gt == 0 {
            return None;
        }
        let mut ranked: Vec<(usize, Detection)> = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            for x in d.iter().filter(|x| x.class_id == class) {
                ranked.push((i, *x));
            }
        }
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
        let mut pr = Vec::new();
        for k in 1..=ranked.len() {
            let mut used = vec![vec![false; 8]; gts.len()];
            let mut tp = 0;
            for (img, d) in &ranked[..k] {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts[*img].iter().enumerate() {
                    if g.class_id != class || used[*img][j] {
                        continue;
                    }
                    let iou = compute_iou(d.bbox, g.bbox()).unwrap();
                    if iou >= thr && best.map_or(true, |(_, b)| iou >= b) {
                        best = Some((j, iou));
                    }
                }
                if let Some((j, _)) = best {
                    used[*img][j] = true;
                    tp += 1;
                }
            }
            pr.push((tp as f64 / k as f64, tp as f64 / num_gt as f64));
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            sum += pr.iter().filter(|p| p.1 >= level).map(|p| p.0).fold(0.0, f64::max);
        }
        Some(sum / 101.0)
    }

    fn oracle_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], thrs: &[f64]) -> f64 {
        let aps: Vec<f64> = (0..2)
            .flat_map(|c| thrs.iter().filter_map(move |&t| oracle_ap(dets, gts, c, t)))
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    fn arb_box() -> impl Strategy<Value = [f64; 4]> {
        (0u8..6, 0u8..6, 1u8..5, 1u8..5).prop_map(|(x, y, w, h)| {
            let (x, y) = (f64::from(x) * 2.0, f64::from(y) * 2.0);
            [x, y, x + f64::from(w) * 3.0, y + f64::from(h) * 3.0]
        })
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (0usize..2, 1u8..6, arb_box()).prop_map(|(c, s, b)| det(c, f64::from(s) / 10.0, b))
    }

    fn arb_gt() -> impl Strategy<Value = GroundTruthBox> {
        (0usize..2, arb_box()).prop_map(|(c, b)| gt(c, b))
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GroundTruthBox>>)> {
        (1usize..3).prop_flat_map(|imgs| {
            (
                prop::collection::vec(prop::collection::vec(arb_det(), 0..=6 / imgs), imgs),
                prop::collection::vec(prop::collection::vec(arb_gt(), 0..=3 / imgs), imgs),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn map_matches_exhaustive_oracle((dets, gts) in arb_instance()) {
            let t = coco_thresholds();
            let m = compute_map(&dets, &gts, &t).unwrap();
            prop_assert!((m.map - oracle_map(&dets, &gts, &t)).abs() < 1e-12);
            prop_assert!((m.ap50 - oracle_map(&dets, &gts, &[0.5])).abs() < 1e-12);
            prop_assert!((m.ap75 - oracle_map(&dets, &gts, &[0.75])).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.map));
        }

        #[test]
        fn held_frames_subsample_the_paired_schedule(k in 0usize..500, n in 1usize..12) {
            let j = held_rgb_tick(k, n);
            prop_assert!(j <= k && k - j < n && j % n == 0);
        }
    }

    fn seqs() -> Vec<SequenceDataset> {
        let mut a = crate::scenesim::SceneConfig::desk(2);
        a.width = 64;
        a.height = 64;
        for o in &mut a.objects {
            o.motion.bounds = Some([12.0, 12.0, 52.0, 52.0]);
            o.motion.origin = [30.0, 30.0];
        }
        vec![make_dataset(&a, 0.8, 25.0, 1).unwrap()]
    }

    #[test]
    fn gt_echo_is_perfect_everywhere() {
        let s = seqs();
        let mut echo = GtEcho::default();
        for kind in [ProtocolKind::Paired, ProtocolKind::RgbMismatch, ProtocolKind::TrainInfer] {
            let r = run_protocol(&mut echo, &s, &EvalProtocol::of(kind)).unwrap();
            assert!(r.points.iter().all(|p| p.map == 1.0 && p.ap50 == 1.0), "{kind:?}");
            assert_eq!(r.mdrop.unwrap_or(0.0), 0.0);
        }
    }

    #[test]
    fn empty_model_scores_zero() {
        let r = run_paired_eval(&mut EmptyDetector, &seqs(), &EvalProtocol::default()).unwrap();
        assert_eq!(r.points[0].map, 0.0);
    }

    #[test]
    fn sweep_layouts() {
        let s = seqs();
        let mut echo = GtEcho::default();
        let r = run_rgb_mismatch_sweep(&mut echo, &s, &EvalProtocol::of(ProtocolKind::RgbMismatch)).unwrap();
        let names: Vec<_> = r.points.iter().map(|p| p.point.as_str()).collect();
        assert_eq!(names, ["N=1", "N=2", "N=4", "N=6", "N=8", "N=10"]);
        let t = run_train_infer_sweep(&mut echo, &s, &EvalProtocol::of(ProtocolKind::TrainInfer)).unwrap();
        assert_eq!(t.points.len(), 1 + 10);
        let base = t.point("paired").unwrap().ticks;
        assert_eq!(t.point("m=4 rgb=base/10").unwrap().ticks, 4 * base);
        assert_eq!(t.point("m=4 rgb=base/10").unwrap().rgb_divisor, 40);
        assert_eq!(t.drop_split.len(), 2);
    }

    /// Records which frame arrived at every tick.
    struct Recorder {
        seen: Vec<(usize, Option<RgbFrame>)>,
    }

    impl StreamDetector for Recorder {
        fn name(&self) -> String {
            "recorder".into()
        }
        fn num_bins(&self) -> usize {
            2
        }
        fn sensor(&self) -> Option<(usize, usize)> {
            None
        }
        fn reset(&mut self, _scene: &SceneConfig) {}
        fn step(&mut self, input: &TickInput<'_>) -> Result<Vec<Detection>> {
            self.seen.push((input.tick, input.rgb.cloned()));
            Ok(Vec::new())
        }
    }

    #[test]
    fn missing_frames_are_held() {
        let s = seqs();
        let mut rec = Recorder { seen: Vec::new() };
        evaluate_stream(&mut rec, &s, 4).unwrap();
        assert_eq!(rec.seen.len(), s[0].num_ticks);
        for (k, f) in &rec.seen {
            assert_eq!(f.as_ref(), s[0].rgb_exact(held_rgb_tick(*k, 4)));
        }
        assert_eq!(held_rgb_tick(7, 4), 4);
    }

    #[test]
    fn one_frame_divisor_equals_paired() {
        let s = seqs();
        let mut echo = GtEcho::default();
        let a = run_paired_eval(&mut echo, &s, &EvalProtocol::default()).unwrap();
        let b = run_rgb_mismatch_sweep(&mut echo, &s, &EvalProtocol::of(ProtocolKind::RgbMismatch)).unwrap();
        assert_eq!(a.points[0].map, b.points[0].map);
    }

    #[test]
    fn sensor_mismatch_is_rejected() {
        let s = seqs();
        let det = DetectorParams::<f32>::new(crate::detector::DetectorConfig::desk()).unwrap();
        let mut m = NeuralDetector::new(det, 0.01, 0.5);
        assert!(matches!(run_paired_eval(&mut m, &s, &EvalProtocol::default()), Err(Error::Shape(_))));
        let low = s[0].reslice(25.0, 2).unwrap();
        assert!(run_paired_eval(&mut GtEcho::default(), &[low], &EvalProtocol::default()).is_err());
    }

    #[test]
    fn report_files() {
        let s = seqs();
        let r = run_rgb_mismatch_sweep(&mut GtEcho::default(), &s, &EvalProtocol::of(ProtocolKind::RgbMismatch)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "protocol,point,mAP,AP50,AP75");
        assert_eq!(lines[1], "rgb_mismatch,N=1,100.0000,100.0000,100.0000");
        assert_eq!(lines.len(), 7);
        let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.points[0].map, 100.0);
        assert_eq!(back.mdrop, Some(0.0));
    }
}
