//! Recurrent event + RGB detector.
//!
//! Layout per step:
//!
//! ```text
//! voxel -> event stem --+
//!                       +-> [align] -> fusion -> LSTM1          (stride 4)
//! rgb   -> rgb stem ----+
//! LSTM1 -> down + CSP + LSTM2 -> down + CSP + LSTM3 -> down + CSP + LSTM4
//!          (stride 8)            (stride 16)           (stride 32)
//! top-down FPN over strides 8/16/32 -> decoupled head per level
//! ```
//!
//! Stems are two stride-2 convolutions and a CSP block. The RGB branch only
//! enters at stride 4; deeper stages see the fused recurrent features.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::align::{AlignModule, FeatureMap};
use crate::autograd::{giou, BoxTarget, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::events::EventVoxelGrid;
use crate::fusion::{Fusion, FusionMode};
use crate::kernels::sigmoid;
use crate::nn::{Act, Bound, Conv, ConvLstmCell, CspBlock, Init, ParamSet};
use crate::scenesim::{GroundTruthBox, RgbFrame};
use crate::tensor::{Scalar, Tensor};

/// Logit bias of the class and objectness outputs at initialization
/// (sigmoid of about 0.01).
pub const PRIOR_LOGIT: f64 = -4.6;
/// Positives are drawn from locations whose centre lies within this many
/// strides of a box centre (per axis).
pub const CENTER_RADIUS: f64 = 1.5;
/// Candidates kept per box after ranking by predicted IoU.
pub const TOP_K: usize = 10;
/// Upper bound on the log-size regression during decoding.
const MAX_LOG_SIZE: f64 = 8.0;
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Channel width of each of the four stages.
    pub widths: [usize; 4],
    pub num_classes: usize,
    /// Temporal bins per polarity of the event input.
    pub num_bins: usize,
    pub height: usize,
    pub width: usize,
    /// Residual bottlenecks per CSP block.
    pub csp_depth: usize,
    /// Channels of the FPN outputs and head branches.
    pub head_width: usize,
    pub fusion_mode: FusionMode,
    pub use_align: bool,
    /// When false the RGB input is ignored and the fusion sees zeros.
    pub use_rgb: bool,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            num_classes: 3,
            num_bins: 10,
            height: 96,
            width: 128,
            csp_depth: 1,
            head_width: 64,
            fusion_mode: FusionMode::Ef,
            use_align: true,
            use_rgb: true,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Narrow variant sized for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            widths: [8, 16, 32, 64],
            head_width: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.widths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("widths must be positive and non-decreasing: {:?}", self.widths)));
        }
        if self.num_classes == 0 || self.num_bins == 0 || self.head_width == 0 {
            return Err(Error::Config("classes, bins and head width must be positive".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` of each stage's recurrent state.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 4] {
        let mut out = [(0, 0, 0); 4];
        for (k, o) in out.iter_mut().enumerate() {
            let s = STAGE_STRIDES[k];
            *o = (self.widths[k], self.height / s, self.width / s);
        }
        out
    }

    pub fn level_grids(&self) -> [(usize, usize); 3] {
        LEVEL_STRIDES.map(|s| (self.height / s, self.width / s))
    }
}

#[derive(Clone, Debug)]
struct Stem {
    c1: Conv,
    c2: Conv,
    csp: CspBlock,
}

impl Stem {
    fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, cin: usize, cout: usize, depth: usize) -> Self {
        let mid = (cout / 2).max(1);
        init.scope(name, |i| Stem {
            c1: Conv::new(i, "conv1", cin, mid, 3, 2, Act::Silu),
            c2: Conv::new(i, "conv2", mid, cout, 3, 2, Act::Silu),
            csp: CspBlock::new(i, "csp", cout, cout, depth),
        })
    }

    fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        self.csp.forward(p, self.c2.forward(p, self.c1.forward(p, x)))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    csp: CspBlock,
    lstm: ConvLstmCell,
}

#[derive(Clone, Debug)]
struct Fpn {
    lateral: [Conv; 3],
    smooth: [Conv; 3],
}

#[derive(Clone, Debug)]
struct Head {
    stem: Conv,
    cls_conv: Conv,
    cls_out: Conv,
    reg_conv: Conv,
    reg_out: Conv,
    obj_out: Conv,
}

impl Head {
    fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, width: usize, classes: usize) -> Self {
        init.scope(name, |i| {
            let h = Head {
                stem: Conv::new(i, "stem", width, width, 1, 1, Act::Silu),
                cls_conv: Conv::new(i, "cls_conv", width, width, 3, 1, Act::Silu),
                cls_out: Conv::new(i, "cls_out", width, classes, 1, 1, Act::Identity),
                reg_conv: Conv::new(i, "reg_conv", width, width, 3, 1, Act::Silu),
                reg_out: Conv::new(i, "reg_out", width, 4, 1, 1, Act::Identity),
                obj_out: Conv::new(i, "obj_out", width, 1, 1, 1, Act::Identity),
            };
            i.params.get_mut(h.cls_out.b).data_mut().fill(F::of(PRIOR_LOGIT));
            i.params.get_mut(h.obj_out.b).data_mut().fill(F::of(PRIOR_LOGIT));
            h
        })
    }
}

/// Module layout; parameter values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Architecture {
    event_stem: Stem,
    rgb_stem: Stem,
    align: Option<AlignModule>,
    fusion: Fusion,
    lstm1: ConvLstmCell,
    stages: Vec<Stage>,
    fpn: Fpn,
    heads: Vec<Head>,
}

impl Architecture {
    fn build<F: Scalar>(cfg: &DetectorConfig, init: &mut Init<'_, F>) -> Self {
        let [c1, c2, c3, c4] = cfg.widths;
        let d = cfg.csp_depth;
        let event_stem = Stem::new(init, "event_stem", 2 * cfg.num_bins, c1, d);
        let rgb_stem = Stem::new(init, "rgb_stem", 3, c1, d);
        let align = cfg.use_align.then(|| AlignModule::new(init, "align", c1));
        let fusion = Fusion::new(init, "fusion", c1, cfg.fusion_mode);
        let lstm1 = init.scope("stage1", |i| ConvLstmCell::new(i, "lstm", c1, c1));
        let stages = [(c1, c2), (c2, c3), (c3, c4)]
            .iter()
            .enumerate()
            .map(|(k, &(cin, cout))| {
                init.scope(&format!("stage{}", k + 2), |i| Stage {
                    down: Conv::new(i, "down", cin, cout, 3, 2, Act::Silu),
                    csp: CspBlock::new(i, "csp", cout, cout, d),
                    lstm: ConvLstmCell::new(i, "lstm", cout, cout),
                })
            })
            .collect();
        let hw = cfg.head_width;
        let fpn = init.scope("fpn", |i| Fpn {
            lateral: [
                Conv::new(i, "lateral8", c2, hw, 1, 1, Act::Silu),
                Conv::new(i, "lateral16", c3, hw, 1, 1, Act::Silu),
                Conv::new(i, "lateral32", c4, hw, 1, 1, Act::Silu),
            ],
            smooth: [
                Conv::new(i, "smooth8", hw, hw, 3, 1, Act::Silu),
                Conv::new(i, "smooth16", hw, hw, 3, 1, Act::Silu),
                Conv::new(i, "smooth32", hw, hw, 3, 1, Act::Silu),
            ],
        });
        let heads = LEVEL_STRIDES
            .iter()
            .map(|s| Head::new(init, &format!("head{s}"), hw, cfg.num_classes))
            .collect();
        Architecture {
            event_stem,
            rgb_stem,
            align,
            fusion,
            lstm1,
            stages,
            fpn,
            heads,
        }
    }
}

/// Configuration, module layout and weights of a detector.
#[derive(Clone, Debug)]
pub struct DetectorParams<F: Scalar = f32> {
    pub config: DetectorConfig,
    pub arch: Architecture,
    pub params: ParamSet<F>,
}

/// Per-stage `(hidden, cell)` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub stages: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> RecurrentState<F> {
    pub fn is_zero(&self) -> bool {
        self.stages
            .iter()
            .all(|(h, c)| h.data().iter().chain(c.data()).all(|v| *v == F::zero()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// `[x_min, y_min, x_max, y_max]` in input pixels.
    pub bbox: [f64; 4],
}

/// Raw outputs of one head level.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<F> {
    pub stride: usize,
    /// `K x H x W` class logits.
    pub cls: Tensor<F>,
    /// `4 x H x W`: centre offsets in cells, then log sizes in strides.
    pub reg: Tensor<F>,
    /// `1 x H x W` objectness logits.
    pub obj: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars<'g, F: Scalar> {
    pub stride: usize,
    pub cls: Var<'g, F>,
    pub reg: Var<'g, F>,
    pub obj: Var<'g, F>,
}

impl<F: Scalar> HeadVars<'_, F> {
    pub fn values(&self) -> HeadOutput<F> {
        HeadOutput {
            stride: self.stride,
            cls: self.cls.value().clone(),
            reg: self.reg.value().clone(),
            obj: self.obj.value().clone(),
        }
    }
}

/// Everything produced by one step on a graph.
pub struct StepVars<'g, F: Scalar> {
    /// Fused stride-4 features before the first recurrent cell.
    pub fused: Var<'g, F>,
    /// FPN outputs at strides 8, 16, 32.
    pub features: Vec<Var<'g, F>>,
    pub state: Vec<(Var<'g, F>, Var<'g, F>)>,
    pub heads: Vec<HeadVars<'g, F>>,
}

/// Inference result of one step.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub features: Vec<FeatureMap<F>>,
    pub state: RecurrentState<F>,
    pub heads: Vec<HeadOutput<F>>,
}

impl<F: Scalar> DetectorParams<F> {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let arch = Architecture::build(&config, &mut Init::new(&mut params, &mut rng));
        Ok(Self { config, arch, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> DetectorParams<G> {
        DetectorParams {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// All-zero state shaped for this configuration.
    pub fn reset_state(&self) -> RecurrentState<F> {
        RecurrentState {
            stages: self
                .config
                .stage_shapes()
                .iter()
                .map(|&(c, h, w)| (Tensor::zeros(&[c, h, w]), Tensor::zeros(&[c, h, w])))
                .collect(),
        }
    }

    pub fn check_state(&self, state: &RecurrentState<F>) -> Result<()> {
        let shapes = self.config.stage_shapes();
        if state.stages.len() != 4 {
            return Err(shape_err!("state has {} stages, expected 4", state.stages.len()));
        }
        for (k, ((h, c), &(ch, hh, ww))) in state.stages.iter().zip(&shapes).enumerate() {
            if h.shape() != [ch, hh, ww] || c.shape() != [ch, hh, ww] {
                return Err(shape_err!(
                    "stage {} state {:?}/{:?}, expected {:?}",
                    k + 1,
                    h.shape(),
                    c.shape(),
                    [ch, hh, ww]
                ));
            }
        }
        Ok(())
    }

    pub fn check_inputs(&self, event: &Tensor<F>, rgb: Option<&Tensor<F>>) -> Result<()> {
        let c = &self.config;
        if event.shape() != [2 * c.num_bins, c.height, c.width] {
            return Err(shape_err!(
                "event input {:?}, expected {:?}",
                event.shape(),
                [2 * c.num_bins, c.height, c.width]
            ));
        }
        if let Some(r) = rgb {
            if r.shape() != [3, c.height, c.width] {
                return Err(shape_err!("rgb input {:?}, expected {:?}", r.shape(), [3, c.height, c.width]));
            }
        }
        Ok(())
    }

    /// One step on `p`'s graph. `rgb = None` replaces the RGB branch
    /// output with zeros.
    pub fn step<'g>(
        &self,
        p: &Bound<'g, F>,
        event: Var<'g, F>,
        rgb: Option<Var<'g, F>>,
        state: &[(Var<'g, F>, Var<'g, F>)],
    ) -> StepVars<'g, F> {
        let a = &self.arch;
        let g = event.graph();
        let ev = a.event_stem.forward(p, event);
        let rgb = rgb.filter(|_| self.config.use_rgb);
        let rgb_feat = match rgb {
            Some(r) => {
                let r = a.rgb_stem.forward(p, r);
                match &a.align {
                    Some(al) => al.forward(p, r, ev),
                    None => r,
                }
            }
            None => g.constant(Tensor::zeros(&ev.shape())),
        };
        let fused = a.fusion.forward(p, ev, rgb_feat);
        let mut new_state = Vec::with_capacity(4);
        let (h1, c1) = a.lstm1.step(p, fused, state[0].0, state[0].1);
        new_state.push((h1, c1));
        let mut x = h1;
        let mut outs = Vec::with_capacity(3);
        for (k, st) in a.stages.iter().enumerate() {
            let y = st.csp.forward(p, st.down.forward(p, x));
            let (h, c) = st.lstm.step(p, y, state[k + 1].0, state[k + 1].1);
            new_state.push((h, c));
            outs.push(h);
            x = h;
        }
        let fpn = &a.fpn;
        let l32 = fpn.lateral[2].forward(p, outs[2]);
        let l16 = fpn.lateral[1].forward(p, outs[1]).add(l32.upsample2());
        let l8 = fpn.lateral[0].forward(p, outs[0]).add(l16.upsample2());
        let features: Vec<Var<'g, F>> = [l8, l16, l32]
            .iter()
            .zip(&fpn.smooth)
            .map(|(l, s)| s.forward(p, *l))
            .collect();
        let heads = features
            .iter()
            .zip(&a.heads)
            .zip(LEVEL_STRIDES)
            .map(|((f, h), stride)| {
                let s = h.stem.forward(p, *f);
                let c = h.cls_out.forward(p, h.cls_conv.forward(p, s));
                let r = h.reg_conv.forward(p, s);
                HeadVars {
                    stride,
                    cls: c,
                    reg: h.reg_out.forward(p, r),
                    obj: h.obj_out.forward(p, r),
                }
            })
            .collect();
        StepVars {
            fused,
            features,
            state: new_state,
            heads,
        }
    }

    /// Inference step on plain tensors.
    pub fn forward(
        &self,
        event: &Tensor<F>,
        rgb: Option<&Tensor<F>>,
        state: &RecurrentState<F>,
    ) -> Result<ForwardOutput<F>> {
        self.check_inputs(event, rgb)?;
        self.check_state(state)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let st: Vec<_> = state
            .stages
            .iter()
            .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
            .collect();
        let out = self.step(&p, g.constant(event.clone()), rgb.map(|r| g.constant(r.clone())), &st);
        Ok(ForwardOutput {
            features: out
                .features
                .iter()
                .zip(LEVEL_STRIDES)
                .map(|(f, s)| FeatureMap {
                    values: f.value().clone(),
                    stride: s,
                })
                .collect(),
            state: RecurrentState {
                stages: out.state.iter().map(|(h, c)| (h.value().clone(), c.value().clone())).collect(),
            },
            heads: out.heads.iter().map(HeadVars::values).collect(),
        })
    }

    /// [`forward`](Self::forward) from a voxel grid and an optional frame.
    pub fn forward_grid(
        &self,
        voxel: &EventVoxelGrid,
        rgb: Option<&RgbFrame>,
        state: &RecurrentState<F>,
    ) -> Result<ForwardOutput<F>> {
        let ev = voxel.to_tensor::<F>();
        let rgb = rgb.map(RgbFrame::to_tensor::<F>);
        self.forward(&ev, rgb.as_ref(), state)
    }
}

/// One ConvLSTM step on plain tensors: returns `y = h'` and `(h', c')`.
pub fn conv_lstm_step<F: Scalar>(
    x: &FeatureMap<F>,
    state: (&Tensor<F>, &Tensor<F>),
    cell: &ConvLstmCell,
    params: &ParamSet<F>,
) -> Result<(FeatureMap<F>, (Tensor<F>, Tensor<F>))> {
    let (cx, h, w) = x.shape();
    let ws = params.get(cell.gates.w).shape();
    if ws[1] != cx + cell.channels {
        return Err(shape_err!("cell expects {} input channels, got {cx}", ws[1] - cell.channels));
    }
    let want = [cell.channels, h, w];
    if state.0.shape() != want || state.1.shape() != want {
        return Err(shape_err!("state {:?}/{:?}, expected {:?}", state.0.shape(), state.1.shape(), want));
    }
    let g = Graph::new();
    let p = params.bind(&g, false);
    let (hn, cn) = cell.step(&p, g.constant(x.values.clone()), g.constant(state.0.clone()), g.constant(state.1.clone()));
    let (hn, cn) = (hn.value().clone(), cn.value().clone());
    Ok((
        FeatureMap {
            values: hn.clone(),
            stride: x.stride,
        },
        (hn, cn),
    ))
}

impl DetectorParams<f32> {
    /// Write a safetensors checkpoint with the config echoed in the
    /// metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(n, t)| {
                let b = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.to_string(), b, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s)| {
                safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("format".to_string(), "evfuse-detector".to_string());
        safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let (_, meta) = SafeTensors::read_metadata(&buf).map_err(|e| Error::Format(e.to_string()))?;
        let cfg_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("config"))
            .ok_or_else(|| Error::Format("checkpoint has no config".into()))?;
        let config: DetectorConfig = serde_json::from_str(cfg_json)?;
        Self::load_into(&buf, config)
    }

    /// Load weights for an explicitly given configuration; fails with a
    /// shape diagnostic when the checkpoint does not match.
    pub fn load_with_config(path: &Path, config: DetectorConfig) -> Result<Self> {
        Self::load_into(&std::fs::read(path)?, config)
    }

    fn load_into(buf: &[u8], config: DetectorConfig) -> Result<Self> {
        let st = SafeTensors::deserialize(buf).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Self::new(config)?;
        let mut loaded = ParamSet::new();
        for name in out.params.names() {
            let v = st
                .tensor(name)
                .map_err(|_| Error::Shape(format!("checkpoint lacks parameter {name}")))?;
            if v.dtype() != Dtype::F32 {
                return Err(Error::Format(format!("{name}: dtype {:?}", v.dtype())));
            }
            let data = v
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            loaded.push(name.clone(), Tensor::from_vec(v.shape(), data)?);
        }
        if st.len() != out.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, configuration needs {}",
                st.len(),
                out.params.len()
            )));
        }
        out.params.load_from(&loaded)?;
        Ok(out)
    }
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn decode_f64<F: Scalar>(reg: &Tensor<F>, loc: usize, stride: usize) -> [f64; 4] {
    let (_, h, w) = reg.dims3();
    let n = h * w;
    let d = reg.data();
    let s = stride as f64;
    let cx = ((loc % w) as f64 + 0.5 + d[loc].as_f64()) * s;
    let cy = ((loc / w) as f64 + 0.5 + d[n + loc].as_f64()) * s;
    let bw = d[2 * n + loc].as_f64().min(MAX_LOG_SIZE).exp() * s;
    let bh = d[3 * n + loc].as_f64().min(MAX_LOG_SIZE).exp() * s;
    [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0]
}

/// Greedy class-wise NMS over score-sorted detections.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || box_iou(k.bbox, d.bbox) <= iou_threshold)
        {
            keep.push(d);
        }
    }
    keep
}

/// Scores `sigmoid(obj) * sigmoid(best class)`, boxes decoded and clipped
/// to a `width x height` canvas, thresholded, then class-wise NMS.
pub fn decode_detections<F: Scalar>(
    heads: &[HeadOutput<F>],
    score_threshold: f64,
    nms_iou: f64,
    width: usize,
    height: usize,
) -> Vec<Detection> {
    let mut cands = Vec::new();
    for h in heads {
        let (k, hh, ww) = h.cls.dims3();
        let n = hh * ww;
        for loc in 0..n {
            let obj = sigmoid(h.obj.data()[loc].as_f64());
            let (best, logit) = (0..k)
                .map(|c| (c, h.cls.data()[c * n + loc].as_f64()))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            let score = obj * sigmoid(logit);
            if !(score > score_threshold) {
                continue;
            }
            let b = decode_f64(&h.reg, loc, h.stride);
            let bbox = [
                b[0].clamp(0.0, width as f64),
                b[1].clamp(0.0, height as f64),
                b[2].clamp(0.0, width as f64),
                b[3].clamp(0.0, height as f64),
            ];
            if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                cands.push(Detection {
                    class_id: best,
                    score,
                    bbox,
                });
            }
        }
    }
    nms(cands, nms_iou)
}

/// Positive location of one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub level: usize,
    pub loc: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Centre-prior candidates ranked by IoU of the current prediction; the
/// best `TOP_K` per box become positives, and a location claimed by
/// several boxes goes to the one it overlaps most.
pub fn assign<F: Scalar>(heads: &[HeadOutput<F>], gts: &[GroundTruthBox]) -> Vec<Positive> {
    let mut best: HashMap<(usize, usize), Positive> = HashMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        let (gx, gy) = ((gt.x_min + gt.x_max) / 2.0, (gt.y_min + gt.y_max) / 2.0);
        let mut cands = Vec::new();
        for (li, h) in heads.iter().enumerate() {
            let (_, hh, ww) = h.reg.dims3();
            let s = h.stride as f64;
            let r = CENTER_RADIUS * s;
            for y in 0..hh {
                let cy = (y as f64 + 0.5) * s;
                if (cy - gy).abs() > r {
                    continue;
                }
                for x in 0..ww {
                    let cx = (x as f64 + 0.5) * s;
                    if (cx - gx).abs() > r {
                        continue;
                    }
                    let loc = y * ww + x;
                    let iou = box_iou(decode_f64(&h.reg, loc, h.stride), gt.bbox());
                    cands.push(Positive {
                        level: li,
                        loc,
                        gt: gi,
                        iou,
                    });
                }
            }
        }
        // stable: ties keep level/location order
        cands.sort_by(|a, b| b.iou.total_cmp(&a.iou));
        for c in cands.into_iter().take(TOP_K) {
            let key = (c.level, c.loc);
            match best.get(&key) {
                Some(prev) if prev.iou >= c.iou => {}
                _ => {
                    best.insert(key, c);
                }
            }
        }
    }
    let mut out: Vec<Positive> = best.into_values().collect();
    out.sort_by_key(|p| (p.level, p.loc));
    out
}

/// Loss terms as graph nodes.
pub struct LossVars<'g, F: Scalar> {
    pub total: Var<'g, F>,
    pub iou: Var<'g, F>,
    pub cls: Var<'g, F>,
    pub obj: Var<'g, F>,
    pub num_pos: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub iou: f64,
    pub cls: f64,
    pub obj: f64,
}

impl<F: Scalar> LossVars<'_, F> {
    pub fn values(&self) -> LossParts {
        let v = |x: &Var<'_, F>| x.value().data()[0].as_f64();
        LossParts {
            total: v(&self.total),
            iou: v(&self.iou),
            cls: v(&self.cls),
            obj: v(&self.obj),
        }
    }
}

/// `1 - GIoU` on positives, one-hot class BCE on positives and
/// objectness BCE everywhere, each divided by `max(num_pos, 1)`.
pub fn detection_loss_graph<'g, F: Scalar>(heads: &[HeadVars<'g, F>], gts: &[GroundTruthBox]) -> LossVars<'g, F> {
    let values: Vec<HeadOutput<F>> = heads.iter().map(HeadVars::values).collect();
    let pos = assign(&values, gts);
    detection_loss_assigned(heads, gts, &pos)
}

/// Loss for a fixed assignment of positives.
pub fn detection_loss_assigned<'g, F: Scalar>(
    heads: &[HeadVars<'g, F>],
    gts: &[GroundTruthBox],
    pos: &[Positive],
) -> LossVars<'g, F> {
    let norm = F::of(1.0 / pos.len().max(1) as f64);
    let g = heads[0].obj.graph();
    let mut iou = g.constant(Tensor::scalar(F::zero()));
    let mut cls = iou;
    let mut obj = iou;
    for (li, h) in heads.iter().enumerate() {
        let here: Vec<&Positive> = pos.iter().filter(|p| p.level == li).collect();
        let (k, hh, ww) = h.cls.value().dims3();
        let n = hh * ww;
        let mut obj_t = Tensor::zeros(&[1, hh, ww]);
        for p in &here {
            obj_t.data_mut()[p.loc] = F::one();
        }
        obj = obj.add(h.obj.bce_with_logits(obj_t, None));
        if here.is_empty() {
            continue;
        }
        let mut cls_t = Tensor::zeros(&[k, hh, ww]);
        let mut mask = Tensor::zeros(&[k, hh, ww]);
        for p in &here {
            for c in 0..k {
                mask.data_mut()[c * n + p.loc] = F::one();
            }
            cls_t.data_mut()[gts[p.gt].class_id * n + p.loc] = F::one();
        }
        cls = cls.add(h.cls.bce_with_logits(cls_t, Some(mask)));
        let targets = here
            .iter()
            .map(|p| BoxTarget {
                loc: p.loc,
                target: gts[p.gt].bbox().map(F::of),
            })
            .collect();
        iou = iou.add(h.reg.giou_loss(F::of(h.stride as f64), targets));
    }
    let (iou, cls, obj) = (iou.scale(norm), cls.scale(norm), obj.scale(norm));
    LossVars {
        total: iou.add(cls).add(obj),
        iou,
        cls,
        obj,
        num_pos: pos.len(),
    }
}

/// [`detection_loss_graph`] on plain tensors.
pub fn detection_loss<F: Scalar>(heads: &[HeadOutput<F>], gts: &[GroundTruthBox]) -> LossParts {
    let g = Graph::new();
    let vars: Vec<HeadVars<'_, F>> = heads
        .iter()
        .map(|h| HeadVars {
            stride: h.stride,
            cls: g.constant(h.cls.clone()),
            reg: g.constant(h.reg.clone()),
            obj: g.constant(h.obj.clone()),
        })
        .collect();
    detection_loss_graph(&vars, gts).values()
}

/// GIoU of a decoded head box against a target, exposed for checks.
pub fn head_giou<F: Scalar>(h: &HeadOutput<F>, loc: usize, target: [f64; 4]) -> f64 {
    giou(decode_f64(&h.reg, loc, h.stride), target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::ParamId;
    use proptest::prelude::*;
    use rand::Rng;

    fn mini(classes: usize) -> DetectorConfig {
        DetectorConfig {
            widths: [4, 4, 6, 6],
            num_classes: classes,
            num_bins: 2,
            height: 32,
            width: 32,
            csp_depth: 1,
            head_width: 4,
            ..DetectorConfig::default()
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn gt(cls: usize, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            class_id: cls,
            x_min: b[0],
            y_min: b[1],
            x_max: b[2],
            y_max: b[3],
            t_us: 0,
        }
    }

    #[test]
    fn head_grids_for_default_input() {
        let d = DetectorParams::<f32>::new(DetectorConfig::desk()).unwrap();
        let ev = Tensor::zeros(&[20, 96, 128]);
        let out = d.forward(&ev, None, &d.reset_state()).unwrap();
        let grids: Vec<_> = out.heads.iter().map(|h| h.obj.shape().to_vec()).collect();
        assert_eq!(grids, vec![vec![1, 12, 16], vec![1, 6, 8], vec![1, 3, 4]]);
        assert_eq!(out.heads[0].cls.shape(), &[3, 12, 16]);
        assert_eq!(out.heads[2].reg.shape(), &[4, 3, 4]);
        for (f, s) in out.features.iter().zip(LEVEL_STRIDES) {
            assert_eq!(f.stride, s);
        }
    }

    #[test]
    fn default_parameter_count_within_budget() {
        let d = DetectorParams::<f32>::new(DetectorConfig::default()).unwrap();
        assert!(d.num_parameters() <= 25_000_000, "{}", d.num_parameters());
        assert!(d.num_parameters() > 1_000_000);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = DetectorConfig::default();
        c.widths = [32, 16, 64, 128];
        assert!(DetectorParams::<f32>::new(c).is_err());
        let mut c = DetectorConfig::default();
        c.height = 100;
        assert!(DetectorParams::<f32>::new(c).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_shape_checked() {
        let d = DetectorParams::<f32>::new(mini(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ev = rand_t(&mut rng, &[4, 32, 32], 2.0).cast::<f32>();
        let rgb = rand_t(&mut rng, &[3, 32, 32], 1.0).cast::<f32>();
        let s = d.reset_state();
        let a = d.forward(&ev, Some(&rgb), &s).unwrap();
        let b = d.forward(&ev, Some(&rgb), &s).unwrap();
        assert_eq!(a.heads, b.heads);
        assert_eq!(a.state, b.state);
        assert!(d.forward(&Tensor::zeros(&[4, 32, 31]), None, &s).is_err());
        assert!(d.forward(&ev, Some(&Tensor::zeros(&[1, 32, 32])), &s).is_err());
        let mut bad = s.clone();
        bad.stages[2].0 = Tensor::zeros(&[1, 1, 1]);
        assert!(d.forward(&ev, None, &bad).is_err());
    }

    #[test]
    fn reset_state_is_zero_and_shaped() {
        let d = DetectorParams::<f32>::new(DetectorConfig::default()).unwrap();
        let s = d.reset_state();
        assert!(s.is_zero());
        let shapes: Vec<_> = s.stages.iter().map(|(h, _)| h.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 24, 32], vec![64, 12, 16], vec![128, 6, 8], vec![256, 3, 4]]);
        d.check_state(&s).unwrap();
    }

    #[test]
    fn zero_lstm_params_give_zero_state() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = ConvLstmCell::new(&mut Init::new(&mut ps, &mut rng), "cell", 3, 5);
        for i in 0..ps.len() {
            ps.get_mut(ParamId(i)).data_mut().fill(0.0);
        }
        let x = FeatureMap::new(rand_t(&mut rng, &[3, 4, 6], 3.0), 4).unwrap();
        let z = Tensor::zeros(&[5, 4, 6]);
        let (y, (h, c)) = conv_lstm_step(&x, (&z, &z), &cell, &ps).unwrap();
        assert_eq!(y.values.shape(), &[5, 4, 6]);
        assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
        // gates are sigmoid(0) = 0.5 and g = tanh(0) = 0: c' = 0.5 c
        let c0 = Tensor::full(&[5, 4, 6], 2.0);
        let (_, (h, c)) = conv_lstm_step(&x, (&z, &c0), &cell, &ps).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(h.data().iter().all(|&v| (v - 0.5 * 1f64.tanh()).abs() < 1e-15));
        assert!(conv_lstm_step(&x, (&Tensor::zeros(&[5, 4, 5]), &z), &cell, &ps).is_err());
    }

    #[test]
    fn persistent_state_differs_from_reset() {
        let d = DetectorParams::<f64>::new(mini(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ev: Vec<_> = (0..2).map(|_| rand_t(&mut rng, &[4, 32, 32], 2.0)).collect();
        let s1 = d.forward(&ev[0], None, &d.reset_state()).unwrap().state;
        let kept = d.forward(&ev[1], None, &s1).unwrap();
        let reset = d.forward(&ev[1], None, &d.reset_state()).unwrap();
        assert_ne!(kept.heads[0].obj, reset.heads[0].obj);
    }

    #[test]
    fn rgb_only_reaches_the_first_stage() {
        let d = DetectorParams::<f64>::new(mini(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ev = rand_t(&mut rng, &[4, 32, 32], 2.0);
        let rgb = rand_t(&mut rng, &[3, 32, 32], 1.0);
        let g = Graph::new();
        let p = d.params.bind(&g, true);
        let st: Vec<_> = d
            .reset_state()
            .stages
            .into_iter()
            .map(|(h, c)| (g.constant(h), g.constant(c)))
            .collect();
        let with = d.step(&p, g.constant(ev.clone()), Some(g.constant(rgb)), &st);
        let without = d.step(&p, g.constant(ev), None, &st);
        assert_ne!(*with.fused.value(), *without.fused.value());
        // parameter partition: only stems, align and fusion are stage-1 parameters
        let stage1: Vec<&String> = d
            .params
            .names()
            .iter()
            .filter(|n| ["rgb_stem", "align", "fusion"].iter().any(|p| n.starts_with(p)))
            .collect();
        assert!(!stage1.is_empty());
        let loss = without.heads.iter().fold(g.constant(Tensor::scalar(0.0)), |a, h| a.add(h.obj.sum()));
        let grads = g.backward(loss);
        for (i, n) in d.params.names().iter().enumerate() {
            let gr = grads.get(p.get(ParamId(i)));
            let touched = gr.is_some_and(|t| t.max_abs() > 0.0);
            if n.starts_with("rgb_stem") || n.starts_with("align") {
                assert!(!touched, "{n} should not receive gradient without rgb");
            }
            if n.starts_with("stage4") {
                assert!(touched, "{n}");
            }
        }
    }

    fn one_hot_head(stride: usize, h: usize, w: usize, k: usize) -> HeadOutput<f64> {
        HeadOutput {
            stride,
            cls: Tensor::full(&[k, h, w], -30.0),
            reg: Tensor::zeros(&[4, h, w]),
            obj: Tensor::full(&[1, h, w], -1e4),
        }
    }

    #[test]
    fn very_negative_objectness_gives_no_detections() {
        let heads = vec![one_hot_head(8, 4, 4, 2), one_hot_head(16, 2, 2, 2)];
        assert!(decode_detections(&heads, 0.01, 0.6, 32, 32).is_empty());
    }

    #[test]
    fn single_dominant_location_decodes_analytically() {
        let mut h = one_hot_head(8, 4, 4, 2);
        let loc = 2 * 4 + 1; // row 2, col 1
        h.obj.data_mut()[loc] = 5.0;
        h.cls.data_mut()[16 + loc] = 3.0;
        h.reg.data_mut()[loc] = 0.25;
        h.reg.data_mut()[16 + loc] = -0.5;
        h.reg.data_mut()[32 + loc] = 0.5f64.ln();
        h.reg.data_mut()[48 + loc] = 0.0;
        let d = decode_detections(&[h], 0.5, 0.6, 32, 32);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 1);
        assert!((d[0].score - sigmoid(5.0) * sigmoid(3.0)).abs() < 1e-12);
        // centre ((1 + 0.5 + 0.25) * 8, (2 + 0.5 - 0.5) * 8) = (14, 16), size (4, 8)
        let want = [12.0, 12.0, 16.0, 20.0];
        for (a, b) in d[0].bbox.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Exhaustive NMS: a detection survives iff no higher-ranked survivor
    /// of its class overlaps it too much, evaluated by repeated scanning.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut alive = vec![true; dets.len()];
        for (r, &i) in order.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &order[r + 1..] {
                if dets[j].class_id == dets[i].class_id {
                    let a = dets[i].bbox;
                    let b = dets[j].bbox;
                    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
                    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
                    let inter = ix * iy;
                    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
                    if inter / u > thr {
                        alive[j] = false;
                    }
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn decode_matches_nms_oracle_on_random_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let heads: Vec<HeadOutput<f64>> = [(8, 4, 4), (16, 2, 2), (32, 1, 1)]
                .iter()
                .map(|&(s, h, w)| HeadOutput {
                    stride: s,
                    cls: rand_t(&mut rng, &[2, h, w], 3.0),
                    reg: rand_t(&mut rng, &[4, h, w], 1.0),
                    obj: rand_t(&mut rng, &[1, h, w], 3.0),
                })
                .collect();
            let got = decode_detections(&heads, 0.05, 0.5, 32, 32);
            let mut raw = Vec::new();
            for h in &heads {
                let n = h.obj.numel();
                for loc in 0..n {
                    let (c, l) = if h.cls.data()[loc] >= h.cls.data()[n + loc] {
                        (0, h.cls.data()[loc])
                    } else {
                        (1, h.cls.data()[n + loc])
                    };
                    let score = sigmoid(h.obj.data()[loc]) * sigmoid(l);
                    let b = decode_f64(&h.reg, loc, h.stride).map(|v| v.clamp(0.0, 32.0));
                    if score > 0.05 && b[2] > b[0] && b[3] > b[1] {
                        raw.push(Detection {
                            class_id: c,
                            score,
                            bbox: b,
                        });
                    }
                }
            }
            assert_eq!(got, nms_oracle(&raw, 0.5), "trial {trial}");
        }
    }

    #[test]
    fn exact_prediction_has_zero_iou_loss() {
        let b = [6.0, 9.0, 19.0, 23.0];
        let (cx, cy, w, h) = (12.5, 16.0, 13.0, 14.0);
        let mut heads = vec![one_hot_head(8, 4, 4, 2), one_hot_head(16, 2, 2, 2), one_hot_head(32, 1, 1, 2)];
        // every location regresses exactly onto the box
        for head in &mut heads {
            let s = head.stride as f64;
            let (_, hh, ww) = head.reg.dims3();
            let n = hh * ww;
            for loc in 0..n {
                let d = head.reg.data_mut();
                d[loc] = cx / s - (loc % ww) as f64 - 0.5;
                d[n + loc] = cy / s - (loc / ww) as f64 - 0.5;
                d[2 * n + loc] = (w / s).ln();
                d[3 * n + loc] = (h / s).ln();
            }
        }
        let l = detection_loss(&heads, &[gt(0, b)]);
        assert!(l.iou.abs() < 1e-12, "{}", l.iou);
        assert!(l.cls > 0.0 && l.obj > 0.0);
    }

    #[test]
    fn empty_ground_truth_leaves_only_objectness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads: Vec<HeadOutput<f64>> = [(8, 4, 4), (16, 2, 2), (32, 1, 1)]
            .iter()
            .map(|&(s, h, w)| HeadOutput {
                stride: s,
                cls: rand_t(&mut rng, &[2, h, w], 3.0),
                reg: rand_t(&mut rng, &[4, h, w], 1.0),
                obj: rand_t(&mut rng, &[1, h, w], 3.0),
            })
            .collect();
        let l = detection_loss(&heads, &[]);
        assert_eq!((l.iou, l.cls), (0.0, 0.0));
        let want: f64 = heads
            .iter()
            .flat_map(|h| h.obj.data().to_vec())
            .map(|z| (1.0 + z.exp()).ln())
            .sum();
        assert!((l.obj - want).abs() < 1e-9);
        assert_eq!(l.total, l.obj);
    }

    #[test]
    fn one_box_loss_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let heads: Vec<HeadOutput<f64>> = [(8, 4, 4), (16, 2, 2), (32, 1, 1)]
            .iter()
            .map(|&(s, h, w)| HeadOutput {
                stride: s,
                cls: rand_t(&mut rng, &[2, h, w], 2.0),
                reg: rand_t(&mut rng, &[4, h, w], 0.7),
                obj: rand_t(&mut rng, &[1, h, w], 2.0),
            })
            .collect();
        let g = gt(1, [6.0, 9.0, 19.0, 23.0]);
        let (gx, gy) = (12.5, 16.0);
        // reference: enumerate candidates independently and rank by IoU
        let mut cands = Vec::new();
        for (li, h) in heads.iter().enumerate() {
            let s = h.stride as f64;
            let (_, hh, ww) = h.reg.dims3();
            for loc in 0..hh * ww {
                let (cx, cy) = (((loc % ww) as f64 + 0.5) * s, ((loc / ww) as f64 + 0.5) * s);
                if (cx - gx).abs() <= 1.5 * s && (cy - gy).abs() <= 1.5 * s {
                    let p = decode_f64(&h.reg, loc, h.stride);
                    let ix = (p[2].min(19.0) - p[0].max(6.0)).max(0.0);
                    let iy = (p[3].min(23.0) - p[1].max(9.0)).max(0.0);
                    let inter = ix * iy;
                    let iou = inter / ((p[2] - p[0]) * (p[3] - p[1]) + 13.0 * 14.0 - inter);
                    cands.push((iou, li, loc));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(10);
        let np = cands.len() as f64;
        let sp = |z: f64| (1.0 + z.exp()).ln();
        let (mut li_sum, mut cls_sum, mut obj_sum) = (0.0, 0.0, 0.0);
        for &(_, li, loc) in &cands {
            let h = &heads[li];
            let n = h.obj.numel();
            li_sum += 1.0 - giou(decode_f64(&h.reg, loc, h.stride), g.bbox());
            for c in 0..2 {
                let z = h.cls.data()[c * n + loc];
                cls_sum += sp(z) - if c == 1 { z } else { 0.0 };
            }
        }
        for (li, h) in heads.iter().enumerate() {
            for (loc, &z) in h.obj.data().iter().enumerate() {
                let t = if cands.iter().any(|c| c.1 == li && c.2 == loc) { 1.0 } else { 0.0 };
                obj_sum += sp(z) - t * z;
            }
        }
        let l = detection_loss(&heads, &[g]);
        assert!((l.iou - li_sum / np).abs() < 1e-9, "{} vs {}", l.iou, li_sum / np);
        assert!((l.cls - cls_sum / np).abs() < 1e-9);
        assert!((l.obj - obj_sum / np).abs() < 1e-9);
        assert!((l.total - (l.iou + l.cls + l.obj)).abs() < 1e-12);
    }

    #[test]
    fn overlapping_boxes_split_locations_by_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let heads: Vec<HeadOutput<f64>> = [(8, 4, 4), (16, 2, 2), (32, 1, 1)]
            .iter()
            .map(|&(s, h, w)| HeadOutput {
                stride: s,
                cls: Tensor::zeros(&[2, h, w]),
                reg: rand_t(&mut rng, &[4, h, w], 0.5),
                obj: Tensor::zeros(&[1, h, w]),
            })
            .collect();
        let gts = [gt(0, [4.0, 4.0, 16.0, 16.0]), gt(1, [8.0, 8.0, 20.0, 20.0])];
        let pos = assign(&heads, &gts);
        let mut seen = std::collections::HashSet::new();
        for p in &pos {
            assert!(seen.insert((p.level, p.loc)), "location assigned twice");
            let pred = decode_f64(&heads[p.level].reg, p.loc, heads[p.level].stride);
            let other = 1 - p.gt;
            assert!(p.iou >= box_iou(pred, gts[other].bbox()) || pos.len() < 2);
        }
        assert!(pos.iter().filter(|p| p.gt == 0).count() <= TOP_K);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mini(3);
        cfg.seed = 11;
        cfg.fusion_mode = FusionMode::Concat;
        let d = DetectorParams::<f32>::new(cfg).unwrap();
        let path = dir.path().join("m.safetensors");
        d.save(&path).unwrap();
        let back = DetectorParams::load(&path).unwrap();
        assert_eq!(back.config, d.config);
        assert_eq!(back.params.names(), d.params.names());
        for ((_, a), (_, b)) in back.params.iter().zip(d.params.iter()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut wider = d.config.clone();
        wider.widths = [8, 8, 8, 8];
        match DetectorParams::load_with_config(&path, wider) {
            Err(Error::Shape(m)) => assert!(m.contains("expected"), "{m}"),
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut cfg = mini(2);
        cfg.seed = 3;
        let d = DetectorParams::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // non-zero offset generator so the deformable path is exercised
        let mut params = d.params.clone();
        let off = params.find("align.offset.weight").unwrap();
        let shape = params.get(off).shape().to_vec();
        *params.get_mut(off) = rand_t(&mut rng, &shape, 0.05);
        let ev = rand_t(&mut rng, &[4, 32, 32], 1.0).map(|v| v.abs());
        let rgb = rand_t(&mut rng, &[3, 32, 32], 0.5).map(|v| v + 0.5);
        // edges off the stride grid keep the GIoU min/max away from kinks
        let gts = vec![gt(0, [5.3, 6.7, 17.9, 15.2]), gt(1, [18.4, 13.1, 29.6, 26.3])];
        let mut inputs = params.tensors();
        let np = inputs.len();
        let st0 = d.reset_state();
        inputs.push(ev);
        inputs.push(rgb);
        // two steps so the recurrent path is differentiated too
        type Heads<'g> = Vec<HeadVars<'g, f64>>;
        fn run<'g>(
            d: &DetectorParams<f64>,
            st0: &RecurrentState<f64>,
            g: &'g Graph<f64>,
            v: &[Var<'g, f64>],
        ) -> (Heads<'g>, Heads<'g>) {
            let np = v.len() - 2;
            let p = Bound::from_vars(v[..np].to_vec());
            let st: Vec<_> = st0.stages.iter().map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone()))).collect();
            let s1 = d.step(&p, v[np], Some(v[np + 1]), &st);
            let s2 = d.step(&p, v[np], Some(v[np + 1]), &s1.state);
            (s1.heads, s2.heads)
        }
        // the positive set is a discrete choice; freeze it at the base point
        let (pos1, pos2) = {
            let g = Graph::new();
            let v: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let (h1, h2) = run(&d, &st0, &g, &v);
            let vals = |hs: &[HeadVars<'_, f64>]| hs.iter().map(HeadVars::values).collect::<Vec<_>>();
            (assign(&vals(&h1), &gts), assign(&vals(&h2), &gts))
        };
        assert!(!pos1.is_empty());
        let report = gradcheck::check(&inputs, 1e-6, 6, 9, |g, v| {
            let (h1, h2) = run(&d, &st0, g, v);
            detection_loss_assigned(&h1, &gts, &pos1)
                .total
                .add(detection_loss_assigned(&h2, &gts, &pos2).total)
        });
        assert!(report.rel_error < 1e-2, "{report:?} ({})", d.params.names()[report.input.min(np - 1)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn decoded_detections_are_valid_and_sorted(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads: Vec<HeadOutput<f32>> = [(8, 4, 4), (16, 2, 2), (32, 1, 1)]
                .iter()
                .map(|&(s, h, w)| HeadOutput {
                    stride: s,
                    cls: rand_t(&mut rng, &[3, h, w], 4.0).cast(),
                    reg: rand_t(&mut rng, &[4, h, w], 2.0).cast(),
                    obj: rand_t(&mut rng, &[1, h, w], 4.0).cast(),
                })
                .collect();
            let d = decode_detections(&heads, 0.01, 0.5, 32, 32);
            for w in d.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for x in &d {
                prop_assert!(x.score >= 0.0 && x.score <= 1.0);
                prop_assert!(x.bbox[0] < x.bbox[2] && x.bbox[1] < x.bbox[3]);
            }
        }
    }
}
