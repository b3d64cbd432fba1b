//! Aligns RGB features to event features: AdaIN re-styling, offset
//! prediction from `[adain(rgb), event]`, and deformable sampling of the
//! RGB map.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::nn::{Act, Bound, Conv, Init, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Kernel size of the offset generator and the deformable convolution.
pub const ALIGN_KERNEL: usize = 3;
/// Denominator guard for the AdaIN standard deviation.
pub const ADAIN_EPS: f64 = 1e-5;

/// `C x H x W` features at a known stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub values: Tensor<F>,
    pub stride: usize,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn new(values: Tensor<F>, stride: usize) -> Result<Self> {
        if values.shape().len() != 3 || values.shape().iter().any(|&d| d == 0) {
            return Err(shape_err!("feature map must be non-empty CxHxW, got {:?}", values.shape()));
        }
        if stride == 0 {
            return Err(Error::Invalid("stride must be positive".into()));
        }
        if !values.all_finite() {
            return Err(Error::Invalid("feature map has non-finite values".into()));
        }
        Ok(Self { values, stride })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dims3()
    }

    fn expect_like(&self, other: &Self, what: &str) -> Result<()> {
        if self.values.shape() != other.values.shape() || self.stride != other.stride {
            return Err(shape_err!(
                "{what}: {:?}/s{} vs {:?}/s{}",
                self.values.shape(),
                self.stride,
                other.values.shape(),
                other.stride
            ));
        }
        Ok(())
    }
}

/// Per-tap sampling displacements, `2K^2 x H x W`. Channel `2t` is the
/// row (dy) and `2t + 1` the column (dx) displacement of tap
/// `t = ki * K + kj`, in feature-map pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<F> {
    pub values: Tensor<F>,
    pub kernel: usize,
}

impl<F: Scalar> OffsetField<F> {
    pub fn zeros(kernel: usize, h: usize, w: usize) -> Self {
        Self {
            values: Tensor::zeros(&[2 * kernel * kernel, h, w]),
            kernel,
        }
    }

    /// `(dy, dx)` of tap `t` at `(y, x)`.
    pub fn get(&self, t: usize, y: usize, x: usize) -> (F, F) {
        (self.values.at3(2 * t, y, x), self.values.at3(2 * t + 1, y, x))
    }
}

/// Plain-tensor copies of the alignment weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignParams<F> {
    /// `2K^2 x 2C x K x K`
    pub offset_w: Tensor<F>,
    pub offset_b: Tensor<F>,
    /// `C x C x K x K`
    pub deform_w: Tensor<F>,
    pub deform_b: Tensor<F>,
}

impl<F: Scalar> AlignParams<F> {
    /// Zero offset generator and the given deformable weights.
    pub fn with_zero_offsets(channels: usize, deform_w: Tensor<F>, deform_b: Tensor<F>) -> Self {
        let k = ALIGN_KERNEL;
        Self {
            offset_w: Tensor::zeros(&[2 * k * k, 2 * channels, k, k]),
            offset_b: Tensor::zeros(&[2 * k * k]),
            deform_w,
            deform_b,
        }
    }
}

/// `sigma(E) * (I - mu(I)) / (sigma(I) + eps) + mu(E)` per channel, with
/// population statistics over `H x W`.
pub fn adain<F: Scalar>(rgb: &FeatureMap<F>, event: &FeatureMap<F>, eps: F) -> Result<FeatureMap<F>> {
    rgb.expect_like(event, "adain")?;
    Ok(FeatureMap {
        values: kernels::adain_forward(&rgb.values, &event.values, eps),
        stride: rgb.stride,
    })
}

fn check_offset_weights<F: Scalar>(c: usize, w: &Tensor<F>, b: &Tensor<F>) -> Result<usize> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 || s[1] != 2 * c || s[0] != 2 * s[2] * s[2] || b.shape() != [s[0]] {
        return Err(shape_err!("offset weights {:?}/{:?} for {c} channels", s, b.shape()));
    }
    Ok(s[2])
}

/// `conv_KxK(concat(adain_rgb, event))` with `2K^2` output channels.
pub fn generate_offsets<F: Scalar>(
    adain_rgb: &FeatureMap<F>,
    event: &FeatureMap<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<OffsetField<F>> {
    adain_rgb.expect_like(event, "generate_offsets")?;
    let (c, _, _) = adain_rgb.shape();
    let k = check_offset_weights(c, w, b)?;
    let g = Graph::new();
    let x = Var::concat(&[g.constant(adain_rgb.values.clone()), g.constant(event.values.clone())]);
    let y = x.conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), 1, k / 2);
    let values = (*y.value_arc()).clone();
    Ok(OffsetField { values, kernel: k })
}

/// Deformable `K x K` convolution of `rgb` sampled at the offset grid;
/// stride 1, padding `K / 2`, bilinear sampling with zeros outside.
pub fn deformable_align<F: Scalar>(
    rgb: &FeatureMap<F>,
    offsets: &OffsetField<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<FeatureMap<F>> {
    let (c, h, wd) = rgb.shape();
    let k = offsets.kernel;
    if offsets.values.shape() != [2 * k * k, h, wd] {
        return Err(shape_err!("offsets {:?} for {k}x{k} kernel on {h}x{wd}", offsets.values.shape()));
    }
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != k || ws[3] != k || b.shape() != [ws[0]] {
        return Err(shape_err!("deformable weights {:?}/{:?} for {c} channels, k={k}", ws, b.shape()));
    }
    if !offsets.values.all_finite() {
        return Err(Error::Invalid("non-finite offsets".into()));
    }
    Ok(FeatureMap {
        values: kernels::deform_conv_forward(&rgb.values, &offsets.values, w, Some(b)),
        stride: rgb.stride,
    })
}

/// `deformable_align(rgb, generate_offsets(adain(rgb, event), event))`.
pub fn align_module<F: Scalar>(rgb: &FeatureMap<F>, event: &FeatureMap<F>, p: &AlignParams<F>) -> Result<FeatureMap<F>> {
    let styled = adain(rgb, event, F::of(ADAIN_EPS))?;
    let off = generate_offsets(&styled, event, &p.offset_w, &p.offset_b)?;
    deformable_align(rgb, &off, &p.deform_w, &p.deform_b)
}

/// Mean squared difference between a warped feature and its paired
/// reference.
pub fn aligned_loss<F: Scalar>(warped: &FeatureMap<F>, reference: &FeatureMap<F>) -> Result<F> {
    warped.expect_like(reference, "aligned_loss")?;
    let n = F::of(warped.values.numel() as f64);
    let s: F = warped
        .values
        .data()
        .iter()
        .zip(reference.values.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / n)
}

/// Trainable alignment block living in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AlignModule {
    pub offset: Conv,
    pub deform_w: ParamId,
    pub deform_b: ParamId,
}

impl AlignModule {
    /// The offset generator starts at zero so training begins from a plain
    /// convolution of the RGB features.
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, channels: usize) -> Self {
        let k = ALIGN_KERNEL;
        init.scope(name, |i| {
            let offset = Conv::new(i, "offset", 2 * channels, 2 * k * k, k, 1, Act::Identity);
            i.params.get_mut(offset.w).data_mut().fill(F::zero());
            let bound = (3.0 / (channels * k * k) as f64).sqrt();
            AlignModule {
                offset,
                deform_w: i.uniform("deform.weight", &[channels, channels, k, k], bound),
                deform_b: i.constant("deform.bias", &[channels], 0.0),
            }
        })
    }

    pub fn offsets<'g, F: Scalar>(&self, p: &Bound<'g, F>, rgb: Var<'g, F>, event: Var<'g, F>) -> Var<'g, F> {
        let styled = rgb.adain(event, F::of(ADAIN_EPS));
        self.offset.forward(p, Var::concat(&[styled, event]))
    }

    pub fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, rgb: Var<'g, F>, event: Var<'g, F>) -> Var<'g, F> {
        let off = self.offsets(p, rgb, event);
        rgb.deform_conv(off, p.get(self.deform_w), Some(p.get(self.deform_b)))
    }

    pub fn params<F: Scalar>(&self, set: &ParamSet<F>) -> AlignParams<F> {
        AlignParams {
            offset_w: set.get(self.offset.w).clone(),
            offset_b: set.get(self.offset.b).clone(),
            deform_w: set.get(self.deform_w).clone(),
            deform_b: set.get(self.deform_b).clone(),
        }
    }
}
