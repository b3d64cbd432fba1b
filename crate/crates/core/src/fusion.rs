//! Event/RGB feature fusion.
//!
//! The attention variant computes, for event features `E` and aligned RGB
//! features `I`:
//!
//! ```text
//! s   = E * I + E + I
//! a_c = σ(mlp(avgpool s) + mlp(maxpool s))                  (C)
//! t   = a_c * s
//! a_s = σ(conv7x7([mean_c(t), max_c(t)]))                    (H x W)
//! out = proj1x1(a_s * a_c * E + a_s * a_c * I)
//! ```
//!
//! where `mlp` is a shared 1x1 bottleneck `C -> C/8 -> C` with SiLU in
//! between and `σ` is a sigmoid pulled in by [`ATTENTION_EPS`] from both
//! ends.

use serde::{Deserialize, Serialize};

use crate::align::FeatureMap;
use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Act, Bound, Conv, Init, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const ATTENTION_REDUCTION: usize = 8;
pub const SPATIAL_KERNEL: usize = 7;
/// Attention maps are `EPS + (1 - 2 EPS) * sigmoid(z)` so they stay strictly
/// inside `(0, 1)` after rounding.
pub const ATTENTION_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Ef,
    Concat,
}

fn same_shape<F: Scalar>(a: &FeatureMap<F>, b: &FeatureMap<F>, what: &str) -> Result<()> {
    if a.values.shape() != b.values.shape() || a.stride != b.stride {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.values.shape(), b.values.shape()));
    }
    Ok(())
}

/// `E * I + E + I`, element-wise.
pub fn shared_enhance<F: Scalar>(event: &FeatureMap<F>, rgb: &FeatureMap<F>) -> Result<FeatureMap<F>> {
    same_shape(event, rgb, "shared_enhance")?;
    Ok(FeatureMap {
        values: event.values.zip_map(&rgb.values, |e, i| e * i + e + i),
        stride: event.stride,
    })
}

fn squash<'g, F: Scalar>(z: Var<'g, F>) -> Var<'g, F> {
    let eps = z.graph().constant(Tensor::full(&z.shape(), F::of(ATTENTION_EPS)));
    z.sigmoid().scale(F::of(1.0 - 2.0 * ATTENTION_EPS)).add(eps)
}

fn enhance<'g, F: Scalar>(e: Var<'g, F>, i: Var<'g, F>) -> Var<'g, F> {
    e.mul(i).add(e).add(i)
}

/// Attention-based fusion block.
#[derive(Clone, Debug)]
pub struct EfFusion {
    pub mlp_in: Conv,
    pub mlp_out: Conv,
    pub spatial: Conv,
    pub proj: Conv,
    pub channels: usize,
}

/// Intermediate values of one fusion pass.
pub struct EfParts<'g, F: Scalar> {
    pub output: Var<'g, F>,
    /// `C x 1 x 1`
    pub channel_attention: Var<'g, F>,
    /// `1 x H x W`
    pub spatial_attention: Var<'g, F>,
}

impl EfFusion {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, channels: usize) -> Self {
        let hidden = (channels / ATTENTION_REDUCTION).max(1);
        init.scope(name, |i| EfFusion {
            mlp_in: Conv::new(i, "mlp_in", channels, hidden, 1, 1, Act::Silu),
            mlp_out: Conv::new(i, "mlp_out", hidden, channels, 1, 1, Act::Identity),
            spatial: Conv::new(i, "spatial", 2, 1, SPATIAL_KERNEL, 1, Act::Identity),
            proj: Conv::new(i, "proj", channels, channels, 1, 1, Act::Identity),
            channels,
        })
    }

    pub fn forward_parts<'g, F: Scalar>(&self, p: &Bound<'g, F>, e: Var<'g, F>, i: Var<'g, F>) -> EfParts<'g, F> {
        let s = enhance(e, i);
        let mlp = |v: Var<'g, F>| self.mlp_out.forward(p, self.mlp_in.forward(p, v));
        let a_c = squash(mlp(s.global_avg_pool()).add(mlp(s.global_max_pool())));
        let s_c = s.scale_channels(a_c);
        let pooled = Var::concat(&[s_c.channel_mean(), s_c.channel_max()]);
        let a_s = squash(self.spatial.forward(p, pooled));
        let gate = |v: Var<'g, F>| v.scale_channels(a_c).scale_spatial(a_s);
        let output = self.proj.forward(p, gate(e).add(gate(i)));
        EfParts {
            output,
            channel_attention: a_c,
            spatial_attention: a_s,
        }
    }

    pub fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, e: Var<'g, F>, i: Var<'g, F>) -> Var<'g, F> {
        self.forward_parts(p, e, i).output
    }
}

/// Channel concatenation and a 1x1 projection back to `C` channels.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub proj: Conv,
}

impl ConcatFusion {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, channels: usize) -> Self {
        init.scope(name, |i| ConcatFusion {
            proj: Conv::new(i, "proj", 2 * channels, channels, 1, 1, Act::Identity),
        })
    }

    pub fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, e: Var<'g, F>, i: Var<'g, F>) -> Var<'g, F> {
        self.proj.forward(p, Var::concat(&[e, i]))
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Ef(EfFusion),
    Concat(ConcatFusion),
}

impl Fusion {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, channels: usize, mode: FusionMode) -> Self {
        match mode {
            FusionMode::Ef => Fusion::Ef(EfFusion::new(init, name, channels)),
            FusionMode::Concat => Fusion::Concat(ConcatFusion::new(init, name, channels)),
        }
    }

    pub fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, e: Var<'g, F>, i: Var<'g, F>) -> Var<'g, F> {
        match self {
            Fusion::Ef(m) => m.forward(p, e, i),
            Fusion::Concat(m) => m.forward(p, e, i),
        }
    }
}

/// Fused features plus the attention maps that produced them.
#[derive(Clone, Debug)]
pub struct EfOutput<F> {
    pub fused: FeatureMap<F>,
    pub channel_attention: Tensor<F>,
    pub spatial_attention: Tensor<F>,
}

pub fn ef_fuse<F: Scalar>(
    event: &FeatureMap<F>,
    rgb: &FeatureMap<F>,
    module: &EfFusion,
    params: &ParamSet<F>,
) -> Result<EfOutput<F>> {
    same_shape(event, rgb, "ef_fuse")?;
    if event.shape().0 != module.channels {
        return Err(shape_err!("ef_fuse: module has {} channels, input {}", module.channels, event.shape().0));
    }
    let g = Graph::new();
    let p = params.bind(&g, false);
    let parts = module.forward_parts(&p, g.constant(event.values.clone()), g.constant(rgb.values.clone()));
    Ok(EfOutput {
        fused: FeatureMap {
            values: (*parts.output.value_arc()).clone(),
            stride: event.stride,
        },
        channel_attention: (*parts.channel_attention.value_arc()).clone(),
        spatial_attention: (*parts.spatial_attention.value_arc()).clone(),
    })
}

pub fn concat_fuse<F: Scalar>(
    event: &FeatureMap<F>,
    rgb: &FeatureMap<F>,
    module: &ConcatFusion,
    params: &ParamSet<F>,
) -> Result<FeatureMap<F>> {
    same_shape(event, rgb, "concat_fuse")?;
    let want = params.get(module.proj.w).shape()[1];
    if 2 * event.shape().0 != want {
        return Err(shape_err!("concat_fuse: module expects {} input channels, got {}", want, 2 * event.shape().0));
    }
    let g = Graph::new();
    let p = params.bind(&g, false);
    let y = module.forward(&p, g.constant(event.values.clone()), g.constant(rgb.values.clone()));
    Ok(FeatureMap {
        values: (*y.value_arc()).clone(),
        stride: event.stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::ParamId;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn fm(t: Tensor<f64>) -> FeatureMap<f64> {
        FeatureMap::new(t, 4).unwrap()
    }

    fn build_ef(c: usize, seed: u64) -> (EfFusion, ParamSet<f64>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = EfFusion::new(&mut Init::new(&mut ps, &mut rng), "fuse", c);
        // non-zero biases so the oracle exercises them
        for id in 0..ps.len() {
            if ps.names()[id].ends_with("bias") {
                let b = ps.get_mut(ParamId(id));
                *b = rand_t(&mut rng, b.shape(), 0.3);
            }
        }
        (m, ps)
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn att(v: f64) -> f64 {
        ATTENTION_EPS + (1.0 - 2.0 * ATTENTION_EPS) * sig(v)
    }

    fn silu(v: f64) -> f64 {
        v * sig(v)
    }

    /// Step-by-step evaluation of the documented formula with plain loops.
    fn ef_oracle(e: &Tensor<f64>, i: &Tensor<f64>, m: &EfFusion, ps: &ParamSet<f64>) -> (Tensor<f64>, Vec<f64>, Vec<f64>) {
        let (c, h, w) = e.dims3();
        let n = h * w;
        let s: Vec<f64> = (0..c * n).map(|k| e.data()[k] * i.data()[k] + e.data()[k] + i.data()[k]).collect();
        let (w1, b1) = (ps.get(m.mlp_in.w).data(), ps.get(m.mlp_in.b).data());
        let (w2, b2) = (ps.get(m.mlp_out.w).data(), ps.get(m.mlp_out.b).data());
        let hid = b1.len();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let z: Vec<f64> = (0..hid).map(|j| silu(b1[j] + (0..c).map(|k| w1[j * c + k] * v[k]).sum::<f64>())).collect();
            (0..c).map(|k| b2[k] + (0..hid).map(|j| w2[k * hid + j] * z[j]).sum::<f64>()).collect()
        };
        let avg: Vec<f64> = (0..c).map(|k| s[k * n..(k + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let mx: Vec<f64> = (0..c).map(|k| s[k * n..(k + 1) * n].iter().cloned().fold(f64::MIN, f64::max)).collect();
        let (ma, mm) = (mlp(&avg), mlp(&mx));
        let a_c: Vec<f64> = (0..c).map(|k| att(ma[k] + mm[k])).collect();
        let sc: Vec<f64> = (0..c * n).map(|k| s[k] * a_c[k / n]).collect();
        let mut pooled = vec![0.0; 2 * n];
        for p in 0..n {
            pooled[p] = (0..c).map(|k| sc[k * n + p]).sum::<f64>() / c as f64;
            pooled[n + p] = (0..c).map(|k| sc[k * n + p]).fold(f64::MIN, f64::max);
        }
        let (ws, bs) = (ps.get(m.spatial.w).data(), ps.get(m.spatial.b).data()[0]);
        let kk = SPATIAL_KERNEL as isize;
        let r = kk / 2;
        let mut a_s = vec![0.0; n];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut z = bs;
                for ch in 0..2 {
                    for ki in 0..kk {
                        for kj in 0..kk {
                            let (yy, xx) = (y + ki - r, x + kj - r);
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                z += ws[((ch * kk + ki) * kk + kj) as usize] * pooled[ch as usize * n + (yy * w as isize + xx) as usize];
                            }
                        }
                    }
                }
                a_s[(y * w as isize + x) as usize] = att(z);
            }
        }
        let gated: Vec<f64> = (0..c * n)
            .map(|k| a_s[k % n] * a_c[k / n] * e.data()[k] + a_s[k % n] * a_c[k / n] * i.data()[k])
            .collect();
        let (wp, bp) = (ps.get(m.proj.w).data(), ps.get(m.proj.b).data());
        let out = Tensor::from_fn(&[c, h, w], |k| {
            let (o, p) = (k / n, k % n);
            bp[o] + (0..c).map(|q| wp[o * c + q] * gated[q * n + p]).sum::<f64>()
        });
        (out, a_c, a_s)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn shared_enhance_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = fm(rand_t(&mut rng, &[3, 4, 5], 1.0));
        let zero = fm(Tensor::zeros(&[3, 4, 5]));
        assert_eq!(shared_enhance(&e, &zero).unwrap(), e);
        let ones = fm(Tensor::full(&[3, 4, 5], 1.0));
        assert!(shared_enhance(&ones, &ones).unwrap().values.data().iter().all(|&v| v == 3.0));
        let i = fm(rand_t(&mut rng, &[3, 4, 5], 1.0));
        let out = shared_enhance(&e, &i).unwrap();
        for k in 0..60 {
            let (a, b) = (e.values.data()[k], i.values.data()[k]);
            assert_eq!(out.values.data()[k], a * b + a + b);
        }
        assert!(shared_enhance(&e, &fm(Tensor::zeros(&[3, 4, 4]))).is_err());
    }

    #[test]
    fn ef_fuse_matches_reference_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, ps) = build_ef(16, 2);
        let e = fm(rand_t(&mut rng, &[16, 5, 6], 1.0));
        let i = fm(rand_t(&mut rng, &[16, 5, 6], 1.0));
        let out = ef_fuse(&e, &i, &m, &ps).unwrap();
        let (want, a_c, a_s) = ef_oracle(&e.values, &i.values, &m, &ps);
        assert_eq!(out.fused.values.shape(), &[16, 5, 6]);
        assert!(max_diff(out.fused.values.data(), want.data()) < 1e-12);
        assert!(max_diff(out.channel_attention.data(), &a_c) < 1e-12);
        assert!(max_diff(out.spatial_attention.data(), &a_s) < 1e-12);
    }

    #[test]
    fn concat_selecting_event_half_is_identity() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ConcatFusion::new(&mut Init::new(&mut ps, &mut rng), "cat", 3);
        *ps.get_mut(m.proj.w) = Tensor::from_fn(&[3, 6, 1, 1], |k| if k / 6 == k % 6 { 1.0 } else { 0.0 });
        let e = fm(rand_t(&mut rng, &[3, 4, 4], 1.0));
        let i = fm(rand_t(&mut rng, &[3, 4, 4], 1.0));
        let out = concat_fuse(&e, &i, &m, &ps).unwrap();
        assert_eq!(out.values, e.values);
    }

    #[test]
    fn concat_matches_dense_oracle() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ConcatFusion::new(&mut Init::new(&mut ps, &mut rng), "cat", 4);
        *ps.get_mut(m.proj.b) = rand_t(&mut rng, &[4], 1.0);
        let e = fm(rand_t(&mut rng, &[4, 3, 5], 1.0));
        let i = fm(rand_t(&mut rng, &[4, 3, 5], 1.0));
        let out = concat_fuse(&e, &i, &m, &ps).unwrap();
        assert_eq!(out.values.shape(), &[4, 3, 5]);
        let (w, b) = (ps.get(m.proj.w).data(), ps.get(m.proj.b).data());
        for o in 0..4 {
            for p in 0..15 {
                let mut s = b[o];
                for q in 0..8 {
                    let x = if q < 4 { e.values.data()[q * 15 + p] } else { i.values.data()[(q - 4) * 15 + p] };
                    s += w[o * 8 + q] * x;
                }
                assert!((out.values.data()[o * 15 + p] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ef_parameter_budget_at_default_width() {
        for c in [32, 64, 128, 256] {
            let mut ps = ParamSet::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            EfFusion::new(&mut Init::new(&mut ps, &mut rng), "f", c);
            assert!(ps.num_scalars() <= 200_000, "{c}: {}", ps.num_scalars());
        }
    }

    #[test]
    fn ef_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, ps) = build_ef(8, 6);
        let mut inputs = vec![rand_t(&mut rng, &[8, 4, 5], 1.0), rand_t(&mut rng, &[8, 4, 5], 1.0)];
        let probe = rand_t(&mut rng, &[8, 4, 5], 1.0);
        inputs.extend(ps.tensors());
        inputs.push(probe);
        let r = gradcheck::check(&inputs, 1e-6, 60, 7, |_, v| {
            let p = Bound::from_vars(v[2..v.len() - 1].to_vec());
            m.forward(&p, v[0], v[1]).mul(v[v.len() - 1]).sum()
        });
        assert!(r.rel_error < 1e-3, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_is_strictly_inside_unit_interval(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, scale in 0.1f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, ps) = build_ef(8, seed);
            let e = fm(rand_t(&mut rng, &[8, h, w], scale));
            let i = fm(rand_t(&mut rng, &[8, h, w], scale));
            let out = ef_fuse(&e, &i, &m, &ps).unwrap();
            prop_assert_eq!(out.fused.values.shape(), &[8, h, w]);
            for &a in out.channel_attention.data().iter().chain(out.spatial_attention.data()) {
                prop_assert!(a > 0.0 && a < 1.0);
            }
        }

        #[test]
        fn shared_enhance_is_symmetric(seed in any::<u64>(), c in 1usize..4, h in 1usize..5, w in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = fm(rand_t(&mut rng, &[c, h, w], 2.0));
            let i = fm(rand_t(&mut rng, &[c, h, w], 2.0));
            let (a, b) = (shared_enhance(&e, &i).unwrap(), shared_enhance(&i, &e).unwrap());
            prop_assert!(max_diff(a.values.data(), b.values.data()) <= 1e-12);
        }
    }
}
