//! Named parameter storage and the small set of layers the detector is
//! built from.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<F>>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(t));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Put every parameter on `graph`, tracked when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph<F>, trainable: bool) -> Bound<'g, F> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replace values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (i, (a, b)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {}: expected {:?}, got {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
            *a = b.clone();
        }
        Ok(())
    }

    /// Owned copies of every value, in order.
    pub fn tensors(&self) -> Vec<Tensor<F>> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}

/// Parameters placed on a graph, addressable by [`ParamId`].
pub struct Bound<'g, F: Scalar> {
    vars: Vec<Var<'g, F>>,
}

impl<'g, F: Scalar> Bound<'g, F> {
    /// Wrap vars given in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var<'g, F>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'g, F> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, F>] {
        &self.vars
    }
}

/// Builds parameters under a name prefix with seeded initialization.
pub struct Init<'a, F: Scalar> {
    pub params: &'a mut ParamSet<F>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Scalar> Init<'a, F> {
    pub fn new(params: &'a mut ParamSet<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, F>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut child = Init {
            params: self.params,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| F::of(self.rng.gen_range(-bound..=bound)));
        let n = self.full_name(name);
        self.params.push(n, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.params.push(n, Tensor::full(shape, F::of(value)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Silu,
}

/// Convolution with bias and optional SiLU.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub act: Act,
}

impl Conv {
    /// Uniform fan-in scaled initialization; the gain accounts for the
    /// activation that follows.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Act,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let gain = if act == Act::Silu { 2f64.sqrt() } else { 1.0 };
        let bound = gain * (3.0 / fan_in).sqrt();
        init.scope(name, |i| Conv {
            w: i.uniform("weight", &[cout, cin, k, k], bound),
            b: i.constant("bias", &[cout], 0.0),
            stride,
            pad: k / 2,
            act,
        })
    }

    pub fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let y = x.conv2d(p.get(self.w), Some(p.get(self.b)), self.stride, self.pad);
        match self.act {
            Act::Identity => y,
            Act::Silu => y.silu(),
        }
    }
}

/// Cross-stage-partial block: two 1x1 projections, a stack of residual
/// bottlenecks on one of them, concatenation and a 1x1 merge.
#[derive(Clone, Debug)]
pub struct CspBlock {
    main: Conv,
    shortcut: Conv,
    bottlenecks: Vec<(Conv, Conv)>,
    merge: Conv,
}

impl CspBlock {
    pub fn new<F: Scalar>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
    ) -> Self {
        let hidden = (cout / 2).max(1);
        init.scope(name, |i| CspBlock {
            main: Conv::new(i, "main", cin, hidden, 1, 1, Act::Silu),
            shortcut: Conv::new(i, "shortcut", cin, hidden, 1, 1, Act::Silu),
            bottlenecks: (0..depth)
                .map(|d| {
                    i.scope(&format!("m{d}"), |j| {
                        (
                            Conv::new(j, "cv1", hidden, hidden, 1, 1, Act::Silu),
                            Conv::new(j, "cv2", hidden, hidden, 3, 1, Act::Silu),
                        )
                    })
                })
                .collect(),
            merge: Conv::new(i, "merge", 2 * hidden, cout, 1, 1, Act::Silu),
        })
    }

    pub fn forward<'g, F: Scalar>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Var<'g, F> {
        let mut a = self.main.forward(p, x);
        for (c1, c2) in &self.bottlenecks {
            let y = c2.forward(p, c1.forward(p, a));
            a = a.add(y);
        }
        let b = self.shortcut.forward(p, x);
        self.merge.forward(p, Var::concat(&[a, b]))
    }
}

/// Convolutional LSTM cell with 3x3 gate convolutions over `[x, h]`.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv,
    pub channels: usize,
}

impl ConvLstmCell {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, cin: usize, channels: usize) -> Self {
        let gates = Conv::new(init, name, cin + channels, 4 * channels, 3, 1, Act::Identity);
        // forget-gate bias starts at one
        init.params.get_mut(gates.b).data_mut()[channels..2 * channels]
            .iter_mut()
            .for_each(|v| *v = F::one());
        ConvLstmCell { gates, channels }
    }

    /// One step. Gate order along channels is input, forget, output, cell.
    pub fn step<'g, F: Scalar>(
        &self,
        p: &Bound<'g, F>,
        x: Var<'g, F>,
        h: Var<'g, F>,
        c: Var<'g, F>,
    ) -> (Var<'g, F>, Var<'g, F>) {
        let z = self.gates.forward(p, Var::concat(&[x, h]));
        let n = self.channels;
        let i = z.slice_channels(0, n).sigmoid();
        let f = z.slice_channels(n, n).sigmoid();
        let o = z.slice_channels(2 * n, n).sigmoid();
        let g = z.slice_channels(3 * n, n).tanh();
        let c_new = f.mul(c).add(i.mul(g));
        let h_new = o.mul(c_new.tanh());
        (h_new, c_new)
    }
}
