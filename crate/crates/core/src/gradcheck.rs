//! Central finite-difference checks for graph-built scalar functions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Worst element of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare backprop gradients of the scalar `f(inputs)` with central
/// differences of step `h`, probing at most `max_probes` entries of each
/// input (all of them when the input is smaller).
pub fn check<Fun>(inputs: &[Tensor<f64>], h: f64, max_probes: usize, seed: u64, f: Fun) -> GradReport
where
    Fun: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let v = f(&g, &vars).value().data()[0];
        v
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&g, &vars);
    assert_eq!(out.value().numel(), 1, "gradient check needs a scalar output");
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = GradReport {
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let picks: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_probes).into_vec()
        };
        for j in picks {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe);
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe);
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let e = rel_error(a, numeric, 1e-6);
            if e > worst.rel_error {
                worst = GradReport {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: e,
                };
            }
        }
    }
    worst
}
