//! Finite-difference verification of the backpropagation engine.

use ndarray::Array2;

use super::{weighted_ce, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::seed;

pub const MAX_CHECK_PARAMS: usize = 500;
const STEP: f64 = 1e-5;

/// Inputs as a `[batch x features]` matrix with labels and loss weights.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

fn loss(net: &Network, batch: &ToyBatch) -> f64 {
    let probs = net.forward(batch.inputs.clone());
    weighted_ce(&probs, &batch.labels, &batch.weights).0
}

/// Backpropagated gradient of the weighted batch loss, in
/// [`Network::params`] order.
pub fn analytic_gradient(net: &Network, batch: &ToyBatch) -> Vec<f64> {
    // no regularizers are active, so the stream is never drawn from
    let mut rng = seed::rng(0);
    let (probs, caches) = net.forward_train(batch.inputs.clone(), &mut rng);
    let (_, grad) = weighted_ce(&probs, &batch.labels, &batch.weights);
    let mut out = Vec::with_capacity(net.param_count());
    for g in net.backward(grad, caches) {
        out.extend(g.w.iter());
        out.extend(g.b.iter());
    }
    out
}

/// Central differences with step `h`.
pub fn numeric_gradient(net: &Network, batch: &ToyBatch, h: f64) -> Vec<f64> {
    let base = net.params();
    let mut probe = net.clone();
    let mut params = base.clone();
    (0..base.len())
        .map(|i| {
            params[i] = base[i] + h;
            probe.set_params(&params).expect("same length");
            let up = loss(&probe, batch);
            params[i] = base[i] - h;
            probe.set_params(&params).expect("same length");
            let down = loss(&probe, batch);
            params[i] = base[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over all parameters of a
/// freshly initialized network.
pub fn gradient_check(spec: &NetworkSpec, batch: &ToyBatch) -> Result<f64> {
    let net = Network::init(spec, &mut seed::rng(spec.seed))?;
    if net.param_count() > MAX_CHECK_PARAMS {
        return Err(Error::InvalidSpec(format!(
            "{} parameters; gradient checks take at most {MAX_CHECK_PARAMS}",
            net.param_count()
        )));
    }
    if net.has_regularizers() {
        return Err(Error::InvalidSpec("disable dropout/dropconnect for gradient checks".into()));
    }
    if batch.inputs.ncols() != spec.input.flat()
        || batch.labels.len() != batch.inputs.nrows()
        || batch.weights.len() != batch.inputs.nrows()
    {
        return Err(Error::DimensionMismatch("toy batch does not match the network".into()));
    }
    let analytic = analytic_gradient(&net, batch);
    let numeric = numeric_gradient(&net, batch, STEP);
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::nnet::{Activation, ArchSpec, LayerSpec, LrSchedule, Regularizer, Shape};

    fn spec(input: Shape, layers: Vec<LayerSpec>, seed: u64) -> NetworkSpec {
        let arch =
            ArchSpec { layers, lr: LrSchedule { initial: 0.1, decay: 1.0, floor: 0.0 }, batch_size: 5, epochs: 1 };
        arch.bind(input, 3, seed)
    }

    fn dense(units: usize, activation: Activation) -> LayerSpec {
        LayerSpec::Dense { units, activation, regularizer: Regularizer::None }
    }

    fn batch(features: usize, n: usize, seed: u64) -> ToyBatch {
        let mut rng = seed::rng(seed);
        ToyBatch {
            inputs: Array2::from_shape_fn((n, features), |_| rng.random_range(-1.0..1.0)),
            labels: (0..n).map(|i| i % 3).collect(),
            weights: (0..n).map(|i| 0.5 + i as f64 * 0.25).collect(),
        }
    }

    #[test]
    fn dense_layers_pass() {
        for act in [Activation::Relu, Activation::Sigmoid, Activation::None] {
            let s = spec(Shape::image(1, 4), vec![dense(6, act), LayerSpec::Output], 3);
            let err = gradient_check(&s, &batch(4, 5, 9)).unwrap();
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn conv_and_pool_pass() {
        for act in [Activation::Relu, Activation::Sigmoid] {
            let conv = LayerSpec::Conv { filters: 2, kernel: 3, stride: 1, activation: act };
            let s = spec(Shape::image(6, 6), vec![conv.clone(), LayerSpec::Output], 4);
            assert!(gradient_check(&s, &batch(36, 4, 1)).unwrap() < 1e-4);
            let pool = LayerSpec::Maxpool { size: 2, stride: None };
            let s = spec(Shape::image(6, 6), vec![conv, pool, LayerSpec::Output], 5);
            assert!(gradient_check(&s, &batch(36, 4, 2)).unwrap() < 1e-4);
        }
    }

    #[test]
    fn zero_input_and_weights_give_zero_hidden_gradient() {
        let s = spec(Shape::image(1, 4), vec![dense(5, Activation::Sigmoid), LayerSpec::Output], 1);
        let mut net = Network::init(&s, &mut seed::rng(1)).unwrap();
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let mut b = batch(4, 5, 3);
        b.inputs.fill(0.0);
        let g = analytic_gradient(&net, &b);
        assert!(g[..4 * 5].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_large_or_regularized_networks() {
        let s = spec(Shape::image(10, 10), vec![dense(8, Activation::Relu), LayerSpec::Output], 1);
        assert!(gradient_check(&s, &batch(100, 2, 1)).is_err());
        let reg = LayerSpec::Dense {
            units: 4,
            activation: Activation::Relu,
            regularizer: Regularizer::Dropout { rate: 0.5 },
        };
        let s = spec(Shape::image(1, 4), vec![reg, LayerSpec::Output], 1);
        assert!(gradient_check(&s, &batch(4, 2, 1)).is_err());
    }
}
