#![allow(dead_code)]

use factorizephys::model::{default_arch, ArchConfig};
use factorizephys::tensor::{ConvSpec, Padding, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

pub const FD_STEP: f64 = 1e-4;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a floor so exact zeros compare sensibly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Analytic gradients of the scalar graph `f` at `inputs`.
pub fn analytic(inputs: &[Tensor<f64>], f: &Graph) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

pub fn value(inputs: &[Tensor<f64>], f: &Graph) -> f64 {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).data()[0]
}

/// Central difference at one coordinate.
pub fn numeric(inputs: &[Tensor<f64>], f: &Graph, k: usize, i: usize) -> f64 {
    let mut plus = inputs.to_vec();
    plus[k].data_mut()[i] += FD_STEP;
    let mut minus = inputs.to_vec();
    minus[k].data_mut()[i] -= FD_STEP;
    (value(&plus, f) - value(&minus, f)) / (2.0 * FD_STEP)
}

/// Worst relative error between analytic and central-difference gradients,
/// over every coordinate or over `sample` random coordinates per input.
pub fn fd_check(inputs: &[Tensor<f64>], f: &Graph, sample: Option<usize>) -> f64 {
    let grads = analytic(inputs, f);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let n = inputs[k].len();
        let coords: Vec<usize> = match sample {
            Some(s) if s < n => (0..s).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            worst = worst.max(rel_err(g.data()[i], numeric(inputs, f, k, i)));
        }
    }
    worst
}

/// Same block structure as the default plan, shrunk to `[3, frames, 28, 28]`
/// with two channels before the second downsampling and three after.
pub fn tiny_arch(frames: usize) -> ArchConfig {
    let mut cfg = default_arch();
    cfg.input = [3, frames, 28, 28];
    let conv = |cin, cout, kernel, stride| ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        temporal_padding: Padding::Same,
        spatial_padding: Padding::Valid,
        bias: true,
    };
    let plan = [
        conv(3, 2, [3, 1, 1], [1, 1, 1]),
        conv(2, 2, [1, 1, 1], [1, 1, 1]),
        conv(2, 2, [1, 2, 2], [1, 2, 2]),
        conv(2, 2, [3, 1, 1], [1, 1, 1]),
        conv(2, 2, [1, 1, 1], [1, 1, 1]),
        conv(2, 3, [1, 2, 2], [1, 2, 2]),
        conv(3, 3, [3, 1, 1], [1, 1, 1]),
        conv(3, 3, [1, 1, 1], [1, 1, 1]),
        conv(3, 3, [1, 1, 1], [1, 1, 1]),
    ];
    for (l, c) in cfg.layers.iter_mut().zip(plan) {
        l.conv = c;
    }
    cfg.head = conv(3, 1, [1, 7, 7], [1, 1, 1]);
    cfg
}
