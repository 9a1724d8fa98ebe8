#![allow(dead_code)]

pub mod oracles;

use altprint_core::nn::{check_target, Architecture, CheckLoss, GradTarget, LayerSpec, NetworkProbe, Network, NnError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Sign-flipped gradients must be flagged above this error.
pub const CORRUPTION_FLOOR: f64 = 0.1;
pub const MAX_PARAMS: usize = 20_000;

pub fn arch(input: &[usize], layers: Vec<LayerSpec>) -> Architecture {
    Architecture { input: input.to_vec(), layers }
}

/// One small network per layer kind, each isolating that kind.
pub fn layer_cases() -> Vec<(&'static str, Architecture)> {
    vec![
        ("conv2d", arch(&[2, 5, 5], vec![LayerSpec::conv3x3(3)])),
        ("conv2d_strided", arch(&[2, 6, 6], vec![LayerSpec::Conv2d { out_channels: 2, kernel: 4, stride: 2, padding: 1 }])),
        ("conv_transpose2d", arch(&[3, 3, 3], vec![LayerSpec::ConvTranspose2d { out_channels: 2, kernel: 4, stride: 2, padding: 1 }])),
        ("dense", arch(&[7], vec![LayerSpec::Dense { units: 4 }])),
        ("relu", arch(&[12], vec![LayerSpec::Relu])),
        ("leaky_relu", arch(&[12], vec![LayerSpec::LeakyRelu { alpha: 0.2 }])),
        ("sigmoid", arch(&[12], vec![LayerSpec::Sigmoid])),
        ("tanh", arch(&[12], vec![LayerSpec::Tanh])),
        ("maxpool2", arch(&[2, 4, 6], vec![LayerSpec::MaxPool2])),
        ("global_avg_pool", arch(&[3, 4, 4], vec![LayerSpec::GlobalAvgPool])),
        ("batchnorm_spatial", arch(&[3, 3, 3], vec![LayerSpec::batchnorm()])),
        ("batchnorm_dense", arch(&[5], vec![LayerSpec::batchnorm()])),
        ("dropout", arch(&[12], vec![LayerSpec::Dropout { p: 0.4 }])),
        ("softmax", arch(&[6], vec![LayerSpec::Softmax])),
        ("reshape", arch(&[12], vec![LayerSpec::Reshape { dims: vec![3, 2, 2] }, LayerSpec::conv3x3(1)])),
    ]
}

/// Values spread over [-2, 2] with no two closer than the finite-difference
/// step, so max and relu kinks are never straddled.
pub fn spread_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        grid.swap(i, rng.random_range(0..=i));
    }
    grid.iter().map(|v| if v.abs() < 0.01 { v + 0.02 } else { *v }).collect()
}

pub fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Max relative error of the analytic gradient of a random linear readout,
/// over parameters and input entries.
pub fn check_architecture(a: &Architecture, batch: usize, seed: u64) -> Result<f64, NnError> {
    let mut net = Network::<f64>::new(a, seed)?;
    assert!(net.param_count() <= MAX_PARAMS, "{} parameters", net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![batch];
    dims.extend_from_slice(&a.input);
    let len: usize = dims.iter().product();
    let input = Tensor::from_f64(&dims, &spread_values(len, &mut rng))?;
    let out_len = batch * net.output_shape().iter().product::<usize>();
    let loss = CheckLoss::Linear(random_weights(out_len, &mut rng));
    let mut probe = NetworkProbe::new(&mut net, input, loss, true);
    Ok(check_target(&mut probe, EPSILON)?.max_relative_error)
}

/// Classification check with softmax cross-entropy on the network's logits.
pub fn check_classifier(a: &Architecture, batch: usize, classes: usize, seed: u64) -> Result<f64, NnError> {
    let mut net = Network::<f64>::new(a, seed)?;
    assert!(net.param_count() <= MAX_PARAMS, "{} parameters", net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let mut dims = vec![batch];
    dims.extend_from_slice(&a.input);
    let len: usize = dims.iter().product();
    let input = Tensor::from_f64(&dims, &spread_values(len, &mut rng))?;
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let mut probe = NetworkProbe::new(&mut net, input, CheckLoss::SoftmaxCrossEntropy(labels), false);
    Ok(check_target(&mut probe, EPSILON)?.max_relative_error)
}

/// Wraps a target and flips the sign of its analytic gradient, standing in
/// for a broken backward pass.
pub struct Corrupted<G> {
    pub inner: G,
}

impl<G: GradTarget> GradTarget for Corrupted<G> {
    fn num_params(&mut self) -> usize {
        self.inner.num_params()
    }
    fn param(&mut self, i: usize) -> f64 {
        self.inner.param(i)
    }
    fn set_param(&mut self, i: usize, v: f64) {
        self.inner.set_param(i, v)
    }
    fn loss(&mut self) -> Result<f64, NnError> {
        self.inner.loss()
    }
    fn same_pattern(&mut self) -> bool {
        self.inner.same_pattern()
    }
    fn loss_and_gradient(&mut self) -> Result<(f64, Vec<f64>), NnError> {
        let (l, g) = self.inner.loss_and_gradient()?;
        Ok((l, g.into_iter().map(|v| -v).collect()))
    }
}

/// Error reported for `a` when its gradient is sign-flipped.
pub fn corrupted_error(a: &Architecture, seed: u64) -> Result<f64, NnError> {
    let mut net = Network::<f64>::new(a, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![2];
    dims.extend_from_slice(&a.input);
    let len: usize = dims.iter().product();
    let input = Tensor::from_f64(&dims, &spread_values(len, &mut rng))?;
    let out_len = 2 * net.output_shape().iter().product::<usize>();
    let loss = CheckLoss::Linear(random_weights(out_len, &mut rng));
    let probe = NetworkProbe::new(&mut net, input, loss, true);
    let mut bad = Corrupted { inner: probe };
    Ok(check_target(&mut bad, EPSILON)?.max_relative_error)
}

/// Binary check with cross-entropy on a sigmoid output.
pub fn check_binary(a: &Architecture, batch: usize, seed: u64) -> Result<f64, NnError> {
    let mut net = Network::<f64>::new(a, seed)?;
    assert!(net.param_count() <= MAX_PARAMS, "{} parameters", net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1);
    let mut dims = vec![batch];
    dims.extend_from_slice(&a.input);
    let len: usize = dims.iter().product();
    let input = Tensor::from_f64(&dims, &spread_values(len, &mut rng))?;
    let targets: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    let mut probe = NetworkProbe::new(&mut net, input, CheckLoss::BinaryCrossEntropy(targets), true);
    Ok(check_target(&mut probe, EPSILON)?.max_relative_error)
}

/// Detector-shaped classifier (conv/bn/relu/pool blocks, global pooling,
/// two logits) at reduced width and resolution.
pub fn small_classifier(side: usize, widths: [usize; 3]) -> Architecture {
    let mut layers = Vec::new();
    for c in widths {
        layers.extend([LayerSpec::conv3x3(c), LayerSpec::batchnorm(), LayerSpec::Relu, LayerSpec::MaxPool2]);
    }
    layers.extend([LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }]);
    arch(&[1, side, side], layers)
}
