use altprint_core::detector::{train_classifier, DetectorConfig, TrainingImage};
use altprint_core::image::GrayImage;
use altprint_core::nn::{
    adam_step, rmsprop_step, softmax, softmax_cross_entropy, Architecture, LayerSpec, LrSchedule, Mode, Network, OptimizerConfig,
    OptimizerState, Tensor,
};
use altprint_core::synth::Label;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn separable_toy_set_trains_below_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < 64 {
        let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let side = x + 0.5 * y;
        if side.abs() < 0.2 {
            continue;
        }
        xs.extend([x, y]);
        labels.push(usize::from(side > 0.0));
    }
    let input = Tensor::<f32>::from_f64(&[64, 2], &xs).unwrap();
    let arch = Architecture { input: vec![2], layers: vec![LayerSpec::Dense { units: 8 }, LayerSpec::Relu, LayerSpec::Dense { units: 2 }] };
    let mut net = Network::<f32>::new(&arch, 1).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::rmsprop());
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        net.zero_grads();
        let out = net.forward(&input, Mode::Train).unwrap();
        let (loss, g) = softmax_cross_entropy(&out, &labels).unwrap();
        last = loss;
        if loss < 0.01 {
            break;
        }
        net.backward_params(&g).unwrap();
        rmsprop_step(&mut net, &mut opt);
    }
    assert!(last < 0.01, "loss {last}");
}

fn scalar_net() -> Network<f64> {
    let arch = Architecture { input: vec![1], layers: vec![LayerSpec::Dense { units: 1 }] };
    Network::<f64>::new(&arch, 0).unwrap()
}

fn set_unit_grads(net: &mut Network<f64>) {
    for p in net.params() {
        p.grad.fill(1.0);
    }
}

#[test]
fn adam_first_moment_after_two_steps() {
    let mut net = scalar_net();
    let w0 = net.params()[0].value.data()[0];
    let mut opt = OptimizerState::new(OptimizerConfig::adam());
    set_unit_grads(&mut net);
    adam_step(&mut net, &mut opt);
    // bias-corrected m / sqrt(v) is exactly 1 on the first step
    let w1 = net.params()[0].value.data()[0];
    assert!((w0 - w1 - 0.0002 / (1.0 + 1e-8)).abs() < 1e-15);
    set_unit_grads(&mut net);
    adam_step(&mut net, &mut opt);
    assert!((opt.first[0].data()[0] - 0.75).abs() < 1e-15);
}

#[test]
fn rmsprop_hand_iteration() {
    let mut net = scalar_net();
    let w0 = net.params()[0].value.data()[0];
    let mut opt = OptimizerState::new(OptimizerConfig { schedule: LrSchedule::constant(0.01), ..OptimizerConfig::rmsprop() });
    let (rho, mu, eps, lr) = (0.9f64, 0.9f64, 1e-10f64, 0.01f64);
    let (mut v, mut m, mut w) = (0.0f64, 0.0f64, w0);
    for _ in 0..2 {
        set_unit_grads(&mut net);
        rmsprop_step(&mut net, &mut opt);
        v = rho * v + (1.0 - rho);
        m = mu * m + lr / (v.sqrt() + eps);
        w -= m;
    }
    assert!((net.params()[0].value.data()[0] - w).abs() < 1e-12);
}

#[test]
fn lr_schedule_points() {
    let s = LrSchedule::default();
    assert_eq!(s.at(0), 0.01);
    assert!((s.at(200) - 0.0094).abs() < 1e-15);
    assert_eq!(s.at(1_000_000), 0.0001);
}

fn toy_images(n: usize) -> Vec<TrainingImage> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Valid } else { Label::Altered };
            let image = GrayImage::from_fn(24, 24, |x, y| if label == Label::Altered && x > 8 && x < 16 { 0 } else { ((x * 9 + y * 5 + i) % 200) as u8 });
            TrainingImage { id: format!("img{i}"), image, label }
        })
        .collect()
}

#[test]
fn training_is_bit_identical_across_runs() {
    let cfg = DetectorConfig { input_size: 16, batch_size: 4, iterations: 6, seed: 21, ..DetectorConfig::default() };
    let data = toy_images(8);
    let a = train_classifier(&data, &cfg).unwrap();
    let b = train_classifier(&data, &cfg).unwrap();
    assert_eq!(a.network.weights_bytes(), b.network.weights_bytes());
    assert_eq!(a.training_log_csv(), b.training_log_csv());
    let c = train_classifier(&data, &DetectorConfig { seed: 22, ..cfg }).unwrap();
    assert_ne!(a.network.weights_bytes(), c.network.weights_bytes());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = softmax(&Tensor::<f32>::from_f64(&[rows, cols], &v).unwrap());
        for row in p.data().chunks(cols) {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn batchnorm_standardizes_training_batches(n in 2usize..6, c in 1usize..4, seed in any::<u64>()) {
        let arch = Architecture { input: vec![c, 3, 3], layers: vec![LayerSpec::batchnorm()] };
        let mut net = Network::<f32>::new(&arch, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * c * 9).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = net.forward(&Tensor::from_f64(&[n, c, 3, 3], &v).unwrap(), Mode::Train).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| out.data()[(i * c + ch) * 9..(i * c + ch + 1) * 9].iter().map(|&x| x as f64)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
