//! A small sequential neural-network engine: tensors, layers, losses,
//! optimizers and finite-difference gradient checking.
//!
//! Layouts are row-major; image batches are `[N, C, H, W]`. Networks are
//! generic over the scalar type so the same forward/backward code can be
//! verified in `f64` and trained in `f32`.

mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod tensor;

use thiserror::Error;

pub use gradcheck::{check_target, gradient_check, relative_error, CheckLoss, GradCheckReport, GradTarget, NetworkProbe, MIN_STEP_FRACTION};
pub use layers::{LayerSpec, Param};
pub use loss::{binary_cross_entropy, softmax, softmax_cross_entropy};
pub use network::{Architecture, Mode, Network, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use optim::{adam_step, rmsprop_step, LrSchedule, OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward called without a training-mode forward")]
    BackwardWithoutForward,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("weight file: {0}")]
    Weights(String),
    #[error("i/o error on {0}: {1}")]
    Io(String, std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(input: &[usize], layers: Vec<LayerSpec>) -> Architecture {
        Architecture { input: input.to_vec(), layers }
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = Network::<f32>::new(&arch(&[3], vec![LayerSpec::Dense { units: 3 }]), 1).unwrap();
        {
            let mut p = net.params();
            let w = p[0].value.data_mut();
            w.fill(0.0);
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
            p[1].value.fill(0.0);
        }
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let y = net.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn softmax_layer_of_zero_logits_is_uniform() {
        let mut net = Network::<f32>::new(&arch(&[2], vec![LayerSpec::Softmax]), 0).unwrap();
        let y = net.forward(&Tensor::zeros(&[1, 2]), Mode::Infer).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn box_kernel_on_one_hot() {
        let spec = LayerSpec::Conv2d { out_channels: 1, kernel: 3, stride: 1, padding: 1 };
        let mut net = Network::<f32>::new(&arch(&[1, 5, 5], vec![spec]), 0).unwrap();
        {
            let mut p = net.params();
            p[0].value.fill(1.0);
            p[1].value.fill(0.0);
        }
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let y = net.forward(&x, Mode::Infer).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(y.data()[r * 5 + c], if inside { 1.0 } else { 0.0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut net = Network::<f32>::new(&arch(&[2], vec![LayerSpec::Dense { units: 2 }]), 0).unwrap();
        assert!(matches!(net.backward(&Tensor::zeros(&[1, 2])), Err(NnError::BackwardWithoutForward)));
        net.forward(&Tensor::zeros(&[1, 2]), Mode::Infer).unwrap();
        assert!(matches!(net.backward(&Tensor::zeros(&[1, 2])), Err(NnError::BackwardWithoutForward)));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let layers = vec![LayerSpec::conv3x3(2), LayerSpec::batchnorm(), LayerSpec::Relu, LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }];
        let mut net = Network::<f32>::new(&arch(&[1, 4, 4], layers), 3).unwrap();
        let x = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        net.backward(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(net.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn dense_gradient_matches_closed_form() {
        // Squared error L = 0.5 * |y - t|^2 so delta = y - t and dW = delta^T x.
        let mut net = Network::<f64>::new(&arch(&[3], vec![LayerSpec::Dense { units: 2 }]), 5).unwrap();
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, -1.0, 0.5, -0.5, 3.0]).unwrap();
        let t = [0.3, -0.7, 1.1, 0.0];
        let y = net.forward(&x, Mode::Train).unwrap();
        let delta: Vec<f64> = y.data().iter().zip(t).map(|(y, t)| y - t).collect();
        net.backward(&Tensor::from_f64(&[2, 2], &delta).unwrap()).unwrap();
        let params = net.params();
        for u in 0..2 {
            for f in 0..3 {
                let expect = delta[u] * x.data()[f] + delta[2 + u] * x.data()[3 + f];
                assert!((params[0].grad.data()[u * 3 + f] - expect).abs() < 1e-12);
            }
            assert!((params[1].grad.data()[u] - (delta[u] + delta[2 + u])).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut net = Network::<f32>::new(&arch(&[3, 4, 4], vec![LayerSpec::batchnorm()]), 0).unwrap();
        let x = Tensor::from_vec(&[4, 3, 4, 4], (0..192).map(|i| ((i * 7919) % 101) as f32 / 10.0 - 5.0).collect()).unwrap();
        let y = net.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn weights_round_trip_and_reject_mismatch() {
        let a = arch(&[1, 8, 8], vec![LayerSpec::conv3x3(2), LayerSpec::batchnorm(), LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }]);
        let net = Network::<f32>::new(&a, 11).unwrap();
        let bytes = net.weights_bytes();
        assert_eq!(&bytes[..4], WEIGHTS_MAGIC);
        let mut other = Network::<f32>::new(&a, 12).unwrap();
        other.load_weights_bytes(&bytes).unwrap();
        assert_eq!(other.weights_bytes(), bytes);

        let b = arch(&[1, 8, 8], vec![LayerSpec::conv3x3(3), LayerSpec::batchnorm(), LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }]);
        let mut wrong = Network::<f32>::new(&b, 0).unwrap();
        assert!(wrong.load_weights_bytes(&bytes).is_err());
        assert!(other.load_weights_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let spec = LayerSpec::ConvTranspose2d { out_channels: 3, kernel: 4, stride: 2, padding: 1 };
        let mut net = Network::<f32>::new(&arch(&[2, 4, 4], vec![spec]), 0).unwrap();
        assert_eq!(net.output_shape(), &[3, 8, 8]);
        let y = net.forward(&Tensor::zeros(&[1, 2, 4, 4]), Mode::Infer).unwrap();
        assert_eq!(y.dims(), &[1, 3, 8, 8]);
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut net = Network::<f32>::new(&arch(&[3], vec![LayerSpec::Dense { units: 2 }]), 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 4]), Mode::Infer), Err(NnError::Shape(_))));
    }
}
