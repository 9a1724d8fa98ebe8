//! Central finite-difference verification of analytic gradients.

use super::loss::{binary_cross_entropy, softmax_cross_entropy};
use super::network::{Mode, Network};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Anything with a flat parameter vector, a scalar loss and an analytic
/// gradient of that loss.
pub trait GradTarget {
    fn num_params(&mut self) -> usize;
    fn param(&mut self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    fn loss(&mut self) -> Result<f64, NnError>;
    fn loss_and_gradient(&mut self) -> Result<(f64, Vec<f64>), NnError>;

    /// Whether the last [`GradTarget::loss`] evaluation stayed on the same
    /// side of every non-differentiable point as the last
    /// [`GradTarget::loss_and_gradient`].
    fn same_pattern(&mut self) -> bool {
        true
    }
}

/// Scalar objective placed on a network's output for checking.
#[derive(Debug, Clone)]
pub enum CheckLoss {
    SoftmaxCrossEntropy(Vec<usize>),
    BinaryCrossEntropy(Vec<f64>),
    /// `sum_i w_i * y_i`; exercises arbitrary output shapes.
    Linear(Vec<f64>),
}

impl CheckLoss {
    fn eval<T: Real>(&self, out: &Tensor<T>) -> Result<(f64, Tensor<T>), NnError> {
        match self {
            CheckLoss::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(out, labels),
            CheckLoss::BinaryCrossEntropy(targets) => binary_cross_entropy(out, targets),
            CheckLoss::Linear(w) => {
                if w.len() != out.len() {
                    return Err(NnError::Shape(format!("{} weights for output {:?}", w.len(), out.dims())));
                }
                let loss = out.data().iter().zip(w).map(|(y, w)| y.f64() * w).sum();
                Ok((loss, Tensor::from_f64(out.dims(), w)?))
            }
        }
    }
}

/// Wraps a network, a fixed input batch and a loss as a [`GradTarget`].
/// Parameters come first (layer order), followed by the input entries when
/// `include_input` is set.
pub struct NetworkProbe<'a, T: Real> {
    net: &'a mut Network<T>,
    input: Tensor<T>,
    loss: CheckLoss,
    include_input: bool,
    /// Cumulative starts of each parameter tensor in the flat vector.
    starts: Vec<usize>,
    total_params: usize,
    base_pattern: Vec<u8>,
    same: bool,
}

impl<'a, T: Real> NetworkProbe<'a, T> {
    pub fn new(net: &'a mut Network<T>, input: Tensor<T>, loss: CheckLoss, include_input: bool) -> Self {
        net.set_frozen_noise(true);
        let mut starts = Vec::new();
        let mut total = 0;
        for p in net.params() {
            starts.push(total);
            total += p.value.len();
        }
        Self { net, input, loss, include_input, starts, total_params: total, base_pattern: Vec::new(), same: true }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let t = self.starts.partition_point(|&s| s <= i) - 1;
        (t, i - self.starts[t])
    }
}

impl<T: Real> GradTarget for NetworkProbe<'_, T> {
    fn num_params(&mut self) -> usize {
        self.total_params + if self.include_input { self.input.len() } else { 0 }
    }

    fn param(&mut self, i: usize) -> f64 {
        if i >= self.total_params {
            return self.input.data()[i - self.total_params].f64();
        }
        let (t, off) = self.locate(i);
        self.net.params()[t].value.data()[off].f64()
    }

    fn set_param(&mut self, i: usize, v: f64) {
        if i >= self.total_params {
            self.input.data_mut()[i - self.total_params] = T::of(v);
            return;
        }
        let (t, off) = self.locate(i);
        self.net.params()[t].value.data_mut()[off] = T::of(v);
    }

    fn loss(&mut self) -> Result<f64, NnError> {
        let out = self.net.forward(&self.input, Mode::Train)?;
        self.same = self.net.activation_pattern() == self.base_pattern;
        Ok(self.loss.eval(&out)?.0)
    }

    fn same_pattern(&mut self) -> bool {
        self.same
    }

    fn loss_and_gradient(&mut self) -> Result<(f64, Vec<f64>), NnError> {
        self.net.zero_grads();
        let out = self.net.forward(&self.input, Mode::Train)?;
        self.base_pattern = self.net.activation_pattern();
        let (loss, g) = self.loss.eval(&out)?;
        let dx = self.net.backward(&g)?;
        let mut grads: Vec<f64> = self.net.params().iter().flat_map(|p| p.grad.to_f64_vec()).collect();
        if self.include_input {
            grads.extend(dx.to_f64_vec());
        }
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
    pub checked: usize,
    /// Entries whose step had to shrink below `epsilon` to avoid a kink.
    pub reduced_steps: usize,
}

/// Smallest step, as a fraction of `epsilon`, tried when perturbations
/// keep crossing a kink.
pub const MIN_STEP_FRACTION: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-8)` for analytic `a` and numeric `n`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `target` against central differences
/// with step `epsilon`, over every parameter. Finite differences are only
/// meaningful where the loss is smooth over the step, so when either
/// perturbation flips a relu sign or a max-pool winner the step is quartered
/// (down to `epsilon * MIN_STEP_FRACTION`) until both stay on the base
/// point's side.
pub fn check_target(target: &mut dyn GradTarget, epsilon: f64) -> Result<GradCheckReport, NnError> {
    let (_, analytic) = target.loss_and_gradient()?;
    let n = target.num_params();
    if analytic.len() != n {
        return Err(NnError::Shape(format!("gradient has {} entries for {n} parameters", analytic.len())));
    }
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: 0, checked: n, reduced_steps: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = target.param(i);
        let mut h = epsilon;
        let numeric = loop {
            target.set_param(i, orig + h);
            let plus = target.loss()?;
            let plus_same = target.same_pattern();
            target.set_param(i, orig - h);
            let minus = target.loss()?;
            let minus_same = target.same_pattern();
            target.set_param(i, orig);
            if (plus_same && minus_same) || h / 4.0 < epsilon * MIN_STEP_FRACTION {
                break (plus - minus) / (2.0 * h);
            }
            h /= 4.0;
        };
        if h < epsilon {
            report.reduced_steps += 1;
        }
        let err = relative_error(a, numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = i;
        }
    }
    Ok(report)
}

/// Maximum relative error between backpropagated and finite-difference
/// gradients of the mean softmax cross-entropy, over all parameters and
/// input entries.
pub fn gradient_check<T: Real>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
) -> Result<f64, NnError> {
    let mut probe = NetworkProbe::new(net, input.clone(), CheckLoss::SoftmaxCrossEntropy(labels.to_vec()), true);
    Ok(check_target(&mut probe, epsilon)?.max_relative_error)
}
