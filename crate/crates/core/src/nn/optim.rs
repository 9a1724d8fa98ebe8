//! RMSProp (with heavy-ball momentum and stepped exponential decay) and
//! Adam, configured by default with the detector and GAN training settings.

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::tensor::{Real, Tensor};

/// `lr(step) = max(floor, initial * decay_factor^floor(step / decay_every))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, floor: lr, decay_factor: 1.0, decay_every: 1 }
    }

    pub fn at(&self, step: u64) -> f64 {
        let k = step / self.decay_every.max(1);
        let lr = self.initial * self.decay_factor.powi(k.min(i32::MAX as u64) as i32);
        lr.max(self.floor).min(self.initial)
    }
}

impl Default for LrSchedule {
    /// RMSProp schedule: 0.01 decaying by 0.94 every 200 steps, floored at 1e-4.
    fn default() -> Self {
        Self { initial: 0.01, floor: 0.0001, decay_factor: 0.94, decay_every: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// `v = rho v + (1 - rho) g^2; m = momentum m + lr g / (sqrt(v) + eps); p -= m`
    Rmsprop { rho: f64, momentum: f64, eps: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop { rho: 0.9, momentum: 0.9, eps: 1e-10 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
}

impl OptimizerConfig {
    pub fn rmsprop() -> Self {
        Self { kind: OptimizerKind::rmsprop(), schedule: LrSchedule::default() }
    }

    pub fn adam() -> Self {
        Self { kind: OptimizerKind::adam(), schedule: LrSchedule::constant(0.0002) }
    }
}

/// Per-parameter accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f32> {
    pub config: OptimizerConfig,
    /// Second-moment accumulator per parameter tensor.
    pub second: Vec<Tensor<T>>,
    /// Momentum (RMSProp) or first moment (Adam) per parameter tensor.
    pub first: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, second: Vec::new(), first: Vec::new(), step: 0 }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.config.schedule.at(self.step)
    }

    /// Applies one update from the gradients currently held by `net`.
    pub fn step(&mut self, net: &mut Network<T>) {
        let lr = self.current_lr();
        let mut params = net.params();
        if self.second.len() != params.len() {
            self.second = params.iter().map(|p| Tensor::zeros(p.value.dims())).collect();
            self.first = params.iter().map(|p| Tensor::zeros(p.value.dims())).collect();
        }
        match self.config.kind {
            OptimizerKind::Rmsprop { rho, momentum, eps } => {
                for ((p, v), m) in params.iter_mut().zip(&mut self.second).zip(&mut self.first) {
                    let it = p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()).zip(m.data_mut());
                    for (((w, &g), v), m) in it {
                        let g = g.f64();
                        let vn = rho * v.f64() + (1.0 - rho) * g * g;
                        let mn = momentum * m.f64() + lr * g / (vn.sqrt() + eps);
                        *v = T::of(vn);
                        *m = T::of(mn);
                        *w = T::of(w.f64() - mn);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, v), m) in params.iter_mut().zip(&mut self.second).zip(&mut self.first) {
                    let it = p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()).zip(m.data_mut());
                    for (((w, &g), v), m) in it {
                        let g = g.f64();
                        let mn = beta1 * m.f64() + (1.0 - beta1) * g;
                        let vn = beta2 * v.f64() + (1.0 - beta2) * g * g;
                        *m = T::of(mn);
                        *v = T::of(vn);
                        let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                        *w = T::of(w.f64() - update);
                    }
                }
            }
        }
        self.step += 1;
    }
}

/// Convenience wrappers matching the operation names used in the docs.
pub fn rmsprop_step<T: Real>(net: &mut Network<T>, opt: &mut OptimizerState<T>) {
    debug_assert!(matches!(opt.config.kind, OptimizerKind::Rmsprop { .. }));
    opt.step(net);
}

pub fn adam_step<T: Real>(net: &mut Network<T>, opt: &mut OptimizerState<T>) {
    debug_assert!(matches!(opt.config.kind, OptimizerKind::Adam { .. }));
    opt.step(net);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, LayerSpec, Mode};

    /// One-weight dense net: y = w x + b with x = 1.
    fn scalar_net() -> Network<f64> {
        let arch = Architecture { input: vec![1], layers: vec![LayerSpec::Dense { units: 1 }] };
        let mut net = Network::<f64>::new(&arch, 0).unwrap();
        for p in net.params() {
            p.value.fill(0.0);
        }
        net
    }

    fn set_grads(net: &mut Network<f64>, g: f64) {
        for p in net.params() {
            p.grad.fill(g);
        }
    }

    fn weight(net: &mut Network<f64>) -> f64 {
        net.params()[0].value.data()[0]
    }

    #[test]
    fn schedule_points() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 0.01);
        assert!((s.at(200) - 0.0094).abs() < 1e-15);
        assert_eq!(s.at(199), 0.01);
        assert_eq!(s.at(10_000_000), 0.0001);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        for cfg in [OptimizerConfig::rmsprop(), OptimizerConfig::adam()] {
            let mut net = scalar_net();
            let mut opt = OptimizerState::new(cfg);
            set_grads(&mut net, 0.0);
            opt.step(&mut net);
            assert_eq!(weight(&mut net), 0.0);
        }
    }

    #[test]
    fn rmsprop_two_steps_match_hand_recurrence() {
        let mut net = scalar_net();
        let mut opt = OptimizerState::new(OptimizerConfig::rmsprop());
        let (rho, mu, eps, lr) = (0.9f64, 0.9f64, 1e-10f64, 0.01f64);
        let (mut v, mut m, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..2 {
            set_grads(&mut net, 1.0);
            rmsprop_step(&mut net, &mut opt);
            v = rho * v + (1.0 - rho);
            m = mu * m + lr / (v.sqrt() + eps);
            w -= m;
        }
        // v1 = 0.1, m1 = 0.0316228; v2 = 0.19, m2 = 0.0514021
        assert!((w - (-0.08302494)).abs() < 1e-7);
        assert!((weight(&mut net) - w).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut net = scalar_net();
        let mut opt = OptimizerState::new(OptimizerConfig::adam());
        set_grads(&mut net, 1.0);
        adam_step(&mut net, &mut opt);
        assert!((weight(&mut net) + 0.0002).abs() < 1e-11);
        set_grads(&mut net, 1.0);
        adam_step(&mut net, &mut opt);
        // m after two unit gradients with beta1 = 0.5: 0.5 * 0.5 + 0.5 = 0.75
        assert!((opt.first[0].data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn lr_stays_within_bounds() {
        let mut net = scalar_net();
        let mut opt = OptimizerState::new(OptimizerConfig {
            kind: OptimizerKind::rmsprop(),
            schedule: LrSchedule { decay_every: 1, ..LrSchedule::default() },
        });
        for _ in 0..200 {
            let lr = opt.current_lr();
            assert!((0.0001..=0.01).contains(&lr));
            let x = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
            net.forward(&x, Mode::Train).unwrap();
            set_grads(&mut net, 0.5);
            opt.step(&mut net);
        }
    }
}
