use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{LayerSpec, Module, Param};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Magic bytes opening every weight file.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"ALTW";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Input shape (per sample) plus the ordered layer plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }
}

/// A sequential network over scalar type `T`.
pub struct Network<T: Real = f32> {
    arch: Architecture,
    seed: u64,
    layers: Vec<Box<dyn Module<T>>>,
    shapes: Vec<Vec<usize>>,
    trained_forward: bool,
}

impl<T: Real> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network").field("arch", &self.arch).field("seed", &self.seed).finish()
    }
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        self.cast()
    }
}

impl<T: Real> Network<T> {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self, NnError> {
        if arch.input.is_empty() || arch.layers.is_empty() {
            return Err(NnError::Shape("architecture needs an input shape and at least one layer".into()));
        }
        let mut shape = arch.input.clone();
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut shapes = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let layer_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            let (layer, out) = spec.build::<T>(&shape, layer_seed)?;
            layers.push(layer);
            shapes.push(out.clone());
            shape = out;
        }
        Ok(Self { arch: arch.clone(), seed, layers, shapes, trained_forward: false })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-sample output dims.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("nonempty network")
    }

    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        if batch.dims().len() != self.arch.input.len() + 1 || batch.dims()[1..] != self.arch.input[..] || batch.batch() == 0 {
            return Err(NnError::Shape(format!(
                "batch {:?} does not match network input [N, {:?}]",
                batch.dims(),
                self.arch.input
            )));
        }
        let train = mode == Mode::Train;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            x = layer.forward(x, train)?;
            if cfg!(debug_assertions) && !x.all_finite() {
                return Err(NnError::NonFinite(format!("forward output of layer {i} ({:?})", self.arch.layers[i])));
            }
        }
        self.trained_forward = train;
        Ok(x)
    }

    /// Backpropagates `loss_grad` (same shape as the last forward output),
    /// accumulating into every parameter gradient, and returns the gradient
    /// with respect to the network input.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.backward_impl(loss_grad, true)
    }

    /// Like [`Network::backward`] but skips the input gradient of the first
    /// layer; use when only parameter gradients are needed.
    pub fn backward_params(&mut self, loss_grad: &Tensor<T>) -> Result<(), NnError> {
        self.backward_impl(loss_grad, false).map(|_| ())
    }

    fn backward_impl(&mut self, loss_grad: &Tensor<T>, input_grad: bool) -> Result<Tensor<T>, NnError> {
        if !self.trained_forward {
            return Err(NnError::BackwardWithoutForward);
        }
        let mut g = loss_grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(g, input_grad || i > 0)?;
            if cfg!(debug_assertions) && !g.all_finite() {
                return Err(NnError::NonFinite(format!("backward output of layer {i} ({:?})", self.arch.layers[i])));
            }
        }
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params() {
            p.grad.fill(T::zero());
        }
    }

    /// Trainable parameters with their gradients, in layer order.
    pub fn params(&mut self) -> Vec<Param<'_, T>> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters and persistent buffers, grouped per layer.
    pub fn state(&self) -> Vec<Vec<&Tensor<T>>> {
        self.layers.iter().map(|l| l.state()).collect()
    }

    pub fn load_state(&mut self, state: &[Vec<Tensor<T>>]) -> Result<(), NnError> {
        if state.len() != self.layers.len() {
            return Err(NnError::Weights(format!("expected {} layers, got {}", self.layers.len(), state.len())));
        }
        for (i, (layer, tensors)) in self.layers.iter_mut().zip(state).enumerate() {
            let mut slots = layer.state_mut();
            if slots.len() != tensors.len() {
                return Err(NnError::Weights(format!("layer {i}: expected {} tensors, got {}", slots.len(), tensors.len())));
            }
            for (slot, t) in slots.iter_mut().zip(tensors) {
                if slot.dims() != t.dims() {
                    return Err(NnError::Weights(format!("layer {i}: dims {:?} vs {:?}", slot.dims(), t.dims())));
                }
                **slot = t.clone();
            }
        }
        Ok(())
    }

    /// Rebuilds the network in another precision with identical state.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::new(&self.arch, self.seed).expect("architecture already validated");
        let state: Vec<Vec<Tensor<U>>> = self.state().iter().map(|l| l.iter().map(|t| t.cast()).collect()).collect();
        out.load_state(&state).expect("identical architecture");
        out
    }

    /// Relu signs and max-pool winners of the last training forward.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.activation_pattern(&mut out));
        out
    }

    /// Makes dropout reuse its last mask; used for finite-difference checks.
    pub fn set_frozen_noise(&mut self, frozen: bool) {
        self.layers.iter_mut().for_each(|l| l.set_frozen_noise(frozen));
    }

    /// Serializes state in the `ALTW` format: magic, u16 version, u32 layer
    /// count, then per layer a kind tag (u8), u32 tensor count and each
    /// tensor as u32 rank, u32 dims and little-endian f32 values.
    pub fn weights_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (spec, tensors) in self.arch.layers.iter().zip(self.state()) {
            out.push(spec.tag());
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in tensors {
                out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
                for &d in t.dims() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn load_weights_bytes(&mut self, bytes: &[u8]) -> Result<(), NnError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(NnError::Weights("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != WEIGHTS_VERSION {
            return Err(NnError::Weights(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if count != self.layers.len() {
            return Err(NnError::Weights(format!("file has {count} layers, network has {}", self.layers.len())));
        }
        let mut state = Vec::with_capacity(count);
        for spec in &self.arch.layers {
            let [tag] = read_array::<1>(&mut r)?;
            if tag != spec.tag() {
                return Err(NnError::Weights(format!("layer kind tag {tag} does not match {spec:?}")));
            }
            let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let mut tensors = Vec::with_capacity(n);
            for _ in 0..n {
                let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
                let dims = (0..rank)
                    .map(|_| read_array(&mut r).map(|b| u32::from_le_bytes(b) as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                let len: usize = dims.iter().product();
                let data = (0..len)
                    .map(|_| read_array(&mut r).map(|b| T::of(f32::from_le_bytes(b) as f64)))
                    .collect::<Result<Vec<_>, _>>()?;
                tensors.push(Tensor::from_vec(&dims, data)?);
            }
            state.push(tensors);
        }
        if !r.is_empty() {
            return Err(NnError::Weights("trailing bytes".into()));
        }
        self.load_state(&state)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| NnError::Io(path.display().to_string(), e))?;
        f.write_all(&self.weights_bytes()).map_err(|e| NnError::Io(path.display().to_string(), e))
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NnError::Io(path.display().to_string(), e))?;
        self.load_weights_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), NnError> {
    r.read_exact(buf).map_err(|_| NnError::Weights("truncated weight file".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], NnError> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}
