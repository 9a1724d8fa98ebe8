//! Whole-image altered/valid classifier and its alteration score.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{center_square, load_image, quantize, GrayImage, ImageError};
use crate::nn::{
    softmax, softmax_cross_entropy, Architecture, LayerSpec, Mode, Network, NnError, OptimizerConfig, OptimizerState,
    Tensor,
};
use crate::synth::{DatasetManifest, Label};

/// Step count of the reference training schedule; desk runs use fewer.
pub const REFERENCE_ITERATIONS: u64 = 25_000;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training data must contain both classes")]
    SingleClass,
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("non-finite training loss at step {0}")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model metadata: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub mirror_prob: f64,
    pub max_rotation_deg: f64,
    /// Fraction of the image area kept by the random crop.
    pub crop_scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { mirror_prob: 0.5, max_rotation_deg: 15.0, crop_scale: 0.9 }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { mirror_prob: 0.0, max_rotation_deg: 0.0, crop_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub architecture: Vec<LayerSpec>,
    pub batch_size: usize,
    pub iterations: u64,
    pub augmentation: AugmentParams,
    pub optimizer: OptimizerConfig,
    /// Alternate classes within each batch instead of walking the whole set,
    /// for class-imbalanced data.
    pub balanced_batches: bool,
    /// Forward-only batches after training that refresh batchnorm running
    /// statistics on unaugmented inputs.
    pub recalibration_batches: u64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            architecture: default_architecture(),
            batch_size: 32,
            iterations: 2000,
            augmentation: AugmentParams::default(),
            optimizer: OptimizerConfig::rmsprop(),
            balanced_batches: false,
            recalibration_batches: 50,
            seed: 0,
        }
    }
}

/// conv3x3-16/32/64, each followed by batchnorm, relu and 2x2 max pooling,
/// then global average pooling and a two-way dense layer.
pub fn default_architecture() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for c in [16, 32, 64] {
        layers.extend([LayerSpec::conv3x3(c), LayerSpec::batchnorm(), LayerSpec::Relu, LayerSpec::MaxPool2]);
    }
    layers.extend([LayerSpec::GlobalAvgPool, LayerSpec::Dense { units: 2 }]);
    layers
}

impl DetectorConfig {
    pub fn network_architecture(&self) -> Architecture {
        Architecture { input: vec![1, self.input_size, self.input_size], layers: self.architecture.clone() }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.input_size < 8 {
            return Err(DetectorError::Config("input size below 8".into()));
        }
        if self.batch_size == 0 {
            return Err(DetectorError::Config("batch size must be positive".into()));
        }
        if !matches!(self.architecture.last(), Some(LayerSpec::Dense { units: 2 })) {
            return Err(DetectorError::Config("final layer must be a dense layer of width 2".into()));
        }
        let a = self.augmentation;
        if !(0.0..=1.0).contains(&a.mirror_prob) || !(a.crop_scale > 0.0 && a.crop_scale <= 1.0) || !(a.max_rotation_deg >= 0.0) {
            return Err(DetectorError::Config("augmentation parameters out of range".into()));
        }
        Ok(())
    }
}

/// Random mirror, rotation about the centre, crop of `crop_scale` of the
/// area, and resize to `size x size`, done as a single bilinear resampling.
/// With identity parameters this equals a plain resize.
pub fn augment(image: &GrayImage, params: &AugmentParams, size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mirror = rng.random::<f64>() < params.mirror_prob;
    let angle = if params.max_rotation_deg > 0.0 {
        rng.random_range(-params.max_rotation_deg..=params.max_rotation_deg)
    } else {
        0.0
    };
    let side = params.crop_scale.sqrt();
    let (cw, ch) = (w * side, h * side);
    let ox = if w - cw > 0.0 { rng.random_range(0.0..=(w - cw)) } else { 0.0 };
    let oy = if h - ch > 0.0 { rng.random_range(0.0..=(h - ch)) } else { 0.0 };
    let (sx, sy) = (cw / size as f64, ch / size as f64);
    let (sin, cos) = angle.to_radians().sin_cos();
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    GrayImage::from_fn(size, size, |u, v| {
        let px = ox + (u as f64 + 0.5) * sx - 0.5;
        let py = oy + (v as f64 + 0.5) * sy - 0.5;
        let (dx, dy) = (px - cx, py - cy);
        let (mut qx, qy) = (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy);
        if mirror {
            qx = w - 1.0 - qx;
        }
        // half a pixel of slack is clamped, as in a plain resize
        if qx < -0.5 || qy < -0.5 || qx > w - 0.5 || qy > h - 0.5 {
            return 255;
        }
        let qx = qx.clamp(0.0, w - 1.0);
        let qy = qy.clamp(0.0, h - 1.0);
        quantize(image.sample_bilinear(qx, qy).expect("clamped inside"))
    })
}

/// Intensities mapped to [-1, 1].
pub fn to_input(image: &GrayImage) -> Vec<f32> {
    image.pixels().iter().map(|&p| p as f32 / 127.5 - 1.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// One training example; `id` is what the training trace records.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub id: String,
    pub image: GrayImage,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub config: DetectorConfig,
    pub network: Network<f32>,
    /// One row per iteration.
    pub log: Vec<LogRow>,
    /// Ids of the images the model was trained on, in input order.
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: DetectorConfig,
    architecture: Architecture,
    trace: Vec<String>,
}

impl TrainedDetector {
    /// Freshly initialized model (no training).
    pub fn untrained(config: &DetectorConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        let network = Network::new(&config.network_architecture(), config.seed)?;
        Ok(Self { config: config.clone(), network, log: Vec::new(), trace: Vec::new() })
    }

    /// Altered-class probabilities for a list of images, in batches.
    pub fn scores(&mut self, images: &[GrayImage]) -> Result<Vec<f64>, DetectorError> {
        let size = self.config.input_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * size * size);
            for img in chunk {
                data.extend(to_input(&prepare(img, size)));
            }
            let x = Tensor::from_vec(&[chunk.len(), 1, size, size], data)?;
            let logits = self.network.forward(&x, Mode::Infer)?;
            let p = softmax(&logits);
            out.extend(p.data().chunks_exact(2).map(|r| r[Label::Altered.index()] as f64));
        }
        Ok(out)
    }

    pub fn training_log_csv(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "# iterations {} (desk schedule; reference schedule {} steps)",
            self.config.iterations, REFERENCE_ITERATIONS
        )
        .expect("string write");
        s.push_str("step,loss,lr\n");
        for r in &self.log {
            writeln!(s, "{},{},{}", r.step, r.loss, r.lr).expect("string write");
        }
        s
    }

    /// Writes the weight file and a `<path>.json` sidecar with the config,
    /// architecture and training trace.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let path = path.as_ref();
        self.network.save_weights(path)?;
        let meta = ModelMeta {
            config: self.config.clone(),
            architecture: self.network.architecture().clone(),
            trace: self.trace.clone(),
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| DetectorError::Io { path: side.display().to_string(), source: e })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| DetectorError::Io { path: side.display().to_string(), source: e })?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        let mut network = Network::new(&meta.architecture, meta.config.seed)?;
        network.load_weights(path)?;
        Ok(Self { config: meta.config, network, log: Vec::new(), trace: meta.trace })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Square crop and resize used for inference.
pub fn prepare(image: &GrayImage, size: usize) -> GrayImage {
    let sq = if image.width() == image.height() { image.clone() } else { center_square(image) };
    crate::image::resize(&sq, size, size)
}

/// Softmax probability of the altered class.
pub fn alteration_score(model: &mut TrainedDetector, image: &GrayImage) -> Result<f64, DetectorError> {
    Ok(model.scores(std::slice::from_ref(image))?[0])
}

/// Mini-batch RMSProp training with augmentation. Batches walk seeded
/// permutations of the training set.
pub fn train_classifier(data: &[TrainingImage], config: &DetectorConfig) -> Result<TrainedDetector, DetectorError> {
    config.validate()?;
    let has = |l: Label| data.iter().any(|d| d.label == l);
    if !has(Label::Valid) || !has(Label::Altered) {
        return Err(DetectorError::SingleClass);
    }
    let mut model = TrainedDetector::untrained(config)?;
    model.trace = data.iter().map(|d| d.id.clone()).collect();
    // squares once, so augmentation crops are isotropic
    let squares: Vec<GrayImage> =
        data.iter().map(|d| if d.image.width() == d.image.height() { d.image.clone() } else { center_square(&d.image) }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut opt = OptimizerState::new(config.optimizer);
    let size = config.input_size;
    let mut sampler = if config.balanced_batches {
        let of = |l: Label| (0..data.len()).filter(|&i| data[i].label == l).collect();
        Sampler::new(vec![of(Label::Valid), of(Label::Altered)])
    } else {
        Sampler::new(vec![(0..data.len()).collect()])
    };
    for step in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size * size * size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for slot in 0..config.batch_size {
            let i = sampler.next(slot, &mut rng);
            batch.extend(to_input(&augment(&squares[i], &config.augmentation, size, &mut rng)));
            labels.push(data[i].label.index());
        }
        let x = Tensor::from_vec(&[labels.len(), 1, size, size], batch)?;
        let lr = opt.current_lr();
        model.network.zero_grads();
        let logits = model.network.forward(&x, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(DetectorError::NonFiniteLoss(step));
        }
        model.network.backward_params(&grad)?;
        opt.step(&mut model.network);
        model.log.push(LogRow { step, loss, lr });
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4} lr {lr:.5}");
        }
    }
    // batchnorm running statistics lag the weights and see only augmented
    // inputs; re-estimate them on plain inputs with the weights frozen
    for _ in 0..config.recalibration_batches {
        let mut batch = Vec::with_capacity(config.batch_size * size * size);
        for slot in 0..config.batch_size {
            batch.extend(to_input(&prepare(&squares[sampler.next(slot, &mut rng)], size)));
        }
        let x = Tensor::from_vec(&[config.batch_size, 1, size, size], batch)?;
        model.network.forward(&x, Mode::Train)?;
    }
    Ok(model)
}

/// Walks seeded permutations of one or more index pools; batch slot `k`
/// draws from pool `k mod pools`.
struct Sampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl Sampler {
    fn new(pools: Vec<Vec<usize>>) -> Self {
        let cursors = pools.iter().map(Vec::len).collect();
        Self { pools, cursors }
    }

    fn next(&mut self, slot: usize, rng: &mut ChaCha8Rng) -> usize {
        let p = slot % self.pools.len();
        let pool = &mut self.pools[p];
        if self.cursors[p] == pool.len() {
            for i in (1..pool.len()).rev() {
                let j = rng.random_range(0..=i);
                pool.swap(i, j);
            }
            self.cursors[p] = 0;
        }
        self.cursors[p] += 1;
        pool[self.cursors[p] - 1]
    }
}

/// Loads the images of the given manifest entries.
pub fn load_entries(
    manifest: &DatasetManifest,
    base: &Path,
    indices: &[usize],
) -> Result<Vec<TrainingImage>, DetectorError> {
    indices
        .iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            Ok(TrainingImage { id: e.image_path.clone(), image: load_image(base.join(&e.image_path))?, label: e.label })
        })
        .collect()
}

/// Trains on every entry whose fold differs from `fold`.
pub fn train_detector(
    manifest: &DatasetManifest,
    base: &Path,
    assignment: &[usize],
    fold: usize,
    config: &DetectorConfig,
) -> Result<TrainedDetector, DetectorError> {
    let train: Vec<usize> = (0..manifest.entries.len()).filter(|&i| assignment[i] != fold).collect();
    train_classifier(&load_entries(manifest, base, &train)?, config)
}
