//! Small DC-GAN for synthetic altered prints, plus quality comparisons of
//! generated and real image sets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::quality_score;
use crate::image::{center_square, quantize, resize, save_image, GrayImage, ImageError};
use crate::nn::{binary_cross_entropy, Architecture, LayerSpec, Mode, Network, NnError, OptimizerConfig, OptimizerState, Tensor};

/// Mean quality of generated, altered and valid prints in the reference study.
pub const REFERENCE_MEAN_QUALITY: ReferenceQuality = ReferenceQuality { synthetic: 11.0, altered: 27.0, valid: 46.0 };

#[derive(Debug, Error)]
pub enum GanError {
    #[error("need at least {needed} training images, got {got}")]
    TooFewImages { needed: usize, got: usize },
    #[error("invalid GAN config: {0}")]
    Config(String),
    #[error("non-finite {which} loss at iteration {iteration}")]
    NonFiniteLoss { which: &'static str, iteration: u64 },
    #[error("image set `{0}` is empty")]
    EmptySet(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub output_size: usize,
    /// Channel width multiplier `f`.
    pub base_width: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Generator updates.
    pub iterations: u64,
    pub generator_updates_per_discriminator_update: u64,
    /// Sample-grid period in iterations; 0 keeps only the final grid.
    pub sample_every: u64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            output_size: 64,
            base_width: 16,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(),
            iterations: 1350,
            generator_updates_per_discriminator_update: 2,
            sample_every: 250,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        if ![32, 64, 128, 256].contains(&self.output_size) {
            return Err(GanError::Config(format!("output size {} not in {{32, 64, 128, 256}}", self.output_size)));
        }
        if self.latent_dim == 0 || self.base_width == 0 || self.batch_size == 0 {
            return Err(GanError::Config("latent dim, base width and batch size must be positive".into()));
        }
        if self.generator_updates_per_discriminator_update == 0 {
            return Err(GanError::Config("generator updates per discriminator update must be positive".into()));
        }
        Ok(())
    }

    fn doublings(&self) -> usize {
        (self.output_size / 4).trailing_zeros() as usize
    }

    /// Dense projection to 4x4x8f, then stride-2 transposed convolutions
    /// halving the channels up to a single tanh channel.
    pub fn generator_architecture(&self) -> Architecture {
        let f = self.base_width;
        let n = self.doublings();
        let mut layers = vec![
            LayerSpec::Dense { units: 16 * 8 * f },
            LayerSpec::Reshape { dims: vec![8 * f, 4, 4] },
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
        ];
        for i in 0..n {
            let last = i + 1 == n;
            let out_channels = if last { 1 } else { ((8 * f) >> (i + 1)).max(1) };
            layers.push(LayerSpec::ConvTranspose2d { out_channels, kernel: 4, stride: 2, padding: 1 });
            if !last {
                layers.extend([LayerSpec::batchnorm(), LayerSpec::Relu]);
            }
        }
        layers.push(LayerSpec::Tanh);
        Architecture { input: vec![self.latent_dim], layers }
    }

    /// Stride-2 convolutions down to 4x4 with leaky relu (batchnorm after
    /// all but the first), then a dense sigmoid unit.
    pub fn discriminator_architecture(&self) -> Architecture {
        let f = self.base_width;
        let mut layers = Vec::new();
        for i in 0..self.doublings() {
            let out_channels = (f << i).min(8 * f);
            layers.push(LayerSpec::Conv2d { out_channels, kernel: 4, stride: 2, padding: 1 });
            if i > 0 {
                layers.push(LayerSpec::batchnorm());
            }
            layers.push(LayerSpec::LeakyRelu { alpha: 0.2 });
        }
        layers.extend([LayerSpec::Dense { units: 1 }, LayerSpec::Sigmoid]);
        Architecture { input: vec![1, self.output_size, self.output_size], layers }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub iteration: u64,
    /// Present on iterations with a discriminator update.
    pub d_loss: Option<f64>,
    pub g_loss: f64,
}

#[derive(Debug, Clone)]
pub struct GanModels {
    pub config: GanConfig,
    pub generator: Network<f32>,
    pub discriminator: Network<f32>,
    pub log: Vec<GanLogRow>,
    /// Fixed-noise sample mosaics keyed by iteration count.
    pub grids: Vec<(u64, GrayImage)>,
    pub generator_updates: u64,
    pub discriminator_updates: u64,
}

impl GanModels {
    pub fn untrained(config: &GanConfig) -> Result<Self, GanError> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            generator: Network::new(&config.generator_architecture(), config.seed)?,
            discriminator: Network::new(&config.discriminator_architecture(), config.seed.wrapping_add(1))?,
            log: Vec::new(),
            grids: Vec::new(),
            generator_updates: 0,
            discriminator_updates: 0,
        })
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,d_loss,g_loss\n");
        for r in &self.log {
            let d = r.d_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{}", r.iteration, d, r.g_loss).expect("string write");
        }
        s
    }

    /// Writes `generator.w`, `discriminator.w`, `gan.json`, `losses.csv` and
    /// `grid_<iteration>.png` files under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), GanError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| GanError::Io { path: dir.display().to_string(), source: e })?;
        self.generator.save_weights(dir.join("generator.w"))?;
        self.discriminator.save_weights(dir.join("discriminator.w"))?;
        write_text(&dir.join("gan.json"), &serde_json::to_string_pretty(&self.config)?)?;
        write_text(&dir.join("losses.csv"), &self.loss_csv())?;
        for (it, grid) in &self.grids {
            save_image(grid, dir.join(format!("grid_{it:06}.png")))?;
        }
        Ok(())
    }

    /// Loads a generator/discriminator pair written by [`GanModels::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, GanError> {
        let dir = dir.as_ref();
        let path = dir.join("gan.json");
        let text = fs::read_to_string(&path).map_err(|e| GanError::Io { path: path.display().to_string(), source: e })?;
        let config: GanConfig = serde_json::from_str(&text)?;
        let mut models = Self::untrained(&config)?;
        models.generator.load_weights(dir.join("generator.w"))?;
        models.discriminator.load_weights(dir.join("discriminator.w"))?;
        Ok(models)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), GanError> {
    fs::write(path, text).map_err(|e| GanError::Io { path: path.display().to_string(), source: e })
}

/// Square crop, resize and scaling to [-1, 1].
fn to_training_input(image: &GrayImage, size: usize) -> Vec<f32> {
    let sq = if image.width() == image.height() { image.clone() } else { center_square(image) };
    resize(&sq, size, size).pixels().iter().map(|&p| p as f32 / 127.5 - 1.0).collect()
}

fn latent_batch(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>, GanError> {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(&[n, dim], data)?)
}

/// Maps tanh outputs in [-1, 1] to 8-bit images.
fn to_images(out: &Tensor<f32>, size: usize) -> Vec<GrayImage> {
    out.data()
        .chunks_exact(size * size)
        .map(|s| GrayImage::from_fn(size, size, |x, y| quantize((s[y * size + x] as f64 + 1.0) * 127.5)))
        .collect()
}

/// Tiles images (all `size` x `size`) into a roughly square mosaic.
pub fn mosaic(images: &[GrayImage]) -> GrayImage {
    if images.is_empty() {
        return GrayImage::filled(1, 1, 0);
    }
    let s = images[0].width();
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let mut out = GrayImage::filled(cols * s, rows * s, 0);
    for (i, img) in images.iter().enumerate() {
        let (ox, oy) = ((i % cols) * s, (i / cols) * s);
        for y in 0..s {
            for x in 0..s {
                out.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    out
}

fn check_finite(loss: f64, which: &'static str, iteration: u64) -> Result<f64, GanError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(GanError::NonFiniteLoss { which, iteration })
    }
}

/// Adversarial training with the non-saturating generator loss. Each
/// iteration is one generator update; the discriminator is updated on the
/// first of every `generator_updates_per_discriminator_update` iterations,
/// on one real and one generated batch.
pub fn train_gan(images: &[GrayImage], config: &GanConfig) -> Result<GanModels, GanError> {
    config.validate()?;
    if images.len() < config.batch_size {
        return Err(GanError::TooFewImages { needed: config.batch_size, got: images.len() });
    }
    let size = config.output_size;
    let real: Vec<Vec<f32>> = images.iter().map(|im| to_training_input(im, size)).collect();
    let mut models = GanModels::untrained(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a_6e);
    let fixed_noise = latent_batch(64, config.latent_dim, &mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1_7ed))?;
    let mut g_opt = OptimizerState::new(config.optimizer);
    let mut d_opt = OptimizerState::new(config.optimizer);
    let n = config.batch_size;
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    for it in 0..config.iterations {
        let mut d_loss = None;
        if it % config.generator_updates_per_discriminator_update == 0 {
            let mut batch = Vec::with_capacity(n * size * size);
            for _ in 0..n {
                batch.extend_from_slice(&real[rng.random_range(0..real.len())]);
            }
            let x_real = Tensor::from_vec(&[n, 1, size, size], batch)?;
            let z = latent_batch(n, config.latent_dim, &mut rng)?;
            let x_fake = models.generator.forward(&z, Mode::Train)?;
            let d = &mut models.discriminator;
            d.zero_grads();
            let p_real = d.forward(&x_real, Mode::Train)?;
            let (l_real, g_real) = binary_cross_entropy(&p_real, &ones)?;
            d.backward_params(&g_real)?;
            let p_fake = d.forward(&x_fake, Mode::Train)?;
            let (l_fake, g_fake) = binary_cross_entropy(&p_fake, &zeros)?;
            d.backward_params(&g_fake)?;
            d_opt.step(d);
            models.discriminator_updates += 1;
            d_loss = Some(check_finite(l_real + l_fake, "discriminator", it)?);
        }
        let z = latent_batch(n, config.latent_dim, &mut rng)?;
        models.generator.zero_grads();
        let x_fake = models.generator.forward(&z, Mode::Train)?;
        let p = models.discriminator.forward(&x_fake, Mode::Train)?;
        let (g_loss, grad) = binary_cross_entropy(&p, &ones)?;
        let g_loss = check_finite(g_loss, "generator", it)?;
        let dx = models.discriminator.backward(&grad)?;
        models.discriminator.zero_grads();
        models.generator.backward_params(&dx)?;
        g_opt.step(&mut models.generator);
        models.generator_updates += 1;
        models.log.push(GanLogRow { iteration: it, d_loss, g_loss });
        let done = it + 1;
        if done == config.iterations || (config.sample_every > 0 && done % config.sample_every == 0) {
            let out = models.generator.forward(&fixed_noise, Mode::Infer)?;
            models.grids.push((done, mosaic(&to_images(&out, size))));
            log::debug!("gan iteration {done}: g_loss {g_loss:.4} d_loss {d_loss:?}");
        }
    }
    Ok(models)
}

/// `n` generator samples from latent noise seeded by `seed`.
pub fn generate_synthetic(models: &mut GanModels, n: usize, seed: u64) -> Result<Vec<GrayImage>, GanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = models.config.output_size;
    let mut out = Vec::with_capacity(n);
    let mut left = n;
    while left > 0 {
        let b = left.min(models.config.batch_size);
        let z = latent_batch(b, models.config.latent_dim, &mut rng)?;
        let y = models.generator.forward(&z, Mode::Infer)?;
        out.extend(to_images(&y, size));
        left -= b;
    }
    Ok(out)
}

/// Fraction of correct real/fake decisions (threshold 0.5) of the
/// discriminator over `real` images and as many generated ones.
pub fn discriminator_accuracy(models: &mut GanModels, real: &[GrayImage], seed: u64) -> Result<f64, GanError> {
    let size = models.config.output_size;
    let fake = generate_synthetic(models, real.len(), seed)?;
    let mut correct = 0usize;
    for (set, is_real) in [(real, true), (&fake[..], false)] {
        for chunk in set.chunks(models.config.batch_size) {
            let data: Vec<f32> = chunk.iter().flat_map(|im| to_training_input(im, size)).collect();
            let x = Tensor::from_vec(&[chunk.len(), 1, size, size], data)?;
            let p = models.discriminator.forward(&x, Mode::Infer)?;
            correct += p.data().iter().filter(|&&v| (v >= 0.5) == is_real).count();
        }
    }
    Ok(correct as f64 / (2 * real.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceQuality {
    pub synthetic: f64,
    pub altered: f64,
    pub valid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySetStats {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Counts over `QUALITY_BINS` equal bins of [0, 100].
    pub histogram: Vec<u64>,
}

pub const QUALITY_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub reference_means: ReferenceQuality,
    pub sets: Vec<QualitySetStats>,
}

impl QualityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per bin: `bin_lo,bin_hi,<set names...>`.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi");
        for set in &self.sets {
            write!(s, ",{}", set.name).expect("string write");
        }
        s.push('\n');
        let width = 100.0 / QUALITY_BINS as f64;
        for b in 0..QUALITY_BINS {
            write!(s, "{},{}", b as f64 * width, (b + 1) as f64 * width).expect("string write");
            for set in &self.sets {
                write!(s, ",{}", set.histogram[b]).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn quality_stats(name: &str, images: &[GrayImage]) -> Result<QualitySetStats, GanError> {
    use rayon::prelude::*;
    if images.is_empty() {
        return Err(GanError::EmptySet(name.to_string()));
    }
    let scores: Vec<f64> = images.par_iter().map(|im| quality_score(im) as f64).collect();
    let mut histogram = vec![0u64; QUALITY_BINS];
    for &q in &scores {
        let b = ((q / 100.0 * QUALITY_BINS as f64) as usize).min(QUALITY_BINS - 1);
        histogram[b] += 1;
    }
    Ok(QualitySetStats {
        name: name.to_string(),
        count: scores.len(),
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        median: median(&scores),
        histogram,
    })
}

/// Quality statistics of generated, real altered and valid prints.
pub fn compare_quality_distributions(
    synthetic: &[GrayImage],
    altered: &[GrayImage],
    valid: &[GrayImage],
) -> Result<QualityReport, GanError> {
    Ok(QualityReport {
        reference_means: REFERENCE_MEAN_QUALITY,
        sets: vec![quality_stats("synthetic", synthetic)?, quality_stats("altered", altered)?, quality_stats("valid", valid)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GanConfig {
        GanConfig { output_size: 32, base_width: 2, latent_dim: 8, batch_size: 4, iterations: 6, sample_every: 0, ..GanConfig::default() }
    }

    #[test]
    fn architectures_have_expected_shapes() {
        for size in [32, 64, 128, 256] {
            let cfg = GanConfig { output_size: size, base_width: 2, ..GanConfig::default() };
            let g = Network::<f32>::new(&cfg.generator_architecture(), 0).unwrap();
            assert_eq!(g.output_shape(), &[1, size, size]);
            let d = Network::<f32>::new(&cfg.discriminator_architecture(), 0).unwrap();
            assert_eq!(d.output_shape(), &[1]);
        }
        assert!(GanConfig { output_size: 48, ..GanConfig::default() }.validate().is_err());
    }

    #[test]
    fn schedule_counts_updates() {
        let imgs: Vec<GrayImage> = (0..4).map(|i| GrayImage::from_fn(40, 40, |x, y| ((x * y + i * 31) % 256) as u8)).collect();
        for (iters, ratio) in [(6u64, 2u64), (7, 2), (5, 1)] {
            let cfg = GanConfig { iterations: iters, generator_updates_per_discriminator_update: ratio, ..tiny() };
            let m = train_gan(&imgs, &cfg).unwrap();
            assert_eq!(m.generator_updates, iters);
            assert_eq!(m.discriminator_updates, iters.div_ceil(ratio));
            assert_eq!(m.log.len() as u64, iters);
            assert_eq!(m.grids.len(), 1);
        }
    }

    #[test]
    fn too_few_images_rejected() {
        let imgs = vec![GrayImage::filled(32, 32, 9); 3];
        assert!(matches!(train_gan(&imgs, &tiny()), Err(GanError::TooFewImages { needed: 4, got: 3 })));
    }

    #[test]
    fn sampling_is_seeded() {
        let mut m = GanModels::untrained(&tiny()).unwrap();
        assert!(generate_synthetic(&mut m, 0, 1).unwrap().is_empty());
        let a = generate_synthetic(&mut m, 5, 1).unwrap();
        assert_eq!(a, generate_synthetic(&mut m, 5, 1).unwrap());
        assert_eq!(a.len(), 5);
        assert_ne!(a, generate_synthetic(&mut m, 5, 2).unwrap());
    }

    #[test]
    fn identical_sets_give_identical_stats() {
        let imgs: Vec<GrayImage> = (0..3).map(|i| GrayImage::from_fn(64, 64, |x, _| ((x / (3 + i)) % 2 * 200) as u8)).collect();
        let r = compare_quality_distributions(&imgs, &imgs, &imgs).unwrap();
        assert_eq!(r.sets[0].mean, r.sets[1].mean);
        assert_eq!(r.sets[1].histogram, r.sets[2].histogram);
        assert_eq!(r.reference_means, REFERENCE_MEAN_QUALITY);
        assert!(matches!(compare_quality_distributions(&[], &imgs, &imgs), Err(GanError::EmptySet(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
