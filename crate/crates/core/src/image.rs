//! Grayscale rasters, boolean masks and the geometric primitives shared by
//! every stage of the pipeline.
//!
//! Intensities follow the fingerprint convention: 0 is a black ridge, 255 is
//! white background. All resampling is bilinear and rounds half away from
//! zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("unsupported bit depth: {0}")]
    UnsupportedDepth(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid dimensions {width}x{height} for {len} pixels")]
    Dimensions { width: usize, height: usize, len: usize },
    #[error("rect {rect:?} exceeds {width}x{height} image")]
    OutOfBounds { rect: Rect, width: usize, height: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImageError::Dimensions { width, height, len: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    /// Image with every pixel set to `value`.
    ///
    /// Panics if either dimension is zero.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    /// Builds an image from real-valued intensities, rounding half away
    /// from zero and clamping to [0, 255].
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self, ImageError> {
        let pixels = values.iter().map(|&v| quantize(v)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|&p| (p as f64 - m).powi(2)).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    pub fn bounds(&self) -> Rect {
        Rect { x: 0, y: 0, w: self.width, h: self.height }
    }

    /// Bilinear sample at a real-valued position; `None` outside the pixel
    /// grid `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, sx: f64, sy: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(sx >= 0.0 && sy >= 0.0 && sx <= w - 1.0 && sy <= h - 1.0) {
            return None;
        }
        Some(bilinear(&self.pixels, self.width, self.height, sx, sy))
    }
}

/// Boolean raster with the same geometry conventions as [`GrayImage`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(ImageError::Dimensions { width, height, len: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as `false`.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        BinaryMask { width: self.width, height: self.height, bits }
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Renders the mask as an image: members 255, others 0.
    pub fn to_image(&self) -> GrayImage {
        let pixels = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage { width: self.width, height: self.height, pixels }
    }

    /// Pixels at or above 128 become members.
    pub fn from_image(image: &GrayImage) -> BinaryMask {
        let bits = image.pixels.iter().map(|&p| p >= 128).collect();
        BinaryMask { width: image.width, height: image.height, bits }
    }
}

/// Axis-aligned pixel rectangle; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }
}

/// Rounds half away from zero and clamps into the 8-bit range.
#[inline]
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

#[inline]
fn bilinear(px: &[u8], width: usize, height: usize, sx: f64, sy: f64) -> f64 {
    let x0 = (sx.floor() as usize).min(width - 1);
    let y0 = (sy.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p = |x: usize, y: usize| px[y * width + x] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

// ---------------------------------------------------------------------------
// File I/O

const PNG_MAGIC: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Loads an 8-bit PGM (P5) or PNG. RGB input collapses to the integer
/// average of its channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ImageError::NotFound(path.display().to_string()))
        }
        Err(source) => return Err(ImageError::Io { path: path.display().to_string(), source }),
    };
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else {
        Err(ImageError::UnsupportedFormat(path.display().to_string()))
    }
}

/// Writes PNG when the extension is `.png`, binary PGM otherwise.
pub fn save_image(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = if is_png_path(path) { encode_png(image)? } else { encode_pgm(image) };
    write_bytes(path, &bytes)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask, ImageError> {
    load_image(path).map(|img| BinaryMask::from_image(&img))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    save_image(&mask.to_image(), path)
}

/// Writes an 8-bit RGB PNG (used for localization overlays and grids).
pub fn save_rgb_png(width: usize, height: usize, rgb: &[u8], path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    {
        use image::ImageEncoder;
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        enc.write_image(rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| ImageError::Format { format: "png", reason: e.to_string() })?;
    }
    write_bytes(path, &out)
}

fn is_png_path(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    let io_err = |source| ImageError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let fmt_err = |reason: &str| ImageError::Format { format: "pgm", reason: reason.to_string() };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fmt_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err("expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fmt_err("truncated header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err("invalid maxval"));
    }
    if maxval > 255 {
        return Err(ImageError::UnsupportedDepth(format!("pgm maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err("zero dimension"));
    }
    let n = width.checked_mul(height).ok_or_else(|| fmt_err("dimensions overflow"))?;
    let data = bytes.get(pos..pos + n).ok_or_else(|| fmt_err("truncated pixel data"))?;
    GrayImage::new(width, height, data.to_vec())
}

fn encode_png(image: &GrayImage) -> Result<Vec<u8>, ImageError> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&image.pixels, image.width as u32, image.height as u32, image::ExtendedColorType::L8)
        .map_err(|e| ImageError::Format { format: "png", reason: e.to_string() })?;
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Format { format: "png", reason: e.to_string() })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageLuma8(buf) => GrayImage::new(w, h, buf.into_raw()),
        image::DynamicImage::ImageRgb8(buf) => {
            let px = buf
                .into_raw()
                .chunks_exact(3)
                .map(|c| ((c[0] as u16 + c[1] as u16 + c[2] as u16) / 3) as u8)
                .collect();
            GrayImage::new(w, h, px)
        }
        other => {
            let color = other.color();
            if color.bytes_per_pixel() / color.channel_count() > 1 {
                Err(ImageError::UnsupportedDepth(format!("{color:?}")))
            } else {
                Err(ImageError::UnsupportedFormat(format!("png color type {color:?}")))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Geometry

pub fn crop(image: &GrayImage, rect: Rect) -> Result<GrayImage, ImageError> {
    if !rect.fits_in(image.width, image.height) {
        return Err(ImageError::OutOfBounds { rect, width: image.width, height: image.height });
    }
    let mut pixels = Vec::with_capacity(rect.area());
    for y in rect.y..rect.y + rect.h {
        let row = y * image.width;
        pixels.extend_from_slice(&image.pixels[row + rect.x..row + rect.x + rect.w]);
    }
    Ok(GrayImage { width: rect.w, height: rect.h, pixels })
}

/// Rotates about the image center by `degrees` (counter-clockwise as
/// displayed). Output pixels whose source falls outside the input take
/// `fill`.
pub fn rotate(image: &GrayImage, degrees: f64, fill: u8) -> GrayImage {
    if degrees == 0.0 {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    // Snap near-integral sources so quarter turns stay exact permutations.
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    GrayImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = snap(cx + cos * dx - sin * dy);
        let sy = snap(cy + sin * dx + cos * dy);
        image.sample_bilinear(sx, sy).map_or(fill, quantize)
    })
}

pub fn mirror_h(image: &GrayImage) -> GrayImage {
    let mut pixels = image.pixels.clone();
    for row in pixels.chunks_exact_mut(image.width) {
        row.reverse();
    }
    GrayImage { width: image.width, height: image.height, pixels }
}

/// Bilinear resampling with pixel-center alignment.
///
/// Panics if a target dimension is zero.
pub fn resize(image: &GrayImage, new_w: usize, new_h: usize) -> GrayImage {
    assert!(new_w > 0 && new_h > 0, "resize target must be positive");
    if new_w == image.width && new_h == image.height {
        return image.clone();
    }
    let sx_scale = image.width as f64 / new_w as f64;
    let sy_scale = image.height as f64 / new_h as f64;
    let max_x = image.width as f64 - 1.0;
    let max_y = image.height as f64 - 1.0;
    let xs: Vec<f64> = (0..new_w).map(|x| ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, max_x)).collect();
    let mut pixels = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, max_y);
        for &sx in &xs {
            pixels.push(quantize(bilinear(&image.pixels, image.width, image.height, sx, sy)));
        }
    }
    GrayImage { width: new_w, height: new_h, pixels }
}

/// Crops the centered square of side `min(w, h)`.
pub fn center_square(image: &GrayImage) -> GrayImage {
    let side = image.width.min(image.height);
    let rect = Rect::new((image.width - side) / 2, (image.height - side) / 2, side, side);
    crop(image, rect).expect("centered square always fits")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| (y * w + x) as u8)
    }

    #[test]
    fn pgm_passthrough() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img, GrayImage::new(2, 2, vec![0, 255, 128, 64]).unwrap());
    }

    #[test]
    fn pgm_header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        assert_eq!(decode_pgm(bytes).unwrap().pixels(), &[1, 2]);
    }

    #[test]
    fn truncated_pgm_is_format_error() {
        assert!(matches!(decode_pgm(b"P5\n2 "), Err(ImageError::Format { .. })));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00"), Err(ImageError::Format { .. })));
    }

    #[test]
    fn sixteen_bit_pgm_rejected() {
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00"), Err(ImageError::UnsupportedDepth(_))));
    }

    #[test]
    fn missing_file_is_distinct() {
        assert!(matches!(load_image("/nonexistent/x.pgm"), Err(ImageError::NotFound(_))));
    }

    #[test]
    fn crop_interior_of_ramp() {
        let img = ramp(4, 4);
        let c = crop(&img, Rect::new(1, 1, 2, 2)).unwrap();
        assert_eq!(c.pixels(), &[5, 6, 9, 10]);
        assert_eq!(crop(&img, img.bounds()).unwrap(), img);
        assert!(crop(&img, Rect::new(3, 0, 2, 1)).is_err());
    }

    #[test]
    fn mirror_row() {
        let img = GrayImage::new(3, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(mirror_h(&img).pixels(), &[3, 2, 1]);
        let sym = GrayImage::new(3, 2, vec![4, 9, 4, 1, 0, 1]).unwrap();
        assert_eq!(mirror_h(&sym), sym);
    }

    #[test]
    fn resize_two_to_four_is_monotone() {
        let img = GrayImage::new(2, 1, vec![0, 255]).unwrap();
        let r = resize(&img, 4, 1);
        // weights by hand: sources -0.25(clamped 0), 0.25, 0.75, 1.25(clamped 1)
        assert_eq!(r.pixels(), &[0, 64, 191, 255]);
        assert!(r.pixels().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn resize_identity_and_uniform() {
        let img = ramp(5, 3);
        assert_eq!(resize(&img, 5, 3), img);
        let u = GrayImage::filled(7, 7, 77);
        assert!(resize(&u, 13, 4).pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn rotate_quarter_turn_matches_permutation() {
        let img = GrayImage::from_fn(9, 9, |x, y| ((x * 29 + y * 7) % 251) as u8);
        let r = rotate(&img, 90.0, 0);
        // Exact quarter-turn oracle: out(x, y) = in(c - (y - c), c + (x - c)).
        for y in 0..9 {
            for x in 0..9 {
                let (sx, sy) = (8 - y, x);
                assert_eq!(r.get(x, y), img.get(sx, sy));
            }
        }
    }

    #[test]
    fn rotate_uniform_interior_constant() {
        let img = GrayImage::filled(32, 32, 90);
        let r = rotate(&img, 17.0, 255);
        for y in 10..22 {
            for x in 10..22 {
                assert_eq!(r.get(x, y), 90);
            }
        }
    }
}
