//! Image decoding, resizing, augmentation, and the trainable multi-scale
//! convolutional feature extractor.
//!
//! Binary PPM (P6, maxval 255) is the interchange format. The extractor is a
//! five-stage strided network; each stage is globally average-pooled and
//! projected to the encoder width, yielding the five multi-scale image
//! tokens. Spatial mode additionally projects the final stage's pre-pool
//! grid cell-by-cell so attention maps have spatial provenance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{randn_tensor, NumericsError, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VisionError {
    /// Malformed or truncated image data; `offset` is the failing byte.
    Decode { offset: usize, msg: String },
    Config(String),
    /// Input image does not match the configured extractor input size.
    InputSize {
        expected: usize,
        height: usize,
        width: usize,
    },
}

impl fmt::Display for VisionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VisionError::Decode { offset, msg } => {
                write!(f, "image decode error at byte {offset}: {msg}")
            }
            VisionError::Config(msg) => write!(f, "vision config error: {msg}"),
            VisionError::InputSize {
                expected,
                height,
                width,
            } => write!(
                f,
                "extractor expects {expected}x{expected} input, got {height}x{width}"
            ),
        }
    }
}

impl core::error::Error for VisionError {}

impl From<NumericsError> for VisionError {
    fn from(e: NumericsError) -> Self {
        VisionError::Config(format!("{e}"))
    }
}

/// RGB image with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, VisionError> {
        if data.len() != height * width * 3 {
            return Err(VisionError::Config(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Channel-first `[3, H, W]` tensor for the extractor.
    pub fn to_chw<F: Scalar>(&self) -> Tensor<F> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![F::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = self.pixel(y, x);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = crate::tensor::fl(p[c] as f64);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("chw shape")
    }
}

// ---- PPM / PGM ------------------------------------------------------------

struct ByteParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteParser<'_> {
    fn err(&self, msg: impl Into<String>) -> VisionError {
        VisionError::Decode {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn parse_uint(&mut self) -> Result<usize, VisionError> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut v: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or(VisionError::Decode {
                    offset: start,
                    msg: String::from("integer overflow in header"),
                })?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned integer"));
        }
        Ok(v)
    }
}

/// Decode binary PPM (`P6`, 8-bit, maxval 255) into `[0, 1]` floats.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, VisionError> {
    let mut p = ByteParser { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(p.err("missing P6 magic"));
    }
    p.pos = 2;
    let width = p.parse_uint()?;
    let height = p.parse_uint()?;
    let maxval = p.parse_uint()?;
    if maxval != 255 {
        return Err(p.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(p.err("zero image dimension"));
    }
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("expected single whitespace after maxval"));
    }
    p.pos += 1;
    let need = width * height * 3;
    let have = bytes.len() - p.pos;
    if have < need {
        return Err(VisionError::Decode {
            offset: bytes.len(),
            msg: format!("pixel data truncated: need {need} bytes, have {have}"),
        });
    }
    let data = bytes[p.pos..p.pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    ImageTensor::new(height, width, data)
}

/// Encode to binary PPM (`P6`, maxval 255).
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    out
}

/// Encode a grayscale plane in `[0, 1]` as binary PGM (`P5`).
pub fn encode_pgm(gray: &[f32], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(gray.iter().map(|&v| to_byte(v)));
    out
}

fn to_byte(v: f32) -> u8 {
    let clamped = v.clamp(0.0, 1.0);
    (clamped * 255.0 + 0.5) as u8
}

// ---- resize / augment -------------------------------------------------------

fn bilinear_sample(img: &ImageTensor, fy: f32, fx: f32) -> [f32; 3] {
    let h = img.height as isize;
    let w = img.width as isize;
    let fy = fy.clamp(0.0, (h - 1) as f32);
    let fx = fx.clamp(0.0, (w - 1) as f32);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let dy = fy - y0 as f32;
    let dx = fx - x0 as f32;
    let p00 = img.pixel(y0, x0);
    let p01 = img.pixel(y0, x1);
    let p10 = img.pixel(y1, x0);
    let p11 = img.pixel(y1, x1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] + (p01[c] - p00[c]) * dx;
        let bot = p10[c] + (p11[c] - p10[c]) * dx;
        out[c] = top + (bot - top) * dy;
    }
    out
}

/// Bilinear resize with half-pixel-centered sampling.
pub fn resize_bilinear(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
) -> Result<ImageTensor, VisionError> {
    if out_h < 8 || out_w < 8 {
        return Err(VisionError::Config(format!(
            "resize target {out_h}x{out_w} below the 8x8 minimum"
        )));
    }
    let sy = img.height as f32 / out_h as f32;
    let sx = img.width as f32 / out_w as f32;
    let mut out = ImageTensor::filled(out_h, out_w, 0.0);
    for y in 0..out_h {
        for x in 0..out_w {
            let fy = (y as f32 + 0.5) * sy - 0.5;
            let fx = (x as f32 + 0.5) * sx - 0.5;
            out.set_pixel(y, x, bilinear_sample(img, fy, fx));
        }
    }
    Ok(out)
}

/// Augmentation ranges. Jitter values are multiplicative factor ranges;
/// `(1.0, 1.0)` disables that component exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_fraction: (f32, f32),
    pub rotation_deg: (f32, f32),
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop_fraction: (0.8, 1.0),
            rotation_deg: (-10.0, 10.0),
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        let ranges = [
            ("crop_fraction", self.crop_fraction),
            ("rotation_deg", self.rotation_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(VisionError::Config(format!(
                    "{name} range ({lo}, {hi}) has lo > hi"
                )));
            }
        }
        if self.rotation_deg.0 < -180.0 || self.rotation_deg.1 > 180.0 {
            return Err(VisionError::Config(format!(
                "rotation range ({}, {}) exceeds [-180, 180]",
                self.rotation_deg.0, self.rotation_deg.1
            )));
        }
        if self.crop_fraction.0 <= 0.0 || self.crop_fraction.1 > 1.0 {
            return Err(VisionError::Config(format!(
                "crop fraction range ({}, {}) outside (0, 1]",
                self.crop_fraction.0, self.crop_fraction.1
            )));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Random crop (resized back), rotation about the center with edge clamping,
/// and channel jitter. Identity configuration returns the image bit-for-bit.
pub fn augment(
    img: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ImageTensor, VisionError> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();

    let f = sample_range(rng, cfg.crop_fraction);
    if f < 1.0 {
        let ch = ((h as f32 * f).round() as usize).max(1);
        let cw = ((w as f32 * f).round() as usize).max(1);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let mut crop = ImageTensor::filled(ch, cw, 0.0);
        for y in 0..ch {
            for x in 0..cw {
                crop.set_pixel(y, x, img.pixel(y0 + y, x0 + x));
            }
        }
        // resize straight back to the input extent
        let sy = ch as f32 / h as f32;
        let sx = cw as f32 / w as f32;
        for y in 0..h {
            for x in 0..w {
                let fy = (y as f32 + 0.5) * sy - 0.5;
                let fx = (x as f32 + 0.5) * sx - 0.5;
                out.set_pixel(y, x, bilinear_sample(&crop, fy, fx));
            }
        }
    }

    let angle = sample_range(rng, cfg.rotation_deg);
    if angle != 0.0 {
        let rad = angle.to_radians();
        let (sin, cos) = (rad.sin(), rad.cos());
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let src = out.clone();
        for y in 0..h {
            for x in 0..w {
                let ry = y as f32 - cy;
                let rx = x as f32 - cx;
                let fy = cos * ry + sin * rx + cy;
                let fx = -sin * ry + cos * rx + cx;
                out.set_pixel(y, x, bilinear_sample(&src, fy, fx));
            }
        }
    }

    let b = sample_range(rng, cfg.brightness);
    if b != 1.0 {
        for v in out.data.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }

    let c = sample_range(rng, cfg.contrast);
    if c != 1.0 {
        let mean = luminance_mean(&out);
        for v in out.data.iter_mut() {
            *v = (mean + (*v - mean) * c).clamp(0.0, 1.0);
        }
    }

    let s = sample_range(rng, cfg.saturation);
    if s != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let p = out.pixel(y, x);
                let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                let mut q = [0.0f32; 3];
                for ch in 0..3 {
                    q[ch] = (gray + (p[ch] - gray) * s).clamp(0.0, 1.0);
                }
                out.set_pixel(y, x, q);
            }
        }
    }

    Ok(out)
}

fn luminance_mean(img: &ImageTensor) -> f32 {
    let mut acc = 0.0f32;
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(y, x);
            acc += 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    }
    acc / (img.height * img.width) as f32
}

// ---- multi-scale extractor ----------------------------------------------------

/// Whether the extractor emits only the five pooled tokens or also a
/// projected grid of the final stage for spatial attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    Multiscale,
    Spatial,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Multiscale => "multiscale",
            FeatureMode::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Option<FeatureMode> {
        match s {
            "multiscale" => Some(FeatureMode::Multiscale),
            "spatial" => Some(FeatureMode::Spatial),
            _ => None,
        }
    }
}

pub const STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    pub input_size: usize,
    pub widths: [usize; STAGES],
    /// Output dimension of every image token; equals the encoder width.
    pub embed_dim: usize,
}

impl CnnConfig {
    pub fn new(input_size: usize, widths: [usize; STAGES], embed_dim: usize) -> Self {
        CnnConfig {
            input_size,
            widths,
            embed_dim,
        }
    }

    /// Kernel size, stride, and padding of stage `i` (7x7 stem, then 3x3).
    fn geometry(i: usize) -> (usize, usize, usize) {
        if i == 0 {
            (7, 2, 3)
        } else {
            (3, 2, 1)
        }
    }

    /// Spatial extent after stage `i`; every stage halves, rounding up.
    pub fn stage_extent(&self, i: usize) -> usize {
        let mut e = self.input_size;
        for _ in 0..=i {
            e = e.div_ceil(2);
        }
        e
    }

    /// Side length of the spatial grid (final stage extent).
    pub fn grid(&self) -> usize {
        self.stage_extent(STAGES - 1)
    }

    /// Number of image tokens produced in `mode`.
    pub fn token_count(&self, mode: FeatureMode) -> usize {
        match mode {
            FeatureMode::Multiscale => STAGES,
            FeatureMode::Spatial => STAGES + self.grid() * self.grid(),
        }
    }
}

/// Trainable extractor parameters: five strided conv stages plus one
/// projection per stage onto the encoder width. The grid cells share the
/// final stage's projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub conv_w: Vec<Tensor<f32>>,
    pub conv_b: Vec<Tensor<f32>>,
    pub proj_w: Vec<Tensor<f32>>,
    pub proj_b: Vec<Tensor<f32>>,
}

impl CnnParams {
    pub fn init(cfg: &CnnConfig, rng: &mut impl Rng) -> CnnParams {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut proj_w = Vec::new();
        let mut proj_b = Vec::new();
        let mut c_in = 3usize;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let (k, _, _) = CnnConfig::geometry(i);
            let fan_in = (c_in * k * k) as f64;
            conv_w.push(randn_tensor(
                vec![c_out, c_in, k, k],
                (2.0 / fan_in).sqrt(),
                rng,
            ));
            conv_b.push(Tensor::zeros(vec![c_out]));
            proj_w.push(randn_tensor(vec![c_out, cfg.embed_dim], 0.02, rng));
            proj_b.push(Tensor::zeros(vec![cfg.embed_dim]));
            c_in = c_out;
        }
        CnnParams {
            conv_w,
            conv_b,
            proj_w,
            proj_b,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        for i in 0..self.conv_w.len() {
            f(format!("{prefix}.conv{i}.w"), &self.conv_w[i]);
            f(format!("{prefix}.conv{i}.b"), &self.conv_b[i]);
            f(format!("{prefix}.proj{i}.w"), &self.proj_w[i]);
            f(format!("{prefix}.proj{i}.b"), &self.proj_b[i]);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        for i in 0..self.conv_w.len() {
            f(format!("{prefix}.conv{i}.w"), &mut self.conv_w[i]);
            f(format!("{prefix}.conv{i}.b"), &mut self.conv_b[i]);
            f(format!("{prefix}.proj{i}.w"), &mut self.proj_w[i]);
            f(format!("{prefix}.proj{i}.b"), &mut self.proj_b[i]);
        }
    }
}

/// Tape bindings of [`CnnParams`].
pub struct BoundCnn {
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
    pub proj_w: Vec<Var>,
    pub proj_b: Vec<Var>,
}

pub fn bind_cnn<F: Scalar>(tape: &mut Tape<F>, params: &CnnParams, trainable: bool) -> BoundCnn {
    BoundCnn {
        conv_w: params
            .conv_w
            .iter()
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect(),
        conv_b: params
            .conv_b
            .iter()
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect(),
        proj_w: params
            .proj_w
            .iter()
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect(),
        proj_b: params
            .proj_b
            .iter()
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect(),
    }
}

/// Image tokens on the tape: `token_count x embed_dim` rows. The first five
/// rows are the pooled multi-scale features; spatial mode appends the grid
/// cells of the final stage in row-major order.
pub struct ImageFeatureVars {
    pub tokens: Var,
    pub mode: FeatureMode,
    pub grid: usize,
}

/// Run the extractor on a decoded image, recording on the tape so the
/// extractor trains end-to-end with the encoder.
pub fn encode_image<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundCnn,
    cfg: &CnnConfig,
    mode: FeatureMode,
    img: &ImageTensor,
) -> Result<ImageFeatureVars, VisionError> {
    if img.height() != cfg.input_size || img.width() != cfg.input_size {
        return Err(VisionError::InputSize {
            expected: cfg.input_size,
            height: img.height(),
            width: img.width(),
        });
    }
    let chw = tape.constant(img.to_chw::<F>());
    encode_chw(tape, bound, cfg, mode, chw).map_err(VisionError::from)
}

/// Extractor forward from a `[3, S, S]` tape value; exposed separately so
/// gradient checks can treat the image itself as the differentiated input.
pub fn encode_chw<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundCnn,
    cfg: &CnnConfig,
    mode: FeatureMode,
    chw: Var,
) -> Result<ImageFeatureVars, NumericsError> {
    let mut x = chw;
    let mut parts: Vec<Var> = Vec::new();
    let mut last_stage = x;
    for i in 0..STAGES {
        let (_, stride, pad) = CnnConfig::geometry(i);
        let conv = tape.conv2d(x, bound.conv_w[i], bound.conv_b[i], stride, pad)?;
        x = tape.relu(conv)?;
        last_stage = x;
        let pooled = tape.global_avg_pool(x)?;
        let row = tape.reshape(pooled, vec![1, cfg.widths[i]])?;
        let projected = tape.matmul(row, bound.proj_w[i])?;
        let token = tape.add_bias(projected, bound.proj_b[i])?;
        parts.push(token);
    }
    if mode == FeatureMode::Spatial {
        let cells = tape.chw_to_rows(last_stage)?;
        let projected = tape.matmul(cells, bound.proj_w[STAGES - 1])?;
        let grid_tokens = tape.add_bias(projected, bound.proj_b[STAGES - 1])?;
        parts.push(grid_tokens);
    }
    let tokens = tape.concat_rows(&parts)?;
    Ok(ImageFeatureVars {
        tokens,
        mode,
        grid: cfg.grid(),
    })
}
