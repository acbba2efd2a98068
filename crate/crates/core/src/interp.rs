//! Attention-map extraction over image tokens and heatmap rendering.
//!
//! Maps are taken from the text+`[CLS]` query positions to the image key
//! positions, averaged over queries and heads, and renormalized over the
//! image keys. Spatial feature mode yields a 2-D grid map; multiscale mode
//! yields a 5-bin profile over the pooled tokens. Rollout multiplies
//! residual-corrected per-layer maps (`0.5*A + 0.5*I`) across the stack.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use crate::model::{EncoderOutput, MultimodalSequence};
use crate::tape::Tape;
use crate::tensor::{matmul_raw, Scalar};
use crate::vision::{encode_pgm, encode_ppm, FeatureMode, ImageTensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InterpError {
    /// A 2-D map was requested but the model ran in multiscale mode.
    Mode(String),
    Contract(String),
}

impl fmt::Display for InterpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterpError::Mode(msg) => write!(f, "feature mode error: {msg}"),
            InterpError::Contract(msg) => write!(f, "interpretability contract: {msg}"),
        }
    }
}

impl core::error::Error for InterpError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over heads of the last layer's attention.
    LastLayerMeanHeads,
    /// Attention rollout across all layers.
    Rollout,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Reduction> {
        match s {
            "last" | "last_layer_mean_heads" => Some(Reduction::LastLayerMeanHeads),
            "rollout" => Some(Reduction::Rollout),
            _ => None,
        }
    }
}

/// Nonnegative weights over image tokens, summing to one. `grid` is the
/// side length for spatial maps; `None` marks a 5-bin multiscale profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub weights: Vec<f32>,
    pub grid: Option<usize>,
}

impl Heatmap {
    fn normalized(mut weights: Vec<f32>, grid: Option<usize>) -> Heatmap {
        let sum: f32 = weights.iter().sum();
        if sum > 0.0 {
            for w in weights.iter_mut() {
                *w /= sum;
            }
        } else {
            let uniform = 1.0 / weights.len() as f32;
            for w in weights.iter_mut() {
                *w = uniform;
            }
        }
        Heatmap { weights, grid }
    }
}

/// Extract the attention mass flowing from text/`[CLS]` queries onto the
/// image tokens. Spatial mode maps onto the grid cells; multiscale mode
/// onto the five pooled tokens.
pub fn attention_to_image<F: Scalar>(
    tape: &Tape<F>,
    out: &EncoderOutput,
    seq: &MultimodalSequence,
    mode: FeatureMode,
    grid: usize,
    reduction: Reduction,
) -> Result<Heatmap, InterpError> {
    if seq.n_img == 0 {
        return Err(InterpError::Contract(
            "sequence carries no image tokens".into(),
        ));
    }
    // image tokens occupy layout slots 1..1+n_img ([CLS] is slot 0)
    let (key_range, out_grid) = match mode {
        FeatureMode::Multiscale => (1..1 + seq.n_img, None),
        FeatureMode::Spatial => {
            let cells = grid * grid;
            if seq.n_img != 5 + cells {
                return Err(InterpError::Contract(format!(
                    "expected 5 + {cells} image tokens for a {grid}x{grid} grid, found {}",
                    seq.n_img
                )));
            }
            (1 + 5..1 + seq.n_img, Some(grid))
        }
    };
    let t = seq.seq_len();
    let mut queries: Vec<usize> = vec![0]; // [CLS]
    queries.extend(seq.text_start..seq.text_start + seq.n_text);

    let layer_mean = |attn_layer: &[crate::tape::Var]| -> Vec<f32> {
        let heads = attn_layer.len();
        let mut mean = vec![0.0f32; t * t];
        for &head in attn_layer {
            let a = tape.value(head);
            for (i, m) in mean.iter_mut().enumerate() {
                *m += a.data()[i].to_f64().unwrap_or(0.0) as f32;
            }
        }
        for m in mean.iter_mut() {
            *m /= heads as f32;
        }
        mean
    };

    let total: Vec<f32> = match reduction {
        Reduction::LastLayerMeanHeads => {
            layer_mean(out.attention.last().expect("at least one layer"))
        }
        Reduction::Rollout => {
            let mut rollout: Option<Vec<f32>> = None;
            for attn_layer in &out.attention {
                let mut a = layer_mean(attn_layer);
                // residual correction, rows stay normalized
                for r in 0..t {
                    for c in 0..t {
                        a[r * t + c] *= 0.5;
                    }
                    a[r * t + r] += 0.5;
                }
                rollout = Some(match rollout {
                    None => a,
                    Some(prev) => matmul_raw(&a, &prev, t, t, t),
                });
            }
            rollout.expect("at least one layer")
        }
    };

    let mut weights = vec![0.0f32; key_range.len()];
    for &q in &queries {
        for (i, k) in key_range.clone().enumerate() {
            weights[i] += total[q * t + k];
        }
    }
    for w in weights.iter_mut() {
        *w /= queries.len() as f32;
    }
    Ok(Heatmap::normalized(weights, out_grid))
}

/// Bilinear upsampling of a square grid to `out_h x out_w`.
pub fn upsample_grid(weights: &[f32], grid: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w];
    let sy = grid as f32 / out_h as f32;
    let sx = grid as f32 / out_w as f32;
    for y in 0..out_h {
        for x in 0..out_w {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (grid - 1) as f32);
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (grid - 1) as f32);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(grid - 1);
            let x1 = (x0 + 1).min(grid - 1);
            let dy = fy - y0 as f32;
            let dx = fx - x0 as f32;
            let top = weights[y0 * grid + x0] * (1.0 - dx) + weights[y0 * grid + x1] * dx;
            let bot = weights[y1 * grid + x0] * (1.0 - dx) + weights[y1 * grid + x1] * dx;
            out[y * out_w + x] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

/// Rendered heatmap files: a grayscale PGM (P5) and a red-channel overlay
/// PPM (P6) at the blend weight `alpha`.
pub struct RenderedHeatmap {
    pub pgm: Vec<u8>,
    pub ppm: Vec<u8>,
}

/// Upsample a spatial map to the image extent, min-max normalize, and
/// render. A constant map renders as mid-gray.
pub fn render_heatmap(
    map: &Heatmap,
    img: &ImageTensor,
    alpha: f32,
) -> Result<RenderedHeatmap, InterpError> {
    let grid = map.grid.ok_or_else(|| {
        InterpError::Mode("a 2-D heatmap needs the spatial feature mode (5-bin profile given)".into())
    })?;
    let (h, w) = (img.height(), img.width());
    let mut up = upsample_grid(&map.weights, grid, h, w);
    let lo = up.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = up.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo > 1e-12 {
        for v in up.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        for v in up.iter_mut() {
            *v = 0.5;
        }
    }
    let pgm = encode_pgm(&up, w, h);

    let mut overlay = img.clone();
    for y in 0..h {
        for x in 0..w {
            let p = overlay.pixel(y, x);
            let heat = up[y * w + x];
            overlay.set_pixel(
                y,
                x,
                [
                    (1.0 - alpha) * p[0] + alpha * heat,
                    (1.0 - alpha) * p[1],
                    (1.0 - alpha) * p[2],
                ],
            );
        }
    }
    let ppm = encode_ppm(&overlay);
    Ok(RenderedHeatmap { pgm, ppm })
}

/// Fraction of (sum-normalized, upsampled) heatmap mass inside a pixel box
/// `(x0, y0, x1, y1)`, exclusive upper bounds.
pub fn mass_in_box(
    map: &Heatmap,
    img_h: usize,
    img_w: usize,
    bbox: (usize, usize, usize, usize),
) -> Result<f32, InterpError> {
    let grid = map
        .grid
        .ok_or_else(|| InterpError::Mode("box mass needs a spatial map".into()))?;
    let up = upsample_grid(&map.weights, grid, img_h, img_w);
    let total: f32 = up.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let (x0, y0, x1, y1) = bbox;
    let mut inside = 0.0f32;
    for y in y0..y1.min(img_h) {
        for x in x0..x1.min(img_w) {
            inside += up[y * img_w + x];
        }
    }
    Ok(inside / total)
}

/// Uniform-attention baseline for the same box: box area over image area.
pub fn uniform_box_mass(img_h: usize, img_w: usize, bbox: (usize, usize, usize, usize)) -> f32 {
    let (x0, y0, x1, y1) = bbox;
    let bw = x1.min(img_w).saturating_sub(x0);
    let bh = y1.min(img_h).saturating_sub(y0);
    (bw * bh) as f32 / (img_h * img_w) as f32
}

/// File-name suffixes for the rendered artifacts.
pub const HEATMAP_PGM_SUFFIX: &str = ".attn.pgm";
pub const HEATMAP_PPM_SUFFIX: &str = ".attn.ppm";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        assemble_sequence, bind_network, encoder_forward, ModelConfig, Network, Phase,
    };
    use crate::vision::encode_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spatial_cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
            max_text: 6,
            vocab_size: 24,
            feature_mode: FeatureMode::Spatial,
            image_size: 64, // grid 2
            cnn_widths: [4, 4, 8, 8, 8],
        }
    }

    fn run_forward(
        net: &Network,
    ) -> (
        Tape<f32>,
        MultimodalSequence,
        EncoderOutput,
    ) {
        let mut tape = Tape::new();
        let bound = bind_network(&mut tape, net, false);
        let mut img = ImageTensor::filled(64, 64, 0.1);
        for y in 8..24 {
            for x in 8..24 {
                img.set_pixel(y, x, [0.9, 0.2, 0.2]);
            }
        }
        let feats = encode_image(
            &mut tape,
            &bound.vision,
            &net.cfg.cnn(),
            net.cfg.feature_mode,
            &img,
        )
        .unwrap();
        let seq = assemble_sequence(
            &mut tape,
            &bound,
            Some(&feats),
            &[7, 8, 9],
            None,
            &net.cfg,
            &mut Phase::Eval,
        )
        .unwrap();
        let out = encoder_forward(&mut tape, &bound, &seq, &net.cfg, &mut Phase::Eval).unwrap();
        (tape, seq, out)
    }

    #[test]
    fn heatmap_sums_to_one_for_all_reductions() {
        let net = Network::init_mlm(spatial_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (tape, seq, out) = run_forward(&net);
        for reduction in [Reduction::LastLayerMeanHeads, Reduction::Rollout] {
            let map = attention_to_image(
                &tape,
                &out,
                &seq,
                FeatureMode::Spatial,
                2,
                reduction,
            )
            .unwrap();
            let sum: f32 = map.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "{reduction:?}: {sum}");
            assert!(map.weights.iter().all(|&w| w >= 0.0));
            assert_eq!(map.grid, Some(2));
            assert_eq!(map.weights.len(), 4);
        }
    }

    #[test]
    fn multiscale_profile_has_five_bins() {
        let cfg = ModelConfig {
            feature_mode: FeatureMode::Multiscale,
            ..spatial_cfg()
        };
        let net = Network::init_mlm(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (tape, seq, out) = run_forward(&net);
        let map = attention_to_image(
            &tape,
            &out,
            &seq,
            FeatureMode::Multiscale,
            0,
            Reduction::LastLayerMeanHeads,
        )
        .unwrap();
        assert_eq!(map.weights.len(), 5);
        assert_eq!(map.grid, None);
    }

    #[test]
    fn uniform_attention_gives_uniform_heatmap_and_rollout_matches() {
        let mut cfg = spatial_cfg();
        cfg.layers = 3;
        let mut net = Network::init_mlm(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for layer in net.trunk.layers.iter_mut() {
            layer.wq.w = crate::tensor::Tensor::zeros(vec![16, 16]);
            layer.wk.w = crate::tensor::Tensor::zeros(vec![16, 16]);
        }
        let (tape, seq, out) = run_forward(&net);
        let last = attention_to_image(
            &tape,
            &out,
            &seq,
            FeatureMode::Spatial,
            2,
            Reduction::LastLayerMeanHeads,
        )
        .unwrap();
        let roll = attention_to_image(&tape, &out, &seq, FeatureMode::Spatial, 2, Reduction::Rollout)
            .unwrap();
        for (a, b) in last.weights.iter().zip(&roll.weights) {
            assert!((a - 0.25).abs() < 1e-6, "last {a}");
            assert!((a - b).abs() < 1e-6, "rollout {b} vs {a}");
        }
    }

    #[test]
    fn render_rejects_multiscale_profile() {
        let map = Heatmap {
            weights: vec![0.2; 5],
            grid: None,
        };
        let img = ImageTensor::filled(16, 16, 0.5);
        assert!(matches!(
            render_heatmap(&map, &img, 0.5),
            Err(InterpError::Mode(_))
        ));
    }

    #[test]
    fn constant_map_renders_mid_gray() {
        let map = Heatmap {
            weights: vec![0.25; 4],
            grid: Some(2),
        };
        let img = ImageTensor::filled(16, 16, 0.0);
        let rendered = render_heatmap(&map, &img, 0.5).unwrap();
        // P5 header "P5\n16 16\n255\n" then 128s
        let body = &rendered.pgm[rendered.pgm.len() - 256..];
        assert!(body.iter().all(|&b| b == 128));
        assert_eq!(&rendered.pgm[..2], b"P5");
    }

    #[test]
    fn delta_map_brightest_at_hot_cell() {
        let map = Heatmap::normalized(vec![0.0, 0.0, 0.0, 1.0], Some(2));
        let img = ImageTensor::filled(32, 32, 0.0);
        let rendered = render_heatmap(&map, &img, 0.5).unwrap();
        let body = &rendered.pgm[rendered.pgm.len() - 32 * 32..];
        // hot cell is bottom-right; its quadrant center must be brightest
        let v_hot = body[24 * 32 + 24];
        let v_cold = body[7 * 32 + 7];
        assert!(v_hot > v_cold, "hot {v_hot} cold {v_cold}");
        assert_eq!(v_hot, 255);
        assert_eq!(v_cold, 0);
    }

    #[test]
    fn output_dimensions_match_input_image() {
        let map = Heatmap::normalized(vec![0.1, 0.2, 0.3, 0.4], Some(2));
        let img = ImageTensor::filled(24, 17, 0.2);
        let rendered = render_heatmap(&map, &img, 0.5).unwrap();
        let pgm = String::from_utf8_lossy(&rendered.pgm[..20]).into_owned();
        assert!(pgm.contains("17 24"), "{pgm}");
        let ppm = String::from_utf8_lossy(&rendered.ppm[..20]).into_owned();
        assert!(ppm.contains("17 24"), "{ppm}");
    }

    #[test]
    fn box_mass_of_concentrated_map_beats_uniform() {
        let map = Heatmap::normalized(vec![1.0, 0.0, 0.0, 0.0], Some(2));
        let bbox = (0, 0, 16, 16); // top-left quadrant of a 32x32 image
        let mass = mass_in_box(&map, 32, 32, bbox).unwrap();
        let baseline = uniform_box_mass(32, 32, bbox);
        assert!(mass > baseline, "mass {mass} baseline {baseline}");
        assert!((baseline - 0.25).abs() < 1e-6);
    }
}
