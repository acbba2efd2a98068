//! Multimodal sequence assembly, the transformer encoder, and the task
//! heads (masked-token prediction, answer classification, question-category
//! classification).
//!
//! Layout of an assembled sequence:
//!
//! ```text
//! [CLS] img_0 .. img_{n-1} [SEP] text_0 .. text_{m-1} [SEP] [PAD] ...
//! ```
//!
//! Segment id 0 covers `[CLS]`, the image tokens, and the first `[SEP]`;
//! segment id 1 covers the text tokens and the final `[SEP]`. Position ids
//! enumerate image tokens and text tokens independently from zero. Padded
//! key positions receive exactly zero attention weight, so padding never
//! leaks gradient.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, RngCore};

use crate::tape::{Tape, Var, IGNORE_INDEX};
use crate::tensor::{fl, randn_tensor, NumericsError, Scalar, Tensor};
use crate::tokenizer::{CLS_ID, PAD_ID, SEP_ID};
use crate::vision::{BoundCnn, CnnConfig, CnnParams, FeatureMode, ImageFeatureVars, STAGES};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(String),
    /// A caller violated an interface contract (bad positions, wrong mode).
    Contract(String),
    /// Numeric failure inside the network, with the failing component named.
    Numeric {
        context: String,
        source: NumericsError,
    },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "model config error: {msg}"),
            ModelError::Contract(msg) => write!(f, "model contract violation: {msg}"),
            ModelError::Numeric { context, source } => {
                write!(f, "numeric failure in {context}: {source}")
            }
        }
    }
}

impl core::error::Error for ModelError {}

impl From<NumericsError> for ModelError {
    fn from(source: NumericsError) -> Self {
        ModelError::Numeric {
            context: "model".to_string(),
            source,
        }
    }
}

fn in_ctx(context: &str) -> impl Fn(NumericsError) -> ModelError + '_ {
    move |source| ModelError::Numeric {
        context: context.to_string(),
        source,
    }
}

/// Hyperparameters of the network; `canonical()` is the checkpoint
/// fingerprint preimage, so everything that affects parameter shapes or the
/// forward graph layout must appear in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_text: usize,
    pub vocab_size: usize,
    pub feature_mode: FeatureMode,
    pub image_size: usize,
    pub cnn_widths: [usize; STAGES],
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers with 3 heads each (12 attention heads
    /// in total), hidden width 128, feed-forward 4x.
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            dim: 128,
            layers: 4,
            heads: 3,
            ffn_dim: 512,
            max_text: 64,
            vocab_size,
            feature_mode: FeatureMode::Multiscale,
            image_size: 224,
            cnn_widths: [16, 32, 64, 128, 128],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err(ModelError::Config("layers and heads must be >= 1".into()));
        }
        if self.max_text == 0 || self.vocab_size < 6 || self.ffn_dim == 0 {
            return Err(ModelError::Config(format!(
                "max_text {}, ffn {}, vocab {} out of range",
                self.max_text, self.ffn_dim, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn cnn(&self) -> CnnConfig {
        CnnConfig::new(self.image_size, self.cnn_widths, self.dim)
    }

    /// Image tokens in the multimodal layout for the configured mode.
    pub fn image_tokens(&self) -> usize {
        self.cnn().token_count(self.feature_mode)
    }

    /// Fixed multimodal sequence length: CLS + image + SEP + text + SEP.
    pub fn seq_len(&self) -> usize {
        1 + self.image_tokens() + 1 + self.max_text + 1
    }

    /// Fixed text-only sequence length: CLS + text + SEP.
    pub fn text_only_len(&self) -> usize {
        1 + self.max_text + 1
    }

    /// Rows in the position-embedding table (per-modality enumeration plus
    /// the trailing separator index).
    pub fn pos_rows(&self) -> usize {
        self.image_tokens().max(self.max_text) + 1
    }

    pub fn canonical(&self) -> String {
        format!(
            "dim={} layers={} heads={} ffn={} max_text={} vocab={} mode={} image={} widths={},{},{},{},{}",
            self.dim,
            self.layers,
            self.heads,
            self.ffn_dim,
            self.max_text,
            self.vocab_size,
            self.feature_mode.as_str(),
            self.image_size,
            self.cnn_widths[0],
            self.cnn_widths[1],
            self.cnn_widths[2],
            self.cnn_widths[3],
            self.cnn_widths[4],
        )
    }

    pub fn parse_canonical(s: &str) -> Result<ModelConfig, ModelError> {
        let mut map = BTreeMap::new();
        for part in s.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("bad config entry {part:?}")))?;
            map.insert(k, v);
        }
        let get = |k: &str| -> Result<&str, ModelError> {
            map.get(k)
                .copied()
                .ok_or_else(|| ModelError::Config(format!("config missing key {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Config(format!("config key {k} is not a number")))
        };
        let widths_str = get("widths")?;
        let mut widths = [0usize; STAGES];
        let parts: Vec<&str> = widths_str.split(',').collect();
        if parts.len() != STAGES {
            return Err(ModelError::Config(format!(
                "widths must list {STAGES} stages"
            )));
        }
        for (i, p) in parts.iter().enumerate() {
            widths[i] = p
                .parse()
                .map_err(|_| ModelError::Config(format!("bad width {p:?}")))?;
        }
        let mode_str = get("mode")?;
        let cfg = ModelConfig {
            dim: num("dim")?,
            layers: num("layers")?,
            heads: num("heads")?,
            ffn_dim: num("ffn")?,
            max_text: num("max_text")?,
            vocab_size: num("vocab")?,
            feature_mode: FeatureMode::parse(mode_str)
                .ok_or_else(|| ModelError::Config(format!("bad mode {mode_str:?}")))?,
            image_size: num("image")?,
            cnn_widths: widths,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- parameters -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl LinearParams {
    fn init(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: randn_tensor(vec![rows, cols], 0.02, rng),
            b: Tensor::zeros(vec![cols]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        f(format!("{prefix}.g"), &self.gamma);
        f(format!("{prefix}.b"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        f(format!("{prefix}.g"), &mut self.gamma);
        f(format!("{prefix}.b"), &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2: LayerNormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
}

impl EncoderLayerParams {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        EncoderLayerParams {
            ln1: LayerNormParams::init(d),
            wq: LinearParams::init(d, d, rng),
            wk: LinearParams::init(d, d, rng),
            wv: LinearParams::init(d, d, rng),
            wo: LinearParams::init(d, d, rng),
            ln2: LayerNormParams::init(d),
            ffn_in: LinearParams::init(d, cfg.ffn_dim, rng),
            ffn_out: LinearParams::init(cfg.ffn_dim, d, rng),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn_in.visit_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{prefix}.ffn_out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub token: Tensor<f32>,
    pub position: Tensor<f32>,
    pub segment: Tensor<f32>,
}

impl EmbeddingParams {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        EmbeddingParams {
            token: randn_tensor(vec![cfg.vocab_size, cfg.dim], 0.02, rng),
            position: randn_tensor(vec![cfg.pos_rows(), cfg.dim], 0.02, rng),
            segment: randn_tensor(vec![2, cfg.dim], 0.02, rng),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        f(format!("{prefix}.token"), &self.token);
        f(format!("{prefix}.position"), &self.position);
        f(format!("{prefix}.segment"), &self.segment);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        f(format!("{prefix}.token"), &mut self.token);
        f(format!("{prefix}.position"), &mut self.position);
        f(format!("{prefix}.segment"), &mut self.segment);
    }
}

/// Everything shared between pretraining and finetuning: embeddings, the
/// encoder stack, and the image extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkParams {
    pub embed: EmbeddingParams,
    pub layers: Vec<EncoderLayerParams>,
    pub final_ln: LayerNormParams,
    pub vision: CnnParams,
}

impl TrunkParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        TrunkParams {
            embed: EmbeddingParams::init(cfg, rng),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayerParams::init(cfg, rng))
                .collect(),
            final_ln: LayerNormParams::init(cfg.dim),
            vision: CnnParams::init(&cfg.cnn(), rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        self.embed.visit("embed", f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("enc.{i}"), f);
        }
        self.final_ln.visit("enc.final_ln", f);
        self.vision.visit("vision", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        self.embed.visit_mut("embed", f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("enc.{i}"), f);
        }
        self.final_ln.visit_mut("enc.final_ln", f);
        self.vision.visit_mut("vision", f);
    }
}

/// Masked-token prediction head: dense + gelu + layer norm + vocab projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHeadParams {
    pub dense: LinearParams,
    pub ln: LayerNormParams,
    pub out: LinearParams,
}

impl MlmHeadParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        MlmHeadParams {
            dense: LinearParams::init(cfg.dim, cfg.dim, rng),
            ln: LayerNormParams::init(cfg.dim),
            out: LinearParams::init(cfg.dim, cfg.vocab_size, rng),
        }
    }
}

/// Mean-pool classification head used for both answers and categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolHeadParams {
    pub dense: LinearParams,
    pub out: LinearParams,
}

impl PoolHeadParams {
    pub fn init(cfg: &ModelConfig, classes: usize, rng: &mut impl Rng) -> Self {
        PoolHeadParams {
            dense: LinearParams::init(cfg.dim, cfg.dim, rng),
            out: LinearParams::init(cfg.dim, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.out.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Mlm(MlmHeadParams),
    Vqa(PoolHeadParams),
    Category(PoolHeadParams),
}

impl Head {
    pub fn kind(&self) -> &'static str {
        match self {
            Head::Mlm(_) => "mlm",
            Head::Vqa(_) => "vqa",
            Head::Category(_) => "category",
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        match self {
            Head::Mlm(h) => {
                h.dense.visit("head.mlm.dense", f);
                h.ln.visit("head.mlm.ln", f);
                h.out.visit("head.mlm.out", f);
            }
            Head::Vqa(h) => {
                h.dense.visit("head.vqa.dense", f);
                h.out.visit("head.vqa.out", f);
            }
            Head::Category(h) => {
                h.dense.visit("head.category.dense", f);
                h.out.visit("head.category.out", f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        match self {
            Head::Mlm(h) => {
                h.dense.visit_mut("head.mlm.dense", f);
                h.ln.visit_mut("head.mlm.ln", f);
                h.out.visit_mut("head.mlm.out", f);
            }
            Head::Vqa(h) => {
                h.dense.visit_mut("head.vqa.dense", f);
                h.out.visit_mut("head.vqa.out", f);
            }
            Head::Category(h) => {
                h.dense.visit_mut("head.category.dense", f);
                h.out.visit_mut("head.category.out", f);
            }
        }
    }
}

/// A complete model: config, shared trunk, and one task head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
    pub trunk: TrunkParams,
    pub head: Head,
}

impl Network {
    pub fn init_mlm(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Network, ModelError> {
        cfg.validate()?;
        Ok(Network {
            trunk: TrunkParams::init(&cfg, rng),
            head: Head::Mlm(MlmHeadParams::init(&cfg, rng)),
            cfg,
        })
    }

    pub fn init_vqa(
        cfg: ModelConfig,
        answers: usize,
        rng: &mut impl Rng,
    ) -> Result<Network, ModelError> {
        cfg.validate()?;
        if answers < 2 {
            return Err(ModelError::Config(format!(
                "answer classification needs >= 2 classes, got {answers}"
            )));
        }
        Ok(Network {
            trunk: TrunkParams::init(&cfg, rng),
            head: Head::Vqa(PoolHeadParams::init(&cfg, answers, rng)),
            cfg,
        })
    }

    pub fn init_category(
        cfg: ModelConfig,
        categories: usize,
        rng: &mut impl Rng,
    ) -> Result<Network, ModelError> {
        cfg.validate()?;
        if categories < 2 {
            return Err(ModelError::Config(format!(
                "category classification needs >= 2 classes, got {categories}"
            )));
        }
        Ok(Network {
            trunk: TrunkParams::init(&cfg, rng),
            head: Head::Category(PoolHeadParams::init(&cfg, categories, rng)),
            cfg,
        })
    }

    /// Walk every named parameter in a fixed order (checkpoint order).
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        self.trunk.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        self.trunk.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// Copy parameters with matching names and shapes from another model
    /// (encoder + embeddings + vision carry over; heads differ). Returns the
    /// number of tensors copied.
    pub fn load_matching(&mut self, donor: &Network) -> usize {
        let mut donor_map: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
        donor.visit(&mut |name, t| {
            donor_map.insert(name, t);
        });
        let mut copied = 0;
        self.visit_mut(&mut |name, t| {
            if let Some(src) = donor_map.get(&name) {
                if src.shape() == t.shape() {
                    *t = (*src).clone();
                    copied += 1;
                }
            }
        });
        copied
    }
}

// ---- tape bindings ------------------------------------------------------------

pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

pub struct BoundLayer {
    pub ln1: BoundLayerNorm,
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub ln2: BoundLayerNorm,
    pub ffn_in: BoundLinear,
    pub ffn_out: BoundLinear,
}

pub struct BoundEmbeddings {
    pub token: Var,
    pub position: Var,
    pub segment: Var,
}

pub enum BoundHead {
    Mlm {
        dense: BoundLinear,
        ln: BoundLayerNorm,
        out: BoundLinear,
    },
    Pool {
        dense: BoundLinear,
        out: BoundLinear,
    },
}

/// All parameters of a [`Network`] registered on a tape, plus the
/// name-to-variable pairing in visit order (used to read out gradients).
pub struct BoundNetwork {
    pub vars: Vec<(String, Var)>,
    pub embed: BoundEmbeddings,
    pub layers: Vec<BoundLayer>,
    pub final_ln: BoundLayerNorm,
    pub vision: BoundCnn,
    pub head: BoundHead,
}

pub fn bind_network<F: Scalar>(tape: &mut Tape<F>, net: &Network, trainable: bool) -> BoundNetwork {
    let mut vars = Vec::new();
    let mut by_name: BTreeMap<String, Var> = BTreeMap::new();
    let mut ordered: Vec<(String, &Tensor<f32>)> = Vec::new();
    net.visit(&mut |name, t| ordered.push((name, t)));
    for (name, t) in ordered {
        let v = tape.leaf(t.cast(), trainable);
        by_name.insert(name.clone(), v);
        vars.push((name, v));
    }
    let get = |name: &str| -> Var {
        *by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from bind map"))
    };
    let lin = |p: &str| BoundLinear {
        w: get(&format!("{p}.w")),
        b: get(&format!("{p}.b")),
    };
    let ln = |p: &str| BoundLayerNorm {
        gamma: get(&format!("{p}.g")),
        beta: get(&format!("{p}.b")),
    };
    let layers = (0..net.cfg.layers)
        .map(|i| BoundLayer {
            ln1: ln(&format!("enc.{i}.ln1")),
            wq: lin(&format!("enc.{i}.wq")),
            wk: lin(&format!("enc.{i}.wk")),
            wv: lin(&format!("enc.{i}.wv")),
            wo: lin(&format!("enc.{i}.wo")),
            ln2: ln(&format!("enc.{i}.ln2")),
            ffn_in: lin(&format!("enc.{i}.ffn_in")),
            ffn_out: lin(&format!("enc.{i}.ffn_out")),
        })
        .collect();
    let vision = BoundCnn {
        conv_w: (0..STAGES)
            .map(|i| get(&format!("vision.conv{i}.w")))
            .collect(),
        conv_b: (0..STAGES)
            .map(|i| get(&format!("vision.conv{i}.b")))
            .collect(),
        proj_w: (0..STAGES)
            .map(|i| get(&format!("vision.proj{i}.w")))
            .collect(),
        proj_b: (0..STAGES)
            .map(|i| get(&format!("vision.proj{i}.b")))
            .collect(),
    };
    let head = match &net.head {
        Head::Mlm(_) => BoundHead::Mlm {
            dense: lin("head.mlm.dense"),
            ln: ln("head.mlm.ln"),
            out: lin("head.mlm.out"),
        },
        Head::Vqa(_) => BoundHead::Pool {
            dense: lin("head.vqa.dense"),
            out: lin("head.vqa.out"),
        },
        Head::Category(_) => BoundHead::Pool {
            dense: lin("head.category.dense"),
            out: lin("head.category.out"),
        },
    };
    BoundNetwork {
        embed: BoundEmbeddings {
            token: get("embed.token"),
            position: get("embed.position"),
            segment: get("embed.segment"),
        },
        layers,
        final_ln: ln("enc.final_ln"),
        vision,
        head,
        vars,
    }
}

// ---- forward ------------------------------------------------------------------

/// Training vs. evaluation execution: training applies seeded dropout.
pub enum Phase<'a> {
    Eval,
    Train {
        rng: &'a mut dyn RngCore,
        dropout: f64,
    },
}

impl Phase<'_> {
    fn apply<F: Scalar>(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var, NumericsError> {
        match self {
            Phase::Eval => Ok(x),
            Phase::Train { rng, dropout } => {
                if *dropout <= 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - *dropout;
                let shape = tape.value(x).shape().to_vec();
                let n: usize = shape.iter().product();
                let scale = fl::<F>(1.0 / keep);
                let data = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, data)?);
                tape.mul(x, mask)
            }
        }
    }
}

/// Assembled encoder input: embedded matrix plus layout bookkeeping.
pub struct MultimodalSequence {
    pub x: Var,
    /// True at non-padding positions.
    pub valid: Vec<bool>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    /// Number of image tokens in the layout (0 for text-only sequences).
    pub n_img: usize,
    /// Index of the first text token.
    pub text_start: usize,
    /// Number of real (non-padded) text tokens.
    pub n_text: usize,
    /// Labels aligned to the layout; [`IGNORE_INDEX`] away from masks.
    pub labels: Vec<usize>,
}

impl MultimodalSequence {
    pub fn seq_len(&self) -> usize {
        self.valid.len()
    }

    /// Layout indices carrying a masked-token label.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_INDEX)
            .map(|(i, _)| i)
            .collect()
    }

    /// Labels for [`masked_positions`](Self::masked_positions), same order.
    pub fn masked_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != IGNORE_INDEX)
            .collect()
    }
}

/// Build the fixed-length encoder input: content embeddings (image features
/// enter directly, text through the token table) plus per-modality position
/// embeddings plus segment embeddings. Text beyond `max_text` is truncated;
/// image tokens never are.
pub fn assemble_sequence<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNetwork,
    image: Option<&ImageFeatureVars>,
    text_ids: &[usize],
    text_labels: Option<&[usize]>,
    cfg: &ModelConfig,
    phase: &mut Phase<'_>,
) -> Result<MultimodalSequence, ModelError> {
    let ctx = in_ctx("assemble");
    let n_img = match image {
        Some(feats) => {
            let t = tape.value(feats.tokens);
            if t.cols() != cfg.dim {
                return Err(ModelError::Contract(format!(
                    "image feature dim {} does not match hidden dim {}",
                    t.cols(),
                    cfg.dim
                )));
            }
            t.rows()
        }
        None => 0,
    };
    let n_text = text_ids.len().min(cfg.max_text);
    let text_ids = &text_ids[..n_text];

    let seq_len = if image.is_some() {
        cfg.seq_len()
    } else {
        cfg.text_only_len()
    };
    let text_start = if image.is_some() { 1 + n_img + 1 } else { 1 };
    let used = text_start + n_text + 1;
    let n_pad = seq_len - used;

    let mut ids_for_content: Vec<usize> = Vec::with_capacity(seq_len - n_img);
    let mut positions: Vec<usize> = Vec::with_capacity(seq_len);
    let mut segments: Vec<usize> = Vec::with_capacity(seq_len);
    let mut valid = vec![true; seq_len];

    ids_for_content.push(CLS_ID);
    positions.push(0);
    segments.push(0);
    if image.is_some() {
        for p in 0..n_img {
            positions.push(p);
            segments.push(0);
        }
        ids_for_content.push(SEP_ID);
        positions.push(n_img);
        segments.push(0);
    }
    for (i, &id) in text_ids.iter().enumerate() {
        ids_for_content.push(id);
        positions.push(i);
        segments.push(1);
    }
    ids_for_content.push(SEP_ID);
    positions.push(n_text);
    segments.push(1);
    for i in 0..n_pad {
        ids_for_content.push(PAD_ID);
        positions.push(0);
        segments.push(1);
        valid[used + i] = false;
    }

    // Content rows: [CLS], then image features, then the rest of the ids.
    let content = if let Some(feats) = image {
        let cls = tape.gather(bound.embed.token, &[CLS_ID]).map_err(&ctx)?;
        let rest = tape
            .gather(bound.embed.token, &ids_for_content[1..])
            .map_err(&ctx)?;
        tape.concat_rows(&[cls, feats.tokens, rest]).map_err(&ctx)?
    } else {
        tape.gather(bound.embed.token, &ids_for_content)
            .map_err(&ctx)?
    };

    let pos_emb = tape
        .gather(bound.embed.position, &positions)
        .map_err(&ctx)?;
    let seg_emb = tape
        .gather(bound.embed.segment, &segments)
        .map_err(&ctx)?;
    let sum = tape.add(content, pos_emb).map_err(&ctx)?;
    let embedded = tape.add(sum, seg_emb).map_err(&ctx)?;
    let x = phase.apply(tape, embedded).map_err(&ctx)?;

    let mut labels = vec![IGNORE_INDEX; seq_len];
    if let Some(l) = text_labels {
        for i in 0..n_text {
            labels[text_start + i] = l[i];
        }
    }

    Ok(MultimodalSequence {
        x,
        valid,
        segments,
        positions,
        n_img,
        text_start,
        n_text,
        labels,
    })
}

/// Encoder result: final hidden states plus every attention map,
/// `attention[layer][head]` of shape `[T, T]`.
pub struct EncoderOutput {
    pub hidden: Var,
    pub attention: Vec<Vec<Var>>,
}

/// Pre-norm transformer stack with scaled dot-product multi-head attention.
/// Padded keys are excluded from every softmax, receiving exactly zero
/// weight and zero gradient.
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNetwork,
    seq: &MultimodalSequence,
    cfg: &ModelConfig,
    phase: &mut Phase<'_>,
) -> Result<EncoderOutput, ModelError> {
    let dk = cfg.dim / cfg.heads;
    let scale = fl::<F>(1.0 / (dk as f64).sqrt());
    let mut x = seq.x;
    let mut attention = Vec::with_capacity(cfg.layers);
    for (l, layer) in bound.layers.iter().enumerate() {
        let label = format!("encoder layer {l}");
        let ctx = in_ctx(&label);
        let h = tape
            .layer_norm(x, layer.ln1.gamma, layer.ln1.beta, fl(1e-5))
            .map_err(&ctx)?;
        let q = tape.matmul(h, layer.wq.w).map_err(&ctx)?;
        let q = tape.add_bias(q, layer.wq.b).map_err(&ctx)?;
        let k = tape.matmul(h, layer.wk.w).map_err(&ctx)?;
        let k = tape.add_bias(k, layer.wk.b).map_err(&ctx)?;
        let v = tape.matmul(h, layer.wv.w).map_err(&ctx)?;
        let v = tape.add_bias(v, layer.wv.b).map_err(&ctx)?;

        let mut head_outputs = Vec::with_capacity(cfg.heads);
        let mut head_attn = Vec::with_capacity(cfg.heads);
        for hi in 0..cfg.heads {
            let qh = tape.slice_cols(q, hi * dk, dk).map_err(&ctx)?;
            let kh = tape.slice_cols(k, hi * dk, dk).map_err(&ctx)?;
            let vh = tape.slice_cols(v, hi * dk, dk).map_err(&ctx)?;
            let kt = tape.transpose(kh).map_err(&ctx)?;
            let scores = tape.matmul(qh, kt).map_err(&ctx)?;
            let scaled = tape.scale(scores, scale).map_err(&ctx)?;
            let attn = tape.masked_softmax(scaled, &seq.valid).map_err(&ctx)?;
            let ctx_h = tape.matmul(attn, vh).map_err(&ctx)?;
            head_outputs.push(ctx_h);
            head_attn.push(attn);
        }
        let concat = tape.concat_cols(&head_outputs).map_err(&ctx)?;
        let proj = tape.matmul(concat, layer.wo.w).map_err(&ctx)?;
        let proj = tape.add_bias(proj, layer.wo.b).map_err(&ctx)?;
        let proj = phase.apply(tape, proj).map_err(&ctx)?;
        x = tape.add(x, proj).map_err(&ctx)?;

        let f2 = tape
            .layer_norm(x, layer.ln2.gamma, layer.ln2.beta, fl(1e-5))
            .map_err(&ctx)?;
        let a = tape.matmul(f2, layer.ffn_in.w).map_err(&ctx)?;
        let a = tape.add_bias(a, layer.ffn_in.b).map_err(&ctx)?;
        let g = tape.gelu(a).map_err(&ctx)?;
        let b2 = tape.matmul(g, layer.ffn_out.w).map_err(&ctx)?;
        let b2 = tape.add_bias(b2, layer.ffn_out.b).map_err(&ctx)?;
        let b2 = phase.apply(tape, b2).map_err(&ctx)?;
        x = tape.add(x, b2).map_err(&ctx)?;

        attention.push(head_attn);
    }
    let ctx = in_ctx("encoder final norm");
    let hidden = tape
        .layer_norm(x, bound.final_ln.gamma, bound.final_ln.beta, fl(1e-5))
        .map_err(&ctx)?;
    Ok(EncoderOutput { hidden, attention })
}

/// Per-masked-position vocabulary logits: dense + gelu + layer norm +
/// projection, shape `[len(positions), vocab]`.
pub fn mlm_logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNetwork,
    out: &EncoderOutput,
    positions: &[usize],
    seq: &MultimodalSequence,
) -> Result<Var, ModelError> {
    let (dense, lnp, proj) = match &bound.head {
        BoundHead::Mlm { dense, ln, out } => (dense, ln, out),
        BoundHead::Pool { .. } => {
            return Err(ModelError::Contract(
                "masked-token logits requested from a classification head".into(),
            ))
        }
    };
    if positions.is_empty() {
        // No masked positions: the downstream loss would be empty.
        return Err(ModelError::Numeric {
            context: "mlm head".to_string(),
            source: NumericsError::EmptyLoss,
        });
    }
    let text_end = seq.text_start + seq.n_text;
    for &p in positions {
        if p < seq.text_start || p >= text_end {
            return Err(ModelError::Contract(format!(
                "masked position {p} outside the text region {}..{text_end}",
                seq.text_start
            )));
        }
    }
    let ctx = in_ctx("mlm head");
    let picked = tape.gather(out.hidden, positions).map_err(&ctx)?;
    let d = tape.matmul(picked, dense.w).map_err(&ctx)?;
    let d = tape.add_bias(d, dense.b).map_err(&ctx)?;
    let g = tape.gelu(d).map_err(&ctx)?;
    let n = tape
        .layer_norm(g, lnp.gamma, lnp.beta, fl(1e-5))
        .map_err(&ctx)?;
    let logits = tape.matmul(n, proj.w).map_err(&ctx)?;
    tape.add_bias(logits, proj.b).map_err(&ctx)
}

fn pool_logits<F: Scalar>(
    tape: &mut Tape<F>,
    dense: &BoundLinear,
    proj: &BoundLinear,
    out: &EncoderOutput,
    seq: &MultimodalSequence,
    context: &str,
) -> Result<Var, ModelError> {
    let ctx = in_ctx(context);
    let pooled = tape
        .mean_rows_masked(out.hidden, &seq.valid)
        .map_err(&ctx)?;
    let dim = tape.value(pooled).len();
    let row = tape.reshape(pooled, vec![1, dim]).map_err(&ctx)?;
    let d = tape.matmul(row, dense.w).map_err(&ctx)?;
    let d = tape.add_bias(d, dense.b).map_err(&ctx)?;
    let g = tape.gelu(d).map_err(&ctx)?;
    let logits = tape.matmul(g, proj.w).map_err(&ctx)?;
    let logits = tape.add_bias(logits, proj.b).map_err(&ctx)?;
    let classes = tape.value(logits).cols();
    tape.reshape(logits, vec![classes]).map_err(&ctx)
}

/// Answer-class logits from the mean of non-padded last-layer states.
pub fn vqa_logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNetwork,
    out: &EncoderOutput,
    seq: &MultimodalSequence,
) -> Result<Var, ModelError> {
    match &bound.head {
        BoundHead::Pool { dense, out: proj } => pool_logits(tape, dense, proj, out, seq, "vqa head"),
        BoundHead::Mlm { .. } => Err(ModelError::Contract(
            "answer logits requested from a masked-token head".into(),
        )),
    }
}

/// Question-category logits; the sequence must be text-only.
pub fn category_logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNetwork,
    out: &EncoderOutput,
    seq: &MultimodalSequence,
) -> Result<Var, ModelError> {
    if seq.n_img != 0 {
        return Err(ModelError::Contract(format!(
            "category classification requires a text-only sequence, found {} image tokens",
            seq.n_img
        )));
    }
    match &bound.head {
        BoundHead::Pool { dense, out: proj } => {
            pool_logits(tape, dense, proj, out, seq, "category head")
        }
        BoundHead::Mlm { .. } => Err(ModelError::Contract(
            "category logits requested from a masked-token head".into(),
        )),
    }
}

/// Index of the largest logit; ties break toward the lowest class id.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
