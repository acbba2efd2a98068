//! Pretraining (masked-token prediction over image+caption pairs) and
//! finetuning (answer or category classification), with Adam,
//! reduce-on-plateau scheduling, early stopping, and best-checkpoint
//! selection.
//!
//! Determinism contract: all randomness derives from the master seed plus
//! fixed stream tags (epoch, sample index), and per-sample gradients are
//! summed in sample order, so results are bit-identical for a fixed seed
//! regardless of the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mmvqa_core::model::{
    assemble_sequence, bind_network, category_logits, encoder_forward, mlm_logits, vqa_logits,
    argmax, BoundNetwork, ModelConfig, Network, Phase,
};
use mmvqa_core::optim::{average_grads, clip_global_norm, plateau_lr, AdamState, PlateauConfig};
use mmvqa_core::tensor::Tensor;
use mmvqa_core::tokenizer::{
    mask_keywords, tokenize, tokenize_with_keywords, MaskPolicy, TokenSequence, Vocab,
};
use mmvqa_core::vision::{
    augment, decode_ppm, encode_image, resize_bilinear, AugmentConfig, ImageTensor,
};
use mmvqa_core::Tape;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize_category, AnswerSpace, CaptionRecord, VqaRecord};
use crate::checkpoint::Checkpoint;
use crate::error::AppError;

/// Worker count: `MMVQA_THREADS` if set, otherwise available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MMVQA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Order-preserving parallel map over contiguous chunks.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, slice) in items.chunks(chunk).enumerate() {
            let f = &f;
            handles.push(scope.spawn(move || {
                slice
                    .iter()
                    .enumerate()
                    .map(|(i, t)| f(w * chunk + i, t))
                    .collect::<Vec<R>>()
            }));
        }
        for h in handles {
            out.push(h.join().expect("worker panicked"));
        }
    });
    out.into_iter().flatten().collect()
}

/// Mix a master seed with stream tags into an independent per-sample seed.
pub fn derive_seed(master: u64, stream: u64, epoch: u64, index: u64) -> u64 {
    let mut x = master
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ index.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// Common training knobs shared by both phases.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub decay: f64,
    pub min_lr: f64,
    pub early_stop: usize,
    pub clip: f64,
    pub dropout: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub threads: usize,
    pub augment: AugmentConfig,
    pub keyword_rate: f64,
    pub fallback_rate: f64,
    pub quiet: bool,
}

impl TrainOptions {
    pub fn pretrain_defaults() -> TrainOptions {
        TrainOptions {
            lr: 2e-5,
            batch: 32,
            epochs: 60,
            patience: 5,
            decay: 0.1,
            min_lr: 1e-7,
            early_stop: 0,
            clip: 1.0,
            dropout: 0.1,
            val_fraction: 0.1,
            seed: 0,
            threads: worker_threads(),
            augment: AugmentConfig::default(),
            keyword_rate: 1.0,
            fallback_rate: 0.15,
            quiet: false,
        }
    }

    pub fn finetune_defaults() -> TrainOptions {
        TrainOptions {
            lr: 1e-4,
            patience: 10,
            epochs: 100,
            early_stop: 20,
            ..TrainOptions::pretrain_defaults()
        }
    }

    pub fn validate(&self) -> Result<(), AppError> {
        if self.lr <= 0.0 {
            return Err(AppError::usage(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(AppError::usage("patience must be >= 1"));
        }
        if !(0.0 < self.decay && self.decay < 1.0) {
            return Err(AppError::usage(format!(
                "decay factor must be in (0, 1), got {}",
                self.decay
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(AppError::usage("batch and epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(AppError::usage("val_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            base_lr: self.lr,
            factor: self.decay,
            patience: self.patience,
            min_lr: self.min_lr,
        }
    }
}

// ---- sample preparation ----------------------------------------------------

struct PreparedCaption {
    image: Vec<u8>,
    seq: TokenSequence,
}

fn read_image_bytes(path: &Path) -> Result<Vec<u8>, AppError> {
    std::fs::read(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

fn prepare_captions(
    records: &[CaptionRecord],
    vocab: &Vocab,
    threads: usize,
) -> Result<Vec<PreparedCaption>, AppError> {
    let prepared = parallel_map(records, threads, |_, r| {
        let image = read_image_bytes(&r.image)?;
        let keywords: Vec<&str> = r.keywords.iter().map(String::as_str).collect();
        let seq = tokenize_with_keywords(&r.caption, &keywords, vocab);
        Ok::<PreparedCaption, AppError>(PreparedCaption { image, seq })
    });
    prepared.into_iter().collect()
}

/// Decode, optionally augment, and resize to the extractor input size.
fn load_input_image(
    bytes: &[u8],
    cfg: &ModelConfig,
    aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
) -> Result<ImageTensor, AppError> {
    let mut img = decode_ppm(bytes)?;
    if let Some((cfg_aug, rng)) = aug {
        img = augment(&img, cfg_aug, rng)?;
    }
    if img.height() != cfg.image_size || img.width() != cfg.image_size {
        img = resize_bilinear(&img, cfg.image_size, cfg.image_size)?;
    }
    Ok(img)
}

struct MlmPass {
    loss: f64,
    grads: Option<BTreeMap<String, Tensor<f32>>>,
    masked_correct: usize,
    masked_total: usize,
}

fn collect_grads(tape: &Tape<f32>, bound: &BoundNetwork) -> BTreeMap<String, Tensor<f32>> {
    bound
        .vars
        .iter()
        .map(|(name, var)| {
            let g = tape
                .grad(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
            (name.clone(), g)
        })
        .collect()
}

/// Full forward (and backward, when training) of one masked caption.
/// Returns `None` when the sample drew zero masks this round.
fn mlm_sample_pass(
    net: &Network,
    prepared: &PreparedCaption,
    policy: &MaskPolicy,
    opts: &TrainOptions,
    img_override: Option<&ImageTensor>,
    mask_seed: u64,
    aug_seed: Option<u64>,
    train: bool,
) -> Result<Option<MlmPass>, AppError> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let masked = mask_keywords(&prepared.seq, policy, &mut mask_rng);
    if masked.is_skippable() {
        return Ok(None);
    }
    let img = match img_override {
        Some(img) => img.clone(),
        None => {
            let mut aug_rng = aug_seed.map(ChaCha8Rng::seed_from_u64);
            let aug = match (&mut aug_rng, train) {
                (Some(rng), true) => Some((&opts.augment, rng)),
                _ => None,
            };
            load_input_image(&prepared.image, &net.cfg, aug)?
        }
    };

    let mut tape = Tape::<f32>::new();
    let bound = bind_network(&mut tape, net, train);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mask_seed ^ 0xD0D0);
    let mut phase = if train {
        Phase::Train {
            rng: &mut dropout_rng as &mut dyn RngCore,
            dropout: opts.dropout,
        }
    } else {
        Phase::Eval
    };
    let feats = encode_image(&mut tape, &bound.vision, &net.cfg.cnn(), net.cfg.feature_mode, &img)?;
    let seq = assemble_sequence(
        &mut tape,
        &bound,
        Some(&feats),
        &masked.input_ids,
        Some(&masked.labels),
        &net.cfg,
        &mut phase,
    )?;
    let positions = seq.masked_positions();
    if positions.is_empty() {
        // every masked token fell beyond the text truncation point
        return Ok(None);
    }
    let out = encoder_forward(&mut tape, &bound, &seq, &net.cfg, &mut phase)?;
    let logits = mlm_logits(&mut tape, &bound, &out, &positions, &seq)?;
    let labels = seq.masked_labels();
    let loss = tape.cross_entropy(logits, &labels)?;
    let loss_value = tape.value(loss).item() as f64;

    let logit_rows = tape.value(logits).clone();
    let mut correct = 0;
    for (row, &label) in labels.iter().enumerate() {
        let v = &logit_rows.data()[row * net.cfg.vocab_size..(row + 1) * net.cfg.vocab_size];
        if argmax(v) == label {
            correct += 1;
        }
    }

    let grads = if train {
        tape.backward(loss)?;
        Some(collect_grads(&tape, &bound))
    } else {
        None
    };
    Ok(Some(MlmPass {
        loss: loss_value,
        grads,
        masked_correct: correct,
        masked_total: labels.len(),
    }))
}

fn apply_update(
    net: &mut Network,
    adam: &mut AdamState,
    mut grads: BTreeMap<String, Tensor<f32>>,
    lr: f64,
    clip: f64,
) -> Result<(), AppError> {
    clip_global_norm(&mut grads, clip);
    adam.begin_step();
    let mut failure: Option<AppError> = None;
    net.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        match grads.get(&name) {
            Some(g) => {
                if let Err(e) = adam.update(&name, tensor, g, lr) {
                    failure = Some(e.into());
                }
            }
            None => {
                failure = Some(
                    mmvqa_core::optim::OptimError::MissingGrad { name }.into(),
                )
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn seeded_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0, 0));
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn shuffled(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE, epoch, 0));
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_history: Vec<f64>,
}

/// Masked-language pretraining over a caption corpus. Tracks validation
/// loss, applies the plateau schedule, and writes the best checkpoint.
pub fn pretrain(
    records: &[CaptionRecord],
    val_records: Option<&[CaptionRecord]>,
    vocab: &Vocab,
    cfg: ModelConfig,
    opts: &TrainOptions,
    out: &Path,
) -> Result<TrainOutcome, AppError> {
    opts.validate()?;
    if records.is_empty() {
        return Err(AppError::data("pretraining corpus is empty"));
    }
    if cfg.vocab_size != vocab.len() {
        return Err(AppError::usage(format!(
            "config vocab size {} does not match vocabulary {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    let policy = MaskPolicy {
        keyword_rate: opts.keyword_rate,
        fallback_rate: opts.fallback_rate,
    };

    let prepared = prepare_captions(records, vocab, opts.threads)?;
    let maskable = prepared.iter().any(|p| {
        p.seq.keyword.iter().any(|&k| k) || (opts.fallback_rate > 0.0 && !p.seq.is_empty())
    });
    if !maskable {
        return Err(AppError::data(
            "no maskable samples: corpus has no keywords and the fallback rate is zero",
        ));
    }

    let (train_prepared, val_prepared): (Vec<&PreparedCaption>, Vec<&PreparedCaption>) =
        match val_records {
            Some(vr) => {
                let vp = prepare_captions(vr, vocab, opts.threads)?;
                // leak-free ownership: keep both vectors alive below
                return pretrain_loop(prepared.iter().collect(), vp.iter().collect(), vocab, cfg, opts, policy, out);
            }
            None => {
                let (ti, vi) = seeded_split(prepared.len(), opts.val_fraction, opts.seed);
                (
                    ti.into_iter().map(|i| &prepared[i]).collect(),
                    vi.into_iter().map(|i| &prepared[i]).collect(),
                )
            }
        };
    pretrain_loop(train_prepared, val_prepared, vocab, cfg, opts, policy, out)
}

fn pretrain_loop(
    train_set: Vec<&PreparedCaption>,
    val_set: Vec<&PreparedCaption>,
    _vocab: &Vocab,
    cfg: ModelConfig,
    opts: &TrainOptions,
    policy: MaskPolicy,
    out: &Path,
) -> Result<TrainOutcome, AppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = Network::init_mlm(cfg, &mut rng)?;
    let mut adam = AdamState::new();

    let mut history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, usize, Network, AdamState)> = None;
    let mut epochs_run = 0;

    for epoch in 0..opts.epochs {
        epochs_run = epoch + 1;
        let lr = plateau_lr(&history, &opts.plateau());
        let order = shuffled(&(0..train_set.len()).collect::<Vec<_>>(), opts.seed, epoch as u64);
        let mut train_loss = 0.0;
        let mut train_batches = 0usize;
        for batch in order.chunks(opts.batch) {
            let passes = parallel_map(batch, opts.threads, |_, &idx| {
                mlm_sample_pass(
                    &net,
                    train_set[idx],
                    &policy,
                    opts,
                    None,
                    derive_seed(opts.seed, STREAM_TRAIN, epoch as u64, idx as u64),
                    Some(derive_seed(opts.seed, STREAM_TRAIN + 100, epoch as u64, idx as u64)),
                    true,
                )
            });
            let mut grad_maps = Vec::new();
            let mut batch_loss = 0.0;
            for pass in passes {
                if let Some(p) = pass? {
                    batch_loss += p.loss;
                    grad_maps.push(p.grads.expect("training pass has grads"));
                }
            }
            if grad_maps.is_empty() {
                continue;
            }
            train_loss += batch_loss / grad_maps.len() as f64;
            train_batches += 1;
            let avg = average_grads(grad_maps);
            apply_update(&mut net, &mut adam, avg, lr, opts.clip)?;
        }

        let (val_loss, val_acc) = mlm_validate(&net, &val_set, &policy, opts)?;
        history.push(val_loss);
        if !opts.quiet {
            println!(
                "epoch {epoch} lr {lr:.3e} train_loss {:.4} val_loss {val_loss:.4} val_masked_acc {val_acc:.4}",
                if train_batches > 0 { train_loss / train_batches as f64 } else { f64::NAN },
            );
        }
        let improved = best.as_ref().map(|(b, _, _, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, epoch, net.clone(), adam.clone()));
        }
        if opts.early_stop > 0 {
            let best_epoch = best.as_ref().map(|(_, e, _, _)| *e).unwrap_or(0);
            if epoch - best_epoch >= opts.early_stop {
                break;
            }
        }
    }

    let (best_loss, best_epoch, best_net, best_adam) =
        best.ok_or_else(|| AppError::data("no epoch produced a validation loss"))?;
    let ckpt = Checkpoint::from_network(
        &best_net,
        Some(&best_adam),
        best_epoch as u32,
        best_loss as f32,
        opts.seed,
    );
    ckpt.save(out)
        .map_err(|e| AppError::data(e.to_string()))?;
    Ok(TrainOutcome {
        checkpoint: out.to_path_buf(),
        best_metric: best_loss,
        best_epoch,
        epochs_run,
        val_history: history,
    })
}

fn mlm_validate(
    net: &Network,
    val_set: &[&PreparedCaption],
    policy: &MaskPolicy,
    opts: &TrainOptions,
) -> Result<(f64, f64), AppError> {
    let passes = parallel_map(val_set, opts.threads, |idx, prepared| {
        mlm_sample_pass(
            net,
            prepared,
            policy,
            opts,
            None,
            derive_seed(opts.seed, STREAM_VAL, 0, idx as u64),
            None,
            false,
        )
    });
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    for pass in passes {
        if let Some(p) = pass? {
            loss += p.loss;
            n += 1;
            correct += p.masked_correct;
            total += p.masked_total;
        }
    }
    if n == 0 {
        return Err(AppError::data("validation split drew zero masked samples"));
    }
    Ok((
        loss / n as f64,
        if total > 0 { correct as f64 / total as f64 } else { 0.0 },
    ))
}

/// Held-out masked-keyword statistics of a pretrained model.
#[derive(Debug, Clone, Copy)]
pub struct MlmEvalStats {
    pub loss: f64,
    pub masked_accuracy: f64,
    pub masked_total: usize,
}

/// How evaluation sources images: from disk, or replaced with uniform noise
/// (the image-ablation probe).
#[derive(Debug, Clone, Copy)]
pub enum ImageSource {
    Real,
    Noise,
}

/// Masked-keyword accuracy over a caption corpus, optionally with the
/// images replaced by per-sample uniform noise.
pub fn mlm_eval(
    net: &Network,
    vocab: &Vocab,
    records: &[CaptionRecord],
    opts: &TrainOptions,
    source: ImageSource,
) -> Result<MlmEvalStats, AppError> {
    let prepared = prepare_captions(records, vocab, opts.threads)?;
    let policy = MaskPolicy {
        keyword_rate: opts.keyword_rate,
        fallback_rate: opts.fallback_rate,
    };
    let refs: Vec<&PreparedCaption> = prepared.iter().collect();
    let passes = parallel_map(&refs, opts.threads, |idx, prepared| {
        let noise_img = match source {
            ImageSource::Real => None,
            ImageSource::Noise => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    opts.seed,
                    STREAM_NOISE,
                    0,
                    idx as u64,
                ));
                let s = net.cfg.image_size;
                let data: Vec<f32> = (0..s * s * 3).map(|_| rng.random::<f32>()).collect();
                Some(ImageTensor::new(s, s, data).expect("noise image"))
            }
        };
        mlm_sample_pass(
            net,
            prepared,
            &policy,
            opts,
            noise_img.as_ref(),
            derive_seed(opts.seed, STREAM_VAL, 0, idx as u64),
            None,
            false,
        )
    });
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    for pass in passes {
        if let Some(p) = pass? {
            loss += p.loss;
            n += 1;
            correct += p.masked_correct;
            total += p.masked_total;
        }
    }
    if total == 0 {
        return Err(AppError::data("no masked tokens in the evaluation corpus"));
    }
    Ok(MlmEvalStats {
        loss: loss / n as f64,
        masked_accuracy: correct as f64 / total as f64,
        masked_total: total,
    })
}

// ---- finetuning --------------------------------------------------------------

/// The three experiment arrangements: one shared model, per-category models
/// finetuned from the pretrained trunk, and per-category models from
/// scratch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Variant {
    General,
    Exclusive(String),
    NonPretrained(String),
}

impl Variant {
    pub fn category(&self) -> Option<&str> {
        match self {
            Variant::General => None,
            Variant::Exclusive(c) | Variant::NonPretrained(c) => Some(c),
        }
    }
}

/// What the classifier head predicts.
#[derive(Debug, Clone)]
pub enum Objective {
    /// Closed-set answer classification from image + question.
    Answer { min_count: usize },
    /// Text-only question-category classification (the router model).
    Category { categories: Vec<String> },
}

struct PreparedQuestion {
    image: Option<Vec<u8>>,
    seq: TokenSequence,
    target: Option<usize>,
}

pub struct FinetuneResult {
    pub outcome: TrainOutcome,
    pub answers: Option<AnswerSpace>,
}

/// Finetune from a pretrained checkpoint or from scratch. The masked-token
/// head is replaced by the classification head; encoder, embeddings, and
/// extractor weights carry over when `init` is given.
pub fn finetune(
    records: &[VqaRecord],
    val_records: Option<&[VqaRecord]>,
    vocab: &Vocab,
    cfg: ModelConfig,
    init: Option<&Checkpoint>,
    variant: &Variant,
    objective: &Objective,
    opts: &TrainOptions,
    out: &Path,
) -> Result<FinetuneResult, AppError> {
    opts.validate()?;
    if cfg.vocab_size != vocab.len() {
        return Err(AppError::usage(format!(
            "config vocab size {} does not match vocabulary {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    if matches!(variant, Variant::NonPretrained(_)) && init.is_some() {
        return Err(AppError::usage(
            "the non-pretrained variant trains from scratch; drop the init checkpoint",
        ));
    }

    let filtered: Vec<&VqaRecord> = match variant.category() {
        Some(cat) => {
            let want = normalize_category(cat);
            records.iter().filter(|r| r.category == want).collect()
        }
        None => records.iter().collect(),
    };
    if filtered.is_empty() {
        return Err(AppError::data(format!(
            "category filter {:?} leaves no training records",
            variant.category().unwrap_or("<none>")
        )));
    }

    let (answers, classes) = match objective {
        Objective::Answer { min_count } => {
            let owned: Vec<VqaRecord> = filtered.iter().map(|r| (*r).clone()).collect();
            let space = AnswerSpace::build(&owned, *min_count)?;
            let n = space.len().max(2);
            (Some(space), n)
        }
        Objective::Category { categories } => (None, categories.len()),
    };

    // resolve targets + tokenize questions once
    let target_of = |r: &VqaRecord| -> Option<usize> {
        match objective {
            Objective::Answer { .. } => answers.as_ref().and_then(|a| a.id_of(&r.answer)),
            Objective::Category { categories } => categories
                .iter()
                .position(|c| normalize_category(c) == r.category),
        }
    };
    let text_only = matches!(objective, Objective::Category { .. });
    let prepare = |rs: &[&VqaRecord]| -> Result<Vec<PreparedQuestion>, AppError> {
        let out = parallel_map(rs, opts.threads, |_, r| {
            let image = if text_only {
                None
            } else {
                Some(read_image_bytes(&r.image)?)
            };
            Ok::<PreparedQuestion, AppError>(PreparedQuestion {
                image,
                seq: tokenize(&r.question, vocab),
                target: target_of(r),
            })
        });
        out.into_iter().collect()
    };

    let (train_set, val_set): (Vec<PreparedQuestion>, Vec<PreparedQuestion>) = match val_records {
        Some(vr) => {
            let vr_filtered: Vec<&VqaRecord> = match variant.category() {
                Some(cat) => {
                    let want = normalize_category(cat);
                    vr.iter().filter(|r| r.category == want).collect()
                }
                None => vr.iter().collect(),
            };
            if vr_filtered.is_empty() {
                return Err(AppError::data(
                    "category filter leaves no validation records",
                ));
            }
            (prepare(&filtered)?, prepare(&vr_filtered)?)
        }
        None => {
            let (ti, vi) = seeded_split(filtered.len(), opts.val_fraction, opts.seed);
            let t: Vec<&VqaRecord> = ti.into_iter().map(|i| filtered[i]).collect();
            let v: Vec<&VqaRecord> = vi.into_iter().map(|i| filtered[i]).collect();
            (prepare(&t)?, prepare(&v)?)
        }
    };

    // model: fresh head, trunk carried over from the checkpoint when given
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = match objective {
        Objective::Answer { .. } => Network::init_vqa(cfg.clone(), classes, &mut rng)?,
        Objective::Category { .. } => Network::init_category(cfg.clone(), classes, &mut rng)?,
    };
    if let Some(ckpt) = init {
        ckpt.check_compatible(&cfg)
            .map_err(|e| AppError::data(e.to_string()))?;
        let donor = ckpt
            .to_network()
            .map_err(|e| AppError::data(e.to_string()))?;
        net.load_matching(&donor);
    }

    let mut adam = AdamState::new();
    let mut history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, usize, Network, AdamState)> = None;
    let mut epochs_run = 0;

    for epoch in 0..opts.epochs {
        epochs_run = epoch + 1;
        let lr = plateau_lr(&history, &opts.plateau());
        let order = shuffled(&(0..train_set.len()).collect::<Vec<_>>(), opts.seed, epoch as u64);
        let mut train_loss = 0.0;
        let mut train_batches = 0usize;
        for batch in order.chunks(opts.batch) {
            let passes = parallel_map(batch, opts.threads, |_, &idx| {
                classify_sample_pass(
                    &net,
                    &train_set[idx],
                    opts,
                    derive_seed(opts.seed, STREAM_TRAIN, epoch as u64, idx as u64),
                    true,
                )
            });
            let mut grad_maps = Vec::new();
            let mut batch_loss = 0.0;
            for pass in passes {
                if let Some(p) = pass? {
                    batch_loss += p.loss;
                    grad_maps.push(p.grads.expect("training pass has grads"));
                }
            }
            if grad_maps.is_empty() {
                continue;
            }
            train_loss += batch_loss / grad_maps.len() as f64;
            train_batches += 1;
            let avg = average_grads(grad_maps);
            apply_update(&mut net, &mut adam, avg, lr, opts.clip)?;
        }

        let (val_loss, val_acc) = classify_validate(&net, &val_set, opts)?;
        history.push(val_loss);
        if !opts.quiet {
            println!(
                "epoch {epoch} lr {lr:.3e} train_loss {:.4} val_loss {val_loss:.4} val_acc {val_acc:.4}",
                if train_batches > 0 { train_loss / train_batches as f64 } else { f64::NAN },
            );
        }
        let improved = best.as_ref().map(|(b, _, _, _)| val_acc > *b).unwrap_or(true);
        if improved {
            best = Some((val_acc, epoch, net.clone(), adam.clone()));
        }
        if opts.early_stop > 0 {
            let best_epoch = best.as_ref().map(|(_, e, _, _)| *e).unwrap_or(0);
            if epoch - best_epoch >= opts.early_stop {
                break;
            }
        }
    }

    let (best_acc, best_epoch, best_net, best_adam) =
        best.ok_or_else(|| AppError::data("no epoch produced a validation accuracy"))?;
    let ckpt = Checkpoint::from_network(
        &best_net,
        Some(&best_adam),
        best_epoch as u32,
        best_acc as f32,
        opts.seed,
    );
    ckpt.save(out)
        .map_err(|e| AppError::data(e.to_string()))?;
    Ok(FinetuneResult {
        outcome: TrainOutcome {
            checkpoint: out.to_path_buf(),
            best_metric: best_acc,
            best_epoch,
            epochs_run,
            val_history: history,
        },
        answers,
    })
}

struct ClassifyPass {
    loss: f64,
    grads: Option<BTreeMap<String, Tensor<f32>>>,
    correct: bool,
}

fn classify_sample_pass(
    net: &Network,
    prepared: &PreparedQuestion,
    opts: &TrainOptions,
    seed: u64,
    train: bool,
) -> Result<Option<ClassifyPass>, AppError> {
    let target = match prepared.target {
        Some(t) => t,
        None => return Ok(None), // answer outside the training answer space
    };
    let mut tape = Tape::<f32>::new();
    let bound = bind_network(&mut tape, net, train);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0D0);
    let mut phase = if train {
        Phase::Train {
            rng: &mut dropout_rng as &mut dyn RngCore,
            dropout: opts.dropout,
        }
    } else {
        Phase::Eval
    };

    let logits = match &prepared.image {
        Some(bytes) => {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA06);
            let aug = if train {
                Some((&opts.augment, &mut aug_rng))
            } else {
                None
            };
            let img = load_input_image(bytes, &net.cfg, aug)?;
            let feats =
                encode_image(&mut tape, &bound.vision, &net.cfg.cnn(), net.cfg.feature_mode, &img)?;
            let seq = assemble_sequence(
                &mut tape,
                &bound,
                Some(&feats),
                &prepared.seq.ids,
                None,
                &net.cfg,
                &mut phase,
            )?;
            let out = encoder_forward(&mut tape, &bound, &seq, &net.cfg, &mut phase)?;
            vqa_logits(&mut tape, &bound, &out, &seq)?
        }
        None => {
            let seq = assemble_sequence(
                &mut tape,
                &bound,
                None,
                &prepared.seq.ids,
                None,
                &net.cfg,
                &mut phase,
            )?;
            let out = encoder_forward(&mut tape, &bound, &seq, &net.cfg, &mut phase)?;
            category_logits(&mut tape, &bound, &out, &seq)?
        }
    };
    let classes = tape.value(logits).len();
    let predicted = argmax(tape.value(logits).data());
    let row = tape.reshape(logits, vec![1, classes])?;
    let loss = tape.cross_entropy(row, &[target])?;
    let loss_value = tape.value(loss).item() as f64;
    let grads = if train {
        tape.backward(loss)?;
        Some(collect_grads(&tape, &bound))
    } else {
        None
    };
    Ok(Some(ClassifyPass {
        loss: loss_value,
        grads,
        correct: predicted == target,
    }))
}

fn classify_validate(
    net: &Network,
    val_set: &[PreparedQuestion],
    opts: &TrainOptions,
) -> Result<(f64, f64), AppError> {
    let passes = parallel_map(val_set, opts.threads, |idx, prepared| {
        classify_sample_pass(net, prepared, opts, derive_seed(opts.seed, STREAM_VAL, 1, idx as u64), false)
    });
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut correct = 0usize;
    let total = val_set.len();
    for pass in passes {
        if let Some(p) = pass? {
            loss += p.loss;
            n += 1;
            correct += p.correct as usize;
        }
        // samples without a target count as incorrect
    }
    if n == 0 {
        return Err(AppError::data(
            "validation split has no records with in-space answers",
        ));
    }
    Ok((loss / n as f64, correct as f64 / total as f64))
}
