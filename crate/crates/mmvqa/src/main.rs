//! Command-line entry point: the whole pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure. Every run echoes its fully resolved configuration (including
//! the seed) to standard output so results can be reproduced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use mmvqa::checkpoint::Checkpoint;
use mmvqa::config::{describe, key, KeySpec, Resolved};
use mmvqa::data::{load_caption_corpus, load_vqa_dataset, normalize_category, AnswerSpace};
use mmvqa::error::AppError;
use mmvqa::eval::{
    attention_heatmap, evaluate, export_predictions, predict_one, Routing, VqaModel,
};
use mmvqa::synth::{generate, SyntheticSpec};
use mmvqa::train::{finetune, pretrain, worker_threads, Objective, TrainOptions, Variant};
use mmvqa_core::interp::{Reduction, HEATMAP_PGM_SUFFIX, HEATMAP_PPM_SUFFIX};
use mmvqa_core::model::ModelConfig;
use mmvqa_core::tokenizer::Vocab;
use mmvqa_core::vision::{AugmentConfig, FeatureMode};

const MODEL_KEYS: [KeySpec; 9] = [
    key("dim", "128", "hidden width"),
    key("layers", "4", "encoder layers"),
    key("heads", "3", "attention heads per layer"),
    key("ffn", "0", "feed-forward width (0 = 4*dim)"),
    key("max_text", "64", "maximum text tokens"),
    key("dropout", "0.1", "training dropout rate"),
    key("mode", "multiscale", "image features: multiscale | spatial"),
    key("image_size", "224", "extractor input size (images are resized)"),
    key("widths", "16,32,64,128,128", "extractor stage channel widths"),
];

const TRAIN_KEYS: [KeySpec; 13] = [
    key("batch", "32", "batch size"),
    key("decay", "0.1", "plateau decay factor"),
    key("min_lr", "1e-7", "learning-rate floor"),
    key("clip", "1.0", "global gradient-norm clip (0 disables)"),
    key("val_fraction", "0.1", "held-out fraction when no val file is given"),
    key("seed", "0", "master seed"),
    key("augment", "true", "enable crop/rotation/jitter augmentation"),
    key("crop_lo", "0.8", "crop fraction lower bound"),
    key("crop_hi", "1.0", "crop fraction upper bound"),
    key("rot_lo", "-10", "rotation degrees lower bound"),
    key("rot_hi", "10", "rotation degrees upper bound"),
    key("jitter", "0.1", "brightness/contrast/saturation jitter half-range"),
    key("quiet", "false", "suppress per-epoch progress lines"),
];

fn pretrain_schema() -> Vec<KeySpec> {
    let mut keys = vec![
        key("corpus", "", "caption corpus TSV"),
        key("vocab", "", "vocabulary file"),
        key("out", "", "output checkpoint path"),
        key("val_corpus", "", "optional explicit validation corpus TSV"),
        key("lr", "2e-5", "learning rate"),
        key("epochs", "60", "maximum epochs"),
        key("patience", "5", "plateau patience (epochs)"),
        key("early_stop", "0", "early-stop patience (0 disables)"),
        key("keyword_rate", "1.0", "per-keyword masking probability"),
        key("fallback_rate", "0.15", "per-token rate for keyword-free captions"),
    ];
    keys.extend(MODEL_KEYS);
    keys.extend(TRAIN_KEYS);
    keys
}

fn finetune_schema() -> Vec<KeySpec> {
    let mut keys = vec![
        key("dataset", "", "VQA training TSV"),
        key("vocab", "", "vocabulary file"),
        key("out", "", "output checkpoint path"),
        key("init", "", "pretrained checkpoint to start from"),
        key("val_dataset", "", "optional explicit validation TSV"),
        key("variant", "general", "general | exclusive | np"),
        key("category", "", "category for exclusive/np variants"),
        key("objective", "answer", "answer | category (category trains the router)"),
        key("answer_min_count", "1", "minimum frequency for the answer space"),
        key(
            "categories",
            "modality,plane,organ,abnormality,yesno",
            "declared category set",
        ),
        key("lr", "1e-4", "learning rate"),
        key("epochs", "100", "maximum epochs"),
        key("patience", "10", "plateau patience (epochs)"),
        key("early_stop", "20", "early-stop patience (0 disables)"),
    ];
    keys.extend(MODEL_KEYS);
    keys.extend(TRAIN_KEYS);
    keys
}

fn evaluate_schema() -> Vec<KeySpec> {
    vec![
        key("dataset", "", "VQA evaluation TSV"),
        key("vocab", "", "vocabulary file"),
        key("train_dataset", "", "training TSV used to rebuild the answer space"),
        key("variant", "general", "general | exclusive | np"),
        key("checkpoint", "", "checkpoint for the general variant"),
        key(
            "checkpoint_dir",
            "",
            "directory of <category>.ckpt files for exclusive/np",
        ),
        key(
            "router",
            "oracle",
            "oracle (gold categories) or a category-classifier checkpoint path",
        ),
        key(
            "categories",
            "modality,plane,organ,abnormality,yesno",
            "declared category set",
        ),
        key("answer_min_count", "1", "minimum frequency for the answer space"),
        key("out", "", "optional predictions TSV path"),
        key("seed", "0", "echoed for reproducibility (evaluation is deterministic)"),
    ]
}

fn predict_schema() -> Vec<KeySpec> {
    vec![
        key("image", "", "input image (PPM P6)"),
        key("question", "", "question text"),
        key("checkpoint", "", "answer-classifier checkpoint"),
        key("vocab", "", "vocabulary file"),
        key("train_dataset", "", "training TSV used to rebuild the answer space"),
        key("category", "", "category filter matching an exclusive checkpoint"),
        key("answer_min_count", "1", "minimum frequency for the answer space"),
        key(
            "categories",
            "modality,plane,organ,abnormality,yesno",
            "declared category set",
        ),
        key("seed", "0", "echoed for reproducibility"),
    ]
}

fn attnmap_schema() -> Vec<KeySpec> {
    vec![
        key("image", "", "input image (PPM P6)"),
        key("question", "", "question text"),
        key("checkpoint", "", "checkpoint (spatial feature mode for 2-D maps)"),
        key("vocab", "", "vocabulary file"),
        key("out", "", "output prefix (default: the image path)"),
        key("reduction", "last", "last | rollout"),
        key("alpha", "0.5", "overlay blend weight"),
        key("seed", "0", "echoed for reproducibility"),
    ]
}

fn gen_synth_schema() -> Vec<KeySpec> {
    vec![
        key("out", "", "output dataset directory"),
        key("canvas", "96", "square image size in pixels"),
        key("colors", "red,green,blue,yellow", "object colors"),
        key("shapes", "circle,square,cross", "object shapes"),
        key("planes", "axial,coronal,sagittal", "plane labels (stripe orientation)"),
        key("pretrain_n", "2000", "pretraining images"),
        key("train_n", "300", "VQA training images"),
        key("val_n", "100", "VQA validation images"),
        key("test_n", "200", "VQA test images"),
        key("seed", "0", "master seed"),
    ]
}

fn build_vocab_schema() -> Vec<KeySpec> {
    vec![
        key("corpus", "", "caption corpus TSV"),
        key("out", "", "output vocabulary file"),
        key("target_size", "512", "target vocabulary size"),
        key("min_freq", "2", "minimum pair frequency for merges"),
        key("extra_text", "", "optional plain-text file, one document per line"),
        key("seed", "0", "echoed for reproducibility (the build is deterministic)"),
    ]
}

fn subcommand(name: &'static str, about: &'static str, schema: &[KeySpec]) -> Command {
    Command::new(name)
        .about(about)
        .after_help(describe(schema))
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value configuration file"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override one configuration key (wins over the file)"),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .help("shorthand for --set seed=N"),
        )
}

fn cli() -> Command {
    Command::new("mmvqa")
        .about("masked-language pretraining and visual question answering over image+caption data")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(subcommand(
            "gen-synth",
            "generate the synthetic shapes dataset (images, corpus, VQA splits, boxes)",
            &gen_synth_schema(),
        ))
        .subcommand(subcommand(
            "build-vocab",
            "build a subword vocabulary from a caption corpus",
            &build_vocab_schema(),
        ))
        .subcommand(subcommand(
            "pretrain",
            "masked-keyword pretraining over an image+caption corpus",
            &pretrain_schema(),
        ))
        .subcommand(subcommand(
            "finetune",
            "finetune answer or category classification from a checkpoint or from scratch",
            &finetune_schema(),
        ))
        .subcommand(subcommand(
            "evaluate",
            "score a VQA dataset (accuracy and BLEU, per category and overall)",
            &evaluate_schema(),
        ))
        .subcommand(subcommand(
            "predict",
            "answer a single image+question pair",
            &predict_schema(),
        ))
        .subcommand(subcommand(
            "attnmap",
            "write attention heatmap files for a single image+question pair",
            &attnmap_schema(),
        ))
}

fn resolve(matches: &ArgMatches, schema: &[KeySpec]) -> Result<Resolved, AppError> {
    let config = matches.get_one::<String>("config").map(PathBuf::from);
    let mut sets: Vec<String> = matches
        .get_many::<String>("set")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    if let Some(seed) = matches.get_one::<String>("seed") {
        sets.push(format!("seed={seed}"));
    }
    let resolved = Resolved::load(schema, config.as_deref(), &sets)?;
    println!("resolved configuration:");
    print!("{}", resolved.echo());
    Ok(resolved)
}

fn model_config(r: &Resolved, vocab_size: usize) -> Result<ModelConfig, AppError> {
    let dim = r.usize("dim")?;
    let ffn = match r.usize("ffn")? {
        0 => 4 * dim,
        n => n,
    };
    let widths_list = r.list("widths");
    if widths_list.len() != 5 {
        return Err(AppError::usage(format!(
            "widths must list 5 stages, got {}",
            widths_list.len()
        )));
    }
    let mut widths = [0usize; 5];
    for (i, w) in widths_list.iter().enumerate() {
        widths[i] = w
            .parse()
            .map_err(|_| AppError::usage(format!("bad stage width {w:?}")))?;
    }
    let mode = FeatureMode::parse(r.str("mode")).ok_or_else(|| {
        AppError::usage(format!(
            "mode must be multiscale or spatial, got {:?}",
            r.str("mode")
        ))
    })?;
    let cfg = ModelConfig {
        dim,
        layers: r.usize("layers")?,
        heads: r.usize("heads")?,
        ffn_dim: ffn,
        max_text: r.usize("max_text")?,
        vocab_size,
        feature_mode: mode,
        image_size: r.usize("image_size")?,
        cnn_widths: widths,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_options(r: &Resolved, mut opts: TrainOptions) -> Result<TrainOptions, AppError> {
    opts.lr = r.f64("lr")?;
    opts.batch = r.usize("batch")?;
    opts.epochs = r.usize("epochs")?;
    opts.patience = r.usize("patience")?;
    opts.decay = r.f64("decay")?;
    opts.min_lr = r.f64("min_lr")?;
    opts.early_stop = r.usize("early_stop")?;
    opts.clip = r.f64("clip")?;
    opts.dropout = r.f64("dropout")?;
    opts.val_fraction = r.f64("val_fraction")?;
    opts.seed = r.u64("seed")?;
    opts.threads = worker_threads();
    opts.quiet = r.bool("quiet")?;
    let j = r.f32("jitter")?;
    opts.augment = AugmentConfig {
        enabled: r.bool("augment")?,
        crop_fraction: (r.f32("crop_lo")?, r.f32("crop_hi")?),
        rotation_deg: (r.f32("rot_lo")?, r.f32("rot_hi")?),
        brightness: (1.0 - j, 1.0 + j),
        contrast: (1.0 - j, 1.0 + j),
        saturation: (1.0 - j, 1.0 + j),
    };
    opts.augment.validate()?;
    opts.validate()?;
    Ok(opts)
}

fn load_vocab(path: &Path) -> Result<Vocab, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    Ok(Vocab::from_lines(&text)?)
}

fn run_gen_synth(r: &Resolved) -> Result<(), AppError> {
    let spec = SyntheticSpec {
        canvas: r.usize("canvas")?,
        colors: r.list("colors"),
        shapes: r.list("shapes"),
        planes: r.list("planes"),
        n_pretrain: r.usize("pretrain_n")?,
        n_train: r.usize("train_n")?,
        n_val: r.usize("val_n")?,
        n_test: r.usize("test_n")?,
        seed: r.u64("seed")?,
    };
    let out_dir = r.required_path("out")?;
    let out = generate(&spec, &out_dir)?;
    println!("corpus {}", out.corpus.display());
    println!("vqa_train {}", out.vqa_train.display());
    println!("vqa_val {}", out.vqa_val.display());
    println!("vqa_test {}", out.vqa_test.display());
    println!("boxes {}", out.boxes.display());
    println!("text_only_ceiling {:.6}", spec.text_only_ceiling());
    Ok(())
}

fn run_build_vocab(r: &Resolved) -> Result<(), AppError> {
    let corpus_path = r.required_path("corpus")?;
    let (records, summary) = load_caption_corpus(&corpus_path)?;
    let mut docs: Vec<String> = records.into_iter().map(|c| c.caption).collect();
    if let Some(extra) = r.optional_path("extra_text") {
        let text = std::fs::read_to_string(&extra)
            .map_err(|e| AppError::data(format!("{}: {e}", extra.display())))?;
        docs.extend(text.lines().map(|l| l.to_string()));
    }
    let vocab = Vocab::build(
        docs.iter().map(String::as_str),
        r.usize("target_size")?,
        r.u64("min_freq")?,
    )?;
    let out = r.required_path("out")?;
    std::fs::write(&out, vocab.to_file_string())?;
    println!(
        "vocab_size {} (malformed corpus lines: {})",
        vocab.len(),
        summary.malformed.len()
    );
    Ok(())
}

fn run_pretrain(r: &Resolved) -> Result<(), AppError> {
    let vocab = load_vocab(&r.required_path("vocab")?)?;
    let (records, summary) = load_caption_corpus(&r.required_path("corpus")?)?;
    if summary.dropped_keywords > 0 {
        println!(
            "warning: dropped {} keywords not found in their captions",
            summary.dropped_keywords
        );
    }
    let val_records = match r.optional_path("val_corpus") {
        Some(p) => Some(load_caption_corpus(&p)?.0),
        None => None,
    };
    let cfg = model_config(r, vocab.len())?;
    let mut opts = train_options(r, TrainOptions::pretrain_defaults())?;
    opts.keyword_rate = r.f64("keyword_rate")?;
    opts.fallback_rate = r.f64("fallback_rate")?;
    let out = r.required_path("out")?;
    let outcome = pretrain(&records, val_records.as_deref(), &vocab, cfg, &opts, &out)?;
    println!(
        "best_val_loss {:.6} at epoch {} ({} epochs run)",
        outcome.best_metric, outcome.best_epoch, outcome.epochs_run
    );
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn parse_variant(r: &Resolved) -> Result<Variant, AppError> {
    let category = r.str("category").to_string();
    match r.str("variant") {
        "general" => {
            if !category.is_empty() {
                return Err(AppError::usage("the general variant takes no category"));
            }
            Ok(Variant::General)
        }
        "exclusive" => {
            if category.is_empty() {
                return Err(AppError::usage("the exclusive variant needs category=<name>"));
            }
            Ok(Variant::Exclusive(category))
        }
        "np" => {
            if category.is_empty() {
                return Err(AppError::usage("the np variant needs category=<name>"));
            }
            Ok(Variant::NonPretrained(category))
        }
        other => Err(AppError::usage(format!(
            "variant must be general, exclusive, or np; got {other:?}"
        ))),
    }
}

fn run_finetune(r: &Resolved) -> Result<(), AppError> {
    let vocab = load_vocab(&r.required_path("vocab")?)?;
    let categories = r.list("categories");
    let (records, _) = load_vqa_dataset(&r.required_path("dataset")?, &categories)?;
    let val_records = match r.optional_path("val_dataset") {
        Some(p) => Some(load_vqa_dataset(&p, &categories)?.0),
        None => None,
    };
    let variant = parse_variant(r)?;
    let init = match r.optional_path("init") {
        Some(p) => Some(Checkpoint::load(&p).map_err(|e| AppError::data(e.to_string()))?),
        None => None,
    };
    // with an init checkpoint, the trunk configuration comes from it
    let cfg = match &init {
        Some(ckpt) => {
            let cfg = ckpt
                .model_config()
                .map_err(|e| AppError::data(e.to_string()))?;
            if cfg.vocab_size != vocab.len() {
                return Err(AppError::data(format!(
                    "checkpoint vocab size {} does not match vocabulary {}",
                    cfg.vocab_size,
                    vocab.len()
                )));
            }
            println!("model configuration from init checkpoint: {}", cfg.canonical());
            cfg
        }
        None => model_config(r, vocab.len())?,
    };
    let objective = match r.str("objective") {
        "answer" => Objective::Answer {
            min_count: r.usize("answer_min_count")?,
        },
        "category" => Objective::Category {
            categories: categories.clone(),
        },
        other => {
            return Err(AppError::usage(format!(
                "objective must be answer or category, got {other:?}"
            )))
        }
    };
    let opts = train_options(r, TrainOptions::finetune_defaults())?;
    let out = r.required_path("out")?;
    let result = finetune(
        &records,
        val_records.as_deref(),
        &vocab,
        cfg,
        init.as_ref(),
        &variant,
        &objective,
        &opts,
        &out,
    )?;
    println!(
        "best_val_accuracy {:.4} at epoch {} ({} epochs run)",
        result.outcome.best_metric, result.outcome.best_epoch, result.outcome.epochs_run
    );
    if let Some(space) = &result.answers {
        println!("answer_space {}", space.len());
    }
    println!("checkpoint {}", result.outcome.checkpoint.display());
    Ok(())
}

fn load_vqa_model(
    path: &Path,
    train_records: &[mmvqa::data::VqaRecord],
    category: Option<&str>,
    min_count: usize,
) -> Result<VqaModel, AppError> {
    let ckpt = Checkpoint::load(path).map_err(|e| AppError::data(e.to_string()))?;
    if ckpt.head_kind != "vqa" {
        return Err(AppError::data(format!(
            "{}: expected an answer-classifier checkpoint, found head {:?}",
            path.display(),
            ckpt.head_kind
        )));
    }
    let net = ckpt
        .to_network()
        .map_err(|e| AppError::data(e.to_string()))?;
    let filtered: Vec<mmvqa::data::VqaRecord> = match category {
        Some(cat) => {
            let want = normalize_category(cat);
            train_records
                .iter()
                .filter(|r| r.category == want)
                .cloned()
                .collect()
        }
        None => train_records.to_vec(),
    };
    let answers = AnswerSpace::build(&filtered, min_count)?;
    if answers.len() != ckpt.head_classes {
        return Err(AppError::data(format!(
            "{}: answer space from the training split has {} classes but the checkpoint head has {}; \
             pass the same train_dataset and answer_min_count used for finetuning",
            path.display(),
            answers.len(),
            ckpt.head_classes
        )));
    }
    Ok(VqaModel { net, answers })
}

fn run_evaluate(r: &Resolved) -> Result<(), AppError> {
    let vocab = load_vocab(&r.required_path("vocab")?)?;
    let categories = r.list("categories");
    let (records, _) = load_vqa_dataset(&r.required_path("dataset")?, &categories)?;
    let (train_records, _) = load_vqa_dataset(&r.required_path("train_dataset")?, &categories)?;
    let min_count = r.usize("answer_min_count")?;
    let threads = worker_threads();
    let norm_categories: Vec<String> = categories.iter().map(|c| normalize_category(c)).collect();

    let report = match r.str("variant") {
        "general" => {
            let model =
                load_vqa_model(&r.required_path("checkpoint")?, &train_records, None, min_count)?;
            evaluate(&records, &vocab, &Routing::Direct(&model), &norm_categories, threads)?
        }
        "exclusive" | "np" => {
            let dir = r.required_path("checkpoint_dir")?;
            let mut models: BTreeMap<String, VqaModel> = BTreeMap::new();
            for cat in &norm_categories {
                let path = dir.join(format!("{cat}.ckpt"));
                if path.exists() {
                    models.insert(
                        cat.clone(),
                        load_vqa_model(&path, &train_records, Some(cat), min_count)?,
                    );
                }
            }
            if models.is_empty() {
                return Err(AppError::data(format!(
                    "{}: no <category>.ckpt checkpoints found",
                    dir.display()
                )));
            }
            match r.str("router") {
                "oracle" => {
                    evaluate(&records, &vocab, &Routing::Oracle(&models), &norm_categories, threads)?
                }
                path => {
                    let ckpt = Checkpoint::load(Path::new(path))
                        .map_err(|e| AppError::data(e.to_string()))?;
                    if ckpt.head_kind != "category" {
                        return Err(AppError::data(format!(
                            "{path}: router checkpoint must be a category classifier, found {:?}",
                            ckpt.head_kind
                        )));
                    }
                    let classifier = ckpt
                        .to_network()
                        .map_err(|e| AppError::data(e.to_string()))?;
                    evaluate(
                        &records,
                        &vocab,
                        &Routing::Classifier {
                            classifier: &classifier,
                            categories: &norm_categories,
                            models: &models,
                        },
                        &norm_categories,
                        threads,
                    )?
                }
            }
        }
        other => {
            return Err(AppError::usage(format!(
                "variant must be general, exclusive, or np; got {other:?}"
            )))
        }
    };

    print!("{}", report.table());
    if let Some(out) = r.optional_path("out") {
        export_predictions(&report, &out)?;
        println!("predictions {}", out.display());
    }
    Ok(())
}

fn run_predict(r: &Resolved) -> Result<(), AppError> {
    let vocab = load_vocab(&r.required_path("vocab")?)?;
    let categories = r.list("categories");
    let (train_records, _) = load_vqa_dataset(&r.required_path("train_dataset")?, &categories)?;
    let category = match r.str("category") {
        "" => None,
        c => Some(c),
    };
    let model = load_vqa_model(
        &r.required_path("checkpoint")?,
        &train_records,
        category,
        r.usize("answer_min_count")?,
    )?;
    let answer = predict_one(&model, &vocab, &r.required_path("image")?, r.str("question"))?;
    println!("{answer}");
    Ok(())
}

fn run_attnmap(r: &Resolved) -> Result<(), AppError> {
    let vocab = load_vocab(&r.required_path("vocab")?)?;
    let ckpt = Checkpoint::load(&r.required_path("checkpoint")?)
        .map_err(|e| AppError::data(e.to_string()))?;
    let net = ckpt
        .to_network()
        .map_err(|e| AppError::data(e.to_string()))?;
    let reduction = Reduction::parse(r.str("reduction")).ok_or_else(|| {
        AppError::usage(format!(
            "reduction must be last or rollout, got {:?}",
            r.str("reduction")
        ))
    })?;
    let image = r.required_path("image")?;
    let (_, rendered) = attention_heatmap(
        &net,
        &vocab,
        &image,
        r.str("question"),
        reduction,
        r.f32("alpha")?,
    )?;
    let prefix = match r.optional_path("out") {
        Some(p) => p,
        None => image.clone(),
    };
    let pgm = PathBuf::from(format!("{}{}", prefix.display(), HEATMAP_PGM_SUFFIX));
    let ppm = PathBuf::from(format!("{}{}", prefix.display(), HEATMAP_PPM_SUFFIX));
    std::fs::write(&pgm, &rendered.pgm)?;
    std::fs::write(&ppm, &rendered.ppm)?;
    println!("{}", pgm.display());
    println!("{}", ppm.display());
    Ok(())
}

fn dispatch(name: &str, matches: &ArgMatches) -> Result<(), AppError> {
    match name {
        "gen-synth" => run_gen_synth(&resolve(matches, &gen_synth_schema())?),
        "build-vocab" => run_build_vocab(&resolve(matches, &build_vocab_schema())?),
        "pretrain" => run_pretrain(&resolve(matches, &pretrain_schema())?),
        "finetune" => run_finetune(&resolve(matches, &finetune_schema())?),
        "evaluate" => run_evaluate(&resolve(matches, &evaluate_schema())?),
        "predict" => run_predict(&resolve(matches, &predict_schema())?),
        "attnmap" => run_attnmap(&resolve(matches, &attnmap_schema())?),
        other => Err(AppError::usage(format!("unknown subcommand {other:?}"))),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // --help / --version print and succeed; anything else is usage
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
