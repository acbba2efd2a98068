//! Evaluation over VQA records: direct single-model scoring or routed
//! dispatch to per-category models, prediction export, and single-sample
//! prediction / attention-map extraction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mmvqa_core::interp::{attention_to_image, render_heatmap, Heatmap, Reduction, RenderedHeatmap};
use mmvqa_core::metrics::{bleu, build_report, normalize_answer, EvalReport, SampleRow};
use mmvqa_core::model::{
    argmax, assemble_sequence, bind_network, category_logits, encoder_forward, vqa_logits,
    Network, Phase,
};
use mmvqa_core::tokenizer::{tokenize, Vocab};
use mmvqa_core::vision::{decode_ppm, resize_bilinear, ImageTensor};
use mmvqa_core::Tape;

use crate::data::{normalize_category, AnswerSpace, VqaRecord};
use crate::error::AppError;
use crate::train::parallel_map;

/// An answer classifier plus the answer strings its classes decode to.
pub struct VqaModel {
    pub net: Network,
    pub answers: AnswerSpace,
}

/// How records are dispatched to models.
pub enum Routing<'a> {
    /// One shared model answers every record.
    Direct(&'a VqaModel),
    /// Dispatch per gold category (a perfect category oracle).
    Oracle(&'a BTreeMap<String, VqaModel>),
    /// Predict the category with a text-only classifier, then dispatch.
    Classifier {
        classifier: &'a Network,
        categories: &'a [String],
        models: &'a BTreeMap<String, VqaModel>,
    },
}

fn load_image(path: &Path, size: usize) -> Result<ImageTensor, AppError> {
    let bytes = fs::read(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    let img = decode_ppm(&bytes)?;
    if img.height() == size && img.width() == size {
        Ok(img)
    } else {
        Ok(resize_bilinear(&img, size, size)?)
    }
}

/// Answer one (image, question) pair with a single model.
pub fn predict_one(
    model: &VqaModel,
    vocab: &Vocab,
    image_path: &Path,
    question: &str,
) -> Result<String, AppError> {
    let img = load_image(image_path, model.net.cfg.image_size)?;
    let ids = tokenize(question, vocab).ids;
    let mut tape = Tape::<f32>::new();
    let bound = bind_network(&mut tape, &model.net, false);
    let feats = mmvqa_core::vision::encode_image(
        &mut tape,
        &bound.vision,
        &model.net.cfg.cnn(),
        model.net.cfg.feature_mode,
        &img,
    )?;
    let seq = assemble_sequence(
        &mut tape,
        &bound,
        Some(&feats),
        &ids,
        None,
        &model.net.cfg,
        &mut Phase::Eval,
    )?;
    let out = encoder_forward(&mut tape, &bound, &seq, &model.net.cfg, &mut Phase::Eval)?;
    let logits = vqa_logits(&mut tape, &bound, &out, &seq)?;
    let class = argmax(tape.value(logits).data());
    Ok(model
        .answers
        .answer(class)
        .unwrap_or("<unknown>")
        .to_string())
}

/// Predict a question's category with a text-only classifier.
pub fn predict_category(
    classifier: &Network,
    vocab: &Vocab,
    question: &str,
    categories: &[String],
) -> Result<String, AppError> {
    let ids = tokenize(question, vocab).ids;
    let mut tape = Tape::<f32>::new();
    let bound = bind_network(&mut tape, classifier, false);
    let seq = assemble_sequence(
        &mut tape,
        &bound,
        None,
        &ids,
        None,
        &classifier.cfg,
        &mut Phase::Eval,
    )?;
    let out = encoder_forward(&mut tape, &bound, &seq, &classifier.cfg, &mut Phase::Eval)?;
    let logits = category_logits(&mut tape, &bound, &out, &seq)?;
    let class = argmax(tape.value(logits).data());
    categories
        .get(class)
        .map(|c| normalize_category(c))
        .ok_or_else(|| AppError::data(format!("category class {class} out of range")))
}

/// Score a dataset. Routed modes fail upfront when a needed per-category
/// checkpoint is missing.
pub fn evaluate(
    records: &[VqaRecord],
    vocab: &Vocab,
    routing: &Routing<'_>,
    category_order: &[String],
    threads: usize,
) -> Result<EvalReport, AppError> {
    match routing {
        Routing::Oracle(models) => {
            for r in records {
                if !models.contains_key(&r.category) {
                    return Err(AppError::data(format!(
                        "router references category {:?} with no checkpoint",
                        r.category
                    )));
                }
            }
        }
        Routing::Classifier {
            categories, models, ..
        } => {
            for c in categories.iter() {
                if !models.contains_key(&normalize_category(c)) {
                    return Err(AppError::data(format!(
                        "router references category {c:?} with no checkpoint"
                    )));
                }
            }
        }
        Routing::Direct(_) => {}
    }

    let rows = parallel_map(records, threads, |idx, record| {
        let model = match routing {
            Routing::Direct(m) => m,
            Routing::Oracle(models) => &models[&record.category],
            Routing::Classifier {
                classifier,
                categories,
                models,
            } => {
                let predicted = predict_category(classifier, vocab, &record.question, categories)?;
                &models[&predicted]
            }
        };
        let prediction = predict_one(model, vocab, &record.image, &record.question)?;
        let correct = normalize_answer(&prediction) == normalize_answer(&record.answer);
        let b = bleu(&prediction, &record.answer)?;
        Ok::<SampleRow, AppError>(SampleRow {
            id: idx.to_string(),
            category: record.category.clone(),
            question: record.question.clone(),
            gold: record.answer.clone(),
            prediction,
            correct,
            bleu: b,
        })
    });
    let rows: Result<Vec<SampleRow>, AppError> = rows.into_iter().collect();
    Ok(build_report(rows?, category_order))
}

/// Write the prediction TSV: one row per sample, bleu with 9 decimals.
pub fn export_predictions(report: &EvalReport, path: &Path) -> Result<(), AppError> {
    let mut out = String::from("id\tcategory\tquestion\tgold\tprediction\tcorrect\tbleu\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.9}\n",
            row.id,
            row.category,
            row.question,
            row.gold,
            row.prediction,
            row.correct as u8,
            row.bleu
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Re-score an exported prediction file (round-trip check and tooling).
pub fn rescore_predictions(path: &Path, category_order: &[String]) -> Result<EvalReport, AppError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue; // header
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(AppError::data(format!(
                "{}: line {} has {} fields, expected 7",
                path.display(),
                i + 1,
                f.len()
            )));
        }
        rows.push(SampleRow {
            id: f[0].to_string(),
            category: f[1].to_string(),
            question: f[2].to_string(),
            gold: f[3].to_string(),
            prediction: f[4].to_string(),
            correct: normalize_answer(f[4]) == normalize_answer(f[3]),
            bleu: bleu(f[4], f[3])?,
        });
    }
    Ok(build_report(rows, category_order))
}

/// Forward one (image, question) pair and extract the attention heatmap.
/// Returns the map together with files rendered against the original image.
pub fn attention_heatmap(
    net: &Network,
    vocab: &Vocab,
    image_path: &Path,
    question: &str,
    reduction: Reduction,
    alpha: f32,
) -> Result<(Heatmap, RenderedHeatmap), AppError> {
    let bytes =
        fs::read(image_path).map_err(|e| AppError::data(format!("{}: {e}", image_path.display())))?;
    let original = decode_ppm(&bytes)?;
    let size = net.cfg.image_size;
    let img = if original.height() == size && original.width() == size {
        original.clone()
    } else {
        resize_bilinear(&original, size, size)?
    };
    let ids = tokenize(question, vocab).ids;
    let mut tape = Tape::<f32>::new();
    let bound = bind_network(&mut tape, net, false);
    let feats = mmvqa_core::vision::encode_image(
        &mut tape,
        &bound.vision,
        &net.cfg.cnn(),
        net.cfg.feature_mode,
        &img,
    )?;
    let seq = assemble_sequence(
        &mut tape,
        &bound,
        Some(&feats),
        &ids,
        None,
        &net.cfg,
        &mut Phase::Eval,
    )?;
    let out = encoder_forward(&mut tape, &bound, &seq, &net.cfg, &mut Phase::Eval)?;
    let map = attention_to_image(
        &tape,
        &out,
        &seq,
        net.cfg.feature_mode,
        net.cfg.cnn().grid(),
        reduction,
    )?;
    let rendered = render_heatmap(&map, &original, alpha)?;
    Ok((map, rendered))
}
