//! TSV dataset ingestion and answer-space construction.
//!
//! Caption corpus: `image_path <TAB> caption <TAB> keyword;keyword;...`
//! (keywords may be empty). VQA dataset: `image_path <TAB> category <TAB>
//! question <TAB> answer`. Lines starting with `#` are comments. Malformed
//! lines are collected; a file fails to load when more than 1% of its data
//! lines are malformed. Image paths are resolved relative to the TSV file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mmvqa_core::metrics::normalize_answer;
use mmvqa_core::tokenizer::keyword_spans;

use crate::error::AppError;

/// The five question categories of the radiology VQA task, in report order.
pub const DEFAULT_CATEGORIES: [&str; 5] = ["modality", "plane", "organ", "abnormality", "yesno"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image: PathBuf,
    pub caption: String,
    /// Keywords verified to occur in the caption (case-insensitive).
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaRecord {
    pub image: PathBuf,
    pub category: String,
    pub question: String,
    pub answer: String,
}

/// Load bookkeeping: malformed lines (1-based numbers with reasons) and
/// keywords dropped for not occurring in their caption.
#[derive(Debug, Default, Clone)]
pub struct LoadSummary {
    pub data_lines: usize,
    pub malformed: Vec<(usize, String)>,
    pub dropped_keywords: usize,
}

impl LoadSummary {
    fn check_budget(&self, path: &Path) -> Result<(), AppError> {
        if self.malformed.is_empty() {
            return Ok(());
        }
        let limit = self.data_lines as f64 * 0.01;
        if self.malformed.len() as f64 > limit {
            let preview: Vec<String> = self
                .malformed
                .iter()
                .take(5)
                .map(|(n, m)| format!("line {n}: {m}"))
                .collect();
            return Err(AppError::data(format!(
                "{}: {} of {} lines malformed (over the 1% budget): {}",
                path.display(),
                self.malformed.len(),
                self.data_lines,
                preview.join("; ")
            )));
        }
        Ok(())
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Canonical category key: lowercase alphanumerics only, so "Yes/No",
/// "yes-no", and "yesno" all agree.
pub fn normalize_category(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

pub fn load_caption_corpus(path: &Path) -> Result<(Vec<CaptionRecord>, LoadSummary), AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    let mut summary = LoadSummary::default();
    for (lineno, line) in data_lines(&text) {
        summary.data_lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            summary
                .malformed
                .push((lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
            continue;
        }
        if fields[0].is_empty() {
            summary.malformed.push((lineno, "empty image path".into()));
            continue;
        }
        let caption = fields[1].to_string();
        let mut keywords = Vec::new();
        for kw in fields[2].split(';') {
            let kw = kw.trim();
            if kw.is_empty() {
                continue;
            }
            if keyword_spans(&caption, &[kw]).is_empty() {
                summary.dropped_keywords += 1;
            } else {
                keywords.push(kw.to_string());
            }
        }
        records.push(CaptionRecord {
            image: base.join(fields[0]),
            caption,
            keywords,
        });
    }
    summary.check_budget(path)?;
    Ok((records, summary))
}

pub fn load_vqa_dataset(
    path: &Path,
    categories: &[String],
) -> Result<(Vec<VqaRecord>, LoadSummary), AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let known: Vec<String> = categories.iter().map(|c| normalize_category(c)).collect();
    let mut records = Vec::new();
    let mut summary = LoadSummary::default();
    for (lineno, line) in data_lines(&text) {
        summary.data_lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            summary
                .malformed
                .push((lineno, format!("expected 4 tab-separated fields, found {}", fields.len())));
            continue;
        }
        if fields[0].is_empty() {
            summary.malformed.push((lineno, "empty image path".into()));
            continue;
        }
        let category = normalize_category(fields[1]);
        if !known.contains(&category) {
            summary
                .malformed
                .push((lineno, format!("unknown category {:?}", fields[1])));
            continue;
        }
        if fields[3].trim().is_empty() {
            summary.malformed.push((lineno, "empty answer".into()));
            continue;
        }
        records.push(VqaRecord {
            image: base.join(fields[0]),
            category,
            question: fields[2].to_string(),
            answer: fields[3].to_string(),
        });
    }
    summary.check_budget(path)?;
    Ok((records, summary))
}

/// Ordered set of normalized answers with dense class ids, built from a
/// training split: frequency descending, then lexicographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSpace {
    answers: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AnswerSpace {
    pub fn build(records: &[VqaRecord], min_count: usize) -> Result<AnswerSpace, AppError> {
        if records.is_empty() {
            return Err(AppError::data("answer space over an empty record set"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in records {
            *counts.entry(normalize_answer(&r.answer)).or_insert(0) += 1;
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(a, c)| !a.is_empty() && *c >= min_count)
            .collect();
        entries.sort_by(|(a1, c1), (a2, c2)| c2.cmp(c1).then_with(|| a1.cmp(a2)));
        if entries.is_empty() {
            return Err(AppError::data(format!(
                "no answer reaches the min_count threshold {min_count}"
            )));
        }
        let answers: Vec<String> = entries.into_iter().map(|(a, _)| a).collect();
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        Ok(AnswerSpace { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Class id of an answer string (normalized before lookup).
    pub fn id_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn corpus_loads_well_formed_lines() {
        let (_d, path) = write_tmp(
            "img/a.ppm\ta red circle in the axial plane\tred;circle;axial\n\
             img/b.ppm\tjust a caption\t\n",
        );
        let (records, summary) = load_caption_corpus(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].keywords, vec!["red", "circle", "axial"]);
        assert!(records[1].keywords.is_empty());
        assert!(summary.malformed.is_empty());
        assert!(records[0].image.ends_with("img/a.ppm"));
    }

    #[test]
    fn corpus_drops_keywords_missing_from_caption() {
        let (_d, path) = write_tmp("a.ppm\ta red circle\tred;tumor\n");
        let (records, summary) = load_caption_corpus(&path).unwrap();
        assert_eq!(records[0].keywords, vec!["red"]);
        assert_eq!(summary.dropped_keywords, 1);
    }

    #[test]
    fn corpus_comment_lines_are_skipped() {
        let (_d, path) = write_tmp("# header comment\na.ppm\tcap\t\n");
        let (records, _) = load_caption_corpus(&path).unwrap();
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn corpus_fails_over_one_percent_malformed() {
        let mut content = String::from("bad line without tabs\n");
        for i in 0..50 {
            content.push_str(&format!("img{i}.ppm\tcaption {i}\t\n"));
        }
        let (_d, path) = write_tmp(&content);
        let err = load_caption_corpus(&path).unwrap_err();
        assert!(matches!(err, AppError::Data(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn corpus_tolerates_under_one_percent_malformed() {
        let mut content = String::from("bad line\n");
        for i in 0..150 {
            content.push_str(&format!("img{i}.ppm\tcaption {i}\t\n"));
        }
        let (_d, path) = write_tmp(&content);
        let (records, summary) = load_caption_corpus(&path).unwrap();
        assert_eq!(records.len(), 150);
        assert_eq!(summary.malformed.len(), 1);
    }

    fn cats() -> Vec<String> {
        DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vqa_loads_and_normalizes_categories() {
        let (_d, path) = write_tmp(
            "a.ppm\tModality\twhat modality is shown?\tus - ultrasound\n\
             a.ppm\tYes/No\tis this a circle?\tYes\n",
        );
        let (records, _) = load_vqa_dataset(&path, &cats()).unwrap();
        assert_eq!(records[0].category, "modality");
        assert_eq!(records[1].category, "yesno");
    }

    #[test]
    fn vqa_rejects_unknown_category_lines() {
        let mut content = String::new();
        for i in 0..10 {
            content.push_str(&format!("a.ppm\tplane\tq{i}?\taxial\n"));
        }
        content.push_str("a.ppm\tweather\tq?\tsunny\n");
        let (_d, path) = write_tmp(&content);
        let err = load_vqa_dataset(&path, &cats()).unwrap_err();
        assert!(err.to_string().contains("unknown category"), "{err}");
    }

    #[test]
    fn vqa_permits_duplicate_image_question_pairs() {
        let (_d, path) = write_tmp(
            "a.ppm\tplane\twhat plane?\taxial\n\
             a.ppm\tplane\twhat plane?\taxial\n",
        );
        let (records, _) = load_vqa_dataset(&path, &cats()).unwrap();
        assert_eq!(records.len(), 2);
    }

    fn rec(answer: &str) -> VqaRecord {
        VqaRecord {
            image: PathBuf::from("x.ppm"),
            category: "yesno".into(),
            question: "q".into(),
            answer: answer.into(),
        }
    }

    #[test]
    fn answer_space_orders_by_frequency_then_lexicographic() {
        let records = vec![rec("yes"), rec("yes"), rec("yes"), rec("no"), rec("no")];
        let space = AnswerSpace::build(&records, 1).unwrap();
        assert_eq!(space.id_of("yes"), Some(0));
        assert_eq!(space.id_of("no"), Some(1));
        assert_eq!(space.answer(0), Some("yes"));
    }

    #[test]
    fn answer_space_min_count_drops_singletons() {
        let records = vec![rec("yes"), rec("yes"), rec("maybe")];
        let space = AnswerSpace::build(&records, 2).unwrap();
        assert_eq!(space.len(), 1);
        assert_eq!(space.id_of("maybe"), None);
    }

    #[test]
    fn answer_space_is_stable_across_rebuilds() {
        let records = vec![rec("b"), rec("a"), rec("a"), rec("b"), rec("c")];
        let s1 = AnswerSpace::build(&records, 1).unwrap();
        let s2 = AnswerSpace::build(&records, 1).unwrap();
        assert_eq!(s1, s2);
        // tie between a and b broken lexicographically
        assert_eq!(s1.answer(0), Some("a"));
        assert_eq!(s1.answer(1), Some("b"));
        assert_eq!(s1.answer(2), Some("c"));
    }
}
