//! WordPiece-style subword vocabulary, tokenization, and keyword masking.
//!
//! Text is lowercased and split on whitespace and ASCII punctuation, then
//! segmented greedily longest-match-first against the vocabulary, with
//! `##`-prefixed continuation pieces. The masking policy replaces whole
//! keywords with `[MASK]` and leaves common words untouched; captions
//! without keywords fall back to random masking so they still train.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::tape::IGNORE_INDEX;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    EmptyCorpus,
    /// target_size cannot even hold the specials plus the alphabet.
    TargetTooSmall { needed: usize, got: usize },
    BadVocabFile { line: usize, msg: String },
    UnknownId { id: usize, vocab_size: usize },
}

impl fmt::Display for TokenizerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerError::EmptyCorpus => write!(f, "vocabulary corpus contains no words"),
            TokenizerError::TargetTooSmall { needed, got } => write!(
                f,
                "target vocabulary size {got} is below specials + alphabet = {needed}"
            ),
            TokenizerError::BadVocabFile { line, msg } => {
                write!(f, "vocab file line {line}: {msg}")
            }
            TokenizerError::UnknownId { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab_size}")
            }
        }
    }
}

impl core::error::Error for TokenizerError {}

/// Subword vocabulary with dense ids; the five specials occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build a vocabulary from corpus lines by greedy frequency-based merging
    /// of character n-grams, deterministically (ties break lexicographically).
    ///
    /// Every character observed in the corpus gets both a word-initial and a
    /// `##` continuation entry, so tokenization of observed text is total.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        target_size: usize,
        min_freq: u64,
    ) -> Result<Vocab, TokenizerError> {
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for word in split_words(line) {
                *word_counts.entry(word).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut alphabet: BTreeSet<char> = BTreeSet::new();
        for word in word_counts.keys() {
            alphabet.extend(word.chars());
        }
        let needed = SPECIALS.len() + 2 * alphabet.len();
        if target_size < needed {
            return Err(TokenizerError::TargetTooSmall {
                needed,
                got: target_size,
            });
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for &c in &alphabet {
            tokens.push(c.to_string());
        }
        for &c in &alphabet {
            tokens.push(format!("{CONTINUATION}{c}"));
        }

        // Words as symbol sequences: first char plain, the rest continuations.
        let mut sequences: Vec<(Vec<String>, u64)> = word_counts
            .iter()
            .map(|(word, &count)| {
                let syms = word
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        }
                    })
                    .collect();
                (syms, count)
            })
            .collect();

        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
        while tokens.len() < target_size {
            let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (syms, count) in &sequences {
                for pair in syms.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            // Highest count wins; BTreeMap order makes ties lexicographic.
            let best = pair_counts
                .iter()
                .fold(None::<(&(String, String), u64)>, |acc, (pair, &c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((pair, c)),
                });
            let pair = match best {
                Some((p, c)) if c >= min_freq => p.clone(),
                _ => break,
            };
            let merged = format!("{}{}", pair.0, pair.1.trim_start_matches(CONTINUATION));
            for (syms, _) in sequences.iter_mut() {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == pair.0 && syms[i + 1] == pair.1 {
                        syms[i] = merged.clone();
                        syms.remove(i + 1);
                    }
                    i += 1;
                }
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
        }

        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, lookup })
    }

    /// Parse the one-token-per-line file format. The first five lines must be
    /// the specials in their reserved order.
    pub fn from_lines(text: &str) -> Result<Vocab, TokenizerError> {
        let mut tokens = Vec::new();
        let mut lookup = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i < SPECIALS.len() {
                if line != SPECIALS[i] {
                    return Err(TokenizerError::BadVocabFile {
                        line: i + 1,
                        msg: format!("expected special {:?}, found {line:?}", SPECIALS[i]),
                    });
                }
            } else if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    msg: format!("token {line:?} is empty or contains whitespace"),
                });
            }
            if lookup.insert(line.to_string(), i).is_some() {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    msg: format!("duplicate token {line:?}"),
                });
            }
            tokens.push(line.to_string());
        }
        if tokens.len() < SPECIALS.len() {
            return Err(TokenizerError::BadVocabFile {
                line: tokens.len(),
                msg: "file is shorter than the five reserved specials".to_string(),
            });
        }
        Ok(Vocab { tokens, lookup })
    }

    /// Serialize to the vocab file format (line number = id).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Tokenized text with per-token byte spans into the original string and
/// keyword membership flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
    pub keyword: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased characters of `text` with the originating byte span of each.
fn lower_with_map(text: &str) -> (Vec<char>, Vec<(usize, usize)>) {
    let mut chars = Vec::new();
    let mut spans = Vec::new();
    for (start, c) in text.char_indices() {
        let end = start + c.len_utf8();
        for lc in c.to_lowercase() {
            chars.push(lc);
            spans.push((start, end));
        }
    }
    (chars, spans)
}

fn is_word_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Split into lowercase words: whitespace separates, ASCII punctuation
/// becomes its own single-character word.
fn split_words(text: &str) -> Vec<String> {
    let (chars, _) = lower_with_map(text);
    split_char_ranges(&chars)
        .into_iter()
        .map(|(a, b)| chars[a..b].iter().collect())
        .collect()
}

fn split_char_ranges(chars: &[char]) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = None;
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                ranges.push((s, i));
            }
        } else if is_word_punct(c) {
            if let Some(s) = start.take() {
                ranges.push((s, i));
            }
            ranges.push((i, i + 1));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        ranges.push((s, chars.len()));
    }
    ranges
}

/// Greedy longest-match-first WordPiece segmentation. Never fails: a word
/// with no match becomes a single `[UNK]` token.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let (chars, spans) = lower_with_map(text);
    let mut ids = Vec::new();
    let mut offsets = Vec::new();
    for (ws, we) in split_char_ranges(&chars) {
        let mut pos = ws;
        let mut word_ids = Vec::new();
        let mut word_offsets = Vec::new();
        let mut failed = false;
        while pos < we {
            let mut matched = None;
            for end in (pos + 1..=we).rev() {
                let mut cand: String = if pos > ws {
                    CONTINUATION.to_string()
                } else {
                    String::new()
                };
                cand.extend(&chars[pos..end]);
                if let Some(id) = vocab.id(&cand) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    word_ids.push(id);
                    word_offsets.push((spans[pos].0, spans[end - 1].1));
                    pos = end;
                }
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            ids.push(UNK_ID);
            offsets.push((spans[ws].0, spans[we - 1].1));
        } else {
            ids.extend(word_ids);
            offsets.extend(word_offsets);
        }
    }
    let keyword = vec![false; ids.len()];
    TokenSequence {
        ids,
        offsets,
        keyword,
    }
}

/// Byte spans of case-insensitive occurrences of each keyword in `text`,
/// with overlapping spans merged.
pub fn keyword_spans(text: &str, keywords: &[&str]) -> Vec<(usize, usize)> {
    let (chars, spans) = lower_with_map(text);
    let mut found: Vec<(usize, usize)> = Vec::new();
    for kw in keywords {
        let (kchars, _) = lower_with_map(kw);
        if kchars.is_empty() || kchars.len() > chars.len() {
            continue;
        }
        for start in 0..=chars.len() - kchars.len() {
            if chars[start..start + kchars.len()] == kchars[..] {
                found.push((spans[start].0, spans[start + kchars.len() - 1].1));
            }
        }
    }
    found.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in found {
        match merged.last_mut() {
            Some((_, end)) if a <= *end => *end = (*end).max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

/// Tokenize and flag every token whose span intersects a keyword occurrence.
pub fn tokenize_with_keywords(text: &str, keywords: &[&str], vocab: &Vocab) -> TokenSequence {
    let mut seq = tokenize(text, vocab);
    let spans = keyword_spans(text, keywords);
    for (i, &(ts, te)) in seq.offsets.iter().enumerate() {
        if spans.iter().any(|&(ks, ke)| ts < ke && ks < te) {
            seq.keyword[i] = true;
        }
    }
    seq
}

/// Join tokens with spaces, fusing `##` continuations; specials are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(TokenizerError::UnknownId {
            id,
            vocab_size: vocab.len(),
        })?;
        if id < SPECIALS.len() {
            continue;
        }
        if let Some(rest) = token.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(token);
        }
    }
    Ok(out)
}

/// Masking policy: per-keyword selection probability plus the fallback rate
/// for sequences that carry no keywords at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub keyword_rate: f64,
    pub fallback_rate: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            keyword_rate: 1.0,
            fallback_rate: 0.15,
        }
    }
}

/// Result of masking: model input ids plus aligned label ids, where
/// unmasked positions carry [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingOutcome {
    pub input_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub masked: usize,
}

impl MaskingOutcome {
    /// True when nothing was masked and the sample cannot contribute loss.
    pub fn is_skippable(&self) -> bool {
        self.masked == 0
    }
}

/// Replace selected keywords with `[MASK]`, whole-keyword at a time: every
/// subword piece of a selected keyword is masked together. Sequences without
/// keyword flags fall back to masking each token independently at
/// `fallback_rate`.
pub fn mask_keywords(seq: &TokenSequence, policy: &MaskPolicy, rng: &mut impl Rng) -> MaskingOutcome {
    let n = seq.ids.len();
    let mut masked_at = vec![false; n];
    if seq.keyword.iter().any(|&k| k) {
        let mut i = 0;
        while i < n {
            if seq.keyword[i] {
                let mut j = i;
                while j < n && seq.keyword[j] {
                    j += 1;
                }
                if rng.random::<f64>() < policy.keyword_rate {
                    for slot in masked_at.iter_mut().take(j).skip(i) {
                        *slot = true;
                    }
                }
                i = j;
            } else {
                i += 1;
            }
        }
    } else {
        for (i, slot) in masked_at.iter_mut().enumerate() {
            if seq.ids[i] >= SPECIALS.len() && rng.random::<f64>() < policy.fallback_rate {
                *slot = true;
            }
        }
    }

    let mut input_ids = seq.ids.clone();
    let mut labels = vec![IGNORE_INDEX; n];
    let mut masked = 0;
    for i in 0..n {
        if masked_at[i] {
            labels[i] = seq.ids[i];
            input_ids[i] = MASK_ID;
            masked += 1;
        }
    }
    MaskingOutcome {
        input_ids,
        labels,
        masked,
    }
}
