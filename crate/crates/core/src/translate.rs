//! Translation preprocessing.
//!
//! An instance's query and target texts are joined into one block with
//! `Question:` / `Answer:` markers so the translator sees them in context.
//! The translated block is split back on the (translated) markers; when the
//! markers did not survive translation the instance is discarded.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::process::{Command, Stdio};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Language, ParallelPair, RawInstance, IMAGE_PLACEHOLDER};
use crate::error::{Error, Result};

pub const QUESTION_MARKER: &str = "Question:";
pub const ANSWER_MARKER: &str = "Answer:";
/// Joiner between marker sections.
pub const SEPARATOR: &str = "\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedBlock {
    pub instance_id: String,
    pub text: String,
    pub had_placeholder: bool,
    pub had_negative: bool,
}

/// Marker spellings accepted when splitting a translated block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerLexicon {
    pub language: Language,
    pub question_markers: Vec<String>,
    pub answer_markers: Vec<String>,
}

impl MarkerLexicon {
    /// Built-in markers for `language`, always including the English ones
    /// since translators sometimes leave them untouched.
    pub fn default_for(language: Language) -> Self {
        let (q, a) = match language {
            Language::En => ("Question:", "Answer:"),
            Language::Fr => ("Question:", "Réponse:"),
            Language::De => ("Frage:", "Antwort:"),
            Language::It => ("Domanda:", "Risposta:"),
            Language::Es => ("Pregunta:", "Respuesta:"),
        };
        let mut question_markers = vec![q.to_string()];
        let mut answer_markers = vec![a.to_string()];
        if !question_markers.iter().any(|m| m == QUESTION_MARKER) {
            question_markers.push(QUESTION_MARKER.into());
        }
        if !answer_markers.iter().any(|m| m == ANSWER_MARKER) {
            answer_markers.push(ANSWER_MARKER.into());
        }
        Self {
            language,
            question_markers,
            answer_markers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.question_markers.is_empty() || self.answer_markers.is_empty() {
            return Err(Error::invalid(
                "marker lexicon",
                format!("{}: marker lists must be non-empty", self.language),
            ));
        }
        Ok(())
    }

    /// Compile the splitting pattern. Markers match case-insensitively at
    /// the start of a line, with optional whitespace before the marker and
    /// around its colon.
    pub fn matcher(&self) -> Result<MarkerMatcher> {
        self.validate()?;
        let q = alternation(&self.question_markers);
        let a = alternation(&self.answer_markers);
        let anchored = Regex::new(&format!(r"(?im)^[ \t]*(?:(?P<q>{q})|(?P<a>{a}))[ \t]*:[ \t]*"))
            .expect("marker pattern compiles");
        let literal = Regex::new(&format!(r"\b(?:{q}|{a})[ \t]*:")).expect("marker pattern compiles");
        let loose = Regex::new(&format!(r"(?i)\b(?:{q}|{a})[ \t]*:")).expect("marker pattern compiles");
        Ok(MarkerMatcher {
            anchored,
            literal,
            loose,
        })
    }
}

/// Regex alternation of marker words (colon stripped), longest first so a
/// marker that prefixes another never shadows it.
fn alternation(markers: &[String]) -> String {
    let mut words: Vec<String> = markers
        .iter()
        .map(|m| m.trim().trim_end_matches(':').trim_end().to_string())
        .filter(|w| !w.is_empty())
        .collect();
    words.sort_by(|x, y| y.len().cmp(&x.len()).then_with(|| x.cmp(y)));
    words.dedup();
    words
        .iter()
        .map(|w| regex::escape(w))
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Debug, Clone)]
pub struct MarkerMatcher {
    anchored: Regex,
    literal: Regex,
    loose: Regex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarkerKind {
    Question,
    Answer,
}

impl MarkerMatcher {
    fn markers(&self, text: &str) -> Vec<(MarkerKind, usize, usize)> {
        self.anchored
            .captures_iter(text)
            .map(|c| {
                let whole = c.get(0).expect("group 0");
                let kind = if c.name("q").is_some() {
                    MarkerKind::Question
                } else {
                    MarkerKind::Answer
                };
                (kind, whole.start(), whole.end())
            })
            .collect()
    }

    /// First marker-like substring that would confuse extraction: any
    /// marker spelled with its exact case anywhere, or any case variant at
    /// the start of a line.
    pub fn collision<'t>(&self, text: &'t str) -> Option<&'t str> {
        self.literal
            .find(text)
            .or_else(|| self.anchored.find(text))
            .map(|m| m.as_str().trim())
    }

    /// Whether `text` contains a marker anywhere, in any case.
    pub fn contains_marker(&self, text: &str) -> bool {
        self.loose.is_match(text)
    }
}

fn english_matcher() -> &'static MarkerMatcher {
    use std::sync::OnceLock;
    static CELL: OnceLock<MarkerMatcher> = OnceLock::new();
    CELL.get_or_init(|| {
        MarkerLexicon::default_for(Language::En)
            .matcher()
            .expect("default lexicon valid")
    })
}

/// Join query and targets into a marker-delimited block, removing the image
/// placeholder from the query.
pub fn wrap_for_translation(inst: &RawInstance) -> Result<WrappedBlock> {
    let matcher = english_matcher();
    let had_placeholder = inst.query_text.contains(IMAGE_PLACEHOLDER);
    let query = inst.query_text.replacen(IMAGE_PLACEHOLDER, "", 1);
    let mut fields: Vec<(&'static str, &str)> = vec![("query_text", &query), ("pos_text", &inst.pos_text)];
    if let Some(neg) = &inst.neg_text {
        fields.push(("neg_text", neg));
    }
    for (field, text) in &fields {
        if let Some(marker) = matcher.collision(text) {
            return Err(Error::MarkerCollision {
                instance_id: inst.id.clone(),
                field,
                marker: marker.to_string(),
            });
        }
        if text.contains(IMAGE_PLACEHOLDER) {
            return Err(Error::invalid(
                "instance",
                format!("`{}`: stray image placeholder in {field}", inst.id),
            ));
        }
    }
    let mut text = format!("{QUESTION_MARKER} {query}");
    text.push_str(SEPARATOR);
    text.push_str(&format!("{ANSWER_MARKER} {}", inst.pos_text));
    if let Some(neg) = &inst.neg_text {
        text.push_str(SEPARATOR);
        text.push_str(&format!("{ANSWER_MARKER} {neg}"));
    }
    Ok(WrappedBlock {
        instance_id: inst.id.clone(),
        text,
        had_placeholder,
        had_negative: inst.neg_text.is_some(),
    })
}

// ---------------------------------------------------------------------------
// Translators

/// A text-to-text machine translation backend.
pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, source: Language, target: Language) -> std::result::Result<String, String>;

    /// True when output always equals input; pairs produced this way are
    /// flagged as identity translations.
    fn is_identity(&self) -> bool {
        false
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str, _: Language, _: Language) -> std::result::Result<String, String> {
        Ok(text.to_string())
    }

    fn is_identity(&self) -> bool {
        true
    }
}

/// What a [`DictionaryTranslator`] does with words missing from its table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    Keep,
    /// Reverse the word and append the lowercase target language code,
    /// an injective stand-in for a real translation.
    Pseudo,
}

/// Deterministic test translator working line by line.
///
/// A line that starts with a known English marker gets the target
/// language's marker; the remainder is looked up whole in the phrase table
/// and otherwise translated word by word, keeping surrounding punctuation.
#[derive(Debug, Clone)]
pub struct DictionaryTranslator {
    phrases: HashMap<String, String>,
    words: HashMap<String, String>,
    fallback: Fallback,
}

impl DictionaryTranslator {
    pub fn new(fallback: Fallback) -> Self {
        Self {
            phrases: HashMap::new(),
            words: HashMap::new(),
            fallback,
        }
    }

    pub fn pseudo() -> Self {
        Self::new(Fallback::Pseudo)
    }

    pub fn with_phrase(mut self, from: &str, to: &str) -> Self {
        self.phrases.insert(from.into(), to.into());
        self
    }

    pub fn with_word(mut self, from: &str, to: &str) -> Self {
        self.words.insert(from.into(), to.into());
        self
    }

    /// Translate a marker-free segment.
    pub fn translate_segment(&self, segment: &str, target: Language) -> String {
        if let Some(p) = self.phrases.get(segment) {
            return p.clone();
        }
        segment
            .split(' ')
            .map(|w| self.translate_word(w, target))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn translate_word(&self, word: &str, target: Language) -> String {
        let start = word.find(|c: char| c.is_alphanumeric()).unwrap_or(word.len());
        let end = word
            .rfind(|c: char| c.is_alphanumeric())
            .map_or(start, |i| i + word[i..].chars().next().map_or(1, char::len_utf8));
        if start >= end {
            return word.to_string();
        }
        let (lead, core, trail) = (&word[..start], &word[start..end], &word[end..]);
        let mapped = self
            .words
            .get(core)
            .or_else(|| self.words.get(&core.to_lowercase()))
            .cloned()
            .unwrap_or_else(|| match self.fallback {
                Fallback::Keep => core.to_string(),
                Fallback::Pseudo => pseudo_word(core, target),
            });
        format!("{lead}{mapped}{trail}")
    }
}

/// The [`Fallback::Pseudo`] image of one word.
pub fn pseudo_word(word: &str, target: Language) -> String {
    let mut w: String = word.chars().rev().collect();
    w.push_str(target.code());
    w
}

impl Translator for DictionaryTranslator {
    fn translate(&self, text: &str, _: Language, target: Language) -> std::result::Result<String, String> {
        let src = MarkerLexicon::default_for(Language::En);
        let dst = MarkerLexicon::default_for(target);
        let lines = text.split('\n').map(|line| {
            for (from, to) in [
                (&src.question_markers[0], &dst.question_markers[0]),
                (&src.answer_markers[0], &dst.answer_markers[0]),
            ] {
                if let Some(rest) = line.strip_prefix(from.as_str()) {
                    let body = rest.strip_prefix(' ').unwrap_or(rest);
                    return format!("{to} {}", self.translate_segment(body, target));
                }
            }
            self.translate_segment(line, target)
        });
        Ok(lines.collect::<Vec<_>>().join("\n"))
    }
}

/// Bridge to an external translation program.
///
/// The block is written to the child's stdin and its stdout is returned
/// verbatim. `{src}` and `{tgt}` in the arguments are replaced by the
/// language codes.
#[derive(Debug, Clone)]
pub struct CommandTranslator {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandTranslator {
    /// Parse a whitespace-separated command line.
    pub fn parse(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::invalid("translator command", "empty"))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }
}

impl Translator for CommandTranslator {
    fn translate(&self, text: &str, source: Language, target: Language) -> std::result::Result<String, String> {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{src}", source.code()).replace("{tgt}", target.code()))
            .collect();
        let mut child = Command::new(&self.program)
            .args(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning `{}`: {e}", self.program))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = text.to_string();
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        writer
            .join()
            .map_err(|_| "stdin writer panicked".to_string())?
            .map_err(|e| format!("writing to `{}`: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!(
                "`{}` exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        String::from_utf8(out.stdout).map_err(|e| format!("non-UTF-8 output: {e}"))
    }
}

/// Hand a wrapped block to `translator`. Output is returned as-is.
pub fn translate(block: &WrappedBlock, target: Language, translator: &dyn Translator) -> Result<String> {
    if target == Language::En {
        return Err(Error::invalid("target language", "translation target must not be EN"));
    }
    translator
        .translate(&block.text, Language::En, target)
        .map_err(|message| Error::Translator {
            instance_id: block.instance_id.clone(),
            message,
        })
}

// ---------------------------------------------------------------------------
// Extraction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    EmptyOutput,
    MissingQueryMarker,
    LeadingText,
    ExtraQueryMarker,
    AnswerCount,
    EmptyField,
    MarkerCollision,
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscardReason::EmptyOutput => "empty output",
            DiscardReason::MissingQueryMarker => "missing query marker",
            DiscardReason::LeadingText => "text before query marker",
            DiscardReason::ExtraQueryMarker => "extra query marker",
            DiscardReason::AnswerCount => "answer marker count mismatch",
            DiscardReason::EmptyField => "empty field",
            DiscardReason::MarkerCollision => "marker collision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionStatus {
    Extracted,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub status: ExtractionStatus,
    pub query: Option<String>,
    pub pos: Option<String>,
    pub neg: Option<String>,
    pub reason: Option<DiscardReason>,
    pub detail: Option<String>,
}

impl ExtractionOutcome {
    fn discarded(reason: DiscardReason, detail: impl Into<String>) -> Self {
        Self {
            status: ExtractionStatus::Discarded,
            query: None,
            pos: None,
            neg: None,
            reason: Some(reason),
            detail: Some(detail.into()),
        }
    }

    pub fn is_extracted(&self) -> bool {
        self.status == ExtractionStatus::Extracted
    }
}

/// Split a translated block back into query and targets.
pub fn extract_translation(
    translated: &str,
    lexicon: &MarkerLexicon,
    had_placeholder: bool,
    had_negative: bool,
) -> ExtractionOutcome {
    match lexicon.matcher() {
        Ok(m) => extract_with(translated, &m, had_placeholder, had_negative),
        Err(e) => ExtractionOutcome::discarded(DiscardReason::MissingQueryMarker, e.to_string()),
    }
}

pub fn extract_with(
    translated: &str,
    matcher: &MarkerMatcher,
    had_placeholder: bool,
    had_negative: bool,
) -> ExtractionOutcome {
    use DiscardReason::*;
    if translated.trim().is_empty() {
        return ExtractionOutcome::discarded(EmptyOutput, "translator returned no text");
    }
    let markers = matcher.markers(translated);
    let questions = markers.iter().filter(|m| m.0 == MarkerKind::Question).count();
    if questions == 0 {
        return ExtractionOutcome::discarded(MissingQueryMarker, "no query marker found");
    }
    if questions > 1 {
        return ExtractionOutcome::discarded(ExtraQueryMarker, format!("{questions} query markers"));
    }
    if markers[0].0 != MarkerKind::Question {
        return ExtractionOutcome::discarded(LeadingText, "answer marker precedes query marker");
    }
    if !translated[..markers[0].1].trim().is_empty() {
        return ExtractionOutcome::discarded(LeadingText, "text before query marker");
    }
    let expected = 1 + usize::from(had_negative);
    let answers = markers.len() - 1;
    if answers != expected {
        return ExtractionOutcome::discarded(
            AnswerCount,
            format!("expected {expected} answer marker(s), found {answers}"),
        );
    }
    let mut fields = Vec::with_capacity(markers.len());
    for (k, &(_, _, body_start)) in markers.iter().enumerate() {
        let body_end = markers.get(k + 1).map_or(translated.len(), |m| m.1);
        let body = translated[body_start..body_end].trim();
        if body.is_empty() {
            return ExtractionOutcome::discarded(EmptyField, format!("section {} is empty", k + 1));
        }
        fields.push(body.to_string());
    }
    let mut fields = fields.into_iter();
    let mut query = fields.next().expect("query section");
    if had_placeholder {
        query.insert_str(0, IMAGE_PLACEHOLDER);
    }
    ExtractionOutcome {
        status: ExtractionStatus::Extracted,
        query: Some(query),
        pos: fields.next(),
        neg: fields.next(),
        reason: None,
        detail: None,
    }
}

/// Emit the (query, positive) pairs of an extracted instance. Negatives are
/// dropped; the image reference stays with the query.
pub fn build_parallel_pairs(
    original: &RawInstance,
    outcome: &ExtractionOutcome,
    language: Language,
) -> Result<[ParallelPair; 2]> {
    let (Some(query), Some(pos), true) = (&outcome.query, &outcome.pos, outcome.is_extracted()) else {
        return Err(Error::invalid(
            "extraction outcome",
            format!("instance `{}` was discarded", original.id),
        ));
    };
    let code = language.code();
    Ok([
        ParallelPair {
            id: format!("{}/{code}/query", original.id),
            language,
            english_text: original.query_text.clone(),
            translated_text: query.clone(),
            image_ref: original.image_ref.clone(),
            identity_translation: false,
        },
        ParallelPair {
            id: format!("{}/{code}/pos", original.id),
            language,
            english_text: original.pos_text.clone(),
            translated_text: pos.clone(),
            image_ref: None,
            identity_translation: false,
        },
    ])
}

// ---------------------------------------------------------------------------
// Whole-corpus pipeline

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardRecord {
    pub instance_id: String,
    pub language: Language,
    pub reason: DiscardReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct PrepOutput {
    pub pairs: Vec<ParallelPair>,
    pub discards: Vec<DiscardRecord>,
}

/// Wrap, translate and extract every instance for every target language.
///
/// Runs on the current rayon pool. Pairs come out sorted by instance id,
/// then language, then query before positive; discards likewise.
pub fn prepare_corpus(
    instances: &[RawInstance],
    languages: &[Language],
    translator: &dyn Translator,
) -> Result<PrepOutput> {
    if languages.contains(&Language::En) {
        return Err(Error::invalid("target language", "translation target must not be EN"));
    }
    let matchers = languages
        .iter()
        .map(|&l| MarkerLexicon::default_for(l).matcher().map(|m| (l, m)))
        .collect::<Result<Vec<_>>>()?;

    let per_instance: Vec<Result<PrepOutput>> = instances
        .par_iter()
        .map(|inst| {
            let mut out = PrepOutput::default();
            let block = match wrap_for_translation(inst) {
                Ok(b) => b,
                Err(Error::MarkerCollision { field, marker, .. }) => {
                    for &(language, _) in &matchers {
                        out.discards.push(DiscardRecord {
                            instance_id: inst.id.clone(),
                            language,
                            reason: DiscardReason::MarkerCollision,
                            detail: format!("{field} contains `{marker}`"),
                        });
                    }
                    return Ok(out);
                }
                Err(e) => return Err(e),
            };
            for (language, matcher) in &matchers {
                let translated = translate(&block, *language, translator)?;
                let outcome = extract_with(&translated, matcher, block.had_placeholder, block.had_negative);
                if outcome.is_extracted() {
                    let pairs = build_parallel_pairs(inst, &outcome, *language)?;
                    out.pairs.extend(pairs.into_iter().map(|mut p| {
                        p.identity_translation = translator.is_identity();
                        p
                    }));
                } else {
                    out.discards.push(DiscardRecord {
                        instance_id: inst.id.clone(),
                        language: *language,
                        reason: outcome.reason.expect("discard has reason"),
                        detail: outcome.detail.unwrap_or_default(),
                    });
                }
            }
            Ok(out)
        })
        .collect();

    let mut all = PrepOutput::default();
    for part in per_instance {
        let part = part?;
        all.pairs.extend(part.pairs);
        all.discards.extend(part.discards);
    }
    let lang_rank = |l: &Language| languages.iter().position(|x| x == l);
    all.pairs.sort_by(|a, b| {
        let (ia, ka) = split_pair_id(&a.id);
        let (ib, kb) = split_pair_id(&b.id);
        ia.cmp(ib)
            .then(lang_rank(&a.language).cmp(&lang_rank(&b.language)))
            .then((ka != "query").cmp(&(kb != "query")))
    });
    all.discards.sort_by(|a, b| {
        a.instance_id
            .cmp(&b.instance_id)
            .then(lang_rank(&a.language).cmp(&lang_rank(&b.language)))
    });
    Ok(all)
}

fn split_pair_id(id: &str) -> (&str, &str) {
    // `<instance>/<lang>/<kind>`; instance ids may themselves contain `/`.
    let mut it = id.rsplitn(3, '/');
    let kind = it.next().unwrap_or("");
    let _lang = it.next();
    (it.next().unwrap_or(""), kind)
}
