//! Records, validation and line-delimited I/O.
//!
//! Instances, pairs, manifests and image features are stored one JSON object
//! per line (UTF-8, no BOM). Embedding stores use a plain decimal format,
//! see [`write_embeddings`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{PooledVector, Pooling};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Placeholder the base model uses for image embeddings inside text.
pub const IMAGE_PLACEHOLDER: &str = "<|image_1|>\n";

/// Per-task cap applied when sampling the training mixture.
pub const INSTANCES_PER_TASK: usize = 10_000;

/// Training tasks dropped before translation: their images carry English
/// text, or their formatting does not survive translation.
pub const EXCLUDED_TASKS: [&str; 6] = [
    "ChartQA",
    "DocQA",
    "HatefulMemes",
    "InfographicsVQA",
    "ScienceQA",
    "VisDial",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Fr,
    De,
    It,
    Es,
}

impl Language {
    pub const ALL: [Language; 5] = [
        Language::De,
        Language::En,
        Language::Es,
        Language::Fr,
        Language::It,
    ];

    /// Non-English languages of the training mixture.
    pub const TARGETS: [Language; 4] = [Language::Fr, Language::De, Language::It, Language::Es];

    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Fr => "fr",
            Language::De => "de",
            Language::It => "it",
            Language::Es => "es",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code().to_ascii_uppercase())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" => Ok(Language::En),
            "fr" => Ok(Language::Fr),
            "de" => Ok(Language::De),
            "it" => Ok(Language::It),
            "es" => Ok(Language::Es),
            other => Err(Error::invalid("language", format!("unknown code `{other}`"))),
        }
    }
}

/// Parse a comma-separated language list such as `fr,it`.
pub fn parse_languages(s: &str) -> Result<Vec<Language>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let lang: Language = part.parse()?;
        if !out.contains(&lang) {
            out.push(lang);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("language list", "empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    I2T,
    T2I,
    VQA,
    VG,
    C,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::I2T,
        TaskKind::T2I,
        TaskKind::VQA,
        TaskKind::VG,
        TaskKind::C,
    ];

    /// Tasks every compared model family covers.
    pub const CORE: [TaskKind; 3] = [TaskKind::I2T, TaskKind::T2I, TaskKind::C];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::I2T => "I2T",
            TaskKind::T2I => "T2I",
            TaskKind::VQA => "VQA",
            TaskKind::VG => "VG",
            TaskKind::C => "C",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid("task kind", format!("unknown task `{s}`")))
    }
}

/// One training instance before translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    pub task: String,
    pub query_text: String,
    pub pos_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl RawInstance {
    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.query_text.is_empty() {
            return Err(format!("instance `{}`: empty query_text", self.id));
        }
        if self.pos_text.is_empty() {
            return Err(format!("instance `{}`: empty pos_text", self.id));
        }
        let in_query = self.query_text.matches(IMAGE_PLACEHOLDER).count();
        if in_query > 1 {
            return Err(format!("instance `{}`: more than one image placeholder", self.id));
        }
        if (in_query == 1) != self.image_ref.is_some() {
            return Err(format!(
                "instance `{}`: image placeholder in query_text must accompany image_ref",
                self.id
            ));
        }
        let in_targets = self.pos_text.contains(IMAGE_PLACEHOLDER)
            || self
                .neg_text
                .as_deref()
                .is_some_and(|n| n.contains(IMAGE_PLACEHOLDER));
        if in_targets {
            return Err(format!(
                "instance `{}`: image placeholder allowed in query_text only",
                self.id
            ));
        }
        Ok(())
    }
}

/// An English text and its translation, the unit of distillation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub id: String,
    pub language: Language,
    pub english_text: String,
    pub translated_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// Set when a test translator returned its input unchanged.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identity_translation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageFeatureRecord<T> {
    pub image_ref: String,
    pub features: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Records per language file.
    pub cardinality: usize,
    pub languages: BTreeSet<Language>,
    pub tasks: BTreeSet<TaskKind>,
    /// Label set per language, required for classification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_set: Option<BTreeMap<Language, Vec<String>>>,
    /// Record file per language, relative to the manifest file.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<Language, PathBuf>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("manifest", format!("{}: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::invalid("manifest", "empty name"));
        }
        if self.cardinality == 0 {
            return bad("cardinality must be positive".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        if self.languages.is_empty() {
            return bad("no languages".into());
        }
        if self.tasks.contains(&TaskKind::C) {
            let Some(classes) = &self.class_set else {
                return bad("classification requires a class_set".into());
            };
            for lang in &self.languages {
                match classes.get(lang) {
                    Some(c) if c.len() >= 2 => {}
                    _ => return bad(format!("class_set for {lang} needs at least two classes")),
                }
            }
        }
        for lang in self.files.keys() {
            if !self.languages.contains(lang) {
                return bad(format!("file given for unsupported language {lang}"));
            }
        }
        Ok(())
    }

    pub fn class_count(&self, language: Language) -> Option<usize> {
        self.class_set
            .as_ref()
            .and_then(|c| c.get(&language))
            .map(Vec::len)
    }
}

// ---------------------------------------------------------------------------
// Line-record I/O

/// Read one JSON record per non-blank line, in file order.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_prefix('\u{feff}').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Read and validate raw training instances.
pub fn read_instances(path: &Path) -> Result<Vec<RawInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let inst: RawInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        inst.check().map_err(parse_err)?;
        if !seen.insert(inst.id.clone()) {
            return Err(parse_err(format!("duplicate id `{}`", inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

/// Drop instances of excluded tasks and keep the first `limit` per task,
/// preserving file order.
pub fn select_training_mixture(instances: Vec<RawInstance>, limit: usize) -> Vec<RawInstance> {
    let mut per_task: HashMap<String, usize> = HashMap::new();
    instances
        .into_iter()
        .filter(|inst| !EXCLUDED_TASKS.contains(&inst.task.as_str()))
        .filter(|inst| {
            let n = per_task.entry(inst.task.clone()).or_default();
            *n += 1;
            *n <= limit
        })
        .collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<ParallelPair>> {
    read_records(path)
}

pub fn write_pairs(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    write_records(path, pairs)
}

pub fn read_manifests(path: &Path) -> Result<Vec<DatasetManifest>> {
    let manifests: Vec<DatasetManifest> = read_records(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifests
        .into_iter()
        .map(|mut m| {
            m.validate()?;
            for file in m.files.values_mut() {
                if file.is_relative() {
                    *file = base.join(&*file);
                }
            }
            Ok(m)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pair validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyText,
    PlaceholderParity,
    UntranslatedText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            ViolationKind::EmptyText => "empty text",
            ViolationKind::PlaceholderParity => "placeholder parity",
            ViolationKind::UntranslatedText => "untranslated text",
        };
        write!(f, "{label}: {}", self.message)
    }
}

/// Every invariant the pair breaks; empty when well-formed.
pub fn validate_pair(pair: &ParallelPair) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |kind, message: String| report.push(Violation { kind, message });
    if pair.english_text.is_empty() || pair.translated_text.is_empty() {
        push(ViolationKind::EmptyText, format!("pair `{}`", pair.id));
    }
    let en = pair.english_text.matches(IMAGE_PLACEHOLDER).count();
    let tr = pair.translated_text.matches(IMAGE_PLACEHOLDER).count();
    let expected = usize::from(pair.image_ref.is_some());
    if en != expected || tr != expected {
        push(
            ViolationKind::PlaceholderParity,
            format!(
                "pair `{}`: expected {expected} placeholder(s), found {en} in english and {tr} in translation",
                pair.id
            ),
        );
    }
    if pair.language != Language::En
        && pair.english_text == pair.translated_text
        && !pair.identity_translation
    {
        push(
            ViolationKind::UntranslatedText,
            format!("pair `{}`: {} text equals english", pair.id, pair.language),
        );
    }
    report
}

// ---------------------------------------------------------------------------
// Image features

/// Image feature lookup. Either backed by records loaded from a file, or
/// synthetic: deterministic pseudo-random vectors in `[-1, 1)` keyed by the
/// FNV-1a hash of the image reference.
#[derive(Debug, Clone)]
pub struct ImageStore<T> {
    dim: usize,
    records: Option<HashMap<String, Vec<T>>>,
}

impl<T: Scalar> ImageStore<T> {
    pub fn synthetic(dim: usize) -> Self {
        Self { dim, records: None }
    }

    pub fn from_records(records: Vec<ImageFeatureRecord<T>>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.features.len());
        let mut map = HashMap::with_capacity(records.len());
        for r in records {
            if r.features.len() != dim {
                return Err(Error::Dimension {
                    id: r.image_ref,
                    expected: dim,
                    got: r.features.len(),
                });
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "image features",
                    format!("`{}` has non-finite values", r.image_ref),
                ));
            }
            if map.insert(r.image_ref.clone(), r.features).is_some() {
                return Err(Error::invalid(
                    "image features",
                    format!("duplicate image_ref `{}`", r.image_ref),
                ));
            }
        }
        Ok(Self {
            dim,
            records: Some(map),
        })
    }

    pub fn load(path: &Path) -> Result<Self>
    where
        T: DeserializeOwned,
    {
        Self::from_records(read_records(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_synthetic(&self) -> bool {
        self.records.is_none()
    }

    pub fn features(&self, image_ref: &str) -> Result<Vec<T>> {
        match &self.records {
            Some(map) => map.get(image_ref).cloned().ok_or_else(|| {
                Error::invalid("image_ref", format!("`{image_ref}` not in feature store"))
            }),
            None => Ok(synthetic_features(image_ref, self.dim)),
        }
    }

    pub fn contains(&self, image_ref: &str) -> bool {
        self.records
            .as_ref()
            .is_none_or(|map| map.contains_key(image_ref))
    }
}

pub fn synthetic_features<T: Scalar>(image_ref: &str, dim: usize) -> Vec<T> {
    let mut rng = Stream::new(fnv1a64(image_ref.as_bytes()));
    (0..dim).map(|_| T::lit(rng.uniform(-1.0, 1.0))).collect()
}

// ---------------------------------------------------------------------------
// Embedding store

/// Pooled vectors keyed by id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    entries: Vec<(String, PooledVector<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn get(&self, id: &str) -> Option<&PooledVector<T>> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, PooledVector<T>)] {
        &self.entries
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, v)| v.values.len())
    }
}

/// Write `id<TAB>v1 v2 ...` lines, each value in scientific notation with
/// nine significant digits. Nine digits round-trip every `f32` exactly.
pub fn write_embeddings<T: Scalar>(path: &Path, records: &[(String, PooledVector<T>)]) -> Result<()> {
    if let Some((_, first)) = records.first() {
        let d = first.values.len();
        for (id, v) in records {
            if v.values.len() != d {
                return Err(Error::Dimension {
                    id: id.clone(),
                    expected: d,
                    got: v.values.len(),
                });
            }
        }
    }
    let mut w = create(path)?;
    for (id, v) in records {
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid("embedding id", format!("{id:?}")));
        }
        let mut line = String::with_capacity(id.len() + 16 * v.values.len());
        line.push_str(id);
        line.push('\t');
        for (j, x) in v.values.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&format_sig9(x.as_f64()));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn format_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn read_embeddings<T: Scalar>(path: &Path) -> Result<EmbeddingTable<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(String, PooledVector<T>)> = Vec::new();
    let mut index = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `id<TAB>values`".into()))?;
        let values = rest
            .split_ascii_whitespace()
            .map(|tok| {
                let v: f64 = tok.parse().map_err(|_| parse_err(format!("bad number `{tok}`")))?;
                T::from_f64(v).ok_or_else(|| parse_err(format!("bad number `{tok}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some((_, first)) = entries.first() {
            if first.values.len() != values.len() {
                return Err(Error::Dimension {
                    id: id.to_string(),
                    expected: first.values.len(),
                    got: values.len(),
                });
            }
        }
        if index.insert(id.to_string(), entries.len()).is_some() {
            return Err(parse_err(format!("duplicate id `{id}`")));
        }
        entries.push((id.to_string(), PooledVector::new(values, Pooling::LastToken)));
    }
    Ok(EmbeddingTable { entries, index })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, pos: &str) -> String {
        format!(r#"{{"id":"{id}","task":"OK-VQA","query_text":"q {id}","pos_text":"{pos}"}}"#)
    }

    #[test]
    fn reads_instances_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        fs::write(&p, format!("{}\n\n{}\n{}\n", inst("a", "x"), inst("b", "y"), inst("c", "z"))).unwrap();
        let got = read_instances(&p).unwrap();
        let ids: Vec<_> = got.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn missing_pos_text_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        let bad = r#"{"id":"b","task":"OK-VQA","query_text":"q"}"#;
        fs::write(&p, format!("{}\n{bad}\n", inst("a", "x"))).unwrap();
        match read_instances(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("pos_text"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        fs::write(&p, format!("{}\n{}\n", inst("a", "x"), inst("a", "y"))).unwrap();
        assert!(matches!(read_instances(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn mixture_caps_each_task() {
        let mut all = Vec::new();
        for task in ["A-OKVQA", "VisDial", "MSCOCO_i2t"] {
            for i in 0..25 {
                all.push(RawInstance {
                    id: format!("{task}-{i}"),
                    task: task.into(),
                    query_text: "q".into(),
                    pos_text: "p".into(),
                    neg_text: None,
                    image_ref: None,
                });
            }
        }
        let kept = select_training_mixture(all, 10);
        assert_eq!(kept.len(), 20);
        assert!(kept.iter().all(|i| i.task != "VisDial"));
        assert_eq!(kept[0].id, "A-OKVQA-0");
        assert_eq!(kept[9].id, "A-OKVQA-9");
    }

    fn pair(lang: Language, en: &str, tr: &str, image: bool) -> ParallelPair {
        ParallelPair {
            id: "p".into(),
            language: lang,
            english_text: en.into(),
            translated_text: tr.into(),
            image_ref: image.then(|| "img".into()),
            identity_translation: false,
        }
    }

    #[test]
    fn placeholder_in_english_only_is_a_parity_violation() {
        let p = pair(Language::Fr, "<|image_1|>\nA dog", "Un chien", true);
        let report = validate_pair(&p);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kind, ViolationKind::PlaceholderParity);
        assert!(report[0].to_string().starts_with("placeholder parity"));
    }

    #[test]
    fn well_formed_pairs_pass() {
        assert!(validate_pair(&pair(Language::Fr, "<|image_1|>\nA dog", "<|image_1|>\nUn chien", true)).is_empty());
        assert!(validate_pair(&pair(Language::En, "same", "same", false)).is_empty());
        let untranslated = pair(Language::It, "same", "same", false);
        assert_eq!(validate_pair(&untranslated)[0].kind, ViolationKind::UntranslatedText);
        let flagged = ParallelPair {
            identity_translation: true,
            ..untranslated
        };
        assert!(validate_pair(&flagged).is_empty());
    }

    fn vecs(n: usize, d: usize) -> Vec<(String, PooledVector<f32>)> {
        let mut rng = Stream::new(11);
        (0..n)
            .map(|i| {
                let v = (0..d).map(|_| rng.uniform(-3.0, 3.0) as f32).collect();
                (format!("id{i}"), PooledVector::new(v, Pooling::LastToken))
            })
            .collect()
    }

    #[test]
    fn embeddings_round_trip_f32_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        let recs = vecs(10, 64);
        write_embeddings(&p, &recs).unwrap();
        let back = read_embeddings::<f32>(&p).unwrap();
        assert_eq!(back.entries(), &recs[..]);
    }

    #[test]
    fn embeddings_dimension_mismatch_names_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        let mut recs = vecs(3, 64);
        recs.push(("short".into(), PooledVector::new(vec![0.0; 32], Pooling::LastToken)));
        match write_embeddings(&p, &recs) {
            Err(Error::Dimension { id, expected: 64, got: 32 }) => assert_eq!(id, "short"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        write_embeddings::<f64>(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "");
        assert!(read_embeddings::<f64>(&p).unwrap().is_empty());
    }

    #[test]
    fn synthetic_images_are_deterministic() {
        let store = ImageStore::<f64>::synthetic(8);
        let a = store.features("coco/123.jpg").unwrap();
        assert_eq!(a, store.features("coco/123.jpg").unwrap());
        assert_ne!(a, store.features("coco/124.jpg").unwrap());
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn image_store_rejects_ragged_records() {
        let recs = vec![
            ImageFeatureRecord { image_ref: "a".into(), features: vec![1.0f64, 2.0] },
            ImageFeatureRecord { image_ref: "b".into(), features: vec![1.0] },
        ];
        assert!(matches!(ImageStore::from_records(recs), Err(Error::Dimension { .. })));
    }

    #[test]
    fn manifest_validation() {
        let mut m = DatasetManifest {
            name: "Imagenet-1k".into(),
            cardinality: 1000,
            languages: [Language::En].into(),
            tasks: [TaskKind::C].into(),
            class_set: None,
            files: BTreeMap::new(),
        };
        assert!(m.validate().is_err());
        m.class_set = Some([(Language::En, vec!["cat".into(), "dog".into()])].into());
        m.validate().unwrap();
        m.tasks.clear();
        assert!(m.validate().is_err());
    }

    #[test]
    fn language_codes() {
        assert_eq!(parse_languages("fr, IT,fr").unwrap(), vec![Language::Fr, Language::It]);
        assert!(parse_languages("").is_err());
        assert!("xx".parse::<Language>().is_err());
        assert_eq!(serde_json::to_string(&Language::De).unwrap(), "\"de\"");
    }
}
