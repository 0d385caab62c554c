//! Benchmark construction: candidate pools and instruction templates.
//!
//! Every instance gets exactly one relevant candidate plus `n` irrelevant
//! ones drawn from the same dataset. `n` is 999 for datasets with at least
//! 1,000 records and 99 otherwise; classification uses every other class.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{create, read_records, DatasetManifest, Language, TaskKind};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormattingStyle {
    /// Terminal punctuation removed.
    Plain,
    /// A full stop appended, or a question mark for VQA queries.
    Punctuation,
}

impl FormattingStyle {
    pub fn name(self) -> &'static str {
        match self {
            FormattingStyle::Plain => "plain",
            FormattingStyle::Punctuation => "punctuation",
        }
    }
}

impl fmt::Display for FormattingStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormattingStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(FormattingStyle::Plain),
            "punctuation" | "punct" => Ok(FormattingStyle::Punctuation),
            other => Err(Error::invalid("formatting style", format!("unknown style `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Pool size

/// Number of irrelevant candidates per instance.
pub fn pool_size(cardinality: usize, task: TaskKind, class_count: Option<usize>) -> Result<usize> {
    if task == TaskKind::C {
        let classes = class_count
            .ok_or_else(|| Error::invalid("pool size", "classification needs a class count"))?;
        if classes < 2 {
            return Err(Error::invalid("pool size", format!("{classes} classes, need at least 2")));
        }
        return Ok(classes - 1);
    }
    if cardinality == 0 {
        return Err(Error::invalid("pool size", "empty dataset"));
    }
    Ok(if cardinality >= 1000 { 999 } else { 99 })
}

// ---------------------------------------------------------------------------
// Templates

const QUERY_SLOT: &str = "{query_text}";
const TARGET_SLOT: &str = "{target_text}";

/// Query template, or `None` where the benchmark has no data.
pub fn query_template(task: TaskKind, language: Language) -> Option<&'static str> {
    use Language::*;
    use TaskKind::*;
    Some(match (language, task) {
        (En, I2T) => "<|image_1|>\nFind an image caption describing the given everyday image",
        (En, T2I) => "Find me an everyday image that matches the given caption: {query_text}",
        (En, VQA) => "<|image_1|>\nRepresent the given image with the following question: {query_text}",
        (En, VG) => "<|image_1|>\nSelect the portion of the image that isolates the object labeled as \"{query_text}\"",
        (En, C) => "<|image_1|>\nRepresent the given image for classification",

        (Fr, I2T) => "<|image_1|>\nTrouvez une légende décrivant l'image donnée",
        (Fr, T2I) => "Trouvez-moi une image de tous les jours qui correspond à la légende donnée: {query_text}",
        (Fr, VQA) => "<|image_1|>\nReprésentez l'image donnée avec la question suivante: {query_text}",
        (Fr, VG) => "<|image_1|>\nSélectionnez la partie de l'image qui isole l'objet étiqueté comme \"{query_text}\"",
        (Fr, C) => "<|image_1|>\nReprésentez l'image donnée pour la classification",

        (De, I2T) => "<|image_1|>\nFinde eine Bildunterschrift, die das gegebene Alltagsbild beschreibt",
        (De, T2I) => "Finde mir ein alltägliches Bild, das der gegebenen Beschriftung entspricht: {query_text}",
        (De, C) => "<|image_1|>\nStellen Sie das gegebene Bild für die Klassifizierung dar",

        (It, I2T) => "<|image_1|>\nTrova una didascalia che descriva l'immagine di tutti i giorni",
        (It, T2I) => "Trovami un'immagine di tutti i giorni che corrisponda alla didascalia data: {query_text}",
        (It, C) => "<|image_1|>\nRappresenta l'immagine data per la classificazione",

        (Es, I2T) => "<|image_1|>\nEncuentra una leyenda que describa la imagen cotidiana dada",
        (Es, T2I) => "Encuentra una imagen cotidiana que coincida con la leyenda dada: {query_text}",
        (Es, C) => "<|image_1|>\nRepresenta la imagen dada para clasificación",

        (De | It | Es, VQA | VG) => return None,
    })
}

/// Target template, or `None` where the benchmark has no data.
pub fn target_template(task: TaskKind, language: Language) -> Option<&'static str> {
    use Language::*;
    use TaskKind::*;
    Some(match (language, task) {
        (_, I2T | C) => TARGET_SLOT,
        (De | It | Es, VQA | VG) => return None,

        (En, T2I) => "<|image_1|>\nRepresent the given image",
        (En, VQA) => "Represent the given image with the following question: {target_text}",
        (En, VG) => "Select the portion of the image that isolates the object labeled as \"{target_text}\"",

        (Fr, T2I) => "<|image_1|>\nReprésentez l'image donnée",
        (Fr, VQA) => TARGET_SLOT,
        (Fr, VG) => "<|image_1|>\nReprésentez l'image recadrée donnée de l'objet",

        (De, T2I) => "<|image_1|>\nStelle das gegebene Bild dar",
        (It, T2I) => "<|image_1|>\nRappresenta l'immagine data",
        (Es, T2I) => "<|image_1|>\nRepresenta la imagen dada",
    })
}

pub fn is_supported(task: TaskKind, language: Language) -> bool {
    query_template(task, language).is_some()
}

const TERMINAL_PUNCTUATION: [char; 5] = ['.', ',', '!', '?', ':'];

/// Apply a formatting style to a filled template.
pub fn apply_style(text: &str, style: FormattingStyle, terminal: char) -> String {
    let stripped = match text.chars().last() {
        Some(c) if TERMINAL_PUNCTUATION.contains(&c) => &text[..text.len() - c.len_utf8()],
        _ => text,
    };
    match style {
        FormattingStyle::Plain => stripped.to_string(),
        FormattingStyle::Punctuation => format!("{stripped}{terminal}"),
    }
}

fn unsupported(task: TaskKind, language: Language) -> Error {
    Error::UnsupportedTemplate {
        task: task.to_string(),
        language: language.to_string(),
    }
}

pub fn format_query(task: TaskKind, language: Language, style: FormattingStyle, query_text: &str) -> Result<String> {
    let template = query_template(task, language).ok_or_else(|| unsupported(task, language))?;
    let terminal = if task == TaskKind::VQA { '?' } else { '.' };
    Ok(apply_style(&template.replace(QUERY_SLOT, query_text), style, terminal))
}

pub fn format_target(task: TaskKind, language: Language, style: FormattingStyle, target_text: &str) -> Result<String> {
    let template = target_template(task, language).ok_or_else(|| unsupported(task, language))?;
    Ok(apply_style(&template.replace(TARGET_SLOT, target_text), style, '.'))
}

// ---------------------------------------------------------------------------
// Source records and instances

/// One row of a source dataset. Which fields a task reads:
///
/// | task | query                      | relevant candidate       |
/// |------|----------------------------|--------------------------|
/// | I2T  | `image_ref`                | `captions[0]`            |
/// | T2I  | `captions[0]`              | `image_ref`              |
/// | VQA  | `image_ref` + `question`   | `answer`                 |
/// | VG   | `image_ref` + `label`      | `crop_ref` (+ `label`)   |
/// | C    | `image_ref`                | `label` among the classes |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// Only the first caption is used.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_ref: Option<String>,
}

/// Unformatted query or candidate content.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RawItem {
    text: String,
    image_ref: Option<String>,
}

fn field<'a>(rec: &'a DatasetRecord, name: &str, value: Option<&'a String>) -> Result<&'a String> {
    value.ok_or_else(|| Error::invalid("dataset record", format!("`{}` lacks {name}", rec.id)))
}

fn raw_query(rec: &DatasetRecord, task: TaskKind) -> Result<RawItem> {
    let image = || field(rec, "image_ref", rec.image_ref.as_ref()).cloned();
    Ok(match task {
        TaskKind::I2T | TaskKind::C => RawItem {
            text: String::new(),
            image_ref: Some(image()?),
        },
        TaskKind::T2I => RawItem {
            text: field(rec, "captions", rec.captions.first())?.clone(),
            image_ref: None,
        },
        TaskKind::VQA => RawItem {
            text: field(rec, "question", rec.question.as_ref())?.clone(),
            image_ref: Some(image()?),
        },
        TaskKind::VG => RawItem {
            text: field(rec, "label", rec.label.as_ref())?.clone(),
            image_ref: Some(image()?),
        },
    })
}

fn raw_target(rec: &DatasetRecord, task: TaskKind) -> Result<RawItem> {
    Ok(match task {
        TaskKind::I2T => RawItem {
            text: field(rec, "captions", rec.captions.first())?.clone(),
            image_ref: None,
        },
        TaskKind::T2I => RawItem {
            text: String::new(),
            image_ref: Some(field(rec, "image_ref", rec.image_ref.as_ref())?.clone()),
        },
        TaskKind::VQA => RawItem {
            text: field(rec, "answer", rec.answer.as_ref())?.clone(),
            image_ref: None,
        },
        TaskKind::VG => RawItem {
            text: field(rec, "label", rec.label.as_ref())?.clone(),
            image_ref: Some(field(rec, "crop_ref", rec.crop_ref.as_ref())?.clone()),
        },
        TaskKind::C => RawItem {
            text: field(rec, "label", rec.label.as_ref())?.clone(),
            image_ref: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchInstance {
    pub id: String,
    pub task: TaskKind,
    pub language: Language,
    pub query: Candidate,
    /// The pool in seeded-shuffle order.
    pub candidates: Vec<Candidate>,
    /// Position of the single relevant candidate in `candidates`.
    pub relevant: usize,
}

impl BenchInstance {
    pub fn relevant_candidate(&self) -> &Candidate {
        &self.candidates[self.relevant]
    }

    pub fn irrelevant(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.relevant)
            .map(|(_, c)| c)
    }

    /// Lookup key of the query in an embedding store.
    pub fn query_key(&self, style: FormattingStyle) -> String {
        format!("{style}:{}#q", self.id)
    }

    pub fn candidate_key(&self, style: FormattingStyle, position: usize) -> String {
        format!("{style}:{}#c{position}", self.id)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("bench instance", format!("`{}`: {m}", self.id)));
        if self.relevant >= self.candidates.len() {
            return bad("relevant index out of range".into());
        }
        if self.candidates.len() != n + 1 {
            return bad(format!("{} candidates, expected {}", self.candidates.len(), n + 1));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.candidates.iter().find(|c| !seen.insert(*c)) {
            return bad(format!("duplicate candidate {dup:?}"));
        }
        Ok(())
    }
}

/// Distinct candidate contents of a suite, in first-seen order.
struct Universe {
    items: Vec<RawItem>,
    /// Universe index of each record's relevant candidate.
    of_record: Vec<usize>,
}

impl Universe {
    fn from_records(records: &[DatasetRecord], task: TaskKind) -> Result<Self> {
        let mut index: HashMap<RawItem, usize> = HashMap::new();
        let mut items = Vec::new();
        let mut of_record = Vec::with_capacity(records.len());
        for rec in records {
            let item = raw_target(rec, task)?;
            let at = *index.entry(item.clone()).or_insert_with(|| {
                items.push(item);
                items.len() - 1
            });
            of_record.push(at);
        }
        Ok(Self { items, of_record })
    }

    fn from_classes(records: &[DatasetRecord], classes: &[String]) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut items = Vec::new();
        for c in classes {
            if index.insert(c.as_str(), items.len()).is_some() {
                return Err(Error::invalid("class set", format!("duplicate class `{c}`")));
            }
            items.push(RawItem {
                text: c.clone(),
                image_ref: None,
            });
        }
        let of_record = records
            .iter()
            .map(|rec| {
                let label = field(rec, "label", rec.label.as_ref())?;
                index
                    .get(label.as_str())
                    .copied()
                    .ok_or_else(|| Error::invalid("dataset record", format!("`{}`: label `{label}` not in class set", rec.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, of_record })
    }
}

/// Everything needed to build pools for one (dataset, task, language).
pub struct PoolSource<'a> {
    pub dataset: &'a str,
    pub task: TaskKind,
    pub language: Language,
    pub style: FormattingStyle,
    pub records: &'a [DatasetRecord],
    /// Classification label set.
    pub classes: Option<&'a [String]>,
    pub n: usize,
    pub seed: u64,
}

/// Pool construction for a whole suite, sharing the candidate universe.
pub struct PoolBuilder<'a> {
    src: PoolSource<'a>,
    universe: Universe,
    formatted: Vec<Candidate>,
}

impl<'a> PoolBuilder<'a> {
    pub fn new(src: PoolSource<'a>) -> Result<Self> {
        let universe = match (src.task, src.classes) {
            (TaskKind::C, Some(classes)) => Universe::from_classes(src.records, classes)?,
            (TaskKind::C, None) => return Err(Error::invalid("pool source", "classification needs a class set")),
            (task, _) => Universe::from_records(src.records, task)?,
        };
        if universe.items.len() < src.n + 1 {
            return Err(Error::invalid(
                "pool source",
                format!(
                    "{} {} {}: {} distinct candidates cannot fill pools of {} irrelevant items",
                    src.dataset,
                    src.task,
                    src.language,
                    universe.items.len(),
                    src.n
                ),
            ));
        }
        let formatted = universe
            .items
            .iter()
            .map(|it| {
                Ok(Candidate {
                    text: format_target(src.task, src.language, src.style, &it.text)?,
                    image_ref: it.image_ref.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            src,
            universe,
            formatted,
        })
    }

    /// Pool for record `i`: `n` distinct irrelevant candidates sampled
    /// uniformly from the universe minus the relevant one, then a shuffle
    /// of the whole pool. Both draws come from one stream keyed by
    /// `(seed, dataset, i)`.
    pub fn build(&self, i: usize) -> Result<BenchInstance> {
        let rec = self
            .src
            .records
            .get(i)
            .ok_or_else(|| Error::invalid("pool index", format!("{i} out of range")))?;
        let relevant = self.universe.of_record[i];
        let mut rng = Stream::keyed(
            self.src.seed,
            &[self.src.dataset.as_bytes(), &(i as u64).to_le_bytes()],
        );
        let others = self.universe.items.len() - 1;
        let mut pool: Vec<usize> = Vec::with_capacity(self.src.n + 1);
        pool.push(relevant);
        pool.extend(
            rng.sample_indices(others, self.src.n)
                .into_iter()
                .map(|k| if k >= relevant { k + 1 } else { k }),
        );
        rng.shuffle(&mut pool);
        let position = pool.iter().position(|&u| u == relevant).expect("relevant in pool");
        let raw_q = raw_query(rec, self.src.task)?;
        let query = Candidate {
            text: format_query(self.src.task, self.src.language, self.src.style, &raw_q.text)?,
            image_ref: raw_q.image_ref,
        };
        Ok(BenchInstance {
            id: format!("{}/{}/{}/{}", self.src.dataset, self.src.task, self.src.language.code(), rec.id),
            task: self.src.task,
            language: self.src.language,
            query,
            candidates: pool.into_iter().map(|u| self.formatted[u].clone()).collect(),
            relevant: position,
        })
    }
}

/// One-off pool construction; see [`PoolBuilder::build`].
pub fn build_pool(src: PoolSource<'_>, i: usize) -> Result<BenchInstance> {
    PoolBuilder::new(src)?.build(i)
}

// ---------------------------------------------------------------------------
// Suites

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteHeader {
    pub dataset: String,
    pub task: TaskKind,
    pub language: Language,
    pub style: FormattingStyle,
    pub seed: u64,
    pub n: usize,
    pub instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkSuite {
    pub header: SuiteHeader,
    pub instances: Vec<BenchInstance>,
}

impl BenchmarkSuite {
    pub fn file_name(&self) -> String {
        let slug: String = self
            .header
            .dataset
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect();
        format!(
            "{slug}_{}_{}_{}.jsonl",
            self.header.task.name().to_ascii_lowercase(),
            self.header.language.code(),
            self.header.style
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Head<'a> {
            suite: &'a SuiteHeader,
        }
        let mut w = create(path)?;
        let head = serde_json::to_string(&Head { suite: &self.header }).expect("header serializes");
        writeln!(w, "{head}").map_err(|e| Error::io(path, e))?;
        for inst in &self.instances {
            let line = serde_json::to_string(inst).expect("instance serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            suite: SuiteHeader,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header: Option<SuiteHeader> = None;
        let mut instances = Vec::new();
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
            if header.is_none() {
                let h: Head = serde_json::from_str(&line).map_err(|e| parse_err(format!("suite header: {e}")))?;
                header = Some(h.suite);
                continue;
            }
            let inst: BenchInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let h = header.as_ref().expect("header read");
            inst.validate(h.n).map_err(|e| parse_err(e.to_string()))?;
            instances.push(inst);
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing suite header".into(),
        })?;
        if header.instances != instances.len() {
            return Err(Error::invalid(
                "suite",
                format!("header declares {} instances, file has {}", header.instances, instances.len()),
            ));
        }
        Ok(Self { header, instances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub style: FormattingStyle,
    pub seed: u64,
    /// Keep only the first `k` instances of each suite (pools still draw
    /// from the full dataset).
    pub max_instances: Option<usize>,
}

/// Load a manifest's record file for one language, checking cardinality.
pub fn load_records(manifest: &DatasetManifest, language: Language) -> Result<Vec<DatasetRecord>> {
    let path: &PathBuf = manifest.files.get(&language).ok_or_else(|| {
        Error::invalid("manifest", format!("{}: no record file for {language}", manifest.name))
    })?;
    let records: Vec<DatasetRecord> = read_records(path)?;
    if records.len() != manifest.cardinality {
        return Err(Error::invalid(
            "manifest",
            format!(
                "{} {language}: cardinality {} but {} has {} records",
                manifest.name,
                manifest.cardinality,
                path.display(),
                records.len()
            ),
        ));
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = records.iter().find(|r| !ids.insert(r.id.as_str())) {
        return Err(Error::invalid("dataset", format!("{}: duplicate record id `{}`", manifest.name, dup.id)));
    }
    Ok(records)
}

/// The (task, language) combinations a manifest yields, in canonical order.
pub fn suite_plan(manifest: &DatasetManifest) -> Result<Vec<(TaskKind, Language)>> {
    manifest.validate()?;
    let mut plan = Vec::new();
    for &task in &manifest.tasks {
        for &language in &manifest.languages {
            if !is_supported(task, language) {
                return Err(unsupported(task, language));
            }
            plan.push((task, language));
        }
    }
    Ok(plan)
}

/// One suite per supported (dataset, task, language), sorted by dataset,
/// task, then language.
pub fn build_benchmark(manifests: &[DatasetManifest], opts: &BuildOptions) -> Result<Vec<BenchmarkSuite>> {
    let mut jobs = Vec::new();
    for m in manifests {
        for (task, language) in suite_plan(m)? {
            jobs.push((m, task, language));
        }
    }
    let mut records: BTreeMap<(String, Language), Vec<DatasetRecord>> = BTreeMap::new();
    for (m, _, language) in &jobs {
        let key = (m.name.clone(), *language);
        if !records.contains_key(&key) {
            records.insert(key, load_records(m, *language)?);
        }
    }
    let mut suites = jobs
        .par_iter()
        .map(|&(m, task, language)| {
            let recs = &records[&(m.name.clone(), language)];
            let classes = m.class_set.as_ref().and_then(|c| c.get(&language)).map(Vec::as_slice);
            let n = pool_size(m.cardinality, task, classes.map(<[String]>::len))?;
            let builder = PoolBuilder::new(PoolSource {
                dataset: &m.name,
                task,
                language,
                style: opts.style,
                records: recs,
                classes,
                n,
                seed: opts.seed,
            })?;
            let count = opts.max_instances.map_or(recs.len(), |k| k.min(recs.len()));
            let instances = (0..count).map(|i| builder.build(i)).collect::<Result<Vec<_>>>()?;
            Ok(BenchmarkSuite {
                header: SuiteHeader {
                    dataset: m.name.clone(),
                    task,
                    language,
                    style: opts.style,
                    seed: opts.seed,
                    n,
                    instances: instances.len(),
                    provenance: None,
                },
                instances,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    suites.sort_by(|a, b| {
        (&a.header.dataset, a.header.task, a.header.language).cmp(&(&b.header.dataset, b.header.task, b.header.language))
    });
    Ok(suites)
}
