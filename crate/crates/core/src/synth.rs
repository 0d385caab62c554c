//! Seeded synthetic data: training corpora, raw instances and
//! benchmark-shaped datasets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use crate::bench::DatasetRecord;
use crate::corpus::{write_records, DatasetManifest, Language, ParallelPair, RawInstance, TaskKind, IMAGE_PLACEHOLDER};
use crate::error::Result;
use crate::rng::Stream;
use crate::translate::DictionaryTranslator;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `size` distinct lowercase pseudo-words of two or three syllables.
pub fn word_list(size: usize, seed: u64) -> Vec<String> {
    let mut rng = Stream::keyed(seed, &[b"words"]);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let syllables = 2 + rng.below(2) as usize;
        let w: String = (0..syllables)
            .map(|_| {
                let o = ONSETS[rng.below(ONSETS.len() as u64) as usize];
                let v = VOWELS[rng.below(VOWELS.len() as u64) as usize];
                format!("{o}{v}")
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sentence(rng: &mut Stream, words: &[String], min: usize, max: usize) -> String {
    let len = min + rng.below((max - min + 1) as u64) as usize;
    (0..len)
        .map(|_| words[rng.below(words.len() as u64) as usize].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub vocabulary: usize,
    pub languages: Vec<Language>,
    /// Every k-th pair carries an image, if set.
    pub image_every: Option<usize>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            pairs: 2000,
            vocabulary: 400,
            languages: Language::TARGETS.to_vec(),
            image_every: None,
            seed: 0,
        }
    }
}

/// Parallel pairs whose translations come from the pseudo dictionary
/// (each word reversed and tagged with the language code). Languages
/// rotate over the pairs.
pub fn dictionary_corpus(spec: &CorpusSpec) -> Vec<ParallelPair> {
    let words = word_list(spec.vocabulary, spec.seed);
    let dict = DictionaryTranslator::pseudo();
    let mut rng = Stream::keyed(spec.seed, &[b"corpus"]);
    (0..spec.pairs)
        .map(|i| {
            let language = spec.languages[i % spec.languages.len()];
            let text = sentence(&mut rng, &words, 3, 8);
            let translated = dict.translate_segment(&text, language);
            let image_ref = spec.image_every.filter(|&k| k > 0 && i % k == 0).map(|_| format!("img-{i:05}"));
            let prefix = if image_ref.is_some() { IMAGE_PLACEHOLDER } else { "" };
            ParallelPair {
                id: format!("syn-{i:05}/{}", language.code()),
                language,
                english_text: format!("{prefix}{text}"),
                translated_text: format!("{prefix}{translated}"),
                image_ref,
                identity_translation: false,
            }
        })
        .collect()
}

const TRAIN_TASKS: [&str; 6] = ["MSCOCO_i2t", "MSCOCO_t2i", "VisualNews_i2t", "OK-VQA", "N24News", "WebQA"];

/// Raw training instances covering placeholders, negatives and mid-sentence
/// lowercase marker words.
pub fn raw_instances(n: usize, seed: u64) -> Vec<RawInstance> {
    let words = word_list(300, seed);
    let mut rng = Stream::keyed(seed, &[b"raw"]);
    (0..n)
        .map(|i| {
            let task = TRAIN_TASKS[i % TRAIN_TASKS.len()];
            let with_image = rng.below(2) == 0;
            let mut query = sentence(&mut rng, &words, 3, 9);
            match rng.below(5) {
                0 => query = format!("{query}, with the following question: {}?", sentence(&mut rng, &words, 2, 5)),
                1 => query.push('.'),
                _ => {}
            }
            if with_image {
                query = format!("{IMAGE_PLACEHOLDER}{query}");
            }
            let neg_text = (rng.below(3) == 0).then(|| sentence(&mut rng, &words, 1, 6));
            RawInstance {
                id: format!("{task}-{i:05}"),
                task: task.to_string(),
                query_text: query,
                pos_text: sentence(&mut rng, &words, 1, 6),
                neg_text,
                image_ref: with_image.then(|| format!("train-{i:05}")),
            }
        })
        .collect()
}

/// One row of the evaluation dataset table.
#[derive(Debug, Clone)]
pub struct DatasetShape {
    pub name: &'static str,
    pub cardinality: usize,
    pub languages: Vec<Language>,
    pub tasks: Vec<TaskKind>,
}

/// Datasets, cardinalities, languages and tasks of the evaluation benchmark.
/// MaXM and Flickr30k Entities have different sizes per language, so each
/// language is its own manifest.
pub fn table1_shapes() -> Vec<DatasetShape> {
    use TaskKind::*;
    let all = Language::ALL.to_vec();
    vec![
        DatasetShape { name: "Crossmodal-3600", cardinality: 3600, languages: all.clone(), tasks: vec![T2I, I2T] },
        DatasetShape { name: "XTD10", cardinality: 1000, languages: all.clone(), tasks: vec![T2I, I2T] },
        DatasetShape { name: "MaXM", cardinality: 257, languages: vec![Language::En], tasks: vec![VQA] },
        DatasetShape { name: "MaXM", cardinality: 264, languages: vec![Language::Fr], tasks: vec![VQA] },
        DatasetShape { name: "Flickr30k Entities", cardinality: 4042, languages: vec![Language::En], tasks: vec![VG] },
        DatasetShape { name: "Flickr30k Entities", cardinality: 2825, languages: vec![Language::Fr], tasks: vec![VG] },
        DatasetShape { name: "Imagenet-1k", cardinality: 1000, languages: all, tasks: vec![C] },
    ]
}

fn local(text: &str, language: Language) -> String {
    if language == Language::En {
        text.to_string()
    } else {
        DictionaryTranslator::pseudo().translate_segment(text, language)
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// Records for one dataset in one language. Image references are shared
/// across languages; texts are pseudo-translations of English originals.
pub fn dataset_records(shape: &DatasetShape, language: Language, classes: &[String], seed: u64) -> Vec<DatasetRecord> {
    let words = word_list(500, seed);
    let mut rng = Stream::keyed(seed, &[shape.name.as_bytes(), &(shape.cardinality as u64).to_le_bytes()]);
    let base = slug(shape.name);
    (0..shape.cardinality)
        .map(|i| {
            let caption = sentence(&mut rng, &words, 4, 9);
            let question = sentence(&mut rng, &words, 3, 6);
            let answer = sentence(&mut rng, &words, 1, 3);
            let object = sentence(&mut rng, &words, 1, 2);
            let class = classes.get(i % classes.len().max(1)).cloned();
            let task = shape.tasks[0];
            let mut r = DatasetRecord {
                id: format!("{base}-{i:05}"),
                image_ref: Some(format!("{base}/img-{i:05}")),
                captions: Vec::new(),
                question: None,
                answer: None,
                label: None,
                crop_ref: None,
            };
            match task {
                TaskKind::I2T | TaskKind::T2I => {
                    r.captions = vec![local(&caption, language), local(&format!("{caption} again"), language)]
                }
                TaskKind::VQA => {
                    r.question = Some(format!("{}?", local(&question, language)));
                    r.answer = Some(local(&answer, language));
                }
                TaskKind::VG => {
                    r.label = Some(local(&object, language));
                    r.crop_ref = Some(format!("{base}/crop-{i:05}"));
                }
                TaskKind::C => r.label = class,
            }
            r
        })
        .collect()
}

/// Write Table-1-shaped record files and a `manifests.jsonl` under `dir`.
/// Returns the manifest path.
pub fn write_table1_fixture(dir: &Path, seed: u64) -> Result<PathBuf> {
    let class_words = word_list(1000, seed ^ 0x1000);
    let mut manifests = Vec::new();
    for shape in table1_shapes() {
        let mut files = BTreeMap::new();
        let mut class_set = BTreeMap::new();
        for &lang in &shape.languages {
            let classes: Vec<String> = if shape.tasks.contains(&TaskKind::C) {
                class_words.iter().map(|w| local(w, lang)).collect()
            } else {
                Vec::new()
            };
            let recs = dataset_records(&shape, lang, &classes, seed);
            let file = format!("{}_{}.jsonl", slug(shape.name), lang.code());
            write_records(&dir.join(&file), &recs)?;
            files.insert(lang, PathBuf::from(file));
            if !classes.is_empty() {
                class_set.insert(lang, classes);
            }
        }
        manifests.push(DatasetManifest {
            name: shape.name.to_string(),
            cardinality: shape.cardinality,
            languages: shape.languages.iter().copied().collect::<BTreeSet<_>>(),
            tasks: shape.tasks.iter().copied().collect(),
            class_set: (!class_set.is_empty()).then_some(class_set),
            files,
        });
    }
    let path = dir.join("manifests.jsonl");
    write_records(&path, &manifests)?;
    Ok(path)
}
