//! Scoring suites: similarity ranking, P@1, averages and McNemar's test.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{BenchmarkSuite, BenchInstance, FormattingStyle};
use crate::corpus::{Language, TaskKind};
use crate::encoder::{EmbedItem, Embedder};
use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            other => Err(Error::invalid("similarity", format!("unknown metric `{other}`"))),
        }
    }
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine", format!("dimensions {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::invalid("cosine", "zero-norm vector"));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn similarity<T: Scalar>(metric: Similarity, a: &[T], b: &[T]) -> Result<T> {
    match metric {
        Similarity::Cosine => cosine(a, b),
        Similarity::Dot if a.len() == b.len() => Ok(dot(a, b)),
        Similarity::Dot => Err(Error::invalid("dot", format!("dimensions {} and {}", a.len(), b.len()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub task: TaskKind,
    pub dataset: String,
    pub language: Language,
    pub style: FormattingStyle,
    pub correct: bool,
    pub top_candidate_index: usize,
    pub score_of_relevant: f64,
}

/// Index of the best-scoring candidate. Ties go to the earlier position.
pub fn rank_first<T: Scalar>(scores: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Score one instance from already pooled vectors.
pub fn score_vectors<T: Scalar>(
    query: &[T],
    candidates: &[Vec<T>],
    relevant: usize,
    metric: Similarity,
) -> Result<(usize, T)> {
    if relevant >= candidates.len() {
        return Err(Error::invalid("score", "relevant index out of range"));
    }
    let scores = candidates
        .iter()
        .map(|c| similarity(metric, query, c))
        .collect::<Result<Vec<T>>>()?;
    let top = rank_first(&scores).expect("non-empty pool");
    Ok((top, scores[relevant]))
}

fn embed_named<T: Scalar>(
    embedder: &dyn Embedder<T>,
    key: &str,
    text: &str,
    image_ref: Option<&str>,
) -> Result<Vec<T>> {
    embedder
        .embed(&EmbedItem { key, text, image_ref })
        .map(|p| p.values)
        .map_err(|e| Error::invalid("encoding", format!("`{key}`: {e}")))
}

pub fn score_instance<T: Scalar>(
    inst: &BenchInstance,
    dataset: &str,
    style: FormattingStyle,
    embedder: &dyn Embedder<T>,
    metric: Similarity,
) -> Result<EvalRecord> {
    let q = embed_named(embedder, &inst.query_key(style), &inst.query.text, inst.query.image_ref.as_deref())?;
    let cands = inst
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| embed_named(embedder, &inst.candidate_key(style, i), &c.text, c.image_ref.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let (top, score) = score_vectors(&q, &cands, inst.relevant, metric)?;
    Ok(EvalRecord {
        instance_id: inst.id.clone(),
        task: inst.task,
        dataset: dataset.to_string(),
        language: inst.language,
        style,
        correct: top == inst.relevant,
        top_candidate_index: top,
        score_of_relevant: score.as_f64(),
    })
}

/// Score every instance of a suite, in suite order.
pub fn score_suite<T: Scalar>(
    suite: &BenchmarkSuite,
    embedder: &dyn Embedder<T>,
    metric: Similarity,
) -> Result<Vec<EvalRecord>> {
    suite
        .instances
        .par_iter()
        .map(|inst| score_instance(inst, &suite.header.dataset, suite.header.style, embedder, metric))
        .collect()
}

/// Fraction of correct records, in percent.
pub fn precision_at_1(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("precision at 1", "no records"));
    }
    let hits = records.iter().filter(|r| r.correct).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub task: TaskKind,
    pub dataset: String,
    pub language: Language,
    pub style: FormattingStyle,
}

impl CellKey {
    fn of(r: &EvalRecord) -> Self {
        Self {
            task: r.task,
            dataset: r.dataset.clone(),
            language: r.language,
            style: r.style,
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.task, self.dataset, self.language, self.style)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScore {
    #[serde(flatten)]
    pub key: CellKey,
    pub instances: usize,
    pub correct: usize,
    pub p_at_1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAverages {
    pub tasks: BTreeMap<TaskKind, f64>,
    /// Mean over I2T, T2I and C; absent unless all three are present.
    pub avg3: Option<f64>,
    /// Mean over all five tasks; absent unless all five are present.
    pub avg: Option<f64>,
}

impl TaskAverages {
    fn from_tasks(tasks: BTreeMap<TaskKind, f64>, allow_all: bool) -> Self {
        let mean_of = |set: &[TaskKind]| -> Option<f64> {
            let vals: Option<Vec<f64>> = set.iter().map(|t| tasks.get(t).copied()).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let avg3 = mean_of(&TaskKind::CORE);
        let avg = if allow_all { mean_of(&TaskKind::ALL) } else { None };
        Self { tasks, avg3, avg }
    }
}

/// Languages whose per-language view carries the all-task average.
pub const ALL_TASK_LANGUAGES: [Language; 2] = [Language::En, Language::Fr];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suites: Vec<SuiteScore>,
    #[serde(flatten)]
    pub overall: TaskAverages,
    /// Per-language view. `avg` is only reported for EN and FR, the
    /// languages that have VQA and VG data.
    pub languages: BTreeMap<Language, TaskAverages>,
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Per-suite P@1, per-task means over suites, and the two averages.
pub fn aggregate(records: &[EvalRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::invalid("aggregate", "no records"));
    }
    let mut counts: BTreeMap<CellKey, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(CellKey::of(r)).or_default();
        e.0 += 1;
        e.1 += r.correct as usize;
    }
    let suites: Vec<SuiteScore> = counts
        .into_iter()
        .map(|(key, (n, hits))| SuiteScore {
            key,
            instances: n,
            correct: hits,
            p_at_1: 100.0 * hits as f64 / n as f64,
        })
        .collect();

    let mut by_task: BTreeMap<TaskKind, Vec<f64>> = BTreeMap::new();
    let mut by_lang: BTreeMap<Language, BTreeMap<TaskKind, Vec<f64>>> = BTreeMap::new();
    for s in &suites {
        by_task.entry(s.key.task).or_default().push(s.p_at_1);
        by_lang
            .entry(s.key.language)
            .or_default()
            .entry(s.key.task)
            .or_default()
            .push(s.p_at_1);
    }
    let overall = TaskAverages::from_tasks(by_task.into_iter().map(|(t, v)| (t, mean(&v))).collect(), true);
    let languages = by_lang
        .into_iter()
        .map(|(lang, tasks)| {
            let tasks = tasks.into_iter().map(|(t, v)| (t, mean(&v))).collect();
            (lang, TaskAverages::from_tasks(tasks, ALL_TASK_LANGUAGES.contains(&lang)))
        })
        .collect();
    Ok(Report {
        suites,
        overall,
        languages,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "X".to_string(), |x| format!("{x:.2}"))
}

/// Model x task table with AVG-3 and AVG columns; `X` marks absent values.
pub fn render_table(rows: &[(&str, &TaskAverages)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}", "Model");
    for t in TaskKind::ALL {
        let _ = write!(out, " {:>7}", t.name());
    }
    let _ = writeln!(out, " {:>7} {:>7}", "AVG-3", "AVG");
    for (name, avgs) in rows {
        let _ = write!(out, "{name:<width$}");
        for t in TaskKind::ALL {
            let _ = write!(out, " {:>7}", cell(avgs.tasks.get(&t).copied()));
        }
        let _ = writeln!(out, " {:>7} {:>7}", cell(avgs.avg3), cell(avgs.avg));
    }
    out
}

/// Per-language table. The ALL column only exists for EN and FR.
pub fn render_language_table(report: &Report) -> String {
    let mut out = String::from("Lang    AVG-3  ALL (EN/FR only)\n");
    for (lang, avgs) in &report.languages {
        let _ = writeln!(out, "{:<4} {:>8} {:>8}", lang, cell(avgs.avg3), cell(avgs.avg));
    }
    out
}

// ---------------------------------------------------------------------------
// Significance

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Both correct.
    pub a: u64,
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    /// Both wrong.
    pub d: u64,
}

impl ContingencyTable {
    pub fn add(&mut self, a_correct: bool, b_correct: bool) {
        match (a_correct, b_correct) {
            (true, true) => self.a += 1,
            (true, false) => self.b += 1,
            (false, true) => self.c += 1,
            (false, false) => self.d += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn discordant(&self) -> u64 {
        self.b + self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignificanceMethod {
    ChiSquaredCC,
    ExactBinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub method: SignificanceMethod,
    pub statistic: Option<f64>,
    pub p_value: f64,
}

/// Discordant count from which the chi-squared approximation is used.
pub const CHI_SQUARED_MIN_DISCORDANT: u64 = 25;

/// Upper tail of the chi-squared distribution with one degree of freedom,
/// via `erfc(sqrt(x/2))` from statrs.
pub fn chi2_1_upper_tail(x: f64) -> f64 {
    statrs::function::erf::erfc((x / 2.0).sqrt())
}

/// Two-sided exact binomial p-value for `b` vs `c` at probability 1/2, as an
/// exact fraction. Only used below the chi-squared switch, so `b + c < 64`.
pub fn exact_binomial_p(b: u64, c: u64) -> Ratio<u128> {
    let n = b + c;
    assert!(n < 64, "exact branch needs b + c < 64");
    let k_max = b.min(c);
    let mut coeff: u128 = 1;
    let mut sum: u128 = 0;
    for k in 0..=k_max {
        if k > 0 {
            coeff = coeff * u128::from(n - k + 1) / u128::from(k);
        }
        sum += coeff;
    }
    let p = Ratio::new(2 * sum, 1u128 << n);
    p.min(Ratio::from_integer(1))
}

pub fn mcnemar(table: &ContingencyTable) -> Result<SignificanceResult> {
    let n = table.discordant();
    if n == 0 {
        return Err(Error::NoDiscordantPairs);
    }
    if n >= CHI_SQUARED_MIN_DISCORDANT {
        let diff = table.b.abs_diff(table.c) as f64 - 1.0;
        let x = diff * diff / n as f64;
        return Ok(SignificanceResult {
            method: SignificanceMethod::ChiSquaredCC,
            statistic: Some(x),
            p_value: chi2_1_upper_tail(x).clamp(0.0, 1.0),
        });
    }
    let p = exact_binomial_p(table.b, table.c);
    Ok(SignificanceResult {
        method: SignificanceMethod::ExactBinomial,
        statistic: None,
        p_value: *p.numer() as f64 / *p.denom() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellComparison {
    #[serde(flatten)]
    pub key: CellKey,
    pub table: ContingencyTable,
    pub result: Option<SignificanceResult>,
    /// Why no test result exists, e.g. no discordant pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub alpha: f64,
    pub cells: Vec<CellComparison>,
    pub significant: usize,
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let (method, p) = match &c.result {
                Some(r) => (format!("{:?}", r.method), format!("{:.4}", r.p_value)),
                None => ("-".into(), c.note.clone().unwrap_or_default()),
            };
            let _ = writeln!(
                out,
                "{:<40} b={:<5} c={:<5} {:<14} p={}{}",
                c.key.to_string(),
                c.table.b,
                c.table.c,
                method,
                p,
                if c.significant { " *" } else { "" }
            );
        }
        let _ = writeln!(
            out,
            "significant at alpha={}: {} of {}",
            self.alpha,
            self.significant,
            self.cells.len()
        );
        out
    }
}

/// McNemar's test per (task, dataset, language, style) cell. Records are
/// paired on (instance id, style); both sides must cover the same set.
pub fn compare_models(a: &[EvalRecord], b: &[EvalRecord], alpha: f64) -> Result<Comparison> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")));
    }
    let index = |recs: &[EvalRecord], side: &str| -> Result<HashMap<(String, FormattingStyle), usize>> {
        let mut m = HashMap::with_capacity(recs.len());
        for (i, r) in recs.iter().enumerate() {
            if m.insert((r.instance_id.clone(), r.style), i).is_some() {
                return Err(Error::invalid("records", format!("model {side}: duplicate `{}`", r.instance_id)));
            }
        }
        Ok(m)
    };
    let ib = index(b, "B")?;
    index(a, "A")?;
    if a.len() != b.len() {
        return Err(Error::invalid("records", format!("model A has {} records, model B {}", a.len(), b.len())));
    }
    let mut tables: BTreeMap<CellKey, ContingencyTable> = BTreeMap::new();
    for ra in a {
        let j = ib.get(&(ra.instance_id.clone(), ra.style)).ok_or_else(|| {
            Error::invalid("records", format!("`{}` ({}) missing from model B", ra.instance_id, ra.style))
        })?;
        let rb = &b[*j];
        let key = CellKey::of(ra);
        if key != CellKey::of(rb) {
            return Err(Error::invalid("records", format!("`{}` differs in cell between models", ra.instance_id)));
        }
        tables.entry(key).or_default().add(ra.correct, rb.correct);
    }
    let cells: Vec<CellComparison> = tables
        .into_iter()
        .map(|(key, table)| match mcnemar(&table) {
            Ok(r) => CellComparison {
                key,
                table,
                significant: r.p_value < alpha,
                result: Some(r),
                note: None,
            },
            Err(e) => CellComparison {
                key,
                table,
                result: None,
                note: Some(e.to_string()),
                significant: false,
            },
        })
        .collect();
    let significant = cells.iter().filter(|c| c.significant).count();
    Ok(Comparison {
        alpha,
        cells,
        significant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, task: TaskKind, lang: Language, correct: bool) -> EvalRecord {
        EvalRecord {
            instance_id: id.into(),
            task,
            dataset: "d".into(),
            language: lang,
            style: FormattingStyle::Plain,
            correct,
            top_candidate_index: 0,
            score_of_relevant: 0.0,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert_eq!(cosine(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn forced_ordering_and_ties() {
        let cands = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(score_vectors(&[1.0, 0.0], &cands, 1, Similarity::Cosine).unwrap().0, 1);
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(score_vectors(&[1.0, 0.0], &same, 2, Similarity::Cosine).unwrap().0, 0);
    }

    #[test]
    fn p_at_1_values() {
        let r: Vec<_> = (0..4).map(|i| rec(&i.to_string(), TaskKind::I2T, Language::En, i == 0)).collect();
        assert_eq!(precision_at_1(&r).unwrap(), 25.0);
        assert!(precision_at_1(&[]).is_err());
    }

    #[test]
    fn averages() {
        let one = aggregate(&[rec("x", TaskKind::C, Language::En, true)]).unwrap();
        assert_eq!(one.overall.avg3, None);
        assert_eq!(one.overall.tasks[&TaskKind::C], 100.0);

        // 1/10, 2/10, 3/10 correct -> 10, 20, 30.
        let mut rs = Vec::new();
        for (t, hits) in [(TaskKind::I2T, 1), (TaskKind::T2I, 2), (TaskKind::C, 3)] {
            for i in 0..10 {
                rs.push(rec(&format!("{t}{i}"), t, Language::Fr, i < hits));
            }
        }
        let rep = aggregate(&rs).unwrap();
        assert!((rep.overall.avg3.unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(rep.overall.avg, None);
        let table = render_table(&[("m", &rep.overall)]);
        assert!(table.contains("20.00") && table.contains(" X"));
    }

    #[test]
    fn mcnemar_branches() {
        let t = ContingencyTable { a: 0, b: 15, c: 10, d: 0 };
        let r = mcnemar(&t).unwrap();
        assert_eq!(r.method, SignificanceMethod::ChiSquaredCC);
        assert!((r.statistic.unwrap() - 0.64).abs() < 1e-12);
        assert_eq!(exact_binomial_p(1, 9), Ratio::new(22, 1024));
        assert_eq!(exact_binomial_p(1, 0), Ratio::from_integer(1));
        assert_eq!(exact_binomial_p(5, 5), Ratio::from_integer(1));
        let t24 = ContingencyTable { a: 0, b: 12, c: 12, d: 0 };
        assert_eq!(mcnemar(&t24).unwrap().method, SignificanceMethod::ExactBinomial);
        assert!(matches!(mcnemar(&ContingencyTable::default()), Err(Error::NoDiscordantPairs)));
    }

    #[test]
    fn compare_identical_models() {
        let r: Vec<_> = (0..6).map(|i| rec(&i.to_string(), TaskKind::I2T, Language::En, i % 2 == 0)).collect();
        let cmp = compare_models(&r, &r, 0.05).unwrap();
        assert_eq!(cmp.cells.len(), 1);
        assert_eq!(cmp.significant, 0);
        assert!(cmp.cells[0].note.as_deref().unwrap().contains("no discordant pairs"));
        let mut flipped = r.clone();
        flipped[1].correct = true;
        let cmp = compare_models(&r, &flipped, 0.05).unwrap();
        assert_eq!(cmp.cells[0].result.unwrap().p_value, 1.0);
        assert!(compare_models(&r, &r[1..], 0.05).is_err());
    }
}
