//! Acceptance criteria. Runs as a plain binary so every criterion prints its
//! own PASS/FAIL line, then exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use polyembed::bench::{build_benchmark, format_query, format_target, pool_size, suite_plan, BuildOptions, FormattingStyle};
use polyembed::corpus::{read_manifests, ImageStore, Language, TaskKind};
use polyembed::distill::{self, alignment, combine, finite_diff_check, loss_e, loss_i, mse, total_loss, train, LossConfig, PreparedPair};
use polyembed::encoder::{EncoderConfig, EncoderParams, PooledVector, Pooling, PrecomputedEmbedder};
use polyembed::eval::{
    aggregate, compare_models, exact_binomial_p, mcnemar, precision_at_1, score_instance, ContingencyTable, EvalRecord,
    SignificanceMethod, Similarity,
};
use polyembed::rng::Stream;
use polyembed::synth::{dictionary_corpus, raw_instances, write_table1_fixture, CorpusSpec};
use polyembed::translate::{
    extract_with, prepare_corpus, translate, wrap_for_translation, DictionaryTranslator, IdentityTranslator,
    MarkerLexicon,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// 1. Loss arithmetic

fn tiny(rows: &[[f64; 2]], projector: &[f64]) -> EncoderParams<f64> {
    let table: Vec<f64> = rows.iter().flatten().copied().collect();
    EncoderParams::from_parts(rows.len(), 2, projector.len() / 2, table, projector.to_vec()).unwrap()
}

fn c1_loss_arithmetic() -> Outcome {
    let tol = 1e-12;
    let m = mse(&[1.0, 2.0], &[3.0, 4.0]).map_err(|e| e.to_string())?;
    ensure!(close(m, 4.0, tol), "mse = {m}");
    let le = loss_e(&[0.0, 0.0], &[2.0, 0.0], &[0.0, 2.0]).map_err(|e| e.to_string())?;
    ensure!(close(le, 4.0, tol), "loss_e = {le}");
    let li = loss_i(&[0.0, 0.0], &[2.0, 0.0], &[0.0, 2.0]).map_err(|e| e.to_string())?;
    ensure!(close(li, 4.0, tol), "loss_i = {li}");
    ensure!(close(combine(4.0, None).total, 2.0, tol), "total without image loss");
    ensure!(close(combine(4.0, Some(0.0)).total, 1.0, tol), "total with zero image loss");

    // Encoder-level fixture: V=5, d=2. x = [tok 2, tok 3], y = [tok 4].
    // Pooled T(x) = teacher row 3, S(x) = student row 3, S(y) = student row 4.
    let teacher = tiny(&[[0.0; 2], [0.0; 2], [1.0, 1.0], [0.5, -1.0], [0.0, 3.0]], &[1.0, 0.0, 0.0, 1.0]);
    let student = tiny(&[[0.0; 2], [0.0; 2], [9.0, 9.0], [1.5, 0.0], [-0.5, 1.0]], &[1.0, 0.0, 0.0, 1.0]);
    let pair = PreparedPair {
        id: "p".into(),
        x_tokens: vec![2, 3],
        y_tokens: vec![4],
        image: None,
    };
    // Hand oracle: mse((.5,-1),(1.5,0)) = (1+1)/2 = 1; mse((.5,-1),(-.5,1)) = (1+4)/2 = 2.5.
    let expected_le = 1.0 + 2.5;
    let cfg = LossConfig::default();
    let got = total_loss(&pair, &teacher, &student, &cfg).map_err(|e| e.to_string())?;
    ensure!(close(got.loss_e, expected_le, tol), "encoder loss_e {} vs {expected_le}", got.loss_e);
    ensure!(close(got.total, expected_le / 2.0, tol), "encoder total {}", got.total);

    // Weighting ratio on a loss_i == 0 fixture: same projector, image as
    // first token of both sequences.
    let with_img = PreparedPair {
        id: "q".into(),
        x_tokens: vec![1, 2, 3],
        y_tokens: vec![1, 4],
        image: Some(vec![0.3, -0.7]),
    };
    let off = total_loss(&with_img, &teacher, &student, &cfg).map_err(|e| e.to_string())?;
    let on_cfg = LossConfig {
        use_image_loss: true,
        ..cfg
    };
    let on = total_loss(&with_img, &teacher, &student, &on_cfg).map_err(|e| e.to_string())?;
    ensure!(on.loss_i == Some(0.0), "loss_i = {:?}", on.loss_i);
    ensure!(off.total == 2.0 * on.total, "ratio {} / {}", off.total, on.total);
    Ok(format!("loss_e={expected_le}, ratio exactly 2"))
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness

fn c2_gradients() -> Outcome {
    let teacher: EncoderParams<f64> = EncoderParams::init(&EncoderConfig::default()).map_err(|e| e.to_string())?;
    let student = teacher.perturbed(0.05, 11);
    let images = ImageStore::synthetic(teacher.feature_dim());
    let pairs = dictionary_corpus(&CorpusSpec {
        pairs: 100,
        image_every: Some(2),
        seed: 5,
        ..CorpusSpec::default()
    });
    let mut worst = [0.0f64; 2];
    let mut checked = 0;
    for (k, use_image_loss) in [false, true].into_iter().enumerate() {
        let cfg = LossConfig {
            use_image_loss,
            ..LossConfig::default()
        };
        for p in &pairs {
            let prepared = PreparedPair::new(p, teacher.vocab_size(), &images).map_err(|e| e.to_string())?;
            let r = finite_diff_check(&prepared, &student, &teacher, &cfg, 1e-5).map_err(|e| e.to_string())?;
            worst[k] = worst[k].max(r.max_relative_error);
            checked += r.parameters_checked;
        }
    }
    ensure!(worst[0] < 1e-4 && worst[1] < 1e-4, "max relative error {:.3e} / {:.3e}", worst[0], worst[1]);
    Ok(format!(
        "max rel err {:.2e} (text), {:.2e} (image loss), {checked} parameters",
        worst[0], worst[1]
    ))
}

// ---------------------------------------------------------------------------
// 3 + 4. Distillation effect and frozen teacher

/// Learning rate for the toy run. The per-row update is scaled by
/// 1/(batch * d), so 16 steps at the library default barely move the
/// student; see the README.
const TOY_LEARNING_RATE: f64 = 1000.0;

fn c3_c4_distillation() -> (Outcome, Outcome) {
    let run = || -> Result<(f64, f64, f64, f64, u64, u64, usize), String> {
        let pairs = dictionary_corpus(&CorpusSpec::default());
        let teacher: EncoderParams<f64> = EncoderParams::init(&EncoderConfig::default()).map_err(|e| e.to_string())?;
        let images = ImageStore::synthetic(teacher.feature_dim());
        let corpus = distill::prepare_corpus(&pairs, teacher.vocab_size(), &images).map_err(|e| e.to_string())?;
        let frozen = teacher.clone_frozen();
        let before_sum = frozen.checksum();
        let before = alignment(&corpus, &frozen, &teacher).map_err(|e| e.to_string())?;
        let cfg = LossConfig {
            learning_rate: TOY_LEARNING_RATE,
            ..LossConfig::default()
        };
        let (student, report) = train(&corpus, &frozen, teacher.clone(), &cfg).map_err(|e| e.to_string())?;
        let after = alignment(&corpus, &frozen, &student).map_err(|e| e.to_string())?;
        Ok((
            before.translated,
            after.translated,
            before.english,
            after.english,
            before_sum,
            frozen.checksum(),
            report.steps,
        ))
    };
    match run() {
        Err(e) => (Err(e.clone()), Err(e)),
        Ok((t0, t1, e0, e1, s0, s1, steps)) => {
            let c3 = if t1 - t0 >= 0.10 && e1 >= e0 - 0.02 {
                Ok(format!("translated cos {t0:.4} -> {t1:.4}, english {e0:.4} -> {e1:.4}, {steps} steps"))
            } else {
                Err(format!("translated cos {t0:.4} -> {t1:.4}, english {e0:.4} -> {e1:.4}"))
            };
            let c4 = if s0 == s1 {
                Ok(format!("checksum {s0:016x}"))
            } else {
                Err(format!("{s0:016x} != {s1:016x}"))
            };
            (c3, c4)
        }
    }
}

// ---------------------------------------------------------------------------
// 5. Translation pipeline

fn c5_translation() -> Outcome {
    let instances = raw_instances(500, 21);
    let fr = MarkerLexicon::default_for(Language::Fr).matcher().map_err(|e| e.to_string())?;
    for inst in &instances {
        let block = wrap_for_translation(inst).map_err(|e| e.to_string())?;
        let out = translate(&block, Language::Fr, &IdentityTranslator).map_err(|e| e.to_string())?;
        let o = extract_with(&out, &fr, block.had_placeholder, block.had_negative);
        ensure!(o.is_extracted(), "identity round trip discarded {}: {:?}", inst.id, o.reason);
        ensure!(o.query.as_deref() == Some(inst.query_text.as_str()), "query of {} differs", inst.id);
        ensure!(o.pos.as_deref() == Some(inst.pos_text.as_str()), "pos of {} differs", inst.id);
        ensure!(o.neg == inst.neg_text, "neg of {} differs", inst.id);
    }

    let dict = DictionaryTranslator::pseudo();
    let languages = Language::TARGETS;
    let mut mutants = 0;
    for inst in &instances {
        let block = wrap_for_translation(inst).map_err(|e| e.to_string())?;
        for lang in languages {
            let lex = MarkerLexicon::default_for(lang);
            let matcher = lex.matcher().map_err(|e| e.to_string())?;
            let out = translate(&block, lang, &dict).map_err(|e| e.to_string())?;
            let o = extract_with(&out, &matcher, block.had_placeholder, block.had_negative);
            ensure!(o.is_extracted(), "dictionary run discarded {} in {lang}: {:?}", inst.id, o.detail);
            // Delete each marker occurrence in turn.
            let markers: Vec<&String> = lex.question_markers.iter().chain(&lex.answer_markers).collect();
            let mut offset = 0;
            for line in out.split_inclusive('\n') {
                if let Some(m) = markers.iter().find(|m| line.starts_with(m.as_str())) {
                    let mut mutant = out.clone();
                    mutant.replace_range(offset..offset + m.len(), "");
                    let mo = extract_with(&mutant, &matcher, block.had_placeholder, block.had_negative);
                    ensure!(!mo.is_extracted(), "mutant of {} in {lang} extracted: {mutant:?}", inst.id);
                    mutants += 1;
                }
                offset += line.len();
            }
        }
    }

    let expected_mutants: usize = instances.iter().map(|i| 2 + usize::from(i.neg_text.is_some())).sum::<usize>() * languages.len();
    ensure!(mutants == expected_mutants, "{mutants} mutants, expected {expected_mutants}");

    let prep = prepare_corpus(&instances, &languages, &dict).map_err(|e| e.to_string())?;
    let retained: BTreeSet<&str> = prep
        .pairs
        .iter()
        .map(|p| p.id.split('/').next().unwrap_or_default())
        .collect();
    ensure!(
        prep.pairs.len() == 2 * retained.len() * languages.len(),
        "{} pairs for {} retained instances",
        prep.pairs.len(),
        retained.len()
    );
    ensure!(retained.len() == instances.len(), "{} discards", prep.discards.len());
    Ok(format!(
        "500/500 identity, 500x4 dictionary, {mutants} mutants discarded, {} pairs",
        prep.pairs.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Benchmark construction

#[derive(serde::Deserialize)]
struct Golden {
    language: Language,
    side: String,
    task: TaskKind,
    style: FormattingStyle,
    text: String,
    expected: String,
}

fn c6_benchmark(dir: &Path) -> Outcome {
    let manifests = read_manifests(&write_table1_fixture(dir, 3).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut sizes = BTreeMap::new();
    for m in &manifests {
        for (task, lang) in suite_plan(m).map_err(|e| e.to_string())? {
            let n = pool_size(m.cardinality, task, m.class_count(lang)).map_err(|e| e.to_string())?;
            sizes.insert((m.name.clone(), m.cardinality, task), n);
        }
    }
    let expected = [
        ("Crossmodal-3600", 3600, TaskKind::I2T, 999),
        ("Crossmodal-3600", 3600, TaskKind::T2I, 999),
        ("XTD10", 1000, TaskKind::I2T, 999),
        ("MaXM", 257, TaskKind::VQA, 99),
        ("MaXM", 264, TaskKind::VQA, 99),
        ("Flickr30k Entities", 4042, TaskKind::VG, 999),
        ("Flickr30k Entities", 2825, TaskKind::VG, 999),
        ("Imagenet-1k", 1000, TaskKind::C, 999),
    ];
    for (name, card, task, n) in expected {
        let got = sizes.get(&(name.to_string(), card, task));
        ensure!(got == Some(&n), "{name} {card} {task}: {got:?}, want {n}");
    }

    let golden: Vec<Golden> =
        polyembed::corpus::read_records(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/templates_golden.jsonl"))
            .map_err(|e| e.to_string())?;
    for g in &golden {
        let got = if g.side == "query" {
            format_query(g.task, g.language, g.style, &g.text)
        } else {
            format_target(g.task, g.language, g.style, &g.text)
        }
        .map_err(|e| e.to_string())?;
        ensure!(got == g.expected, "{} {} {} {}: {got:?}", g.language, g.side, g.task, g.style);
    }
    for lang in [Language::De, Language::It, Language::Es] {
        for task in [TaskKind::VQA, TaskKind::VG] {
            ensure!(format_query(task, lang, FormattingStyle::Plain, "x").is_err(), "{task} {lang} should be unsupported");
        }
    }

    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("suites{run}"));
        let mut files = BTreeMap::new();
        for style in [FormattingStyle::Plain, FormattingStyle::Punctuation] {
            let suites = build_benchmark(
                &manifests,
                &BuildOptions {
                    style,
                    seed: 17,
                    max_instances: Some(20),
                },
            )
            .map_err(|e| e.to_string())?;
            ensure!(suites.len() == 29, "{} suites", suites.len());
            for s in suites {
                let path = out.join(s.file_name());
                s.write(&path).map_err(|e| e.to_string())?;
                files.insert(s.file_name(), std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
        bytes.push(files);
    }
    ensure!(bytes[0] == bytes[1], "rebuilds differ");
    Ok(format!("pool sizes ok, {} golden templates, 58 suite files byte-identical", golden.len()))
}

// ---------------------------------------------------------------------------
// 7. Evaluation

fn brute_force_top(query: &[f64], cands: &[Vec<f64>]) -> usize {
    // Independent ranking: sort positions by (-cosine, position).
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let mut order: Vec<(f64, usize)> = cands.iter().enumerate().map(|(i, c)| (cos(query, c), i)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    order[0].1
}

fn c7_evaluation() -> Outcome {
    use polyembed::bench::{BenchInstance, Candidate};
    let d = 8;
    let n = 20;
    let mut rng = Stream::new(99);
    let mut instances = Vec::new();
    let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
    let mut raw = Vec::new();
    for i in 0..1000 {
        let relevant = rng.below(n as u64 + 1) as usize;
        let inst = BenchInstance {
            id: format!("fx/{i}"),
            task: TaskKind::ALL[i % 5],
            language: Language::En,
            query: Candidate {
                text: format!("q{i}"),
                image_ref: None,
            },
            candidates: (0..=n)
                .map(|c| Candidate {
                    text: format!("c{i}-{c}"),
                    image_ref: None,
                })
                .collect(),
            relevant,
        };
        let q: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut cands: Vec<Vec<f64>> = (0..=n).map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        if i % 3 == 0 {
            // Nudge the relevant candidate toward the query so hits occur.
            cands[relevant] = q.iter().map(|x| x + rng.uniform(-0.3, 0.3)).collect();
        }
        if i % 50 == 0 {
            // Exact ties: duplicate the relevant vector at another position.
            let other = (relevant + 1) % (n + 1);
            cands[other] = cands[relevant].clone();
        }
        vectors.push((inst.query_key(FormattingStyle::Plain), q.clone()));
        for (c, v) in cands.iter().enumerate() {
            vectors.push((inst.candidate_key(FormattingStyle::Plain, c), v.clone()));
        }
        raw.push((q, cands));
        instances.push(inst);
    }
    let score_all = |scale: f64| -> Result<Vec<EvalRecord>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("emb.tsv");
        let rows: Vec<(String, PooledVector<f64>)> = vectors
            .iter()
            .map(|(k, v)| (k.clone(), PooledVector::new(v.iter().map(|x| x * scale).collect(), Pooling::LastToken)))
            .collect();
        polyembed::corpus::write_embeddings(&path, &rows).map_err(|e| e.to_string())?;
        let emb = PrecomputedEmbedder {
            table: polyembed::corpus::read_embeddings::<f64>(&path).map_err(|e| e.to_string())?,
        };
        instances
            .iter()
            .map(|inst| score_instance(inst, "fixture", FormattingStyle::Plain, &emb, Similarity::Cosine))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())
    };
    let base = score_all(1.0)?;
    let mut hits = 0;
    for ((inst, rec), (q, cands)) in instances.iter().zip(&base).zip(&raw) {
        let top = brute_force_top(q, cands);
        ensure!(rec.top_candidate_index == top, "{}: top {} vs brute force {top}", inst.id, rec.top_candidate_index);
        hits += usize::from(top == inst.relevant);
    }
    let p = precision_at_1(&base).map_err(|e| e.to_string())?;
    ensure!(close(p, 100.0 * hits as f64 / 1000.0, 1e-12), "P@1 {p} vs recount {hits}/1000");
    for lambda in [1e-3, 7.5, 1e4] {
        let scaled = score_all(lambda)?;
        for (a, b) in base.iter().zip(&scaled) {
            ensure!(
                a.correct == b.correct && a.top_candidate_index == b.top_candidate_index,
                "scale {lambda} changed {}",
                a.instance_id
            );
        }
    }

    // Averages: two datasets per task with hand-picked hit counts out of 10.
    let hits_table: [(TaskKind, [usize; 2]); 5] = [
        (TaskKind::I2T, [6, 8]),
        (TaskKind::T2I, [5, 5]),
        (TaskKind::VQA, [2, 3]),
        (TaskKind::VG, [1, 0]),
        (TaskKind::C, [9, 10]),
    ];
    let mut recs = Vec::new();
    for (task, per_ds) in hits_table {
        for (k, h) in per_ds.into_iter().enumerate() {
            for i in 0..10 {
                recs.push(EvalRecord {
                    instance_id: format!("{task}/{k}/{i}"),
                    task,
                    dataset: format!("ds{k}"),
                    language: Language::Fr,
                    style: FormattingStyle::Plain,
                    correct: i < h,
                    top_candidate_index: 0,
                    score_of_relevant: 0.0,
                });
            }
        }
    }
    // Task values: I2T 70, T2I 50, VQA 25, VG 5, C 95.
    let rep = aggregate(&recs).map_err(|e| e.to_string())?;
    let avg3 = (70.0 + 50.0 + 95.0) / 3.0;
    let avg = (70.0 + 50.0 + 25.0 + 5.0 + 95.0) / 5.0;
    ensure!(close(rep.overall.avg3.unwrap_or(f64::NAN), avg3, 1e-9), "AVG-3 {:?}", rep.overall.avg3);
    ensure!(close(rep.overall.avg.unwrap_or(f64::NAN), avg, 1e-9), "AVG {:?}", rep.overall.avg);
    ensure!(rep.languages[&Language::Fr].avg.is_some(), "FR all-task average missing");
    Ok(format!("P@1 {p:.2} matches recount, scale invariant, AVG-3 {avg3:.2}, AVG {avg:.2}"))
}

// ---------------------------------------------------------------------------
// 8. Statistics

/// Upper tail of chi-squared(1) at x, as 2 * integral of the standard
/// normal density from sqrt(x) to 12, composite Simpson.
fn chi2_tail_simpson(x: f64) -> f64 {
    let (a, b, n) = (x.sqrt(), 12.0, 20_000);
    let h = (b - a) / n as f64;
    let f = |z: f64| (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

fn c8_statistics(dir: &Path) -> Outcome {
    let r = mcnemar(&ContingencyTable { a: 40, b: 15, c: 10, d: 35 }).map_err(|e| e.to_string())?;
    let oracle = chi2_tail_simpson(0.64);
    ensure!(r.method == SignificanceMethod::ChiSquaredCC, "method {:?}", r.method);
    ensure!(close(r.statistic.unwrap_or(f64::NAN), 0.64, 1e-12), "statistic {:?}", r.statistic);
    ensure!(close(r.p_value, 0.4237, 1e-3) && close(r.p_value, oracle, 1e-6), "p {} vs oracle {oracle}", r.p_value);

    let exact = mcnemar(&ContingencyTable { a: 0, b: 1, c: 9, d: 0 }).map_err(|e| e.to_string())?;
    ensure!(exact.method == SignificanceMethod::ExactBinomial, "b=1,c=9 method");
    ensure!(
        exact_binomial_p(1, 9) == num_rational::Ratio::new(22, 1024) && exact.p_value == 22.0 / 1024.0,
        "exact p {}",
        exact.p_value
    );
    for n in 1..=60u64 {
        let r = mcnemar(&ContingencyTable { a: 0, b: n / 3, c: n - n / 3, d: 0 }).map_err(|e| e.to_string())?;
        let want = if n >= 25 { SignificanceMethod::ChiSquaredCC } else { SignificanceMethod::ExactBinomial };
        ensure!(r.method == want, "b+c={n}: {:?}", r.method);
    }

    let manifests = read_manifests(&write_table1_fixture(dir, 4).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut rng = Stream::new(8);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for m in &manifests {
        for (task, language) in suite_plan(m).map_err(|e| e.to_string())? {
            for style in [FormattingStyle::Plain, FormattingStyle::Punctuation] {
                for i in 0..40 {
                    let rec = |correct| EvalRecord {
                        instance_id: format!("{}/{task}/{language}/{i}", m.name),
                        task,
                        dataset: m.name.clone(),
                        language,
                        style,
                        correct,
                        top_candidate_index: 0,
                        score_of_relevant: 0.0,
                    };
                    a.push(rec(rng.below(2) == 0));
                    b.push(rec(rng.below(3) != 0));
                }
            }
        }
    }
    let cmp = compare_models(&a, &b, 0.05).map_err(|e| e.to_string())?;
    ensure!(cmp.cells.len() == 58, "{} cells", cmp.cells.len());
    Ok(format!(
        "p={:.4} (oracle {oracle:.4}), 22/1024 exact, switch at 25, 58 cells ({} significant)",
        r.p_value, cmp.significant
    ))
}

// ---------------------------------------------------------------------------
// 9. End-to-end determinism

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_polyembed"))
        .args(args)
        .current_dir(dir)
        .env_remove("POLYEMBED_DATA_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c9_determinism(dir: &Path) -> Outcome {
    let mut trees = Vec::new();
    for (run, jobs) in [(0, "1"), (1, "4")] {
        let d = dir.join(format!("run{run}"));
        std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
        polyembed::corpus::write_records(&d.join("raw.jsonl"), &raw_instances(300, 2)).map_err(|e| e.to_string())?;
        write_table1_fixture(&d.join("data"), 5).map_err(|e| e.to_string())?;
        let steps: [&[&str]; 9] = [
            &["translate-prep", "--in", "raw.jsonl", "--langs", "fr,it", "--translator", "pseudo", "--out", "out/pairs.jsonl"],
            &["train", "--pairs", "out/pairs.jsonl", "--epochs", "1", "--batch", "128", "--lr", "100", "--seed", "3",
              "--out", "out/student.ckpt", "--teacher-out", "out/teacher.ckpt"],
            &["build-bench", "--manifests", "data/manifests.jsonl", "--seed", "3", "--max-instances", "2", "--out", "out/suites"],
            &["embed", "--suite", "out/suites", "--model", "out/student.ckpt", "--out", "out/student.tsv"],
            &["eval", "--suite", "out/suites", "--model", "out/student.ckpt", "--style", "both", "--out", "out/student.records.jsonl"],
            &["eval", "--suite", "out/suites", "--model", "out/teacher.ckpt", "--out", "out/teacher.records.jsonl"],
            &["eval", "--suite", "out/suites", "--embeddings", "out/student.tsv", "--out", "out/precomputed.records.jsonl"],
            &["compare", "--a", "out/teacher.records.jsonl", "--b", "out/student.records.jsonl", "--out", "out/compare.json"],
            &["fd-check", "--pairs", "out/pairs.jsonl", "--count", "5", "--out", "out/fd.json"],
        ];
        for s in steps {
            let mut args = vec!["--jobs", jobs];
            args.extend_from_slice(s);
            cli(&d, &args)?;
        }
        let t = tree(&d.join("out"));
        // Stored vectors carry 9 significant digits, so scores agree closely
        // and rankings exactly.
        let direct: Vec<EvalRecord> = polyembed::corpus::read_records(&d.join("out/student.records.jsonl")).map_err(|e| e.to_string())?;
        let stored: Vec<EvalRecord> = polyembed::corpus::read_records(&d.join("out/precomputed.records.jsonl")).map_err(|e| e.to_string())?;
        ensure!(direct.len() == stored.len() && !direct.is_empty(), "record counts differ");
        for (a, b) in direct.iter().zip(&stored) {
            ensure!(
                a.instance_id == b.instance_id
                    && a.top_candidate_index == b.top_candidate_index
                    && close(a.score_of_relevant, b.score_of_relevant, 1e-6),
                "precomputed scoring differs on {}",
                a.instance_id
            );
        }
        trees.push(t);
    }
    ensure!(trees[0].keys().eq(trees[1].keys()), "file sets differ");
    for (name, bytes) in &trees[0] {
        ensure!(&trees[1][name] == bytes, "{name} differs between runs");
    }
    Ok(format!("{} output files byte-identical across runs (--jobs 1 vs 4)", trees[0].len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, budget: Duration, elapsed: Duration, outcome: Outcome| {
        let timing = if elapsed <= budget { "" } else { " [over time budget]" };
        match outcome {
            Ok(detail) => println!("PASS {n} {name} ({:.2}s / {}s){timing}: {detail}", elapsed.as_secs_f64(), budget.as_secs()),
            Err(why) => {
                failed += 1;
                println!("FAIL {n} {name} ({:.2}s): {why}", elapsed.as_secs_f64());
            }
        }
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed())
    };

    let (o, t) = timed(&c1_loss_arithmetic);
    report(1, "loss arithmetic", Duration::from_secs(1), t, o);
    let (o, t) = timed(&c2_gradients);
    report(2, "gradient correctness", Duration::from_secs(30), t, o);
    let start = Instant::now();
    let (c3, c4) = c3_c4_distillation();
    let t = start.elapsed();
    report(3, "distillation effect", Duration::from_secs(120), t, c3);
    report(4, "frozen teacher", Duration::from_secs(120), t, c4);
    let (o, t) = timed(&c5_translation);
    report(5, "translation pipeline", Duration::from_secs(10), t, o);
    let d6 = tmp.path().join("c6");
    let (o, t) = timed(&|| c6_benchmark(&d6));
    report(6, "benchmark construction", Duration::from_secs(30), t, o);
    let (o, t) = timed(&c7_evaluation);
    report(7, "evaluation", Duration::from_secs(30), t, o);
    let d8 = tmp.path().join("c8");
    let (o, t) = timed(&|| c8_statistics(&d8));
    report(8, "statistics", Duration::from_secs(5), t, o);
    let d9 = tmp.path().join("c9");
    let (o, t) = timed(&|| c9_determinism(&d9));
    report(9, "end-to-end determinism", Duration::from_secs(600), t, o);

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
