//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use ovemo_core::backend::{builtin, request_digest, BackendRegistry, GenerationControls, MockBackend, MockEntry, RetryPolicy};
use ovemo_core::caption::{build_caption_dataset, CaptionJob, FilterConfig, PairOutcome};
use ovemo_core::fusion::{fuse_union, fuse_vote, FusionConfig, FusionStrategy};
use ovemo_core::labelspace::{to_group_set, LabelSet, LexiconEntry, SynonymLexicon};
use ovemo_core::metrics::{combine_avg, ov_sample_metrics};
use ovemo_core::model::{DatasetManifest, EmptyReason, PredictedLabels, PredictionRecord, SampleRecord, SplitTag};
use ovemo_core::runflow::{fuse_predictions, run_all, run_eval, Run};
use ovemo_core::sampler::{sample_frames, SamplerConfig};

use common::{fixture_dir, labels_from_audit, raw_prediction_labels, toy_config, tree, Oracle};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Published (avg, accuracy, recall) rows: five experiment rows and the SFT row.
const PUBLISHED: [(&str, f64, f64, f64); 6] = [
    ("zero-shot / face alignment", 0.3292, 0.2001, 0.4582),
    ("zero-shot / entire image", 0.4394, 0.3170, 0.5618),
    ("fine-tune / entire image", 0.4701, 0.4222, 0.5179),
    ("zero-shot+fine-tune / entire image", 0.5258, 0.3503, 0.7013),
    ("zero-shot+fine-tune + discriminative", 0.6167, 0.3895, 0.8439),
    ("trimodal sft", 0.7429, 0.6775, 0.8083),
];

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for (row, avg, acc, rec) in PUBLISHED {
        let got = combine_avg(acc, rec).map_err(|e| format!("{row}: {e}"))?;
        let err = (got - avg).abs();
        worst = worst.max(err);
        ensure(err <= 5e-5, || format!("{row}: combine_avg({acc}, {rec}) = {got}, published {avg}"))?;
    }
    Ok(format!("6 rows, max |diff| = {worst:.2e} <= 5e-5"))
}

fn criterion_2() -> Outcome {
    let dir = fixture_dir();
    let manifest = DatasetManifest::load(&dir.join("manifest.jsonl"), SplitTag::Test).map_err(|e| e.to_string())?;
    let lexicon = SynonymLexicon::load(&dir.join("lexicon.jsonl")).map_err(|e| e.to_string())?;
    ensure(manifest.len() == 12, || format!("{} samples", manifest.len()))?;
    ensure(lexicon.n_groups() == 2, || format!("{} groups", lexicon.n_groups()))?;
    let oracle = Oracle::from_lexicon(&dir.join("lexicon.jsonl"));

    for model in ["model_a", "model_b"] {
        let path = dir.join("predictions").join(format!("{model}.jsonl"));
        let preds: Vec<PredictionRecord> = ovemo_core::jsonl::read(&path).map_err(|e| e.to_string())?;
        let report = run_eval(model, &preds, &manifest, &lexicon).map_err(|e| e.to_string())?;
        let (per, macros) = oracle.evaluate(&dir.join("manifest.jsonl"), &raw_prediction_labels(&path));
        ensure(report.per_sample.len() == per.len(), || "sample count differs".into())?;
        for (got, (id, (a, r, v))) in report.per_sample.iter().zip(&per) {
            let m = got.metrics;
            ensure(got.sample_id == *id && m.accuracy == *a && m.recall == *r && m.avg == *v, || {
                format!("{model}/{id}: pipeline {m:?} vs oracle ({a}, {r}, {v})")
            })?;
        }
        let got = (report.macro_accuracy, report.macro_recall, report.macro_avg);
        ensure(got == macros, || format!("{model}: macro {got:?} vs oracle {macros:?}"))?;
    }
    Ok("12 samples x 2 models, per-sample and macro values identical".into())
}

fn random_instance(rng: &mut ChaCha8Rng) -> (SynonymLexicon, Vec<PredictionRecord>, LabelSet, Vec<String>) {
    let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let pick = |rng: &mut ChaCha8Rng, bound: usize| (rng.next_u64() % bound as u64) as usize;

    // Random partition of part of the vocabulary into up to three groups.
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for w in &vocab {
        let slot = pick(rng, 5);
        if slot < 3 {
            groups.entry(slot).or_default().push(w.clone());
        }
    }
    let lexicon = SynonymLexicon::from_entries(groups.into_iter().map(|(g, members)| LexiconEntry {
        group: format!("g{g}"),
        members,
    }))
    .unwrap();

    let subset = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let n = min + pick(rng, 5 - min);
        (0..n).map(|_| vocab[pick(rng, vocab.len())].clone()).collect()
    };
    let n_models = 2 + pick(rng, 3);
    let priority: Vec<String> = (0..n_models).map(|m| format!("m{m}")).collect();
    let preds = priority
        .iter()
        .map(|m| {
            let labels = subset(rng, 0);
            PredictionRecord {
                sample_id: "x".into(),
                model_id: m.clone(),
                raw_text: None,
                labels: match LabelSet::from_normalized(labels) {
                    Ok(s) => PredictedLabels::Labels(s),
                    Err(_) => PredictedLabels::Empty(EmptyReason::NoLabelBlock),
                },
            }
        })
        .collect();
    let gt = LabelSet::from_normalized(subset(rng, 1)).unwrap();
    (lexicon, preds, gt, priority)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let mut violations = 0;
    let mut mismatches = 0;
    for _ in 0..n {
        let (lex, preds, gt, priority) = random_instance(&mut rng);
        let union = fuse_union(&preds, &lex, &priority).map_err(|e| e.to_string())?;
        let fused_recall = ov_sample_metrics(union.label_set(), &gt, &lex).recall;
        let best = preds
            .iter()
            .map(|p| ov_sample_metrics(p.labels.label_set(), &gt, &lex).recall)
            .fold(0.0, f64::max);
        if fused_recall < best {
            violations += 1;
        }
        let vote = fuse_vote(&preds, &lex, 1, &priority).map_err(|e| e.to_string())?;
        let groups = |p: &PredictedLabels| p.label_set().map(|s| to_group_set(s, &lex)).unwrap_or_default();
        if groups(&vote) != groups(&union) {
            mismatches += 1;
        }
    }
    ensure(violations == 0 && mismatches == 0, || {
        format!("{violations} recall violations, {mismatches} vote(1)/union mismatches over {n}")
    })?;
    Ok(format!("{n} random instances, 0 recall violations, vote(1) == union on all"))
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let caption = builtin("caption").unwrap();
    let (mut a, mut b, mut judge) = (vec![], vec![], vec![]);
    let mut images = vec![];
    let mut scripted: Vec<Option<f64>> = vec![];
    for i in 0..100 {
        let name = format!("img{i:03}.jpg");
        let path = dir.path().join(&name);
        fs::write(&path, b"").map_err(|e| e.to_string())?;
        images.push(path);
        let digest = request_digest(&caption.body, &[&name]);
        a.push(MockEntry::reply(format!("caption a {i:03}")).for_digest(digest.clone()));
        b.push(MockEntry::reply(format!("caption b {i:03}")).for_digest(digest));
        // Every 25th pair (offset 7) gets a judge reply without a score.
        let (text, score) = if i % 25 == 7 {
            ("the emotions are alike".to_string(), None)
        } else {
            (format!("{:.2}", i as f64 / 100.0), Some(i as f64 / 100.0))
        };
        scripted.push(score);
        judge.push(MockEntry::reply(text).when_prompt_contains(format!("Sentence 1: caption a {i:03}\n")));
    }
    let mut reg = BackendRegistry::new();
    for (id, entries) in [("a", a), ("b", b), ("judge", judge)] {
        reg.register(id, Box::new(MockBackend::new(id, entries)), RetryPolicy::no_wait(0), 6, 8);
    }
    let job = CaptionJob {
        backend_a: "a".into(),
        backend_b: "b".into(),
        judge: "judge".into(),
        caption_template: caption,
        judge_template: builtin("judge").unwrap(),
        controls: GenerationControls::default(),
        filter: FilterConfig { threshold: 0.9, seed: 4 },
        concurrency: 8,
    };
    let run = build_caption_dataset(&images, &job, &reg).map_err(|e| e.to_string())?;
    let s = run.stats;
    let expected_kept = scripted.iter().flatten().filter(|&&v| v >= 0.9).count();
    let expected_unusable = scripted.iter().filter(|v| v.is_none()).count();
    ensure(s.kept == expected_kept, || format!("kept {} expected {expected_kept}", s.kept))?;
    ensure(s.unusable == expected_unusable, || format!("unusable {} expected {expected_unusable}", s.unusable))?;
    ensure(s.kept + s.dropped_below_threshold + s.unusable == s.attempted && s.attempted == 100, || format!("{s:?}"))?;
    ensure(matches!(&run.outcomes[90], PairOutcome::Kept { pair, .. } if pair.score == Some(0.9)), || {
        format!("pair at 0.90 not kept: {:?}", run.outcomes[90])
    })?;
    ensure(matches!(&run.outcomes[89], PairOutcome::Dropped { .. }), || "pair at 0.89 not dropped".into())?;
    ensure(run.records.iter().all(|r| r.score >= 0.9), || "kept record below threshold".into())?;
    Ok(format!(
        "attempted {} = kept {} + dropped {} + unusable {}; 0.90 kept",
        s.attempted, s.kept, s.dropped_below_threshold, s.unusable
    ))
}

fn criterion_5() -> Outcome {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = vec![];
    for (name, concurrency) in [("run1", 1), ("run2", 1), ("run3", 8)] {
        let out = base.path().join(name);
        let run = Run::open(toy_config(&out, concurrency)).map_err(|e| e.to_string())?;
        run_all(&run).map_err(|e| e.to_string())?;
        trees.push(tree(&out));
    }
    let files = trees[0].len();
    ensure(files > 12, || format!("only {files} files written"))?;
    for (i, t) in trees.iter().enumerate().skip(1) {
        ensure(t == &trees[0], || {
            let diff: Vec<&PathBuf> = t
                .keys()
                .chain(trees[0].keys())
                .filter(|k| t.get(*k) != trees[0].get(*k))
                .collect();
            format!("run {} differs from run 1 in {diff:?}", i + 1)
        })?;
    }
    Ok(format!("3 runs (concurrency 1, 1, 8), {files} files byte-identical"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ns: Vec<u64> = (1..=13).chain(9_988..=10_000).collect();
    ns.extend((0..40).map(|_| 1 + rng.next_u64() % 10_000));
    let mut checked = 0u64;
    for seed in 0..100u64 {
        for k in 1..=12usize {
            for &n in &ns {
                let got = sample_frames(n, &SamplerConfig { k_segments: k, seed });
                let parts = (k as u64).min(n);
                ensure(got.len() as u64 == parts, || format!("n={n} k={k} seed={seed}: len {}", got.len()))?;
                ensure(got.windows(2).all(|w| w[0] < w[1]), || format!("n={n} k={k} seed={seed}: {got:?} not increasing"))?;
                // Balanced split, remainder to the earliest segments.
                let (base, extra) = (n / parts, n % parts);
                for (i, &f) in got.iter().enumerate() {
                    let i = i as u64;
                    let lo = i * base + i.min(extra);
                    let hi = lo + base + u64::from(i < extra);
                    ensure(lo <= f && f < hi, || format!("n={n} k={k} seed={seed}: index {f} outside [{lo},{hi})"))?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (n, k, seed) cases, 0 violations"))
}

fn criterion_7() -> Outcome {
    // Models that err complementarily: each finds a different true label
    // and adds its own spurious one.
    let gts: [&[&str]; 4] = [&["happy", "calm"], &["sad", "tense"], &["angry", "surprised"], &["calm", "tense"]];
    let a: [&[&str]; 4] = [&["happy"], &["sad"], &["angry", "sad"], &["calm"]];
    let b: [&[&str]; 4] = [&["calm", "angry"], &["tense", "happy"], &["surprised"], &["tense", "sad"]];
    let records = gts
        .iter()
        .enumerate()
        .map(|(i, gt)| SampleRecord {
            id: format!("c{i}"),
            media_ref: PathBuf::from("v.mp4"),
            n_frames: 6,
            transcript: String::new(),
            gt_labels: gt.iter().map(|s| s.to_string()).collect(),
            preprocess_tag: Default::default(),
        })
        .collect();
    let manifest = DatasetManifest::new(records, SplitTag::Test);
    let lexicon = SynonymLexicon::empty();
    let preds = |model: &str, sets: &[&[&str]; 4]| -> Vec<PredictionRecord> {
        sets.iter()
            .enumerate()
            .map(|(i, s)| PredictionRecord {
                sample_id: format!("c{i}"),
                model_id: model.into(),
                raw_text: None,
                labels: PredictedLabels::Labels(LabelSet::from_normalized(s.iter().copied()).unwrap()),
            })
            .collect()
    };
    let per_model = vec![preds("a", &a), preds("b", &b)];
    let fusion = FusionConfig { strategy: FusionStrategy::Union, min_votes: 1, model_priority: vec!["a".into(), "b".into()] };
    let fused = fuse_predictions(&manifest, &per_model, &lexicon, &fusion).map_err(|e| e.to_string())?;
    let rf = run_eval("fused", &fused, &manifest, &lexicon).map_err(|e| e.to_string())?;
    let ra = run_eval("a", &per_model[0], &manifest, &lexicon).map_err(|e| e.to_string())?;
    let rb = run_eval("b", &per_model[1], &manifest, &lexicon).map_err(|e| e.to_string())?;
    let best = if ra.macro_avg >= rb.macro_avg { &ra } else { &rb };
    ensure(rf.macro_recall > ra.macro_recall.max(rb.macro_recall), || format!("fused recall {} not above constituents", rf.macro_recall))?;
    ensure(rf.macro_accuracy < best.macro_accuracy, || format!("fused accuracy {} not below best {}", rf.macro_accuracy, best.macro_accuracy))?;

    // The same signature on the bundled toy run.
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = Run::open(toy_config(out.path(), 4)).map_err(|e| e.to_string())?;
    let summary = run_all(&run).map_err(|e| e.to_string())?;
    let fr = summary.fusion.ok_or("toy run has no fusion")?;
    let max_recall = fr.constituents.iter().map(|r| r.macro_recall).fold(0.0, f64::max);
    ensure(fr.fused.macro_recall >= max_recall, || "toy fused recall below a constituent".into())?;

    // Also recheck the toy run's inferred predictions against the oracle.
    let oracle = Oracle::from_lexicon(&fixture_dir().join("lexicon.jsonl"));
    let ids: Vec<String> = run.manifest.ids().map(String::from).collect();
    for report in &summary.reports {
        let labels = labels_from_audit(out.path(), &report.name, &ids);
        let (_, macros) = oracle.evaluate(&fixture_dir().join("manifest.jsonl"), &labels);
        ensure((report.macro_accuracy, report.macro_recall, report.macro_avg) == macros, || {
            format!("{}: inferred run disagrees with oracle", report.name)
        })?;
    }

    println!("      not reproduced at desk scale: +3% fine-tune avg gain, 11% entire-image vs face-alignment gap,");
    println!("      absolute experiment/SFT scores (need GPU fine-tuning and the private challenge corpus)");
    Ok(format!(
        "fused recall {:.4} > {:.4}, fused accuracy {:.4} < best {:.4}",
        rf.macro_recall,
        ra.macro_recall.max(rb.macro_recall),
        rf.macro_accuracy,
        best.macro_accuracy
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("1 metric identity on published rows", criterion_1),
        ("2 oracle equivalence on toy fixture", criterion_2),
        ("3 union fusion recall monotonicity", criterion_3),
        ("4 caption filter threshold semantics", criterion_4),
        ("5 end-to-end determinism", criterion_5),
        ("6 sampler contract", criterion_6),
        ("7 fused run: recall up, accuracy down", criterion_7),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = started.elapsed().as_millis();
        match result {
            Ok(detail) => println!("PASS  criterion {name} ({ms} ms): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name} ({ms} ms): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
