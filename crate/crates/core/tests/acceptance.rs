//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdeval::client::{ChatBackend, ChatMessage, ClientError, EndpointConfig, HttpClient};
use tdeval::dataset::{
    apply_rebalance, expand_to_subtasks, export_conversations, plan_score_rebalance, rebalance_dataset,
    sample_generator, SubTaskKind, SubTaskSample, EXPORT_FORMAT_VERSION,
};
use tdeval::metaeval::{
    correlation_report, kendall, spearman, subjective_eval, AnnotatorScores, AverageMode, SubjectiveItem,
};
use tdeval::oracle::{generate_scene, respond, synthetic_pairs, OracleJudge, OracleServer, SceneParams, ScenePair};
use tdeval::parser::{
    parse_cag, parse_es, parse_extraction, render_answers_doc, render_extraction_doc, render_questions_doc,
    CagOptions, EsOptions,
};
use tdeval::pipeline::{BatchPaths, Pipeline, PipelineConfig};
use tdeval::prompts::{SubjectiveKind, TemplateId, TemplateSet};
use tdeval::record::{read_dataset, EvaluationRecord, FailureKind, PromptSource, QuestionKind, TextPrompt, Variant};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs as f64, || {
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn close(lib: Result<f64, impl std::fmt::Debug>, oracle: Option<f64>) -> bool {
    match (lib, oracle) {
        (Ok(a), Some(b)) => (a - b).abs() <= 1e-12,
        (Err(_), None) => true,
        _ => false,
    }
}

fn compare(xs: &[f64], ys: &[f64]) -> Result<(), String> {
    ensure(close(spearman(xs, ys), common::spearman_oracle(xs, ys)), || {
        format!("spearman {xs:?} {ys:?}: {:?} vs {:?}", spearman(xs, ys), common::spearman_oracle(xs, ys))
    })?;
    ensure(close(kendall(xs, ys), common::kendall_oracle(xs, ys)), || {
        format!("kendall {xs:?} {ys:?}: {:?} vs {:?}", kendall(xs, ys), common::kendall_oracle(xs, ys))
    })
}

fn correlation_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let xs: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..=10u8))).collect();
        let ys: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..=10u8))).collect();
        compare(&xs, &ys)?;
    }
    let mut count = 0;
    for n in 1..=8u32 {
        for code in 0..3usize.pow(n) {
            let xs: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i)) % 3) as f64).collect();
            let ys: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..=2u8))).collect();
            let rev: Vec<f64> = xs.iter().rev().copied().collect();
            compare(&xs, &ys)?;
            compare(&xs, &rev)?;
            count += 1;
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!("200 random + {count} enumerated vectors, {:.2}s", start.elapsed().as_secs_f64()))
}

fn boundary_correlations() -> Check {
    let cases: [&[f64]; 4] = [
        &[1.0, 2.0, 3.0, 4.0, 5.0],
        &[0.0, 3.0, 3.0, 7.0, 10.0, 10.0],
        &[2.0, 9.0, 4.0, 1.0, 8.0, 5.0, 6.0],
        &[0.0, 10.0],
    ];
    for xs in cases {
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        for (ys, want) in [(xs.to_vec(), 1.0), (rev, -1.0)] {
            let (s, k) = (spearman(xs, &ys), kendall(xs, &ys));
            ensure(s == Ok(want) && k == Ok(want), || format!("{xs:?} vs {ys:?}: rho {s:?}, tau {k:?}"))?;
        }
    }
    Ok("identical 1.0 and reversed -1.0 exactly".into())
}

fn oracle_transcripts(t: &TemplateSet, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = rng.random_range(1..=5usize);
    let relationships = rng.random_range(0..=(entities * (entities - 1) / 2).min(4));
    let s = generate_scene(rng.random(), SceneParams { entities, relationships, ..SceneParams::default() })
        .map_err(|e| e.to_string())?;
    let prompt = TextPrompt { id: "p".into(), text: s.prompt_text(), source: PromptSource::Other };
    let ece = respond(&t.render_ece(&prompt).map_err(|e| e.to_string())?, &[]).map_err(|e| e.to_string())?;
    let x = parse_extraction(&ece).into_result().map_err(|f| format!("extraction: {f}\n{ece}"))?;
    let cag_prompt = t.get(TemplateId::Cag).render(&[("questions", &render_questions_doc(&x.questions))]).unwrap();
    let png = s.to_png().map_err(|e| e.to_string())?;
    let cag = respond(&cag_prompt, &[png]).map_err(|e| e.to_string())?;
    let answers = parse_cag(&cag, &x.questions, CagOptions::default())
        .into_result()
        .map_err(|f| format!("answers: {f}\n{cag}"))?
        .answers;
    let structure = render_extraction_doc(&x).map_err(|v| format!("{v:?}"))?;
    let es_prompt = t.render_es(&render_answers_doc(&x.questions, &answers), &structure).unwrap();
    let es = respond(&es_prompt, &[]).map_err(|e| e.to_string())?;
    parse_es(&es, &x.questions, EsOptions::default()).into_result().map_err(|f| format!("scoring: {f}\n{es}"))?;
    Ok(())
}

fn parser_totality() -> Check {
    let start = Instant::now();
    let t = TemplateSet::builtin();
    for seed in 0..334u64 {
        oracle_transcripts(&t, seed).map_err(|e| format!("scene {seed}: {e}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let x = common::random_extraction(&mut rng);
        let doc = render_extraction_doc(&x).map_err(|v| format!("render {i}: {v:?}"))?;
        let back = parse_extraction(&doc).into_result().map_err(|f| format!("round trip {i}: {f}"))?;
        ensure(back == x, || format!("round trip {i} changed the extraction\n{doc}"))?;
    }
    let mut corpus_cases = 0;
    for (dir, want) in
        [("refusal", FailureKind::Refusal), ("absence", FailureKind::ContentAbsence), ("repetition", FailureKind::Repetition)]
    {
        let cases = common::corpus(dir);
        ensure(cases.len() >= 20, || format!("{dir}: {} cases", cases.len()))?;
        for (name, raw) in cases {
            let got = common::classify(&raw);
            ensure(got == Some(want), || format!("{dir}/{name} classified as {got:?}"))?;
            corpus_cases += 1;
        }
    }
    within(start.elapsed(), 30)?;
    Ok(format!(
        "1002 oracle transcripts, 1000 round trips, {corpus_cases} corpus cases, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    records: Vec<EvaluationRecord>,
    scenes: Vec<ScenePair>,
}

fn fixture(seed: u64, count: usize) -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    let (records, scenes) = synthetic_pairs(seed, count, &root.join("images")).expect("synthetic pairs").into_iter().unzip();
    Fixture { _dir: dir, root, records, scenes }
}

async fn run_variant(
    backend: Arc<dyn ChatBackend>,
    variant: Variant,
    pairs: &[EvaluationRecord],
    out: &Path,
) -> Result<Vec<EvaluationRecord>, String> {
    let config = PipelineConfig { variant, ..PipelineConfig::default() };
    let pipeline = Pipeline::new(config, TemplateSet::builtin(), backend);
    let report = pipeline.evaluate_batch(pairs, 8, &BatchPaths::beside(out)).await.map_err(|e| e.to_string())?;
    ensure(report.ok == pairs.len(), || format!("{variant:?}: {report:?}"))?;
    read_dataset(&std::fs::read_to_string(out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

struct Endpoint {
    server: OracleServer,
    client: Arc<HttpClient>,
}

async fn endpoint() -> Endpoint {
    let server = OracleServer::default();
    let (addr, _) = server.spawn("127.0.0.1:0".parse().unwrap()).await.expect("bind");
    let config = EndpointConfig {
        base_url: format!("http://{addr}/v1"),
        model_name: "oracle".into(),
        max_concurrency: 8,
        ..Default::default()
    };
    Endpoint { server, client: Arc::new(HttpClient::new(config).expect("client")) }
}

async fn end_to_end_fidelity(ep: &Endpoint, f: &Fixture) -> Check {
    let start = Instant::now();
    let records = run_variant(ep.client.clone(), Variant::Full, &f.records, &f.root.join("full.jsonl")).await?;
    ensure(records.len() == 100, || format!("{} records", records.len()))?;
    let truth: BTreeMap<String, u8> = f.scenes.iter().map(|s| (s.id.clone(), s.ground_truth)).collect();
    let mut model = BTreeMap::new();
    for r in &records {
        let got = r.overall_score();
        ensure(got == truth.get(&r.id).copied(), || format!("{}: pipeline {got:?}, truth {:?}", r.id, truth.get(&r.id)))?;
        model.insert(r.id.clone(), f64::from(got.unwrap()));
    }
    let report = correlation_report(
        &model,
        &[AnnotatorScores { annotator_id: "truth".into(), scores: truth }],
        AverageMode::MeanThenCorrelate,
    )
    .map_err(|e| e.to_string())?;
    let c = report.per_annotator[0].corr;
    ensure(c.spearman == Some(1.0) && c.kendall == Some(1.0), || format!("correlation {c:?}"))?;
    within(start.elapsed(), 60)?;
    let distinct: BTreeSet<u8> = records.iter().filter_map(EvaluationRecord::overall_score).collect();
    Ok(format!(
        "100/100 exact, {} distinct scores, rho = tau = 1, {:.2}s",
        distinct.len(),
        start.elapsed().as_secs_f64()
    ))
}

async fn anti_leakage(ep: &Endpoint, f: &Fixture) -> Check {
    for v in Variant::ALL.into_iter().filter(|v| *v != Variant::Full) {
        run_variant(ep.client.clone(), v, &f.records[..20], &f.root.join(format!("{}.jsonl", v.as_str()))).await?;
    }
    let prompts: Vec<&str> = f.records.iter().map(|r| r.prompt.text.as_str()).collect();
    let requests = ep.server.requests();
    let mut seen: BTreeMap<TemplateId, usize> = BTreeMap::new();
    let mut violations = Vec::new();
    for r in &requests {
        let Some(t) = r.template else {
            violations.push("unrecognised request".to_string());
            continue;
        };
        *seen.entry(t).or_default() += 1;
        let image_stage = matches!(t, TemplateId::Cag | TemplateId::CagNoCaption | TemplateId::ScoreDirect | TemplateId::Merged);
        if image_stage && prompts.iter().any(|p| r.body.contains(p) || r.text.contains(p)) {
            violations.push(format!("{t:?} request carries prompt text"));
        }
        if matches!(t, TemplateId::Es | TemplateId::EsDirect | TemplateId::Ece | TemplateId::EceDirect) && r.image_count > 0 {
            violations.push(format!("{t:?} request carries {} images", r.image_count));
        }
    }
    ensure(seen.len() == 8, || format!("only saw templates {seen:?}"))?;
    ensure(violations.is_empty(), || violations.join("; "))?;
    Ok(format!("{} requests over 5 variants, 0 violations", requests.len()))
}

async fn expansion_law(f: &Fixture) -> Check {
    let records = run_variant(Arc::new(OracleJudge), Variant::Full, &f.records, &f.root.join("expand.jsonl")).await?;
    ensure(records.len() == 500, || format!("{} records", records.len()))?;
    let mut sizes = BTreeSet::new();
    for r in &records {
        let n = r.questions().len();
        sizes.insert(n);
        let samples = expand_to_subtasks(r).map_err(|e| format!("{}: {e}", r.id))?;
        ensure(samples.len() == 3 * n + 3, || format!("{}: {} samples for {n} questions", r.id, samples.len()))?;
        let counts: Vec<usize> =
            SubTaskKind::ALL.iter().map(|k| samples.iter().filter(|s| s.kind == *k).count()).collect();
        ensure(counts == [1, n, n, n, 1, 1], || format!("{}: kind counts {counts:?}", r.id))?;
    }
    Ok(format!("500 records, N from {} to {}", sizes.first().unwrap(), sizes.last().unwrap()))
}

fn sample_with_bin(bin: u8, i: usize) -> SubTaskSample {
    SubTaskSample {
        kind: SubTaskKind::Answer,
        question_kind: Some(QuestionKind::Appearance),
        qid: Some(format!("a{i}")),
        turns: Vec::new(),
        target_text: format!("score: {bin}"),
        score_bin: Some(bin),
        source_record_id: format!("r{i}"),
    }
}

fn rebalance_exactness(expansion: &Fixture) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let skew = [50usize, 80, 120, 200, 300, 400, 550, 900, 1100, 3000, 300];
    let mut histograms = vec![skew];
    while histograms.len() < 100 {
        let mut h = [0usize; 11];
        for c in &mut h {
            if rng.random_bool(0.8) {
                *c = rng.random_range(1..=300);
            }
        }
        if h.iter().any(|&c| c > 0) {
            histograms.push(h);
        }
    }
    for (hi, h) in histograms.iter().enumerate() {
        let samples: Vec<SubTaskSample> = h
            .iter()
            .enumerate()
            .flat_map(|(b, &c)| (0..c).map(move |i| sample_with_bin(b as u8, i)))
            .collect();
        let plan = plan_score_rebalance(&samples).map_err(|e| e.to_string())?;
        let out = apply_rebalance(&samples, &plan, hi as u64).map_err(|e| e.to_string())?;
        let target = common::q3_oracle(h).unwrap();
        for b in 0..11u8 {
            let got = out.iter().filter(|s| s.score_bin == Some(b)).count();
            let want = if h[b as usize] > 0 { target } else { 0 };
            ensure(got == want, || format!("histogram {hi} {h:?}: bin {b} has {got}, want {want}"))?;
        }
    }

    let text = std::fs::read_to_string(expansion.root.join("expand.jsonl")).map_err(|e| e.to_string())?;
    let records = read_dataset(&text).map_err(|e| e.to_string())?;
    let samples: Vec<SubTaskSample> =
        records.iter().map(expand_to_subtasks).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?.concat();
    let mut export = |seed: u64| -> Result<Vec<u8>, String> {
        let (balanced, _) = rebalance_dataset(&samples, seed).map_err(|e| e.to_string())?;
        let body = export_conversations(&balanced, EXPORT_FORMAT_VERSION, Some(seed)).map_err(|e| e.to_string())?;
        let path = expansion.root.join(format!("export-{seed}-{}.jsonl", rng.random::<u32>()));
        std::fs::write(&path, body).map_err(|e| e.to_string())?;
        std::fs::read(&path).map_err(|e| e.to_string())
    };
    let (a, b) = (export(42)?, export(42)?);
    ensure(a == b, || "same seed produced different export bytes".into())?;
    ensure(a != export(43)?, || "different seeds produced identical exports".into())?;
    Ok(format!("100 histograms incl. 43% skew, identical bytes across runs ({} bytes)", a.len()))
}

fn sampling_frequencies() -> Check {
    let weights = [("sd15", 0.5), ("sdxl", 0.25), ("sd3", 0.25)];
    let draws = sample_generator(2024, &weights, 100_000).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for (name, w) in weights {
        let freq = draws.iter().filter(|d| **d == name).count() as f64 / draws.len() as f64;
        ensure((freq - w).abs() <= 0.02, || format!("{name}: {freq:.4} vs {w}"))?;
        parts.push(format!("{name} {freq:.4}"));
    }
    Ok(parts.join(", "))
}

struct Cycling {
    calls: AtomicUsize,
    fixed: Option<u8>,
}

#[async_trait]
impl ChatBackend for Cycling {
    async fn chat(&self, _: &[ChatMessage]) -> Result<String, ClientError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.fixed.unwrap_or((n % 6) as u8).to_string())
    }
}

async fn subjective_arithmetic() -> Check {
    let items: Vec<SubjectiveItem> = (0..6)
        .map(|i| SubjectiveItem {
            id: format!("item-{i}"),
            question: Some(format!("Is the cube red? ({i})")),
            reference_explanation: "The cube is red.".into(),
            generated_explanation: "The cube appears red.".into(),
        })
        .collect();
    let t = TemplateSet::builtin();
    let mut got = Vec::new();
    for (fixed, want) in [(None, 2.5), (Some(5), 5.0)] {
        let judge = Cycling { calls: AtomicUsize::new(0), fixed };
        let r = subjective_eval(&judge, &t, &items, SubjectiveKind::Fine, 0, 1).await.map_err(|e| e.to_string())?;
        ensure(r.mean == Some(want), || format!("{fixed:?}: mean {:?}, want {want}", r.mean))?;
        got.push(format!("{want}"));
    }
    Ok(format!("cycling 0..5 -> {}, all 5 -> {}", got[0], got[1]))
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
    let mut failed = 0;
    let mut report = |name: &str, result: std::thread::Result<Check>| {
        let line = match result {
            Ok(Ok(detail)) => format!("PASS  {name}: {detail}"),
            Ok(Err(why)) => format!("FAIL  {name}: {why}"),
            Err(_) => format!("FAIL  {name}: panicked"),
        };
        if line.starts_with("FAIL") {
            failed += 1;
        }
        println!("{line}");
    };
    let guard = |f: &dyn Fn() -> Check| std::panic::catch_unwind(AssertUnwindSafe(f));

    report("correlation correctness", guard(&correlation_correctness));
    report("boundary correlations", guard(&boundary_correlations));
    report("parser totality and round trip", guard(&parser_totality));

    let e2e = fixture(100, 100);
    let ep = rt.block_on(endpoint());
    report("end-to-end oracle fidelity", guard(&|| rt.block_on(end_to_end_fidelity(&ep, &e2e))));
    report("anti-leakage", guard(&|| rt.block_on(anti_leakage(&ep, &e2e))));

    let big = fixture(500, 500);
    report("expansion law", guard(&|| rt.block_on(expansion_law(&big))));
    report("rebalance exactness", guard(&|| rebalance_exactness(&big)));
    report("sampling frequencies", guard(&sampling_frequencies));
    report("subjective arithmetic", guard(&|| rt.block_on(subjective_arithmetic())));
    println!("SKIP  live endpoint smoke: credential-gated, run `cargo test -p tdeval --test live -- --ignored`");

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
