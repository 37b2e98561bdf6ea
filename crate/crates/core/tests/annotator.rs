use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};
use tdeval::annotate::{
    annotator_scores, spawn, AnnotationStore, NextResponse, Session, StepPayload, StoreOptions, SubmitRequest,
};
use tdeval::metaeval::{correlation_report, AverageMode};
use tdeval::oracle::{synthetic_pairs, OracleJudge};
use tdeval::pipeline::{Pipeline, PipelineConfig};
use tdeval::prompts::TemplateSet;
use tdeval::record::{read_dataset, validate_record, write_dataset, Dimension, EvaluationRecord};

/// Three items with complete oracle evaluations to type in as annotations.
async fn bench(dir: &std::path::Path) -> Vec<EvaluationRecord> {
    let pairs = synthetic_pairs(9, 3, &dir.join("images")).unwrap();
    let items: Vec<EvaluationRecord> = pairs.iter().map(|(r, _)| r.clone()).collect();
    std::fs::write(dir.join("items.jsonl"), write_dataset(&items)).unwrap();
    let pipeline = Pipeline::new(PipelineConfig::default(), TemplateSet::builtin(), Arc::new(OracleJudge));
    let mut done = Vec::new();
    for r in items {
        done.push(pipeline.evaluate_pair(&r.id, r.prompt, r.image).await.unwrap());
    }
    done
}

fn steps(r: &EvaluationRecord, overall: u8) -> Vec<StepPayload> {
    let mut summaries = r.summaries.clone();
    summaries.iter_mut().filter(|s| s.dimension == Dimension::Overall).for_each(|s| s.score = overall);
    vec![
        StepPayload::Extraction { extraction: r.extraction.clone().unwrap() },
        StepPayload::Answers { captions: r.captions.clone(), answers: r.answers.clone() },
        StepPayload::Scoring { verdicts: r.verdicts.clone(), summaries },
    ]
}

#[tokio::test]
async fn three_annotators_walk_three_items_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let reference = bench(dir.path()).await;
    let store = Arc::new(AnnotationStore::open(dir.path(), StoreOptions::default()).unwrap());
    let (addr, _) = spawn(store, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let base = format!("http://{addr}/v1");
    let http = reqwest::Client::new();

    let by_id: BTreeMap<&str, &EvaluationRecord> = reference.iter().map(|r| (r.id.as_str(), r)).collect();
    let ids: Vec<&str> = by_id.keys().copied().collect();
    let overall: [(&str, [u8; 3]); 3] = [("ann1", [2, 5, 9]), ("ann2", [3, 3, 8]), ("ann3", [9, 4, 1])];

    let info: Value = http.get(&base).send().await.unwrap().json().await.unwrap();
    assert_eq!(info["items"], json!(3));

    for (annotator, scores) in overall {
        let session: Session = http
            .post(format!("{base}/sessions"))
            .json(&json!({"annotator_id": annotator, "seed": 1}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        loop {
            let next: NextResponse =
                http.get(format!("{base}/sessions/{}/next", session.session_id)).send().await.unwrap().json().await.unwrap();
            let Some(item) = next.item else {
                assert!(next.done);
                break;
            };
            let image = http.get(format!("{base}/items/{}/image", item.item_id)).send().await.unwrap();
            assert!(image.bytes().await.unwrap().starts_with(b"\x89PNG"));
            let score = scores[ids.iter().position(|id| *id == item.item_id).unwrap()];
            for (rev, payload) in steps(by_id[item.item_id.as_str()], score).into_iter().enumerate() {
                let url = format!("{base}/sessions/{}/items/{}/submit", session.session_id, item.item_id);
                let body = SubmitRequest { expected_revision: rev as u64, payload };
                let resp = http.post(&url).json(&body).send().await.unwrap();
                assert_eq!(resp.status(), 200, "{}", resp.text().await.unwrap());
                let stale = http.post(&url).json(&body).send().await.unwrap();
                assert_eq!(stale.status(), 409);
            }
        }
        let progress: Value =
            http.get(format!("{base}/sessions/{}/progress", session.session_id)).send().await.unwrap().json().await.unwrap();
        assert_eq!(progress["done"], json!(3));
    }

    let mut annotators = Vec::new();
    for (annotator, _) in overall {
        let text = http.get(format!("{base}/export/{annotator}")).send().await.unwrap().text().await.unwrap();
        let records = read_dataset(&text).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert!(validate_record(r).is_empty(), "{}: {:?}", r.id, validate_record(r));
        }
        annotators.push(annotator_scores(annotator, &records));
    }

    let model: BTreeMap<String, f64> = ids.iter().zip([1.0, 6.0, 7.0]).map(|(id, s)| (id.to_string(), s)).collect();
    let report = correlation_report(&model, &annotators, AverageMode::MeanThenCorrelate).unwrap();
    // Hand-computed: ann1 orders items as the model does, ann2 ties the
    // first two, ann3 reverses; the mean series ranks as [2, 1, 3].
    let expected = [
        (1.0, 1.0),
        (3f64.sqrt() / 2.0, 2.0 / 6f64.sqrt()),
        (-1.0, -1.0),
    ];
    for (col, (rho, tau)) in report.per_annotator.iter().zip(expected) {
        assert!((col.corr.spearman.unwrap() - rho).abs() < 1e-12, "{col:?}");
        assert!((col.corr.kendall.unwrap() - tau).abs() < 1e-12, "{col:?}");
    }
    assert!((report.manual_avg.spearman.unwrap() - 0.5).abs() < 1e-12);
    assert!((report.manual_avg.kendall.unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[tokio::test]
async fn token_and_validation_errors_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let reference = bench(dir.path()).await;
    let opts = StoreOptions { prefill: false, token: Some("letmein".into()) };
    let store = Arc::new(AnnotationStore::open(dir.path(), opts).unwrap());
    let (addr, _) = spawn(store, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let base = format!("http://{addr}/v1");
    let http = reqwest::Client::new();

    let denied = http.post(format!("{base}/sessions")).json(&json!({"annotator_id": "a"})).send().await.unwrap();
    assert_eq!(denied.status(), 401);
    let ok = http
        .post(format!("{base}/sessions"))
        .bearer_auth("letmein")
        .json(&json!({"annotator_id": "a"}))
        .send()
        .await
        .unwrap();
    assert_eq!(ok.status(), 200);

    let r = &reference[0];
    let url = format!("{base}/sessions/a/items/{}/submit", r.id);
    let mut x = r.extraction.clone().unwrap();
    x.questions.clear();
    let bad = SubmitRequest { expected_revision: 0, payload: StepPayload::Extraction { extraction: x } };
    let resp = http.post(&url).bearer_auth("letmein").json(&bad).send().await.unwrap();
    assert_eq!(resp.status(), 422);
    let body: Value = resp.json().await.unwrap();
    assert!(!body["violations"].as_array().unwrap().is_empty());

    let skip = SubmitRequest { expected_revision: 0, payload: steps(r, 5).remove(1) };
    let resp = http.post(&url).bearer_auth("letmein").json(&skip).send().await.unwrap();
    assert_eq!(resp.status(), 409);
}
