mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdeval::parser::{parse_extraction, render_extraction_doc};
use tdeval::record::FailureKind;

fn check_corpus(name: &str, want: FailureKind) {
    let cases = common::corpus(name);
    assert!(cases.len() >= 20, "{name}: only {} cases", cases.len());
    for (file, raw) in cases {
        assert_eq!(common::classify(&raw), Some(want), "{name}/{file}");
    }
}

#[test]
fn refusal_corpus() {
    check_corpus("refusal", FailureKind::Refusal);
}

#[test]
fn absence_corpus() {
    check_corpus("absence", FailureKind::ContentAbsence);
}

#[test]
fn repetition_corpus() {
    check_corpus("repetition", FailureKind::Repetition);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn render_then_parse_is_identity(seed in any::<u64>()) {
        let x = common::random_extraction(&mut ChaCha8Rng::seed_from_u64(seed));
        let doc = render_extraction_doc(&x).expect("generator output is valid");
        let back = parse_extraction(&doc);
        prop_assert!(back.is_ok(), "{doc}\n{:?}", back);
        prop_assert_eq!(back.value, Some(x));
    }

    #[test]
    fn rendering_is_stable(seed in any::<u64>()) {
        let x = common::random_extraction(&mut ChaCha8Rng::seed_from_u64(seed));
        let doc = render_extraction_doc(&x).unwrap();
        let again = render_extraction_doc(&parse_extraction(&doc).value.unwrap()).unwrap();
        prop_assert_eq!(doc, again);
    }
}
