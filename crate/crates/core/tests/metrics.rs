use proptest::prelude::*;
use qbridge::metrics::{
    corpus_rouge1, repeated_unigram_rate, rouge1, rouge_tokens, token_frequency_report,
};

/// Clipped overlap by explicit one-to-one matching of token positions.
fn matched(candidate: &[String], reference: &[String]) -> usize {
    let mut used = vec![false; reference.len()];
    let mut n = 0;
    for c in candidate {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == c) {
            used[j] = true;
            n += 1;
        }
    }
    n
}

fn oracle_f1(candidate: &str, reference: &str) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    let m = matched(&c, &r) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let (p, rec) = (m / c.len() as f64, m / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "dot", "ct", "the"]),
        1..12,
    )
    .prop_map(|w| w.join(" "))
}

#[test]
fn hand_examples() {
    assert_eq!(rouge1("no acute finding", "no acute finding").f1, 1.0);
    let s = rouge1("the cat sat", "the cat ran");
    assert!((s.precision - 2.0 / 3.0).abs() < 1e-15 && (s.f1 - 2.0 / 3.0).abs() < 1e-15);
    let s = rouge1("a a a", "a b");
    assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
    assert!((s.recall - 0.5).abs() < 1e-15);
    assert!((s.f1 - 0.4).abs() < 1e-15);
}

#[test]
fn tokenization_ignores_case_and_punctuation() {
    assert_eq!(rouge1("CT image, showing.", "ct image showing").f1, 1.0);
}

#[test]
fn corpus_score_is_the_pair_mean() {
    let s = corpus_rouge1(&[("a b", "a b"), ("a", "b")]).unwrap();
    assert_eq!(s.count, 2);
    assert_eq!(s.f1, 0.5);
    assert!(corpus_rouge1::<&str, &str>(&[]).is_err());
}

#[test]
fn frequency_ties_break_lexicographically() {
    assert_eq!(
        token_frequency_report(&["a b", "b c"], 2),
        vec![("b".to_string(), 2), ("a".to_string(), 1)]
    );
}

#[test]
fn repeated_unigrams() {
    assert_eq!(repeated_unigram_rate("a b a a"), 0.5);
    assert_eq!(repeated_unigram_rate("a b c"), 0.0);
    assert_eq!(repeated_unigram_rate(""), 0.0);
}

proptest! {
    #[test]
    fn matches_matching_oracle(c in sentence(), r in sentence()) {
        prop_assert!((rouge1(&c, &r).f1 - oracle_f1(&c, &r)).abs() < 1e-12);
    }

    #[test]
    fn f1_is_symmetric_and_bounded(c in sentence(), r in sentence()) {
        let f = rouge1(&c, &r).f1;
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - rouge1(&r, &c).f1).abs() < 1e-15);
    }

    #[test]
    fn identical_text_scores_one(c in sentence()) {
        prop_assert_eq!(rouge1(&c, &c).f1, 1.0);
    }

    #[test]
    fn appending_a_reference_token_never_lowers_recall(c in sentence(), r in sentence(), i in 0usize..12) {
        let toks = rouge_tokens(&r);
        let extra = &toks[i % toks.len()];
        let before = rouge1(&c, &r).recall;
        let after = rouge1(&format!("{c} {extra}"), &r).recall;
        prop_assert!(after >= before);
    }
}
