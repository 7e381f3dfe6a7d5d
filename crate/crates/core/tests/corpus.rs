mod common;

use cmkt::corpus::*;
use common::{fixture, masking_statistics, rng};
use proptest::prelude::*;

#[test]
fn masking_rates_over_a_hundred_thousand_tokens() {
    let (rate, (mask, keep, replace)) = masking_statistics(5000, 3);
    assert!((rate - 0.15).abs() <= 0.005, "{rate}");
    assert!((mask - 0.8).abs() <= 0.01, "{mask}");
    assert!((keep - 0.1).abs() <= 0.01, "{keep}");
    assert!((replace - 0.1).abs() <= 0.01, "{replace}");
}

#[test]
fn masking_never_replaces_with_special_tokens() {
    let cfg = MaskingConfig {
        rate: 0.9,
        splits: (0.0, 0.0, 1.0),
    };
    let tokens: Vec<TokenId> = (3..13).collect();
    let mut r = rng(4);
    for _ in 0..200 {
        let plan = plan_dynamic_masking(&tokens, &cfg, 6, &mut r).unwrap();
        for (_, a) in plan.actions {
            match a {
                MaskAction::RandomReplace(t) => assert!((3..6).contains(&t)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}

#[test]
fn pair_fixture_parses_in_file_order() {
    let pairs = load_pairs(&fixture("pairs.tsv")).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs[0].image_id, "img0");
    assert_eq!(pairs[2].split, Split::Dev);
    assert_eq!(parse_pairs(&format_pairs(&pairs), "mem").unwrap(), pairs);
}

#[test]
fn malformed_pair_line_reports_its_line_number() {
    let err = parse_pairs("img0\ta dog\ttrain\nbroken line\n", "pairs.tsv").unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}

proptest! {
    #[test]
    fn apply_keeps_length_and_records_originals(seed in 0u64..5000, len in 1usize..30) {
        let tokens: Vec<TokenId> = (0..len as u32).map(|i| 3 + i % 17).collect();
        let plan = plan_dynamic_masking(&tokens, &MaskingConfig::default(), 20, &mut rng(seed)).unwrap();
        let (input, targets) = plan.apply(&tokens);
        prop_assert_eq!(input.len(), tokens.len());
        prop_assert_eq!(targets.len(), plan.actions.len());
        for (p, t) in targets {
            prop_assert_eq!(tokens[p], t);
        }
        for (i, (&a, &b)) in input.iter().zip(&tokens).enumerate() {
            if a != b {
                prop_assert!(plan.selected().any(|p| p == i));
            }
        }
    }

    #[test]
    fn tokenize_is_bounded_and_in_vocabulary(words in prop::collection::vec("[a-z]{1,6}", 1..40), max_len in 1usize..25) {
        let vocab = Vocab::new(["a", "girl", "dog"]);
        let text = words.join(" ");
        let ids = tokenize(&text, &vocab, max_len).unwrap();
        prop_assert!(ids.len() <= max_len);
        prop_assert!(vocab.validate(&ids).is_ok());
    }
}
