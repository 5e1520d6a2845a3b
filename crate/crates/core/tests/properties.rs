use proptest::prelude::*;

use sidkit::catalog::{
    flat_tokens_to_sid, parse_sid_string, render_sid_string, sid_to_flat_tokens, ItemCatalog, ItemRecord,
    MultimodalEmbedding, SemanticId, SidStructure, IGNORE_LABEL,
};
use sidkit::collision::{apply_merge_policy, apply_noco, apply_random_policy, AssignmentTable};
use sidkit::quantizer::QuantizedItem;
use sidkit::retrieval::{
    dynamic_beam_search, exhaustive_ranking, full_masked_loss, sliced_loss, train_markov_scorer, BeamSchedule,
    LabeledSequence,
};
use sidkit::sidmetrics::{embedding_hitrate, gini_coefficient, HitratePair, OccupancyVector};

fn structure_and_sid() -> impl Strategy<Value = (SidStructure, SemanticId)> {
    prop::collection::vec(2usize..50, 1..5).prop_flat_map(|sizes| {
        let codes: Vec<_> = sizes.iter().map(|&n| 0..n as u32).collect();
        (Just(SidStructure::new(sizes, 4).unwrap()), codes.prop_map(SemanticId::new))
    })
}

fn sid_in(s: &SidStructure) -> impl Strategy<Value = SemanticId> {
    let codes: Vec<_> = s.level_sizes().iter().map(|&n| 0..n as u32).collect();
    codes.prop_map(SemanticId::new)
}

fn items_with(sids: Vec<SemanticId>) -> Vec<QuantizedItem> {
    sids.into_iter()
        .enumerate()
        .map(|(i, sid)| QuantizedItem {
            item_id: format!("x{i:04}"),
            last_level_ranking: vec![sid.last()],
            sid,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokens_round_trip((s, sid) in structure_and_sid()) {
        let tokens = sid_to_flat_tokens(&sid, &s).unwrap();
        for (j, t) in tokens.iter().enumerate() {
            prop_assert!(s.band(j).contains(t));
        }
        prop_assert_eq!(flat_tokens_to_sid(&tokens, &s).unwrap(), sid.clone());
        let text = render_sid_string(&sid, &s).unwrap();
        prop_assert_eq!(parse_sid_string(&text, &s).unwrap(), sid);
    }

    #[test]
    fn gini_scale_and_permutation_invariant(
        counts in prop::collection::vec(0u64..40, 1..40),
        scale in 1u64..7,
        rotate in 0usize..40,
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let g = gini_coefficient(&OccupancyVector::dense(counts.clone())).unwrap();
        prop_assert!((0.0..1.0).contains(&g));
        let scaled: Vec<u64> = counts.iter().map(|c| c * scale).collect();
        let gs = gini_coefficient(&OccupancyVector::dense(scaled)).unwrap();
        let mut rotated = counts.clone();
        let r = rotate % rotated.len();
        rotated.rotate_left(r);
        let gr = gini_coefficient(&OccupancyVector::dense(rotated)).unwrap();
        prop_assert!((g - gs).abs() < 1e-12);
        prop_assert!((g - gr).abs() < 1e-12);
    }

    #[test]
    fn random_policy_balances_last_level(
        sids in prop::collection::vec((0u32..3, 0u32..5), 1..200),
    ) {
        let s = SidStructure::new(vec![3, 5], 2).unwrap();
        let items = items_with(sids.into_iter().map(|(a, b)| SemanticId::new(vec![a, b])).collect());
        let table = apply_random_policy(&items, &s).unwrap();
        prop_assert_eq!(table.len(), items.len());
        for codes in table.by_prefix().values() {
            let counts: Vec<usize> = (0..5).map(|c| codes.get(&c).copied().unwrap_or(0)).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        for it in &items {
            prop_assert_eq!(table.get(&it.item_id).unwrap().prefix(), it.sid.prefix());
        }
    }

    #[test]
    fn merge_never_lowers_gini(
        sids in prop::collection::vec((0u32..2, 0u32..6), 2..120),
        threshold in 0usize..6,
    ) {
        let s = SidStructure::new(vec![2, 6], 2).unwrap();
        let items = items_with(sids.into_iter().map(|(a, b)| SemanticId::new(vec![a, b])).collect());
        let table = apply_noco(&items, &s).unwrap();
        let merged = apply_merge_policy(&table, |a, b| (a as f64 - b as f64).abs(), threshold);
        let before = gini_coefficient(&OccupancyVector::from_table(&table)).unwrap();
        let after = gini_coefficient(&OccupancyVector::from_table(&merged)).unwrap();
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
        prop_assert_eq!(merged.len(), table.len());
    }

    #[test]
    fn embedding_hitrate_monotone_in_k(
        points in prop::collection::vec((-5i32..5, -5i32..5, -5i32..5), 8..30),
        queries in prop::collection::vec((0usize..30, 0usize..30), 1..10),
    ) {
        let mut catalog = ItemCatalog::new(3);
        for (i, (a, b, c)) in points.iter().enumerate() {
            let v = vec![*a as f64 + 0.5, *b as f64, *c as f64];
            catalog.insert(ItemRecord::new(format!("p{i:02}"), MultimodalEmbedding::new(v).unwrap())).unwrap();
        }
        let n = points.len();
        let pairs: Vec<HitratePair> = queries
            .iter()
            .map(|(q, c)| HitratePair { query: format!("p{:02}", q % n), clicked: vec![format!("p{:02}", c % n)] })
            .collect();
        let mut last = 0.0;
        for k in 1..n {
            let h = embedding_hitrate(&catalog, &pairs, k).unwrap();
            prop_assert!(h >= last);
            last = h;
        }
    }
}

fn streams_for(s: &SidStructure, seqs: &[Vec<SemanticId>]) -> Vec<Vec<usize>> {
    seqs.iter()
        .map(|q| q.iter().flat_map(|sid| sid_to_flat_tokens(sid, s).unwrap()).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wide_beam_matches_exhaustive(
        corpus in prop::collection::vec(prop::collection::vec(sid_in(&SidStructure::new(vec![3, 4, 2], 1).unwrap()), 1..6), 1..30),
        history in prop::collection::vec(sid_in(&SidStructure::new(vec![3, 4, 2], 1).unwrap()), 0..3),
        k in 1usize..24,
    ) {
        let s = SidStructure::new(vec![3, 4, 2], 1).unwrap();
        let scorer = train_markov_scorer(&streams_for(&s, &corpus), 2, 0.2, &s).unwrap();
        let ctx = streams_for(&s, &[history]).remove(0);
        let all = exhaustive_ranking(&scorer, &ctx, None).unwrap();
        let beam = dynamic_beam_search(&scorer, &ctx, &BeamSchedule::constant(24, 3).unwrap(), k, None).unwrap();
        prop_assert_eq!(beam.len(), k);
        for ((a, x), (b, y)) in beam.iter().zip(&all) {
            prop_assert_eq!(a, b);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_loss_matches_full(
        corpus in prop::collection::vec(prop::collection::vec(sid_in(&SidStructure::new(vec![3, 3], 1).unwrap()), 1..5), 1..20),
        rows in prop::collection::vec((prop::collection::vec(sid_in(&SidStructure::new(vec![3, 3], 1).unwrap()), 3), prop::collection::vec(any::<bool>(), 6)), 1..4),
    ) {
        let s = SidStructure::new(vec![3, 3], 1).unwrap();
        let scorer = train_markov_scorer(&streams_for(&s, &corpus), 1, 0.5, &s).unwrap();
        let batch: Vec<LabeledSequence> = rows
            .into_iter()
            .map(|(sids, mask)| {
                let tokens = streams_for(&s, &[sids]).remove(0);
                let mut labels: Vec<i64> = tokens.iter().zip(&mask).map(|(&t, &keep)| if keep { t as i64 } else { IGNORE_LABEL }).collect();
                *labels.last_mut().unwrap() = *tokens.last().unwrap() as i64;
                LabeledSequence::new(tokens, labels).unwrap()
            })
            .collect();
        let sliced = sliced_loss(&scorer, &batch).unwrap();
        let (full, _) = full_masked_loss(&scorer, &batch).unwrap();
        prop_assert!((sliced.loss - full).abs() <= 1e-10);
    }
}

#[test]
fn random_policy_table_is_a_pure_function_of_order() {
    let s = SidStructure::new(vec![2, 3], 2).unwrap();
    let sids: Vec<SemanticId> = (0..20).map(|i| SemanticId::new(vec![i % 2, 0])).collect();
    let a: AssignmentTable = apply_random_policy(&items_with(sids.clone()), &s).unwrap();
    let b = apply_random_policy(&items_with(sids), &s).unwrap();
    assert_eq!(a.into_assignments(), b.into_assignments());
}
