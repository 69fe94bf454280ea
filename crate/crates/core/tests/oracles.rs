mod common;

use std::collections::{BTreeMap, BTreeSet};

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use seat_core::metrics::{
    fleiss_kappa_labels, label_change, micro_f1, multilabel_kappa, pairwise_span_f1, SpanItem,
};
use seat_core::retrieval::{knn, EmbeddingIndex};

#[derive(Deserialize)]
struct FleissFixture {
    ratings: Vec<Vec<String>>,
    p_bar: f64,
    p_e: f64,
    kappa: f64,
}

#[test]
fn fleiss_hand_fixture() {
    let f: FleissFixture = serde_json::from_str(include_str!("fixtures/fleiss_hand.json")).unwrap();
    let k = fleiss_kappa_labels(&f.ratings).unwrap();
    assert_abs_diff_eq!(k.p_bar, f.p_bar, epsilon = 1e-9);
    assert_abs_diff_eq!(k.p_e, f.p_e, epsilon = 1e-9);
    assert_abs_diff_eq!(k.kappa.unwrap(), f.kappa, epsilon = 1e-9);
}

fn random_ratings(rng: &mut ChaCha8Rng, items: usize, raters: usize, cats: usize) -> Vec<Vec<usize>> {
    (0..items)
        .map(|_| (0..raters).map(|_| rng.random_range(0..cats)).collect())
        .collect()
}

#[test]
fn fleiss_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let items = rng.random_range(1..=6);
        let raters = rng.random_range(2..=4);
        let cats = rng.random_range(1..=3);
        let ratings = random_ratings(&mut rng, items, raters, cats);
        let got = fleiss_kappa_labels(&ratings).unwrap().kappa;
        match (got, common::fleiss_by_pairs(&ratings)) {
            (Some(a), Some(b)) => assert_abs_diff_eq!(a, b, epsilon = 1e-9),
            (a, b) => assert_eq!(a, b, "{ratings:?}"),
        }
    }
}

#[test]
fn fleiss_near_zero_for_random_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ratings = random_ratings(&mut rng, 500, 5, 4);
    let k = fleiss_kappa_labels(&ratings).unwrap().kappa.unwrap();
    assert!(k.abs() < 0.1, "{k}");
}

#[test]
fn multilabel_equals_binarized_categorical() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let ratings = random_ratings(&mut rng, 8, 3, 3);
        let sets: Vec<Vec<BTreeSet<usize>>> = ratings
            .iter()
            .map(|item| item.iter().map(|&c| BTreeSet::from([c])).collect())
            .collect();
        let ml = multilabel_kappa(&sets, &[0, 1, 2]).unwrap();
        let mut expected = Vec::new();
        for label in 0..3 {
            let binary: Vec<Vec<usize>> = ratings
                .iter()
                .map(|item| item.iter().map(|&c| usize::from(c == label)).collect())
                .collect();
            if let Some(k) = common::fleiss_by_pairs(&binary) {
                expected.push(k);
            }
        }
        assert_eq!(ml.per_label.len(), expected.len());
        for ((_, got), want) in ml.per_label.iter().zip(&expected) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-9);
        }
        assert_eq!(ml.excluded, 3 - expected.len());
    }
}

fn random_set(rng: &mut ChaCha8Rng, universe: u32) -> BTreeSet<u32> {
    (0..universe).filter(|_| rng.random_bool(0.3)).collect()
}

#[test]
fn micro_f1_matches_cell_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let n = rng.random_range(1..10);
        let items: Vec<(BTreeSet<u32>, BTreeSet<u32>)> =
            (0..n).map(|_| (random_set(&mut rng, 8), random_set(&mut rng, 8))).collect();
        let got = micro_f1(items.iter().map(|(p, g)| (p, g)));
        assert_abs_diff_eq!(got, common::micro_f1_by_cells(&items, 8), epsilon = 1e-12);
        let mut shuffled = items.clone();
        shuffled.reverse();
        assert_abs_diff_eq!(got, micro_f1(shuffled.iter().map(|(p, g)| (p, g))), epsilon = 1e-12);
    }
}

#[test]
fn label_change_matches_union_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..200 {
        let pairs = |rng: &mut ChaCha8Rng| -> BTreeSet<(u32, u32)> {
            (0..5).flat_map(|j| (0..6).map(move |l| (j, l))).filter(|_| rng.random_bool(0.25)).collect()
        };
        let (a, b) = (pairs(&mut rng), pairs(&mut rng));
        assert_eq!(label_change(&a, &b), common::label_change_by_union(&a, &b));
        if !a.is_empty() {
            assert_eq!(label_change(&a, &a), Some(0.0));
        }
    }
}

#[derive(Deserialize)]
struct SpanFixtureItem {
    text: String,
    spans: Vec<Vec<(usize, usize)>>,
}

#[derive(Deserialize)]
struct SpanFixture {
    items: Vec<SpanFixtureItem>,
    f1: f64,
}

#[test]
fn span_f1_hand_fixture() {
    let f: SpanFixture = serde_json::from_str(include_str!("fixtures/span_hand.json")).unwrap();
    let items: Vec<SpanItem> = f
        .items
        .into_iter()
        .map(|i| SpanItem {
            text: i.text,
            spans: i.spans,
        })
        .collect();
    assert_abs_diff_eq!(pairwise_span_f1(&items).unwrap(), f.f1, epsilon = 1e-12);
}

#[test]
fn span_f1_ordered_pairs_average_unordered_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let text = "one two three four five six seven eight";
    for _ in 0..50 {
        let raters = rng.random_range(2..=4);
        let item = SpanItem {
            text: text.to_string(),
            spans: (0..raters)
                .map(|_| {
                    let s = rng.random_range(0..30);
                    vec![(s, s + rng.random_range(1..10))]
                })
                .collect(),
        };
        let all = pairwise_span_f1(std::slice::from_ref(&item)).unwrap();
        let mut pair_means = Vec::new();
        for a in 0..raters {
            for b in a + 1..raters {
                let two = SpanItem {
                    text: item.text.clone(),
                    spans: vec![item.spans[a].clone(), item.spans[b].clone()],
                };
                pair_means.push(pairwise_span_f1(&[two]).unwrap());
            }
        }
        let mean = pair_means.iter().sum::<f64>() / pair_means.len() as f64;
        assert_abs_diff_eq!(all, mean, epsilon = 1e-12);
    }
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> BTreeMap<String, Vec<f64>> {
    let mut vectors = BTreeMap::new();
    for i in 0..n {
        let v: Vec<f64> = if i > 0 && rng.random_bool(0.1) {
            // duplicate an earlier vector to force score ties
            vectors.values().next().cloned().unwrap()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        vectors.insert(format!("v{i:02}"), v);
    }
    vectors
}

#[test]
fn knn_matches_exhaustive_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..100 {
        let vectors = random_index(&mut rng, 50, 16);
        let index = EmbeddingIndex::new(vectors.clone(), "test").unwrap();
        let query = format!("v{:02}", rng.random_range(0..50));
        let got: Vec<String> = knn(&index, &query, 14).unwrap().into_iter().map(|n| n.justification_id).collect();
        assert_eq!(got, common::knn_exhaustive(&vectors, &query, 14));
        for k in [4, 9] {
            let shorter: Vec<String> = knn(&index, &query, k).unwrap().into_iter().map(|n| n.justification_id).collect();
            assert_eq!(shorter, got[..k]);
        }
    }
}
