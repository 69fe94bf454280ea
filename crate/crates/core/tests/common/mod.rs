//! Reference implementations used as oracles. They share no code with the
//! library and favour directness over speed.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use seat_core::corpus::{AnnotationSet, Corpus};
use seat_core::retrieval::{EmbeddingIndex, HashEmbedder};

/// Fleiss' kappa by counting agreeing ordered rater pairs per item.
/// `ratings[i][r]` is rater r's category on item i. `None` when only one
/// category is ever used.
pub fn fleiss_by_pairs(ratings: &[Vec<usize>]) -> Option<f64> {
    let n = ratings[0].len();
    let mut agree_fraction = 0.0;
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for item in ratings {
        let mut agreeing = 0usize;
        for a in 0..n {
            for b in 0..n {
                if a != b && item[a] == item[b] {
                    agreeing += 1;
                }
            }
            *freq.entry(item[a]).or_default() += 1;
        }
        agree_fraction += agreeing as f64 / (n * (n - 1)) as f64;
    }
    if freq.len() < 2 {
        return None;
    }
    let p_bar = agree_fraction / ratings.len() as f64;
    let total = (ratings.len() * n) as f64;
    let p_e: f64 = freq.values().map(|&c| (c as f64 / total).powi(2)).sum();
    Some((p_bar - p_e) / (1.0 - p_e))
}

/// Micro F1 by walking every (item, label) cell of the label universe.
pub fn micro_f1_by_cells(items: &[(BTreeSet<u32>, BTreeSet<u32>)], universe: u32) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
    for (pred, gold) in items {
        for label in 0..universe {
            match (pred.contains(&label), gold.contains(&label)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// 100 * |A xor B| / |A| by membership tests over the union.
pub fn label_change_by_union(a: &BTreeSet<(u32, u32)>, b: &BTreeSet<(u32, u32)>) -> Option<f64> {
    if a.is_empty() {
        return None;
    }
    let changed = a.union(b).filter(|x| a.contains(x) != b.contains(x)).count();
    Some(100.0 * changed as f64 / a.len() as f64)
}

/// Labels present in at least `threshold` of the per-seed sets.
pub fn vote_by_counting(per_seed: &[BTreeSet<u32>], threshold: usize, universe: u32) -> BTreeSet<u32> {
    (0..universe)
        .filter(|l| per_seed.iter().filter(|s| s.contains(l)).count() >= threshold)
        .collect()
}

/// Exhaustive cosine ranking: score descending, id ascending on ties.
pub fn knn_exhaustive(vectors: &BTreeMap<String, Vec<f64>>, query: &str, k: usize) -> Vec<String> {
    let q = &vectors[query];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, String)> = vectors
        .iter()
        .filter(|(id, _)| id.as_str() != query)
        .map(|(id, v)| {
            let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
            (dot / (norm(q) * norm(v)), id.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

pub fn hash_index(corpus: &Corpus, dim: usize) -> EmbeddingIndex {
    let embedder = HashEmbedder { dim };
    let vectors = corpus.iter().map(|j| (j.id.clone(), embedder.vector(&j.text))).collect();
    EmbeddingIndex::new(vectors, "hash").unwrap()
}

pub fn bundled() -> (Corpus, AnnotationSet) {
    seat_core::synthetic::bundled()
}
