//! Inputs shared by the benchmarks under `benches/`.

use seat_core::corpus::{AnnotationSet, Corpus};
use seat_core::retrieval::{EmbeddingIndex, HashEmbedder};
use seat_core::synthetic::{self, SyntheticSpec};

pub struct Fixture {
    pub corpus: Corpus,
    pub annotations: AnnotationSet,
    pub index: EmbeddingIndex,
}

/// Synthetic corpus of `items` justifications, five annotators, hashed
/// embeddings of dimension `dim`.
pub fn fixture(items: usize, dim: usize) -> Fixture {
    let (corpus, annotations) = synthetic::generate(SyntheticSpec {
        items,
        annotators: 5,
        seed: 1,
    });
    let embedder = HashEmbedder { dim };
    let vectors = corpus.iter().map(|j| (j.id.clone(), embedder.vector(&j.text))).collect();
    let index = EmbeddingIndex::new(vectors, "hash").expect("hash index");
    Fixture {
        corpus,
        annotations,
        index,
    }
}
