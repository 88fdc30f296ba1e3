#![allow(dead_code)]

use qgen_core::data::TrainingExample;
use qgen_core::model::{Instance, Model, ModelDims};
use qgen_core::numerics::{Rng, Tensor};
use qgen_core::text::{EmbeddingTable, Vocabulary};
use qgen_core::TrainConfig;

/// Twenty passages over a small shared vocabulary, each with one unique
/// out-of-vocabulary token. Targets are 4-token passage spans; every even
/// example's span covers its OOV token. The query is the span's first two tokens.
pub fn overfit_corpus() -> Vec<TrainingExample> {
    let mut rng = Rng::new(2024);
    (0..20)
        .map(|i| {
            let mut passage: Vec<String> = (0..10).map(|_| format!("w{}", rng.below(30))).collect();
            let oov_pos = rng.below(passage.len());
            passage[oov_pos] = format!("rare{i}");
            let start = if i % 2 == 0 {
                oov_pos.saturating_sub(1).min(passage.len() - 4)
            } else {
                rng.below(passage.len() - 3)
            };
            let target = passage[start..start + 4].to_vec();
            let query = passage[start..start + 2].to_vec();
            TrainingExample {
                id: format!("ex{i}"),
                passage,
                query,
                target,
            }
        })
        .collect()
}

/// Desk-scale profile: h = 32, d = 16, l = 3, vocabulary capped at 200.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 16,
        hidden: 32,
        perspectives: 3,
        vocab_max_size: 200,
        vocab_min_count: 2,
        max_decode_len: 10,
        ..TrainConfig::default()
    }
}

pub struct Setup {
    pub model: Model<f64>,
    pub vocab: Vocabulary,
    pub instances: Vec<Instance>,
}

/// Passage-only vocabulary, frozen uniform(-1, 1) embeddings and a freshly
/// initialized model. Tokens seen in a single passage stay out of vocabulary.
pub fn setup(examples: &[TrainingExample], config: &TrainConfig) -> Setup {
    let corpus: Vec<Vec<String>> = examples.iter().map(|e| e.passage.clone()).collect();
    let vocab = Vocabulary::build(&corpus, config.vocab_max_size, config.vocab_min_count);
    let mut rng = Rng::new(config.seed);
    let d = config.embed_dim;
    let table = Tensor::new(vec![vocab.len(), d], rng.uniform_vec(vocab.len() * d, -1.0, 1.0)).unwrap();
    let dims = ModelDims::uniform(vocab.len(), d, config.hidden, config.perspectives);
    let model = Model::new(dims, EmbeddingTable::new(table).unwrap(), &mut rng).unwrap();
    let instances = examples.iter().map(|e| Instance::new(e, &vocab).unwrap()).collect();
    Setup {
        model,
        vocab,
        instances,
    }
}
