#![allow(dead_code)]

pub mod oracles;

use std::collections::HashMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use krsvqg::dataset::builder::build_records;
use krsvqg::dataset::fixtures::{synthetic_image, REMOTE_SENSING};
use krsvqg::dataset::{KnowledgeTriplet, SampleRecord};
use krsvqg::model::ModelConfig;
use krsvqg::tokenizer::{TokenSequence, Vocabulary, BOS, EOS};
use krsvqg::training::Example;

/// One block per component, width 8, two heads.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        width: 8,
        heads: 2,
        ffn_width: 16,
        image_blocks: 1,
        caption_blocks: 1,
        text_blocks: 1,
        question_blocks: 1,
        vocab_size: 12,
        max_caption_len: 8,
        max_knowledge_len: 8,
        max_question_len: 8,
    }
}

pub fn random_image(size: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((size, size, 3), |_| rng.random())
}

pub fn seq(ids: &[u32], vocab: usize) -> TokenSequence {
    TokenSequence::new(ids.to_vec(), vocab).unwrap()
}

pub fn tiny_example() -> Example {
    Example {
        image_ref: "tiny".into(),
        image: random_image(8, 5),
        caption: seq(&[BOS, 4, 5, 6, EOS, 0], 12),
        knowledge: Some(seq(&[BOS, 7, 8, EOS], 12)),
        question: Some(seq(&[BOS, 9, 10, 11, 4, EOS], 12)),
    }
}

/// The eight remote-sensing fixture records with templated questions.
pub fn fixture_records(seed: u64) -> Vec<SampleRecord> {
    let captions: Vec<(String, String)> = REMOTE_SENSING
        .iter()
        .map(|s| (s.image.to_string(), s.caption.to_string()))
        .collect();
    let triplets: Vec<KnowledgeTriplet> = REMOTE_SENSING.iter().map(|s| s.triplet()).collect();
    build_records(&captions, &triplets, &HashMap::new(), seed).unwrap().0
}

pub struct Fixture {
    pub vocab: Vocabulary,
    pub config: ModelConfig,
    pub examples: Vec<Example>,
    pub records: Vec<SampleRecord>,
}

/// Eight synthetic images with records, tokenized for a small model.
pub fn overfit_fixture() -> Fixture {
    let records = fixture_records(7);
    let corpus: Vec<String> = records
        .iter()
        .flat_map(|r| [r.caption.clone(), r.knowledge_sentence.clone(), r.question.clone()])
        .collect();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let config = ModelConfig {
        image_size: 16,
        patch_size: 8,
        width: 64,
        heads: 4,
        ffn_width: 128,
        image_blocks: 1,
        caption_blocks: 1,
        text_blocks: 1,
        question_blocks: 1,
        vocab_size: vocab.len(),
        max_caption_len: 16,
        max_knowledge_len: 16,
        max_question_len: 16,
    };
    let examples = records
        .iter()
        .enumerate()
        .map(|(i, r)| Example {
            image_ref: r.image.clone(),
            image: synthetic_image(i, config.image_size, 1),
            caption: vocab.encode(&r.caption, config.max_caption_len).unwrap(),
            knowledge: Some(vocab.encode(&r.knowledge_sentence, config.max_knowledge_len).unwrap()),
            question: Some(vocab.encode(&r.question, config.max_question_len).unwrap()),
        })
        .collect();
    Fixture {
        vocab,
        config,
        examples,
        records,
    }
}

pub fn max_abs_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
