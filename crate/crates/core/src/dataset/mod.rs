//! Dataset construction: triplet ingestion, caption grounding, knowledge
//! sentences, answers, and the train/validation split.

pub mod builder;
pub mod fixtures;
pub mod triplet;

pub use builder::{
    build_dataset, build_dataset_files, match_triplets, read_jsonl, sample_answer, split_dataset,
    template_question, to_jsonl, BuildSummary, DatasetFiles, SampleRecord, TripletMatch,
};
pub use triplet::{load_triplets, triplet_to_sentence, KnowledgeTriplet, Relation};
