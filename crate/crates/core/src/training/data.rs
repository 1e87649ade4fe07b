use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image;
use crate::model::ModelConfig;
use crate::tokenizer::Vocabulary;
use crate::training::stage::{Example, Objective};

/// A dataset line as read for training. Only `image` and `caption` are
/// needed for caption pre-training.
#[derive(Debug, Clone, Deserialize)]
pub struct DatasetRow {
    pub image: Option<String>,
    pub caption: Option<String>,
    pub knowledge_sentence: Option<String>,
    pub question: Option<String>,
}

pub fn read_rows(path: &Path) -> Result<Vec<DatasetRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Every caption, knowledge sentence and question in the rows.
pub fn vocabulary_corpus(rows: &[DatasetRow]) -> Vec<String> {
    rows.iter()
        .flat_map(|r| [&r.caption, &r.knowledge_sentence, &r.question])
        .flatten()
        .cloned()
        .collect()
}

/// Loads and tokenizes a dataset file. Image paths are resolved against
/// `image_root`.
pub fn load_examples(
    rows: &[DatasetRow],
    image_root: &Path,
    vocab: &Vocabulary,
    config: &ModelConfig,
    objective: Objective,
) -> Result<Vec<Example>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let missing = |field: &str| Error::Schema(format!("record {} has no `{field}`", i + 1));
            let image_ref = row.image.clone().ok_or_else(|| missing("image"))?;
            let caption = row.caption.as_deref().ok_or_else(|| missing("caption"))?;
            if objective == Objective::Question {
                row.knowledge_sentence.as_ref().ok_or_else(|| missing("knowledge_sentence"))?;
                row.question.as_ref().ok_or_else(|| missing("question"))?;
            }
            let pixels = image::resize(&image::load(&image_root.join(&image_ref))?, config.image_size);
            let encode = |text: &Option<String>, len| text.as_deref().map(|t| vocab.encode(t, len)).transpose();
            Ok(Example {
                image_ref,
                image: pixels,
                caption: vocab.encode(caption, config.max_caption_len)?,
                knowledge: encode(&row.knowledge_sentence, config.max_knowledge_len)?,
                question: encode(&row.question, config.max_question_len)?,
            })
        })
        .collect()
}
