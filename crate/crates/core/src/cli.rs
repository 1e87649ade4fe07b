//! Command-line front end: `build-dataset`, `train`, `generate`, `evaluate`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::dataset::builder::{build_dataset_files, parse_pairs};
use crate::error::Error;
use crate::image;
use crate::metrics::{evaluate, EvalPair, ScoreReport};
use crate::model::checkpoint::load_model;
use crate::model::{DecodingParams, Model, ModelConfig};
use crate::tokenizer::Vocabulary;
use crate::training::data::{load_examples, read_rows, vocabulary_corpus, DatasetRow};
use crate::training::{run_stage, CaptionFeatures, Schedule, Stage, StagePlan, TrainConfig};

pub const EXIT_IO: i32 = 2;
pub const EXIT_TRAIN: i32 = 3;
pub const EXIT_GENERATE: i32 = 4;
pub const EXIT_EVALUATE: i32 = 5;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "krsvqg", version, about = "Knowledge-aware visual question generation")]
pub struct Cli {
    /// Flat TOML file with model, training and path settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground triplets in captions and write train/val splits.
    BuildDataset(BuildArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Generate a caption and a question for an image.
    Generate(GenerateArgs),
    /// Score predicted questions against references.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// `image_ref<TAB>caption` lines.
    #[arg(long)]
    pub captions: PathBuf,
    /// `relation<TAB>head<TAB>tail` lines.
    #[arg(long)]
    pub triplets: PathBuf,
    /// Optional `image_ref<TAB>question` lines used instead of the template.
    #[arg(long)]
    pub questions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// JSONL dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the dataset's.
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Vocabulary file; built from the dataset when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long = "stage1-ckpt")]
    pub stage1_ckpt: Option<PathBuf>,
    #[arg(long = "stage2-ckpt")]
    pub stage2_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub freeze_vision: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, required_unless_present = "dataset")]
    pub image: Option<PathBuf>,
    #[arg(long, required_unless_present = "dataset")]
    pub knowledge: Option<String>,
    /// Generate for every record of a JSONL dataset instead.
    #[arg(long, conflicts_with_all = ["image", "knowledge"])]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Batch mode output, `image<TAB>question` lines; stdout when absent.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Print the feature shapes fed to the question decoder.
    #[arg(long)]
    pub shapes: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `image<TAB>question` lines.
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSONL dataset or `image<TAB>question` lines; repeated images give
    /// multiple references.
    #[arg(long)]
    pub references: PathBuf,
    /// Also print a CSV header and row.
    #[arg(long)]
    pub csv: bool,
}

/// Flat TOML configuration. Command-line flags take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `toy` (default) or `full`.
    pub preset: Option<String>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_width: Option<usize>,
    pub image_blocks: Option<usize>,
    pub caption_blocks: Option<usize>,
    pub text_blocks: Option<usize>,
    pub question_blocks: Option<usize>,
    pub max_caption_len: Option<usize>,
    pub max_knowledge_len: Option<usize>,
    pub max_question_len: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub grad_clip: Option<f64>,
    pub schedule: Option<String>,
    pub freeze_vision: Option<bool>,
    /// `teacher_forced` or `generated`.
    pub caption_features: Option<String>,
    pub checkpoint_every: Option<usize>,
    pub min_freq: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, Error> {
        let mut c = match self.preset.as_deref() {
            None | Some("toy") => ModelConfig::toy(vocab_size),
            Some("full") => ModelConfig::full(vocab_size),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let fields = [
            (&mut c.image_size, self.image_size),
            (&mut c.patch_size, self.patch_size),
            (&mut c.width, self.width),
            (&mut c.heads, self.heads),
            (&mut c.ffn_width, self.ffn_width),
            (&mut c.image_blocks, self.image_blocks),
            (&mut c.caption_blocks, self.caption_blocks),
            (&mut c.text_blocks, self.text_blocks),
            (&mut c.question_blocks, self.question_blocks),
            (&mut c.max_caption_len, self.max_caption_len),
            (&mut c.max_knowledge_len, self.max_knowledge_len),
            (&mut c.max_question_len, self.max_question_len),
        ];
        for (slot, value) in fields {
            if let Some(v) = value {
                *slot = v;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, Error> {
        let d = TrainConfig::default();
        let schedule = match self.schedule.as_deref() {
            None | Some("cosine") => Schedule::Cosine,
            Some("constant") => Schedule::Constant,
            Some(other) => return Err(Error::Config(format!("unknown schedule `{other}`"))),
        };
        let caption_features = match self.caption_features.as_deref() {
            None | Some("teacher_forced") => CaptionFeatures::TeacherForced,
            Some("generated") => CaptionFeatures::Generated,
            Some(other) => return Err(Error::Config(format!("unknown caption_features `{other}`"))),
        };
        Ok(TrainConfig {
            caption_features,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            grad_clip: self.grad_clip.unwrap_or(d.grad_clip),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            freeze_vision: self.freeze_vision.unwrap_or(false),
            schedule,
            seed,
            ..d
        })
    }
}

/// Message plus process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// I/O failures exit with 2, everything else with the command's code.
fn with_code(code: i32) -> impl Fn(Error) -> CliError {
    move |e| CliError {
        code: if matches!(e, Error::Io { .. }) { EXIT_IO } else { code },
        message: e.to_string(),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(with_code(EXIT_OTHER))?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out_dir = cli.out_dir.clone().or(file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::BuildDataset(a) => build(&a, &out_dir, seed).map_err(with_code(EXIT_OTHER)),
        Command::Train(a) => train(&a, &file, &out_dir, seed).map_err(with_code(EXIT_TRAIN)),
        Command::Generate(a) => generate(&a).map_err(with_code(EXIT_GENERATE)),
        Command::Evaluate(a) => evaluate_files(&a).map_err(with_code(EXIT_EVALUATE)),
    }
}

fn build(a: &BuildArgs, out_dir: &Path, seed: u64) -> Result<(), Error> {
    let (files, summary) = build_dataset_files(&a.captions, &a.triplets, a.questions.as_deref(), out_dir, seed)?;
    println!(
        "{} records ({} train, {} val), {} images skipped",
        summary.records,
        summary.train,
        summary.val,
        summary.skipped_images.len()
    );
    println!("wrote {}, {}, {}", files.train.display(), files.val.display(), files.summary.display());
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(a: &TrainArgs, file: &RunConfig, out_dir: &Path, seed: u64) -> Result<(), Error> {
    let stage = Stage::from_number(a.stage)?;
    let dataset = a
        .dataset
        .clone()
        .or(file.dataset.clone())
        .ok_or_else(|| Error::MissingPrerequisite("--dataset".into()))?;
    let stage1 = a.stage1_ckpt.clone().or(file.stage1_checkpoint.clone());
    let stage2 = a.stage2_ckpt.clone().or(file.stage2_checkpoint.clone());
    if stage == Stage::FineTune {
        for (flag, path) in [("--stage1-ckpt", &stage1), ("--stage2-ckpt", &stage2)] {
            match path {
                None => return Err(Error::MissingPrerequisite(format!("{flag} is required for stage 3"))),
                Some(p) if !p.exists() => {
                    return Err(Error::MissingPrerequisite(format!("{flag} {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
    }
    let rows = read_rows(&dataset)?;
    let vocab = match a.vocab.clone().or(file.vocab.clone()) {
        Some(p) => Vocabulary::load(&p)?,
        None => Vocabulary::build(&vocabulary_corpus(&rows), file.min_freq.unwrap_or(1))?,
    };
    let config = file.model_config(vocab.len())?;
    let mut train_config = file.train_config(seed)?;
    train_config.learning_rate = a.lr.or(train_config.learning_rate);
    train_config.epochs = a.epochs.unwrap_or(train_config.epochs);
    train_config.batch_size = a.batch_size.unwrap_or(train_config.batch_size);
    train_config.freeze_vision |= a.freeze_vision;

    let image_root = a.image_dir.clone().or(file.image_dir.clone()).unwrap_or_else(|| parent_dir(&dataset));
    let examples = load_examples(&rows, &image_root, &vocab, &config, stage.objective())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab_path = out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;

    let plan = StagePlan {
        stage: Some(stage),
        stage1_checkpoint: stage1,
        stage2_checkpoint: stage2,
        out_dir: Some(out_dir.to_path_buf()),
    };
    let model = Model::new(config, seed)?;
    let outcome = run_stage(&plan, model, &examples, &train_config)?;
    match outcome.final_loss() {
        Some(l) => println!("final loss: {l:.6}"),
        None => println!("final loss: n/a"),
    }
    if let Some(ck) = &outcome.checkpoint {
        println!("checkpoint: {}", ck.display());
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<(), Error> {
    let model = load_model(&a.checkpoint)?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| parent_dir(&a.checkpoint).join("vocab.txt"));
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Schema(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let params = DecodingParams {
        beam_size: a.beam,
        max_len: a.max_len,
    };
    let run_one = |image_path: &Path, knowledge: &str| -> Result<(String, String, String), Error> {
        let img = image::resize(&image::load(image_path)?, model.config().image_size);
        let knowledge = vocab.encode(knowledge, model.config().max_knowledge_len)?;
        let out = model.generate(&img, &knowledge, &params)?;
        let shapes = format!(
            "f_I {}x{}, f_C {}x{}, f_T {}x{}",
            out.image_features.0,
            out.image_features.1,
            out.caption_features.0,
            out.caption_features.1,
            out.knowledge_features.0,
            out.knowledge_features.1
        );
        Ok((vocab.decode(&out.caption)?, vocab.decode(&out.question)?, shapes))
    };

    if let Some(dataset) = &a.dataset {
        let root = a.image_dir.clone().unwrap_or_else(|| parent_dir(dataset));
        let mut lines = String::new();
        for (i, row) in read_rows(dataset)?.iter().enumerate() {
            let missing = |f: &str| Error::Schema(format!("record {} has no `{f}`", i + 1));
            let image_ref = row.image.as_deref().ok_or_else(|| missing("image"))?;
            let knowledge = row.knowledge_sentence.as_deref().ok_or_else(|| missing("knowledge_sentence"))?;
            let (_, question, _) = run_one(&root.join(image_ref), knowledge)?;
            lines.push_str(&format!("{image_ref}\t{question}\n"));
        }
        match &a.predictions {
            Some(p) => fs::write(p, lines).map_err(|e| Error::io(p, e))?,
            None => print!("{lines}"),
        }
        return Ok(());
    }

    let image_path = a.image.as_deref().ok_or_else(|| Error::Config("--image is required".into()))?;
    let knowledge = a.knowledge.as_deref().ok_or(Error::KnowledgeRequired)?;
    let (caption, question, shapes) = run_one(image_path, knowledge)?;
    println!("caption: {caption}");
    println!("question: {question}");
    if a.shapes {
        println!("shapes: {shapes}");
    }
    Ok(())
}

/// Reference questions per image from a JSONL dataset or TSV file.
fn read_references(path: &Path) -> Result<BTreeMap<String, Vec<String>>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_jsonl = text.trim_start().starts_with('{');
    let pairs: Vec<(String, String)> = if is_jsonl {
        read_rows(path)?
            .into_iter()
            .map(|r: DatasetRow| match (r.image, r.question) {
                (Some(i), Some(q)) => Ok((i, q)),
                _ => Err(Error::Evaluation("reference record without image or question".into())),
            })
            .collect::<Result<_, _>>()?
    } else {
        parse_pairs(&text, "references").map_err(|e| Error::Evaluation(e.to_string()))?
    };
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (image, q) in pairs {
        refs.entry(image).or_default().push(q);
    }
    Ok(refs)
}

/// Pairs predictions with references by image id; both sides must cover
/// the same images.
pub fn align(
    predictions: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<EvalPair>, Error> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("no predictions".into()));
    }
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let mut pairs = Vec::with_capacity(predictions.len());
    for (image, question) in predictions {
        if seen.insert(image, ()).is_some() {
            return Err(Error::Evaluation(format!("duplicate prediction for `{image}`")));
        }
        let refs = references
            .get(image)
            .ok_or_else(|| Error::Evaluation(format!("no reference for `{image}`")))?;
        pairs.push(EvalPair::from_text(question, refs)?);
    }
    if pairs.len() != references.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} referenced images",
            pairs.len(),
            references.len()
        )));
    }
    Ok(pairs)
}

fn evaluate_files(a: &EvaluateArgs) -> Result<(), Error> {
    let text = fs::read_to_string(&a.predictions).map_err(|e| Error::io(&a.predictions, e))?;
    let predictions = parse_pairs(&text, "predictions").map_err(|e| Error::Evaluation(e.to_string()))?;
    let references = read_references(&a.references)?;
    let report: ScoreReport = evaluate(&align(&predictions, &references)?)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if a.csv {
        println!("{}", ScoreReport::CSV_HEADER);
        println!("{}", report.csv_row());
    }
    Ok(())
}
