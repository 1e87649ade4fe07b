//! The three training stages.
//!
//! 1. caption pre-training of the vision module (image encoder + caption
//!    decoder) with the caption loss;
//! 2. question-generation pre-training of the whole model on a general
//!    domain dataset;
//! 3. fine-tuning of the whole model with the question loss, starting from
//!    the vision module of stage 1 and the language module of stage 2.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::checkpoint::{load_model, save_model};
use crate::model::{Component, DecodingParams, FeatureSequence, FeatureSource, Model};
use crate::nn::Graph;
use crate::tokenizer::TokenSequence;
use crate::training::loss::sequence_loss_node;
use crate::training::optim::{clip_global_norm, AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    CaptionPretrain = 1,
    GeneralPretrain = 2,
    FineTune = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Caption,
    Question,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::CaptionPretrain),
            2 => Ok(Stage::GeneralPretrain),
            3 => Ok(Stage::FineTune),
            _ => Err(Error::Config(format!("unknown stage {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn objective(self) -> Objective {
        match self {
            Stage::CaptionPretrain => Objective::Caption,
            Stage::GeneralPretrain | Stage::FineTune => Objective::Question,
        }
    }

    /// Components whose parameters the stage updates.
    pub fn trained_components(self) -> &'static [Component] {
        match self {
            Stage::CaptionPretrain => &[Component::ImageEncoder, Component::CaptionDecoder],
            Stage::GeneralPretrain | Stage::FineTune => &Component::ALL,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Stage::CaptionPretrain | Stage::GeneralPretrain => 1e-4,
            Stage::FineTune => 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Caption fed to the caption branch of the question decoder during
/// question-loss training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionFeatures {
    /// The ground-truth caption.
    TeacherForced,
    /// The model's own greedy caption, as at inference time.
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Falls back to the stage default when unset.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub schedule: Schedule,
    /// Keep the vision module fixed during question-loss stages.
    pub freeze_vision: bool,
    pub caption_features: CaptionFeatures,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            grad_clip: 1.0,
            schedule: Schedule::Cosine,
            freeze_vision: false,
            caption_features: CaptionFeatures::TeacherForced,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => base * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StagePlan {
    pub stage: Option<Stage>,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    /// Where checkpoints and the loss curve go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl StagePlan {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage: Some(stage),
            ..Default::default()
        }
    }

    pub fn stage(&self) -> Result<Stage> {
        self.stage
            .ok_or_else(|| Error::Config("stage plan without a stage".into()))
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        let stage = self.stage?;
        self.out_dir
            .as_ref()
            .map(|d| d.join(format!("stage{}.ckpt", stage.number())))
    }

    pub fn loss_curve_path(&self) -> Option<PathBuf> {
        let stage = self.stage?;
        self.out_dir
            .as_ref()
            .map(|d| d.join(format!("stage{}_loss.csv", stage.number())))
    }
}

/// One training example. Knowledge and question are required by the
/// question-loss stages only.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_ref: String,
    pub image: Image,
    pub caption: TokenSequence,
    pub knowledge: Option<TokenSequence>,
    pub question: Option<TokenSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
}

pub fn loss_curve_csv(points: &[LossPoint]) -> String {
    let mut s = String::from("step,stage,loss\n");
    for p in points {
        writeln!(s, "{},{},{}", p.step, p.stage, p.loss).expect("write to String");
    }
    s
}

pub fn parse_loss_curve(text: &str) -> Result<Vec<LossPoint>> {
    let bad = |line: &str| Error::format("loss curve", line.to_string());
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split(',');
            let (Some(step), Some(stage), Some(loss), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad(line));
            };
            Ok(LossPoint {
                step: step.parse().map_err(|_| bad(line))?,
                stage: stage.parse().map_err(|_| bad(line))?,
                loss: loss.parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

pub struct StageOutcome {
    pub model: Model,
    pub losses: Vec<LossPoint>,
    pub checkpoint: Option<PathBuf>,
}

impl StageOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|p| p.loss)
    }
}

fn check_schema(stage: Stage, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Schema("no training examples".into()));
    }
    if stage.objective() == Objective::Question {
        if let Some(ex) = data.iter().find(|e| e.knowledge.is_none() || e.question.is_none()) {
            return Err(Error::Schema(format!(
                "stage {} needs knowledge sentence and question; `{}` lacks them",
                stage.number(),
                ex.image_ref
            )));
        }
    }
    Ok(())
}

/// Builds the full forward graph for one example, with teacher-forced
/// caption features, and returns it with the loss node.
pub fn example_graph(model: &Model, ex: &Example, objective: Objective) -> Result<(Graph, usize)> {
    example_graph_with(model, ex, objective, CaptionFeatures::TeacherForced)
}

pub fn example_graph_with(
    model: &Model,
    ex: &Example,
    objective: Objective,
    caption_features: CaptionFeatures,
) -> Result<(Graph, usize)> {
    let mut g = Graph::new();
    let f_i = model.image_features(&mut g, &ex.image)?;
    let loss = match objective {
        Objective::Caption => {
            let (_, logits) = model.caption_decoder(&mut g, f_i, ex.caption.body())?;
            sequence_loss_node(&mut g, logits, &ex.caption.shifted_targets())?
        }
        Objective::Question => {
            let knowledge = ex.knowledge.as_ref().ok_or(Error::KnowledgeRequired)?;
            let question = ex
                .question
                .as_ref()
                .ok_or_else(|| Error::Schema(format!("`{}` has no question", ex.image_ref)))?;
            let f_c = match caption_features {
                CaptionFeatures::TeacherForced => model.caption_hidden(&mut g, f_i, ex.caption.body())?,
                CaptionFeatures::Generated => {
                    let image = FeatureSequence {
                        source: FeatureSource::Image,
                        block: g.value(f_i).clone(),
                    };
                    let (caption, _) = model.generate_caption(&image, &DecodingParams::greedy())?;
                    model.caption_hidden(&mut g, f_i, caption.body())?
                }
            };
            let f_t = model.text_encoder(&mut g, knowledge.body(), f_i)?;
            let (_, logits) = model.question_decoder(&mut g, f_c, f_t, question.body())?;
            sequence_loss_node(&mut g, logits, &question.shifted_targets())?
        }
    };
    Ok((g, loss))
}

pub fn example_loss(model: &Model, ex: &Example, objective: Objective, caption_features: CaptionFeatures) -> Result<f64> {
    let (g, loss) = example_graph_with(model, ex, objective, caption_features)?;
    Ok(g.value(loss)[[0, 0]])
}

pub fn example_gradients(
    model: &Model,
    ex: &Example,
    objective: Objective,
    caption_features: CaptionFeatures,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let (g, loss) = example_graph_with(model, ex, objective, caption_features)?;
    let value = g.value(loss)[[0, 0]];
    Ok((value, g.backward(loss)?.into_params(model.params())))
}

/// Mean loss and gradients over a batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Example],
    objective: Objective,
    caption_features: CaptionFeatures,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for ex in batch {
        let (loss, grads) = example_gradients(model, ex, objective, caption_features)?;
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in sum.values_mut() {
        *g /= n;
    }
    Ok((total / n, sum))
}

/// Mean loss over a dataset without updating anything.
pub fn mean_loss(
    model: &Model,
    data: &[Example],
    objective: Objective,
    caption_features: CaptionFeatures,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += example_loss(model, ex, objective, caption_features)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Vision parameters from the stage-1 checkpoint, language parameters from
/// the stage-2 checkpoint.
pub fn compose_fine_tune_init(model: &mut Model, stage1: &Path, stage2: &Path) -> Result<()> {
    let vision = load_model(stage1)?;
    let language = load_model(stage2)?;
    for (which, m) in [("stage-1", &vision), ("stage-2", &language)] {
        if m.config() != model.config() {
            return Err(Error::Schema(format!(
                "{which} checkpoint was trained with a different model config"
            )));
        }
    }
    model.copy_components(&vision, &[Component::ImageEncoder, Component::CaptionDecoder])?;
    model.copy_components(&language, &[Component::TextEncoder, Component::QuestionDecoder])?;
    Ok(())
}

/// Runs one stage: composes stage-3 initialization when needed, then
/// `epochs` passes of shuffled mini-batches with AdamW.
pub fn run_stage(plan: &StagePlan, mut model: Model, data: &[Example], config: &TrainConfig) -> Result<StageOutcome> {
    let stage = plan.stage()?;
    config.validate()?;
    if stage == Stage::FineTune {
        let s1 = plan
            .stage1_checkpoint
            .as_deref()
            .ok_or_else(|| Error::MissingPrerequisite("stage-1 checkpoint".into()))?;
        let s2 = plan
            .stage2_checkpoint
            .as_deref()
            .ok_or_else(|| Error::MissingPrerequisite("stage-2 checkpoint".into()))?;
        for p in [s1, s2] {
            if !p.exists() {
                return Err(Error::MissingPrerequisite(format!("checkpoint {}", p.display())));
            }
        }
        compose_fine_tune_init(&mut model, s1, s2)?;
    }
    check_schema(stage, data)?;
    if let Some(dir) = &plan.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let objective = stage.objective();
    let trained = stage.trained_components();
    let freeze_vision = config.freeze_vision && objective == Objective::Question;
    let trainable = |name: &str| {
        Component::of(name).is_some_and(|c| trained.contains(&c) && !(freeze_vision && c.is_vision()))
    };
    let base_lr = config.learning_rate.unwrap_or(stage.default_learning_rate());
    let mut opt = AdamW::new(AdamWConfig {
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        weight_decay: config.weight_decay,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut losses = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let checkpoint = plan.checkpoint_path();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch, objective, config.caption_features)?;
            grads.retain(|name, _| trainable(name));
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut grads, config.grad_clip);
            }
            let step = losses.len();
            let lr = config.lr_at(base_lr, step, total_steps);
            opt.step(model.params_mut(), &grads, lr, trainable)?;
            losses.push(LossPoint {
                step,
                stage: stage.number(),
                loss,
            });
        }
        let last = epoch + 1 == config.epochs;
        if let Some(path) = &checkpoint {
            if last || (epoch + 1) % config.checkpoint_every == 0 {
                save_model(&model, path)?;
            }
        }
        info!(
            "stage {} epoch {}/{}: loss {:.5}",
            stage.number(),
            epoch + 1,
            config.epochs,
            losses.last().map_or(f64::NAN, |p| p.loss)
        );
    }

    if let Some(path) = &checkpoint {
        if config.epochs == 0 {
            save_model(&model, path)?;
        }
    }
    if let Some(path) = plan.loss_curve_path() {
        fs::write(&path, loss_curve_csv(&losses)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(StageOutcome {
        model,
        losses,
        checkpoint,
    })
}
