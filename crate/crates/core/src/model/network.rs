use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::config::ModelConfig;
use crate::model::decoding::{self, DecodingParams};
use crate::nn::layers::{add_norm, feed_forward, multi_head_attention, AttentionMask};
use crate::nn::params::{truncated_normal, INIT_STD};
use crate::nn::{Graph, NodeId, ParamStore};
use crate::tokenizer::{TokenSequence, BOS, EOS};

/// The four trainable components. Every parameter name starts with one of
/// their prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    ImageEncoder,
    CaptionDecoder,
    TextEncoder,
    QuestionDecoder,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::ImageEncoder,
        Component::CaptionDecoder,
        Component::TextEncoder,
        Component::QuestionDecoder,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::ImageEncoder => "image_encoder",
            Component::CaptionDecoder => "caption_decoder",
            Component::TextEncoder => "text_encoder",
            Component::QuestionDecoder => "question_decoder",
        }
    }

    /// Image encoder and caption decoder form the vision module; the rest is
    /// the language module.
    pub fn is_vision(self) -> bool {
        matches!(self, Component::ImageEncoder | Component::CaptionDecoder)
    }

    pub fn of(name: &str) -> Option<Component> {
        let head = name.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.prefix() == head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Image,
    Caption,
    Knowledge,
    Question,
}

/// A `length × width` activation block tagged with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub source: FeatureSource,
    pub block: Array2<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.block.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.block.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.block.ncols()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

type Layout = Vec<(String, (usize, usize), Init)>;

fn linear(out: &mut Layout, p: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{p}.weight"), (fan_in, fan_out), Init::Normal));
    out.push((format!("{p}.bias"), (1, fan_out), Init::Zeros));
}

fn attention(out: &mut Layout, p: &str, d: usize) {
    for proj in ["query", "key", "value", "output"] {
        linear(out, &format!("{p}.{proj}"), d, d);
    }
}

fn norm(out: &mut Layout, p: &str, d: usize) {
    out.push((format!("{p}.gamma"), (1, d), Init::Ones));
    out.push((format!("{p}.beta"), (1, d), Init::Zeros));
}

/// Name, shape and initializer of every parameter for a config.
fn layout(c: &ModelConfig) -> Layout {
    let d = c.width;
    let mut out = Vec::new();

    let img = Component::ImageEncoder.prefix();
    linear(&mut out, &format!("{img}.patch_embed"), c.patch_dim(), d);
    out.push((format!("{img}.cls_token"), (1, d), Init::Normal));
    out.push((format!("{img}.pos_embed"), (c.image_tokens(), d), Init::Normal));
    for b in 0..c.image_blocks {
        let p = format!("{img}.blocks.{b}");
        attention(&mut out, &format!("{p}.self_attn"), d);
        norm(&mut out, &format!("{p}.norm1"), d);
        linear(&mut out, &format!("{p}.ffn.fc1"), d, c.ffn_width);
        linear(&mut out, &format!("{p}.ffn.fc2"), c.ffn_width, d);
        norm(&mut out, &format!("{p}.norm2"), d);
    }

    for (comp, blocks, max_len) in [
        (Component::CaptionDecoder, c.caption_blocks, c.max_caption_len),
        (Component::TextEncoder, c.text_blocks, c.max_knowledge_len),
        (Component::QuestionDecoder, c.question_blocks, c.max_question_len),
    ] {
        let pre = comp.prefix();
        out.push((format!("{pre}.token_embed"), (c.vocab_size, d), Init::Normal));
        out.push((format!("{pre}.pos_embed"), (max_len, d), Init::Normal));
        if comp != Component::TextEncoder {
            out.push((format!("{pre}.output_bias"), (1, c.vocab_size), Init::Zeros));
        }
        for b in 0..blocks {
            let p = format!("{pre}.blocks.{b}");
            attention(&mut out, &format!("{p}.self_attn"), d);
            norm(&mut out, &format!("{p}.norm1"), d);
            attention(&mut out, &format!("{p}.cross_attn"), d);
            norm(&mut out, &format!("{p}.norm2"), d);
            linear(&mut out, &format!("{p}.ffn.fc1"), d, c.ffn_width);
            linear(&mut out, &format!("{p}.ffn.fc2"), c.ffn_width, d);
            norm(&mut out, &format!("{p}.norm3"), d);
        }
    }
    out
}

/// Expected parameter shapes for a config.
pub fn parameter_shapes(config: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Everything produced by one image + knowledge inference pass.
#[derive(Debug, Clone)]
pub struct Generation {
    pub caption: TokenSequence,
    pub question: TokenSequence,
    pub image_features: (usize, usize),
    pub caption_features: (usize, usize),
    pub knowledge_features: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Random initialization: truncated normal (std 0.02) weights and
    /// embeddings, zero biases, unit layer-norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, (r, c), init) in layout(&config) {
            let value = match init {
                Init::Normal => truncated_normal(&mut rng, r, c, INIT_STD),
                Init::Zeros => Array2::zeros((r, c)),
                Init::Ones => Array2::ones((r, c)),
            };
            params.insert(name, value);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        for (name, value) in params.iter() {
            match expected.get(name) {
                None => return Err(Error::Schema(format!("unexpected parameter `{name}`"))),
                Some(&shape) if shape != value.dim() => {
                    return Err(Error::Schema(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        value.dim()
                    )))
                }
                _ => {}
            }
        }
        if let Some(missing) = expected.keys().find(|n| params.get(n).is_none()) {
            return Err(Error::Schema(format!("missing parameter `{missing}`")));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Copies every parameter of the given components from `other`.
    pub fn copy_components(&mut self, other: &Model, components: &[Component]) -> Result<()> {
        if other.config != self.config {
            return Err(Error::Schema("cannot mix parameters across model configs".into()));
        }
        for (name, value) in self.params.iter_mut() {
            if Component::of(name).is_some_and(|c| components.contains(&c)) {
                value.assign(other.params.get(name).expect("same layout"));
            }
        }
        Ok(())
    }

    fn patches(&self, image: &Image) -> Result<Array2<f64>> {
        let c = &self.config;
        let (h, w, ch) = image.dim();
        if h != c.image_size || w != c.image_size || ch != 3 {
            return Err(Error::Shape(format!(
                "image {h}x{w}x{ch}, model expects {0}x{0}x3",
                c.image_size
            )));
        }
        let p = c.patch_size;
        let side = c.image_size / p;
        let mut out = Array2::zeros((c.num_patches(), c.patch_dim()));
        for py in 0..side {
            for px in 0..side {
                let patch = image.slice(s![py * p..(py + 1) * p, px * p..(px + 1) * p, ..]);
                let mut row = out.row_mut(py * side + px);
                for (dst, src) in row.iter_mut().zip(patch.iter()) {
                    *dst = *src;
                }
            }
        }
        Ok(out)
    }

    /// f_I: patch embedding, class token, positions, bidirectional blocks.
    pub fn image_features(&self, g: &mut Graph, image: &Image) -> Result<NodeId> {
        let pre = Component::ImageEncoder.prefix();
        let patches = g.input(self.patches(image)?);
        let w = g.param(&self.params, &format!("{pre}.patch_embed.weight"))?;
        let b = g.param(&self.params, &format!("{pre}.patch_embed.bias"))?;
        let proj = g.matmul(patches, w)?;
        let proj = g.add_row(proj, b)?;
        let cls = g.param(&self.params, &format!("{pre}.cls_token"))?;
        let tokens = g.concat_rows(&[cls, proj])?;
        let pos = g.param(&self.params, &format!("{pre}.pos_embed"))?;
        let mut x = g.add(tokens, pos)?;
        let none = AttentionMask::none();
        for i in 0..self.config.image_blocks {
            let p = format!("{pre}.blocks.{i}");
            let sa = multi_head_attention(g, &self.params, &format!("{p}.self_attn"), x, x, &none, self.config.heads)?;
            x = add_norm(g, &self.params, &format!("{p}.norm1"), x, sa)?;
            let ff = feed_forward(g, &self.params, &format!("{p}.ffn"), x)?;
            x = add_norm(g, &self.params, &format!("{p}.norm2"), x, ff)?;
        }
        Ok(x)
    }

    /// Token + position embedding followed by self-attention, cross-attention
    /// into `memory` and a feed-forward sublayer per block.
    fn text_stack(
        &self,
        g: &mut Graph,
        comp: Component,
        ids: &[u32],
        memory: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let (blocks, max_len) = match comp {
            Component::CaptionDecoder => (self.config.caption_blocks, self.config.max_caption_len),
            Component::TextEncoder => (self.config.text_blocks, self.config.max_knowledge_len),
            Component::QuestionDecoder => (self.config.question_blocks, self.config.max_question_len),
            Component::ImageEncoder => unreachable!("image encoder has no text stack"),
        };
        if ids.is_empty() {
            return Err(Error::Shape(format!("empty token sequence for {}", comp.prefix())));
        }
        if ids.len() > max_len {
            return Err(Error::Shape(format!(
                "{} tokens exceed {} maximum of {max_len}",
                ids.len(),
                comp.prefix()
            )));
        }
        if g.value(memory).ncols() != self.config.width {
            return Err(Error::Shape(format!(
                "memory width {} != model width {}",
                g.value(memory).ncols(),
                self.config.width
            )));
        }
        let pre = comp.prefix();
        let table = g.param(&self.params, &format!("{pre}.token_embed"))?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather(table, &idx)?;
        let pos_table = g.param(&self.params, &format!("{pre}.pos_embed"))?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        let self_mask = if causal { AttentionMask::causal() } else { AttentionMask::none() };
        let cross_mask = AttentionMask::none();
        let heads = self.config.heads;
        for i in 0..blocks {
            let p = format!("{pre}.blocks.{i}");
            let sa = multi_head_attention(g, &self.params, &format!("{p}.self_attn"), x, x, &self_mask, heads)?;
            x = add_norm(g, &self.params, &format!("{p}.norm1"), x, sa)?;
            let ca = multi_head_attention(g, &self.params, &format!("{p}.cross_attn"), x, memory, &cross_mask, heads)?;
            x = add_norm(g, &self.params, &format!("{p}.norm2"), x, ca)?;
            let ff = feed_forward(g, &self.params, &format!("{p}.ffn"), x)?;
            x = add_norm(g, &self.params, &format!("{p}.norm3"), x, ff)?;
        }
        Ok(x)
    }

    /// Tied output projection: `hidden · Eᵀ + b`.
    fn project(&self, g: &mut Graph, comp: Component, hidden: NodeId) -> Result<NodeId> {
        let pre = comp.prefix();
        let table = g.param(&self.params, &format!("{pre}.token_embed"))?;
        let bias = g.param(&self.params, &format!("{pre}.output_bias"))?;
        let logits = g.matmul_t(hidden, table)?;
        g.add_row(logits, bias)
    }

    /// f_C only, without the vocabulary projection.
    pub fn caption_hidden(&self, g: &mut Graph, f_i: NodeId, ids: &[u32]) -> Result<NodeId> {
        self.text_stack(g, Component::CaptionDecoder, ids, f_i, true)
    }

    /// Caption decoder over `ids` (teacher forcing). Returns (f_C, logits).
    pub fn caption_decoder(&self, g: &mut Graph, f_i: NodeId, ids: &[u32]) -> Result<(NodeId, NodeId)> {
        let hidden = self.text_stack(g, Component::CaptionDecoder, ids, f_i, true)?;
        let logits = self.project(g, Component::CaptionDecoder, hidden)?;
        Ok((hidden, logits))
    }

    /// f_T: bidirectional encoding of the knowledge sentence grounded in f_I.
    pub fn text_encoder(&self, g: &mut Graph, ids: &[u32], f_i: NodeId) -> Result<NodeId> {
        if !ids.iter().any(|&id| id != BOS && id != EOS) {
            return Err(Error::KnowledgeRequired);
        }
        self.text_stack(g, Component::TextEncoder, ids, f_i, false)
    }

    /// Question decoder attending over `[f_C; f_T]`. Returns (f_Q, logits).
    pub fn question_decoder(
        &self,
        g: &mut Graph,
        f_c: NodeId,
        f_t: NodeId,
        ids: &[u32],
    ) -> Result<(NodeId, NodeId)> {
        let (wc, wt) = (g.value(f_c).ncols(), g.value(f_t).ncols());
        if wc != wt {
            return Err(Error::Shape(format!("f_C width {wc} != f_T width {wt}")));
        }
        let fused = g.concat_rows(&[f_c, f_t])?;
        let hidden = self.text_stack(g, Component::QuestionDecoder, ids, fused, true)?;
        let logits = self.project(g, Component::QuestionDecoder, hidden)?;
        Ok((hidden, logits))
    }

    pub fn encode_image(&self, image: &Image) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let f = self.image_features(&mut g, image)?;
        Ok(FeatureSequence {
            source: FeatureSource::Image,
            block: g.value(f).clone(),
        })
    }

    fn expect_source(f: &FeatureSequence, source: FeatureSource) -> Result<()> {
        if f.source != source {
            return Err(Error::Shape(format!("expected {source:?} features, got {:?}", f.source)));
        }
        Ok(())
    }

    /// Teacher-forced caption pass over the non-PAD tokens. Row n of the
    /// logits scores the token at position n + 1.
    pub fn caption_forward(
        &self,
        f_i: &FeatureSequence,
        caption: &TokenSequence,
    ) -> Result<(FeatureSequence, Array2<f64>)> {
        Self::expect_source(f_i, FeatureSource::Image)?;
        let mut g = Graph::new();
        let mem = g.input(f_i.block.clone());
        let (h, l) = self.caption_decoder(&mut g, mem, caption.body())?;
        Ok((
            FeatureSequence {
                source: FeatureSource::Caption,
                block: g.value(h).clone(),
            },
            g.value(l).clone(),
        ))
    }

    pub fn generate_caption(
        &self,
        f_i: &FeatureSequence,
        params: &DecodingParams,
    ) -> Result<(TokenSequence, FeatureSequence)> {
        Self::expect_source(f_i, FeatureSource::Image)?;
        let max_len = params.max_len.unwrap_or(self.config.max_caption_len).min(self.config.max_caption_len);
        let ids = decoding::decode(params, max_len, |prefix| {
            let mut g = Graph::new();
            let mem = g.input(f_i.block.clone());
            let (_, logits) = self.caption_decoder(&mut g, mem, prefix)?;
            Ok(g.value(logits).row(prefix.len() - 1).to_vec())
        })?;
        let mut g = Graph::new();
        let mem = g.input(f_i.block.clone());
        let (hidden, _) = self.caption_decoder(&mut g, mem, &ids)?;
        let f_c = FeatureSequence {
            source: FeatureSource::Caption,
            block: g.value(hidden).clone(),
        };
        Ok((TokenSequence::new(ids, self.config.vocab_size)?, f_c))
    }

    pub fn encode_knowledge(&self, knowledge: &TokenSequence, f_i: &FeatureSequence) -> Result<FeatureSequence> {
        Self::expect_source(f_i, FeatureSource::Image)?;
        let mut g = Graph::new();
        let mem = g.input(f_i.block.clone());
        let f = self.text_encoder(&mut g, knowledge.body(), mem)?;
        Ok(FeatureSequence {
            source: FeatureSource::Knowledge,
            block: g.value(f).clone(),
        })
    }

    /// Teacher-forced question logits given caption and knowledge features.
    pub fn question_forward(
        &self,
        f_c: &FeatureSequence,
        f_t: &FeatureSequence,
        question: &TokenSequence,
    ) -> Result<Array2<f64>> {
        Self::expect_source(f_c, FeatureSource::Caption)?;
        Self::expect_source(f_t, FeatureSource::Knowledge)?;
        let mut g = Graph::new();
        let c = g.input(f_c.block.clone());
        let t = g.input(f_t.block.clone());
        let (_, logits) = self.question_decoder(&mut g, c, t, question.body())?;
        Ok(g.value(logits).clone())
    }

    pub fn generate_question(
        &self,
        f_c: &FeatureSequence,
        f_t: &FeatureSequence,
        params: &DecodingParams,
    ) -> Result<TokenSequence> {
        Self::expect_source(f_c, FeatureSource::Caption)?;
        Self::expect_source(f_t, FeatureSource::Knowledge)?;
        let max_len = params.max_len.unwrap_or(self.config.max_question_len).min(self.config.max_question_len);
        let ids = decoding::decode(params, max_len, |prefix| {
            let mut g = Graph::new();
            let c = g.input(f_c.block.clone());
            let t = g.input(f_t.block.clone());
            let (_, logits) = self.question_decoder(&mut g, c, t, prefix)?;
            Ok(g.value(logits).row(prefix.len() - 1).to_vec())
        })?;
        TokenSequence::new(ids, self.config.vocab_size)
    }

    /// Image + knowledge sentence → generated caption and question. The
    /// question decoder sees the features of the generated caption.
    pub fn generate(
        &self,
        image: &Image,
        knowledge: &TokenSequence,
        params: &DecodingParams,
    ) -> Result<Generation> {
        let f_i = self.encode_image(image)?;
        let (caption, f_c) = self.generate_caption(&f_i, params)?;
        let f_t = self.encode_knowledge(knowledge, &f_i)?;
        let question = self.generate_question(&f_c, &f_t, params)?;
        Ok(Generation {
            caption,
            question,
            image_features: f_i.block.dim(),
            caption_features: f_c.block.dim(),
            knowledge_features: f_t.block.dim(),
        })
    }
}
