use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tokenizer::{DEFAULT_CAPTION_LEN, DEFAULT_KNOWLEDGE_LEN, DEFAULT_QUESTION_LEN};

/// Architecture hyperparameters shared by all four components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub image_blocks: usize,
    pub caption_blocks: usize,
    pub text_blocks: usize,
    pub question_blocks: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub max_knowledge_len: usize,
    pub max_question_len: usize,
}

const KEYS: [&str; 13] = [
    "image_size",
    "patch_size",
    "width",
    "heads",
    "ffn_width",
    "image_blocks",
    "caption_blocks",
    "text_blocks",
    "question_blocks",
    "vocab_size",
    "max_caption_len",
    "max_knowledge_len",
    "max_question_len",
];

impl ModelConfig {
    /// Desk-scale default: 64×64 images, 16-pixel patches, width 128.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            width: 128,
            heads: 4,
            ffn_width: 512,
            image_blocks: 2,
            caption_blocks: 2,
            text_blocks: 2,
            question_blocks: 2,
            vocab_size,
            max_caption_len: DEFAULT_CAPTION_LEN,
            max_knowledge_len: DEFAULT_KNOWLEDGE_LEN,
            max_question_len: DEFAULT_QUESTION_LEN,
        }
    }

    /// ViT-B sized widths at 384×384 input. Runs forward on CPU; not meant
    /// for training here.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            image_size: 384,
            patch_size: 16,
            width: 768,
            heads: 12,
            ffn_width: 3072,
            ..Self::toy(vocab_size)
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Rows of f_I: one per patch plus the class token.
    pub fn image_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        for (name, v) in [
            ("max_caption_len", self.max_caption_len),
            ("max_knowledge_len", self.max_knowledge_len),
            ("max_question_len", self.max_question_len),
        ] {
            if v < 3 {
                return Err(Error::Config(format!("{name} must be at least 3")));
            }
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must exceed the four special tokens".into()));
        }
        Ok(())
    }

    fn values(&self) -> [usize; 13] {
        [
            self.image_size,
            self.patch_size,
            self.width,
            self.heads,
            self.ffn_width,
            self.image_blocks,
            self.caption_blocks,
            self.text_blocks,
            self.question_blocks,
            self.vocab_size,
            self.max_caption_len,
            self.max_knowledge_len,
            self.max_question_len,
        ]
    }

    /// `key=value` lines in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(self.values()) {
            writeln!(s, "{k}={v}").expect("write to String");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut values: [Option<usize>; 13] = [None; 13];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("model config", format!("line {}: `{line}`", lineno + 1)))?;
            let idx = KEYS
                .iter()
                .position(|key| *key == k.trim())
                .ok_or_else(|| Error::format("model config", format!("unknown key `{}`", k.trim())))?;
            let parsed = v
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::format("model config", format!("{}: {e}", k.trim())))?;
            values[idx] = Some(parsed);
        }
        let get = |i: usize| {
            values[i].ok_or_else(|| Error::format("model config", format!("missing key `{}`", KEYS[i])))
        };
        let config = Self {
            image_size: get(0)?,
            patch_size: get(1)?,
            width: get(2)?,
            heads: get(3)?,
            ffn_width: get(4)?,
            image_blocks: get(5)?,
            caption_blocks: get(6)?,
            text_blocks: get(7)?,
            question_blocks: get(8)?,
            vocab_size: get(9)?,
            max_caption_len: get(10)?,
            max_knowledge_len: get(11)?,
            max_question_len: get(12)?,
        };
        config.validate()?;
        Ok(config)
    }
}
