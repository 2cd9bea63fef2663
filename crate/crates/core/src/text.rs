//! Whitespace tokenizer, vocabulary with reserved and sentinel tokens, and the
//! task prompt registry.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::task::TaskKind;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SENTINEL_BASE: TokenId = 4;
pub const DEFAULT_SENTINELS: usize = 32;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Literal form of sentinel `i`.
pub fn sentinel_token(i: usize) -> String {
    format!("<extra_{i}>")
}

/// Index of a sentinel literal such as `<extra_3>`.
pub fn parse_sentinel(token: &str) -> Option<usize> {
    let digits = token.strip_prefix("<extra_")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Token ↔ id map. Ids are dense; `0..4+K` are reserved for PAD, BOS, EOS,
/// UNK and the K sentinels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    sentinels: usize,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved(sentinels: usize) -> Self {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        tokens.extend((0..sentinels).map(sentinel_token));
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            ids,
            sentinels,
        }
    }

    /// Keeps the `max_size - reserved` most frequent whitespace tokens, ties
    /// broken lexicographically.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::build_with_sentinels(corpus, max_size, DEFAULT_SENTINELS)
    }

    pub fn build_with_sentinels<'a, I>(corpus: I, max_size: usize, sentinels: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Self::reserved(sentinels);
        let reserved = vocab.len();
        if max_size <= reserved {
            return Err(Error::Value(format!(
                "vocab max_size {max_size} leaves no room beyond {reserved} reserved tokens"
            )));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for tok in text.split_whitespace() {
                if !vocab.ids.contains_key(tok) {
                    *freq.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (tok, _) in ranked.into_iter().take(max_size - reserved) {
            vocab.ids.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sentinels(&self) -> usize {
        self.sentinels
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sentinel(&self, i: usize) -> Option<TokenId> {
        (i < self.sentinels).then_some(SENTINEL_BASE + i)
    }

    /// Whitespace split; unknown tokens become UNK. No BOS/EOS framing.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|t| self.ids.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.tokens.get(id).ok_or_else(|| {
                Error::Index(format!("token id {id} out of range for vocab of {}", self.len()))
            })?;
            if !matches!(id, PAD | BOS | EOS) {
                parts.push(tok.as_str());
            }
        }
        Ok(parts.join(" "))
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let sentinels = tokens
            .iter()
            .skip(SENTINEL_BASE)
            .take_while(|t| parse_sentinel(t).is_some())
            .count();
        let expected = Self::reserved(sentinels);
        if tokens.len() < expected.len() || tokens[..expected.len()] != expected.tokens[..] {
            return Err(Error::Integrity("vocab file does not start with the reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.split_whitespace().count() != 1 || ids.insert(t.clone(), i).is_some() {
                return Err(Error::Integrity(format!("vocab line {} holds an invalid or duplicate token", i + 1)));
            }
        }
        Ok(Self {
            tokens,
            ids,
            sentinels,
        })
    }
}

/// Task → prompt text. Prompts keep their trailing space so that
/// `prompt + input` is the encoder text.
#[derive(Clone, Debug, Default)]
pub struct PromptRegistry {
    custom: HashMap<String, String>,
}

impl PromptRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the prompt of a [`TaskKind::Custom`] task.
    pub fn register(&mut self, name: impl Into<String>, prompt: impl Into<String>) {
        self.custom.insert(name.into(), prompt.into());
    }

    pub fn prompt_for(&self, task: &TaskKind) -> Result<String> {
        let p = match task {
            TaskKind::ImageCaptioning => "Generate the caption for this image: ",
            TaskKind::VideoCaptioning => "Generate the caption for this video: ",
            TaskKind::VisionQA => "Answer the following question based on the image: ",
            TaskKind::VisionTextReconstruction => "Reconstruct the following text based on the image: ",
            TaskKind::SpeechTranscription => "Transcribe the speech utterance to text: ",
            TaskKind::SpeechSentiment => "Predict the sentiment of this segment: ",
            TaskKind::SpeechEmotion => "Predict the emotion of this segment: ",
            TaskKind::SpeechTextReconstruction => "Reconstruct the following text based on the speech: ",
            TaskKind::LanguageReconstruction => "Reconstruct masked spans in the following text: ",
            TaskKind::MultimodalSummarization => "Summarize this article with the images: ",
            TaskKind::DialogueGeneration { style } => {
                return Ok(format!("Generate the response for the dialogue in {style} style: "))
            }
            TaskKind::ClipSentiment => "Predict the sentiment of this clip: ",
            TaskKind::Custom(name) => {
                return self
                    .custom
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Lookup(format!("no prompt registered for task `{name}`")))
            }
        };
        Ok(p.to_string())
    }
}
