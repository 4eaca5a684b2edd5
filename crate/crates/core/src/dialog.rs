//! Dialog preprocessing: turn concatenation, vocabulary, tokenization.
//!
//! A multi-turn dialog is flattened into a single conditioning string by one
//! of four concatenation strategies, then tokenized against a deterministic
//! word-level vocabulary and truncated to the 77-token budget.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on conditioning length, matching the frozen text encoder slot.
pub const MAX_TOKENS: usize = 77;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const HASH_ID: u32 = 2;
pub const PER1_ID: u32 = 3;
pub const PER2_ID: u32 = 4;
const RESERVED: [&str; 5] = ["<pad>", "<unk>", "#", "[PER1]", "[PER2]"];

/// One dialog turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: u8,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: u8, text: impl Into<String>) -> Result<Self> {
        let turn = Turn {
            speaker,
            text: text.into(),
        };
        turn.validate()?;
        Ok(turn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.speaker > 1 {
            return Err(Error::Preprocessing(format!(
                "speaker id must be 0 or 1, got {}",
                self.speaker
            )));
        }
        if self.text.trim().is_empty() {
            return Err(Error::Preprocessing("empty turn text".into()));
        }
        Ok(())
    }
}

/// A dialog paired with its target image: exactly the turns that precede
/// the image in the source conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub turns: Vec<Turn>,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Dialog {
    pub fn new(turns: Vec<Turn>, image_ref: impl Into<String>) -> Result<Self> {
        let d = Dialog {
            turns,
            image_ref: image_ref.into(),
            category: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Preprocessing("dialog has no turns".into()));
        }
        for t in &self.turns {
            t.validate()?;
        }
        Ok(())
    }
}

/// How dialog turns are merged into one conditioning string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatStrategy {
    /// `#` before each turn, no other separator.
    HashPrefix,
    /// Turns joined with single spaces.
    SpaceJoin,
    /// `[PER1]` / `[PER2]` speaker tokens before each turn.
    SpeakerToken,
    /// `A:` / `B:` speaker letters before each turn.
    SpeakerLetter,
}

impl ConcatStrategy {
    pub const ALL: [ConcatStrategy; 4] = [
        ConcatStrategy::HashPrefix,
        ConcatStrategy::SpaceJoin,
        ConcatStrategy::SpeakerToken,
        ConcatStrategy::SpeakerLetter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConcatStrategy::HashPrefix => "hash_prefix",
            ConcatStrategy::SpaceJoin => "space_join",
            ConcatStrategy::SpeakerToken => "speaker_token",
            ConcatStrategy::SpeakerLetter => "speaker_letter",
        }
    }
}

impl fmt::Display for ConcatStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ConcatStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash_prefix" => Ok(ConcatStrategy::HashPrefix),
            "space_join" => Ok(ConcatStrategy::SpaceJoin),
            "speaker_token" => Ok(ConcatStrategy::SpeakerToken),
            "speaker_letter" => Ok(ConcatStrategy::SpeakerLetter),
            other => Err(Error::Preprocessing(format!(
                "unknown concat strategy '{other}'"
            ))),
        }
    }
}

/// Merge the turns of a dialog into the conditioning text.
pub fn concat_dialog(dialog: &Dialog, strategy: ConcatStrategy) -> Result<String> {
    dialog.validate()?;
    let out = match strategy {
        ConcatStrategy::HashPrefix => dialog
            .turns
            .iter()
            .map(|t| format!("#{}", t.text))
            .collect::<Vec<_>>()
            .join(""),
        ConcatStrategy::SpaceJoin => dialog
            .turns
            .iter()
            .map(|t| t.text.clone())
            .collect::<Vec<_>>()
            .join(" "),
        ConcatStrategy::SpeakerToken => dialog
            .turns
            .iter()
            .map(|t| {
                let tok = if t.speaker == 0 { "[PER1]" } else { "[PER2]" };
                format!("{tok} {}", t.text)
            })
            .collect::<Vec<_>>()
            .join(" "),
        ConcatStrategy::SpeakerLetter => dialog
            .turns
            .iter()
            .map(|t| {
                let tok = if t.speaker == 0 { "A:" } else { "B:" };
                format!("{tok} {}", t.text)
            })
            .collect::<Vec<_>>()
            .join(" "),
    };
    Ok(out)
}

/// Which end of an over-long token sequence survives truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrTail {
    Head,
    Tail,
}

impl std::str::FromStr for HeadOrTail {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(HeadOrTail::Head),
            "tail" => Ok(HeadOrTail::Tail),
            other => Err(Error::Preprocessing(format!("unknown keep mode '{other}'"))),
        }
    }
}

/// Raw token stream: special symbols kept verbatim, words lowercased,
/// punctuation and whitespace acting as separators.
pub fn scan_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix("[PER1]") {
            out.push("[PER1]".to_string());
            rest = tail;
            continue;
        }
        if let Some(tail) = rest.strip_prefix("[PER2]") {
            out.push("[PER2]".to_string());
            rest = tail;
            continue;
        }
        let c = rest.chars().next().unwrap();
        if c == '#' {
            out.push("#".to_string());
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c.is_alphanumeric() {
            let end = rest
                .char_indices()
                .find(|(_, ch)| !ch.is_alphanumeric())
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            out.push(rest[..end].to_lowercase());
            rest = &rest[end..];
            continue;
        }
        rest = &rest[c.len_utf8()..];
    }
    out
}

/// Word-level vocabulary: reserved ids 0..=4, then corpus words by
/// descending frequency (ties broken lexicographically).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = content.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::Data(format!(
                "vocabulary file {} too short ({} lines)",
                path.display(),
                tokens.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::Data(format!(
                    "vocabulary line {i} is '{}', expected reserved token '{r}'",
                    tokens[i]
                )));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Build the vocabulary from a corpus of (already concatenated) strings.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Preprocessing("empty corpus".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in corpus {
        for tok in scan_tokens(text.as_ref()) {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(String, u64)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().map(|(w, _)| w));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Token id sequence after truncation; never empty, never longer than
/// [`MAX_TOKENS`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TokenizeOpts {
    /// Map `[PER1]`/`[PER2]` to UNK, mimicking a vocabulary that lacks the
    /// speaker tokens (the ablation toggle).
    pub speaker_tokens_oov: bool,
}

/// Tokenize and enforce the token budget.
pub fn tokenize_truncate(text: &str, vocab: &Vocabulary, keep: HeadOrTail) -> Result<TokenSeq> {
    tokenize_truncate_opts(text, vocab, keep, TokenizeOpts::default())
}

pub fn tokenize_truncate_opts(
    text: &str,
    vocab: &Vocabulary,
    keep: HeadOrTail,
    opts: TokenizeOpts,
) -> Result<TokenSeq> {
    if text.is_empty() {
        return Err(Error::Preprocessing("empty text".into()));
    }
    let raw = scan_tokens(text);
    if raw.is_empty() {
        return Err(Error::Preprocessing(format!(
            "text tokenizes to zero tokens: {text:?}"
        )));
    }
    let mut ids: Vec<u32> = raw
        .iter()
        .map(|tok| {
            if opts.speaker_tokens_oov && (tok == "[PER1]" || tok == "[PER2]") {
                return UNK_ID;
            }
            vocab.id_of(tok).unwrap_or(UNK_ID)
        })
        .collect();
    if ids.len() > MAX_TOKENS {
        ids = match keep {
            HeadOrTail::Head => ids[..MAX_TOKENS].to_vec(),
            HeadOrTail::Tail => ids[ids.len() - MAX_TOKENS..].to_vec(),
        };
    }
    Ok(TokenSeq { ids })
}
