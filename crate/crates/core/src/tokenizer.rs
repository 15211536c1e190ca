//! Whole-word tokenizer and vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::WsdCorpus;
use crate::lexicon::GlossLexicon;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid vocabulary file: {0}")]
    Format(String),
}

/// Reserved tokens, with ids equal to their discriminant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Agg = 0,
    Sep = 1,
    Pad = 2,
    Unk = 3,
    Mask = 4,
    TgtBegin = 5,
    TgtEnd = 6,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Agg,
        Special::Sep,
        Special::Pad,
        Special::Unk,
        Special::Mask,
        Special::TgtBegin,
        Special::TgtEnd,
    ];
    pub const COUNT: u32 = 7;

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn is_special(id: u32) -> bool {
        id < Self::COUNT
    }

    pub fn text(self) -> &'static str {
        match self {
            Special::Agg => "[AGG]",
            Special::Sep => "[SEP]",
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
            Special::Mask => "[MASK]",
            Special::TgtBegin => "[TGT]",
            Special::TgtEnd => "[/TGT]",
        }
    }

    fn role(self) -> &'static str {
        match self {
            Special::Agg => "AGG",
            Special::Sep => "SEP",
            Special::Pad => "PAD",
            Special::Unk => "UNK",
            Special::Mask => "MASK",
            Special::TgtBegin => "TGT_BEGIN",
            Special::TgtEnd => "TGT_END",
        }
    }
}

pub const AGG: u32 = Special::Agg as u32;
pub const SEP: u32 = Special::Sep as u32;
pub const PAD: u32 = Special::Pad as u32;
pub const UNK: u32 = Special::Unk as u32;
pub const MASK: u32 = Special::Mask as u32;
pub const TGT_BEGIN: u32 = Special::TgtBegin as u32;
pub const TGT_END: u32 = Special::TgtEnd as u32;

/// Token ids plus segment ids (0 = context segment, 1 = gloss segment).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, String>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// A vocabulary holding the reserved tokens followed by `tokens` in order.
    /// Duplicates and special strings in `tokens` are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for s in Special::ALL {
            vocab.push(s.text().to_string());
        }
        for t in tokens {
            let t = t.into();
            if !vocab.token_to_id.contains_key(&t) {
                vocab.push(t);
            }
        }
        vocab
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        encode(tokens, self)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: Special::ALL
                .iter()
                .map(|s| (s.role().to_string(), s.text().to_string()))
                .collect(),
            tokens: self.id_to_token.clone(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.tokens.len() < Special::COUNT as usize {
            return Err(TokenizerError::Format("fewer tokens than reserved specials".into()));
        }
        for s in Special::ALL {
            let expected = s.text();
            if file.specials.get(s.role()).map(String::as_str) != Some(expected)
                || file.tokens[s.id() as usize] != expected
            {
                return Err(TokenizerError::Format(format!(
                    "special {} must be {expected:?} at id {}",
                    s.role(),
                    s.id()
                )));
            }
        }
        let vocab = Vocabulary::from_tokens(file.tokens[Special::COUNT as usize..].iter().cloned());
        if vocab.len() != file.tokens.len() {
            return Err(TokenizerError::Format("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json()).map_err(|e| TokenizerError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| TokenizerError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Vocabulary::from_json(&text)
    }
}

/// Maps tokens to ids, with out-of-vocabulary tokens mapped to `[UNK]`.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK))
        .collect()
}

pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>, TokenizerError> {
    ids.iter()
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_string)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    size: vocab.len(),
                })
        })
        .collect()
}

/// Text a lemma contributes to the gloss segment.
pub fn lemma_text(lemma: &str) -> String {
    lemma.replace('_', " ")
}

/// Builds a vocabulary from frequency counts over raw texts. Tokens with
/// count `>= min_freq` are kept, most frequent first with ties in
/// lexicographic order, truncated to `max_size` non-special tokens.
pub fn build_vocab_from_texts<'a, I>(texts: I, min_freq: usize, max_size: Option<usize>) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let min_freq = min_freq.max(1);
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(max) = max_size {
        ranked.truncate(max);
    }
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Vocabulary over corpus surface forms plus the lemmas and glosses of every
/// candidate sense of the corpora's instances (each sense counted once).
pub fn build_vocab(
    corpora: &[&WsdCorpus],
    lexicon: &GlossLexicon,
    min_freq: usize,
    max_size: Option<usize>,
) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    let mut seen_senses = std::collections::HashSet::new();
    for corpus in corpora {
        for sentence in corpus.sentences() {
            for token in &sentence.tokens {
                texts.push(token.surface.clone());
            }
        }
        for inst in corpus.instances() {
            for sense in lexicon.candidate_senses(inst.lemma, inst.pos) {
                if seen_senses.insert(sense.sense_key.as_str()) {
                    texts.push(lemma_text(&sense.lemma));
                    texts.push(sense.gloss.clone());
                }
            }
        }
    }
    build_vocab_from_texts(texts.iter().map(String::as_str), min_freq, max_size)
}
