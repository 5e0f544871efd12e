//! Annotated corpora: labelled texts with human rationale spans, a
//! word-level tokenizer, and deterministic synthetic corpus generators.
//!
//! All span arithmetic is in character offsets (Unicode scalar values),
//! half-open `[start, end)`. Token strings are lowercased; detokenizing an
//! offset range against the source text reproduces the covered substring.

mod synth;

pub use synth::{gen_synthetic, Task};

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved token for out-of-vocabulary words and for masking. The
/// tokenizer treats the literal string atomically so masked texts keep a
/// one-token-per-mask shape.
pub const UNK_TOKEN: &str = "<unk>";
/// Separator appended after the text; the classifier reads its logits at
/// this position.
pub const SEP_TOKEN: &str = "<sep>";

pub const UNK_ID: u32 = 0;
pub const SEP_ID: u32 = 1;

/// Ordered, unique set of class labels. Order is significant: argmax ties
/// break toward the earlier label, and every label doubles as a single
/// reserved vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("label set must not be empty".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(Error::Config(format!("label {i} is blank")));
            }
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// The vocabulary token a label is predicted as. Labels are atomic
    /// vocabulary entries (even multi-word ones), so this is the label
    /// string itself.
    pub fn token_of(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|s| s.as_str())
    }
}

/// One corpus record: raw text, gold label, and human rationale spans in
/// character offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedText {
    pub id: String,
    pub text: String,
    pub label: String,
    pub spans: Vec<(usize, usize)>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl AnnotatedText {
    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                msg,
            })
        };
        if labels.index_of(&self.label).is_none() {
            return fail(format!("unknown label {:?}", self.label));
        }
        let n_chars = self.text.chars().count();
        let mut sorted = self.spans.clone();
        sorted.sort_unstable();
        for &(s, e) in &sorted {
            if s >= e {
                return fail(format!("span ({s}, {e}) is empty or inverted"));
            }
            if e > n_chars {
                return fail(format!(
                    "span ({s}, {e}) exceeds text length {n_chars}"
                ));
            }
        }
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return fail(format!(
                    "spans ({}, {}) and ({}, {}) overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ));
            }
        }
        Ok(())
    }
}

/// Tokenized text. `tokens` are lowercased surface forms, `offsets` are
/// half-open character ranges into `text`, `ids` are vocabulary ids with
/// unknown words mapped to [`UNK_ID`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub text: String,
    pub tokens: Vec<String>,
    pub offsets: Vec<(usize, usize)>,
    pub ids: Vec<u32>,
    pub vocab_id: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits text into lowercased word and punctuation tokens with character
/// offsets. Alphanumeric runs form words; every other non-whitespace
/// character is its own token. The literal `<unk>` is kept atomic.
pub fn split_tokens(text: &str) -> Vec<(String, (usize, usize))> {
    let chars: Vec<char> = text.chars().collect();
    let unk: Vec<char> = UNK_TOKEN.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if chars[i..].starts_with(&unk[..]) {
            out.push((UNK_TOKEN.to_string(), (i, i + unk.len())));
            i += unk.len();
            continue;
        }
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            out.push((word.to_lowercase(), (start, i)));
        } else {
            out.push((c.to_lowercase().to_string(), (i, i + 1)));
            i += 1;
        }
    }
    out
}

/// Token-to-id mapping. Ids 0 and 1 are reserved for `<unk>` and `<sep>`;
/// label tokens follow, then corpus words in sorted order. The `id` field
/// fingerprints the entry list so sequences can be checked against the
/// model that will consume them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocab {
    entries: Vec<String>,
    id: String,
    #[allow(clippy::type_complexity)]
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabData {
    entries: Vec<String>,
}

impl From<VocabData> for Vocab {
    fn from(d: VocabData) -> Self {
        Vocab::from_entries(d.entries)
    }
}

impl From<Vocab> for VocabData {
    fn from(v: Vocab) -> Self {
        VocabData { entries: v.entries }
    }
}

impl Vocab {
    fn from_entries(entries: Vec<String>) -> Self {
        let mut hasher = Sha256::new();
        for e in &entries {
            hasher.update(e.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let id = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i as u32))
            .collect();
        Vocab { entries, id, index }
    }

    /// Builds the vocabulary for a corpus: reserved tokens, label tokens,
    /// then every distinct corpus token in lexicographic order.
    pub fn build(corpus: &[AnnotatedText], labels: &LabelSet) -> Self {
        let mut entries = vec![UNK_TOKEN.to_string(), SEP_TOKEN.to_string()];
        for l in labels.iter() {
            entries.push(l.to_string());
        }
        let mut words: Vec<String> = corpus
            .iter()
            .flat_map(|t| split_tokens(&t.text))
            .map(|(tok, _)| tok)
            .collect();
        words.sort_unstable();
        words.dedup();
        for w in words {
            if !entries.contains(&w) {
                entries.push(w);
            }
        }
        Vocab::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let parts = split_tokens(text);
        let mut tokens = Vec::with_capacity(parts.len());
        let mut offsets = Vec::with_capacity(parts.len());
        let mut ids = Vec::with_capacity(parts.len());
        for (tok, range) in parts {
            ids.push(self.token_id(&tok));
            tokens.push(tok);
            offsets.push(range);
        }
        TokenSequence {
            text: text.to_string(),
            tokens,
            offsets,
            ids,
            vocab_id: self.id.clone(),
        }
    }
}

/// Loads a JSONL corpus, validating every record against the label set.
/// Errors carry 1-based line numbers.
pub fn load_jsonl(path: &Path, labels: &LabelSet) -> Result<Vec<AnnotatedText>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotatedText =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        record.validate(labels).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes a corpus as JSONL, one compact object per line. Field order and
/// meta-key order are deterministic, so saving is reproducible
/// byte-for-byte.
pub fn save_jsonl(path: &Path, corpus: &[AnnotatedText]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in corpus {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
