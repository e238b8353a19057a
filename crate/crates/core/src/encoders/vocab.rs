//! Word-level vocabulary and tokenizer.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_WORD: &str = "<pad>";
const UNK_WORD: &str = "<unk>";

/// Dense word → id map with reserved pad (0) and unknown (1) ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

/// Token ids of one prompt, right-padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// `true` at padded positions.
    pub pad_mask: Vec<bool>,
    /// set when the input had no words at all
    pub empty: bool,
    /// number of real tokens mapped to the unknown id
    pub unknown: usize,
}

impl Tokenized {
    /// Wrap raw ids (no unknown accounting), padding to `max_len`.
    pub fn from_ids(ids: &[usize], max_len: usize) -> Self {
        let real = ids.len().min(max_len);
        let mut out: Vec<usize> = ids[..real].to_vec();
        out.resize(max_len, PAD_ID);
        Self {
            ids: out,
            pad_mask: (0..max_len).map(|i| i >= real).collect(),
            empty: real == 0,
            unknown: ids[..real].iter().filter(|&&i| i == UNK_ID).count(),
        }
    }

    pub fn len_nonpad(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }

    /// More than half of the real tokens are unknown.
    pub fn mostly_unknown(&self) -> bool {
        let n = self.len_nonpad();
        n == 0 || 2 * self.unknown > n
    }
}

impl Vocabulary {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Self {
            words: vec![PAD_WORD.into(), UNK_WORD.into()],
            ids: BTreeMap::new(),
        };
        v.ids.insert(PAD_WORD.into(), PAD_ID);
        v.ids.insert(UNK_WORD.into(), UNK_ID);
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.ids.contains_key(&w) {
                v.ids.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lowercase, split on whitespace, map unknown words to [`UNK_ID`],
    /// truncate to `max_len` and right-pad with [`PAD_ID`].
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Tokenized> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .take(max_len)
            .collect();
        let empty = ids.is_empty();
        let unknown = ids.iter().filter(|&&i| i == UNK_ID).count();
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let pad_mask = (0..max_len).map(|i| i >= real).collect();
        Ok(Tokenized {
            ids,
            pad_mask,
            empty,
            unknown,
        })
    }

    /// One `word<TAB>id` line per entry, in id order.
    pub fn to_text(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{w}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Vocabulary(format!("line {}: expected word<TAB>id", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Vocabulary(format!("line {}: bad id {id:?}", n + 1)))?;
            entries.push((id, w.to_string()));
        }
        entries.sort();
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id != expect {
                return Err(Error::Vocabulary(format!("ids are not dense: missing {expect}")));
            }
        }
        if entries.len() < 2 || entries[PAD_ID].1 != PAD_WORD || entries[UNK_ID].1 != UNK_WORD {
            return Err(Error::Vocabulary("reserved ids 0/1 must be <pad>/<unk>".into()));
        }
        let words: Vec<String> = entries.into_iter().map(|(_, w)| w).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
