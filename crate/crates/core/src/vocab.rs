//! Symbol to index maps with reserved special tokens.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabularyMap {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for VocabularyMap {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl VocabularyMap {
    pub fn specials_only() -> Self {
        let symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let index = symbols.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Self { symbols, index }
    }

    /// Most frequent symbols first, ties broken lexicographically; the four
    /// specials always occupy indices 0-3 and count toward `max_size`.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < SPECIALS.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least {}, got {max_size}",
                SPECIALS.len() + 1
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(s, _)| !SPECIALS.contains(s)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab = Self::specials_only();
        for (s, _) in ranked.into_iter().take(max_size - SPECIALS.len()) {
            vocab.insert(s);
        }
        Ok(vocab)
    }

    fn insert(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.symbols.push(s.to_string());
        self.index.insert(s.to_string(), self.symbols.len() - 1);
        self.symbols.len() - 1
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Maps tokens to indices (unknown symbols to `UNK`), optionally
    /// appending end-of-sentence.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], append_eos: bool) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.get(t.as_ref()).unwrap_or(UNK)).collect();
        if append_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Inverse of [`Self::encode`]: stops at end-of-sentence, drops padding
    /// and start tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.symbol(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    /// `symbol<TAB>index` per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (i, s) in self.symbols.iter().enumerate() {
            writeln!(w, "{s}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut symbols = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (sym, idx) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected symbol<TAB>index", path.display(), n + 1)))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad index {idx:?}", path.display(), n + 1)))?;
            if idx != symbols.len() {
                return Err(Error::Format(format!(
                    "{}:{}: index {idx} out of sequence, expected {}",
                    path.display(),
                    n + 1,
                    symbols.len()
                )));
            }
            symbols.push(sym.to_string());
        }
        if symbols.len() < SPECIALS.len() || symbols[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format(format!(
                "{}: special tokens missing at indices 0-3",
                path.display()
            )));
        }
        let index = symbols
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect::<HashMap<_, _>>();
        if index.len() != symbols.len() {
            return Err(Error::Format(format!("{}: duplicate symbols", path.display())));
        }
        Ok(Self { symbols, index })
    }
}
