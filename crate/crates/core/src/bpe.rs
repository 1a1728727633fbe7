//! Byte-pair encoding: learning merge tables from word counts, replaying
//! them on new text, and undoing the segmentation.
//!
//! Word-final subwords carry the [`END_OF_WORD`] suffix, so `low` starts as
//! `l o w</w>` and a fully merged word is a single `low</w>` token.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const HEADER: &str = "#olnmt-bpe v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    /// Hash of the word counts the table was learned from; empty when
    /// unknown.
    pub fingerprint: String,
}

/// Hex SHA-256 of the sorted word counts.
pub fn corpus_fingerprint(counts: &BTreeMap<String, u64>) -> String {
    let mut h = Sha256::new();
    for (w, c) in counts {
        h.update(w.as_bytes());
        h.update([0u8]);
        h.update(c.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

type Pair = (String, String);

/// Merges every occurrence of `pair` in `symbols`, left to right.
fn merge_in_place(symbols: &mut Vec<String>, pair: &Pair) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy most-frequent-pair merging over whitespace tokens. Ties between
/// equally frequent pairs go to the lexicographically smallest pair. Stops
/// early when no pair is left.
pub fn learn_bpe<'a>(words: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Result<MergeTable> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for w in words {
        if !w.is_empty() {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("bpe training corpus"));
    }
    let fingerprint = corpus_fingerprint(&counts);

    let mut vocab: Vec<(Vec<String>, u64)> = counts.iter().map(|(w, &c)| (initial_symbols(w), c)).collect();
    let mut stats: HashMap<Pair, i64> = HashMap::new();
    let mut index: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in vocab.iter().enumerate() {
        for p in syms.windows(2) {
            let pair = (p[0].clone(), p[1].clone());
            *stats.entry(pair.clone()).or_default() += *c as i64;
            index.entry(pair).or_default().insert(wi);
        }
    }

    let mut table = MergeTable {
        merges: Vec::new(),
        ranks: HashMap::new(),
        fingerprint,
    };
    while table.merges.len() < num_merges {
        let best = stats
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(p, _)| p.clone());
        let Some(best) = best else { break };
        let words = index.remove(&best).unwrap_or_default();
        let mut words: Vec<usize> = words.into_iter().collect();
        words.sort_unstable();
        for wi in words {
            let (syms, c) = &mut vocab[wi];
            let c = *c as i64;
            for p in syms.windows(2) {
                *stats.get_mut(&(p[0].clone(), p[1].clone())).expect("pair counted") -= c;
            }
            merge_in_place(syms, &best);
            for p in syms.windows(2) {
                let pair = (p[0].clone(), p[1].clone());
                *stats.entry(pair.clone()).or_default() += c;
                index.entry(pair).or_default().insert(wi);
            }
        }
        stats.remove(&best);
        table.push(best)?;
    }
    Ok(table)
}

impl MergeTable {
    pub fn new() -> Self {
        Self {
            merges: Vec::new(),
            ranks: HashMap::new(),
            fingerprint: String::new(),
        }
    }

    pub fn from_merges(merges: impl IntoIterator<Item = Pair>) -> Result<Self> {
        let mut t = Self::new();
        for m in merges {
            t.push(m)?;
        }
        Ok(t)
    }

    fn push(&mut self, pair: Pair) -> Result<()> {
        if self.ranks.contains_key(&pair) {
            return Err(Error::Format(format!("duplicate merge {} {}", pair.0, pair.1)));
        }
        self.ranks.insert(pair.clone(), self.merges.len());
        self.merges.push(pair);
        Ok(())
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// The first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        let mut t = Self::from_merges(self.merges.iter().take(n).cloned()).expect("prefix has no duplicates");
        t.fingerprint = self.fingerprint.clone();
        t
    }

    /// Subwords of one word: repeatedly applies the earliest-learned merge
    /// present until none applies.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            match best {
                Some(pair) => merge_in_place(&mut syms, &pair),
                None => return syms,
            }
        }
    }

    /// Segments a whitespace-tokenized sentence.
    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.segment_word(t.as_ref())).collect()
    }

    pub fn apply_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace().flat_map(|t| self.segment_word(t)).collect()
    }

    /// Every symbol the table can produce from words over `alphabet`: each
    /// character alone and word-final, plus every merge result.
    pub fn symbol_inventory(&self, alphabet: impl IntoIterator<Item = char>) -> HashSet<String> {
        let mut out: HashSet<String> = alphabet
            .into_iter()
            .flat_map(|c| [c.to_string(), format!("{c}{END_OF_WORD}")])
            .collect();
        out.extend(self.merges.iter().map(|(a, b)| format!("{a}{b}")));
        out
    }

    /// First line is a version comment carrying the fingerprint, then one
    /// `left right` pair per line in learned order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "{HEADER} end-of-word={END_OF_WORD} fingerprint={}", self.fingerprint).map_err(io)?;
        for (a, b) in &self.merges {
            writeln!(w, "{a} {b}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .unwrap_or_default();
        if !header.starts_with(HEADER) {
            return Err(Error::Format(format!(
                "{}: missing merge table header {HEADER:?}",
                path.display()
            )));
        }
        let fingerprint = header
            .split_whitespace()
            .find_map(|f| f.strip_prefix("fingerprint="))
            .unwrap_or_default()
            .to_string();
        let mut t = Self::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => t
                    .push((a.to_string(), b.to_string()))
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 2)))?,
                _ => {
                    return Err(Error::Format(format!(
                        "{}:{}: expected two space-separated symbols",
                        path.display(),
                        n + 2
                    )))
                }
            }
        }
        t.fingerprint = fingerprint;
        Ok(t)
    }
}

impl Default for MergeTable {
    fn default() -> Self {
        Self::new()
    }
}

/// Joins subwords back into words: a subword ending in the end-of-word
/// marker closes the current word.
pub fn detokenize<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for s in subwords {
        let s = s.as_ref();
        match s.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(s),
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Fraction of running subword tokens for which `known` holds; 0 for an
/// empty corpus.
pub fn coverage<'a>(tokens: impl IntoIterator<Item = &'a str>, known: impl Fn(&str) -> bool) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in tokens {
        total += 1;
        if known(t) {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
