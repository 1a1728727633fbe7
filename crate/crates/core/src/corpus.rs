//! Parallel text ingestion, index conversion and a synthetic toy-task
//! generator.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::tokenize;
use crate::vocab::{VocabularyMap, EOS};

/// One tokenized source/target line pair, both sides non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl TextPair {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Self {
        Self { src, tgt }
    }

    pub fn from_lines(src: &str, tgt: &str) -> Self {
        Self::new(tokenize(src), tokenize(tgt))
    }

    pub fn src_text(&self) -> String {
        self.src.join(" ")
    }

    pub fn tgt_text(&self) -> String {
        self.tgt.join(" ")
    }
}

/// Index form of a pair. `tgt` ends in end-of-sentence; `src` does not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub src_text: String,
    pub tgt_text: String,
}

impl SentencePair {
    pub fn encode(pair: &TextPair, src_vocab: &VocabularyMap, tgt_vocab: &VocabularyMap) -> Result<Self> {
        if pair.src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        if pair.tgt.is_empty() {
            return Err(Error::Empty("target sentence"));
        }
        Ok(Self {
            src: src_vocab.encode(&pair.src, false),
            tgt: tgt_vocab.encode(&pair.tgt, true),
            src_text: pair.src_text(),
            tgt_text: pair.tgt_text(),
        })
    }
}

pub fn encode_corpus(
    pairs: &[TextPair],
    src_vocab: &VocabularyMap,
    tgt_vocab: &VocabularyMap,
) -> Result<Vec<SentencePair>> {
    pairs
        .iter()
        .map(|p| SentencePair::encode(p, src_vocab, tgt_vocab))
        .collect()
}

/// Token indices back to text, stopping at end-of-sentence.
pub fn decode_text(vocab: &VocabularyMap, ids: &[usize]) -> String {
    vocab.decode(ids).join(" ")
}

/// Streaming reader over two line-aligned files. Pairs with an empty side
/// are skipped and counted in [`Self::dropped`].
pub struct ParallelReader {
    src: Lines,
    tgt: Lines,
    dropped: usize,
    finished: bool,
}

struct Lines {
    path: PathBuf,
    reader: BufReader<File>,
    line: usize,
    buf: Vec<u8>,
}

impl Lines {
    fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            reader: BufReader::new(f),
            line: 0,
            buf: Vec::new(),
        })
    }

    fn next_line(&mut self) -> Result<Option<String>> {
        self.buf.clear();
        let n = self
            .reader
            .read_until(b'\n', &mut self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        if n == 0 {
            return Ok(None);
        }
        self.line += 1;
        let s = std::str::from_utf8(&self.buf).map_err(|_| Error::Utf8 {
            path: self.path.clone(),
            line: self.line,
        })?;
        Ok(Some(s.trim_end_matches(['\n', '\r']).to_string()))
    }

    fn count_rest(&mut self) -> Result<usize> {
        while self.next_line()?.is_some() {}
        Ok(self.line)
    }
}

impl ParallelReader {
    pub fn open(src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            src: Lines::open(src_path.as_ref())?,
            tgt: Lines::open(tgt_path.as_ref())?,
            dropped: 0,
            finished: false,
        })
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Lines consumed so far from the source file.
    pub fn lines_read(&self) -> usize {
        self.src.line
    }

    fn advance(&mut self) -> Result<Option<TextPair>> {
        loop {
            let s = self.src.next_line()?;
            let t = self.tgt.next_line()?;
            match (s, t) {
                (None, None) => return Ok(None),
                (Some(_), None) | (None, Some(_)) => {
                    let src = self.src.count_rest()?;
                    let tgt = self.tgt.count_rest()?;
                    return Err(Error::LineCount { src, tgt });
                }
                (Some(s), Some(t)) => {
                    let pair = TextPair::from_lines(&s, &t);
                    if pair.src.is_empty() || pair.tgt.is_empty() {
                        self.dropped += 1;
                        continue;
                    }
                    return Ok(Some(pair));
                }
            }
        }
    }
}

impl Iterator for ParallelReader {
    type Item = Result<TextPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let r = self.advance().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.finished = true;
        }
        r
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<TextPair>,
    pub dropped: usize,
}

pub fn load_parallel(src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let mut reader = ParallelReader::open(src_path, tgt_path)?;
    let pairs = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok(ParallelCorpus {
        pairs,
        dropped: reader.dropped(),
    })
}

pub fn write_parallel(pairs: &[TextPair], src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<()> {
    write_lines(src_path.as_ref(), pairs.iter().map(|p| p.src_text()))?;
    write_lines(tgt_path.as_ref(), pairs.iter().map(|p| p.tgt_text()))
}

pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one sentence per line, empty lines included.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut lines = Lines::open(path.as_ref())?;
    let mut out = Vec::new();
    while let Some(l) = lines.next_line()? {
        out.push(l);
    }
    Ok(out)
}

/// Vocabulary over one side of a corpus.
pub fn build_vocab<'a>(sentences: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Result<VocabularyMap> {
    VocabularyMap::build(sentences.into_iter().flatten().map(String::as_str), max_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    Copy,
    Reverse,
    Substitution,
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(ToyKind::Copy),
            "reverse" => Ok(ToyKind::Reverse),
            "substitution" | "substitution-grammar" => Ok(ToyKind::Substitution),
            _ => Err(Error::Config(format!(
                "unknown toy task {s:?} (expected copy, reverse or substitution)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub kind: ToyKind,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// In-domain training pairs, drawn with the shifted table.
    pub n_in_domain_train: usize,
    /// Number of distinct source words.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Fraction of substitution entries permuted between the two domains.
    pub domain_shift: Option<f64>,
}

impl ToyConfig {
    pub fn new(kind: ToyKind, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            kind,
            n_train,
            n_dev: (n_train / 10).max(1),
            n_test,
            n_in_domain_train: 0,
            vocab_size: 20,
            min_len: 3,
            max_len: 8,
            seed,
            domain_shift: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Config("toy task sizes must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("toy vocab_size must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "toy lengths must satisfy 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if let Some(f) = self.domain_shift {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("domain_shift must be in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Word-for-word translation rules. Source words `0..n_modifiers` are
/// modifiers: a modifier directly followed by a non-modifier swaps places
/// with it on the target side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionTable {
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    /// `mapping[i]` is the target word index for source word `i`.
    pub mapping: Vec<usize>,
    pub n_modifiers: usize,
}

impl SubstitutionTable {
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = src.iter().map(|&w| self.mapping[w]).collect();
        let mut i = 0;
        while i + 1 < src.len() {
            if src[i] < self.n_modifiers && src[i + 1] >= self.n_modifiers {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }

    /// Same words, with the targets of a `fraction` of entries cyclically
    /// permuted among themselves so every selected entry changes.
    pub fn shifted(&self, fraction: f64, rng: &mut impl Rng) -> Self {
        let n = self.mapping.len();
        let k = (fraction * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let chosen = &idx[..k.min(n)];
        let mut out = self.clone();
        if chosen.len() >= 2 {
            for (j, &i) in chosen.iter().enumerate() {
                out.mapping[i] = self.mapping[chosen[(j + 1) % chosen.len()]];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub config: ToyConfig,
    /// Out-of-domain training pairs.
    pub train: Vec<TextPair>,
    pub dev: Vec<TextPair>,
    pub in_domain_train: Vec<TextPair>,
    /// In-domain development pairs, as many as `dev`.
    pub in_domain_dev: Vec<TextPair>,
    /// In-domain stream used for evaluation and online adaptation.
    pub test: Vec<TextPair>,
    pub out_of_domain: SubstitutionTable,
    pub in_domain: SubstitutionTable,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_words(n: usize, rng: &mut impl Rng, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn words(ids: &[usize], dict: &[String]) -> Vec<String> {
    ids.iter().map(|&i| dict[i].clone()).collect()
}

/// Deterministic in `config.seed`. Without a domain shift, or for copy and
/// reverse tasks, both domains share one table.
pub fn generate_toy_task(config: &ToyConfig) -> Result<ToyTask> {
    config.validate()?;
    let mut table_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken = HashSet::new();
    let src_words = pseudo_words(config.vocab_size, &mut table_rng, &mut taken);
    let (tgt_words, mapping, n_modifiers) = match config.kind {
        ToyKind::Copy | ToyKind::Reverse => (src_words.clone(), (0..config.vocab_size).collect(), 0),
        ToyKind::Substitution => {
            let tgt = pseudo_words(config.vocab_size, &mut table_rng, &mut taken);
            let mut mapping: Vec<usize> = (0..config.vocab_size).collect();
            mapping.shuffle(&mut table_rng);
            (tgt, mapping, config.vocab_size / 4)
        }
    };
    let out_of_domain = SubstitutionTable {
        src_words,
        tgt_words,
        mapping,
        n_modifiers,
    };
    let in_domain = match (config.kind, config.domain_shift) {
        (ToyKind::Substitution, Some(f)) => out_of_domain.shifted(f, &mut table_rng),
        _ => out_of_domain.clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut draw = |table: &SubstitutionTable, n: usize| -> Vec<TextPair> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(config.min_len..=config.max_len);
                let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect();
                let tgt = match config.kind {
                    ToyKind::Copy => src.clone(),
                    ToyKind::Reverse => src.iter().rev().copied().collect(),
                    ToyKind::Substitution => table.translate(&src),
                };
                TextPair::new(words(&src, &table.src_words), words(&tgt, &table.tgt_words))
            })
            .collect()
    };
    let train = draw(&out_of_domain, config.n_train);
    let dev = draw(&out_of_domain, config.n_dev);
    let in_domain_train = draw(&in_domain, config.n_in_domain_train);
    let in_domain_dev = draw(&in_domain, config.n_dev);
    let test = draw(&in_domain, config.n_test);
    Ok(ToyTask {
        config: config.clone(),
        train,
        dev,
        in_domain_train,
        in_domain_dev,
        test,
        out_of_domain,
        in_domain,
    })
}

impl ToyTask {
    /// Writes `{name}.src` / `{name}.tgt` for every split into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, pairs) in [
            ("train", &self.train),
            ("dev", &self.dev),
            ("in-train", &self.in_domain_train),
            ("in-dev", &self.in_domain_dev),
            ("test", &self.test),
        ] {
            write_parallel(pairs, dir.join(format!("{name}.src")), dir.join(format!("{name}.tgt")))?;
        }
        Ok(())
    }
}

/// Removes the trailing end-of-sentence token, if any.
pub fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.split_last() {
        Some((&EOS, rest)) => rest,
        _ => ids,
    }
}
