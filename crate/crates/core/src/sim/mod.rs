//! Offline training, the online post-editing loop and scenario runs.

mod online;
mod scenario;
mod train;

use std::path::Path;

use crate::bpe::{detokenize, learn_bpe, MergeTable};
use crate::corpus::{SentencePair, TextPair};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, NmtModel};
use crate::tensor::Real;
use crate::vocab::VocabularyMap;

pub use online::{
    measure_update_time, read_trace_records, run_online_session, OnlineSession, SessionConfig, SimulationTrace,
    TimingRecord, TraceRecord, TraceWriter, UpdateStatus, UpdateTimeSummary, REFERENCE_UPDATE_MS,
};
pub use scenario::{
    run_scenario, trajectory_series, write_json, ComparisonReport, PlotSeries, ScenarioData, ScenarioResult,
    ScenarioSpec, SystemReport,
};
pub use train::{train_offline, EvalPoint, TrainConfig, TrainOutcome};

/// Subword segmentation and vocabularies shared by every system trained
/// from one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub src_bpe: Option<MergeTable>,
    pub tgt_bpe: Option<MergeTable>,
    pub src_vocab: VocabularyMap,
    pub tgt_vocab: VocabularyMap,
}

impl Pipeline {
    /// Learns separate source and target merge tables (when `bpe_merges`
    /// is set) and vocabularies on `pairs`.
    pub fn fit(pairs: &[TextPair], bpe_merges: Option<usize>, max_vocab: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let (src_bpe, tgt_bpe) = match bpe_merges {
            Some(n) => (
                Some(learn_bpe(
                    pairs.iter().flat_map(|p| p.src.iter().map(String::as_str)),
                    n,
                )?),
                Some(learn_bpe(
                    pairs.iter().flat_map(|p| p.tgt.iter().map(String::as_str)),
                    n,
                )?),
            ),
            None => (None, None),
        };
        let mut p = Self {
            src_bpe,
            tgt_bpe,
            src_vocab: VocabularyMap::default(),
            tgt_vocab: VocabularyMap::default(),
        };
        let seg: Vec<(Vec<String>, Vec<String>)> = pairs.iter().map(|x| p.segment(x)).collect();
        p.src_vocab = VocabularyMap::build(seg.iter().flat_map(|s| s.0.iter().map(String::as_str)), max_vocab)?;
        p.tgt_vocab = VocabularyMap::build(seg.iter().flat_map(|s| s.1.iter().map(String::as_str)), max_vocab)?;
        Ok(p)
    }

    fn segment(&self, pair: &TextPair) -> (Vec<String>, Vec<String>) {
        let seg = |bpe: &Option<MergeTable>, words: &[String]| match bpe {
            Some(t) => t.apply(words),
            None => words.to_vec(),
        };
        (seg(&self.src_bpe, &pair.src), seg(&self.tgt_bpe, &pair.tgt))
    }

    /// Segments and indexes `pair`; the text fields keep the word-level
    /// sentences.
    pub fn encode(&self, pair: &TextPair) -> Result<SentencePair> {
        let (s, t) = self.segment(pair);
        let mut sp = SentencePair::encode(&TextPair::new(s, t), &self.src_vocab, &self.tgt_vocab)?;
        sp.src_text = pair.src_text();
        sp.tgt_text = pair.tgt_text();
        Ok(sp)
    }

    pub fn encode_all(&self, pairs: &[TextPair]) -> Result<Vec<SentencePair>> {
        pairs.iter().map(|p| self.encode(p)).collect()
    }

    pub fn encode_source(&self, words: &[String]) -> Result<Vec<usize>> {
        if words.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let seg = match &self.src_bpe {
            Some(t) => t.apply(words),
            None => words.to_vec(),
        };
        Ok(self.src_vocab.encode(&seg, false))
    }

    /// Target indices back to words, merging subwords.
    pub fn decode_target(&self, ids: &[usize]) -> Vec<String> {
        let toks = self.tgt_vocab.decode(ids);
        match self.tgt_bpe {
            Some(_) => detokenize(&toks),
            None => toks,
        }
    }

    /// Files: `src.vocab`, `tgt.vocab` and, with subwords, `src.bpe`,
    /// `tgt.bpe`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.src_vocab.save(dir.join("src.vocab"))?;
        self.tgt_vocab.save(dir.join("tgt.vocab"))?;
        for (name, t) in [("src.bpe", &self.src_bpe), ("tgt.bpe", &self.tgt_bpe)] {
            let p = dir.join(name);
            match t {
                Some(t) => t.save(&p)?,
                None if p.exists() => std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?,
                None => {}
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bpe = |name: &str| {
            let p = dir.join(name);
            p.exists().then(|| MergeTable::load(&p)).transpose()
        };
        Ok(Self {
            src_bpe: bpe("src.bpe")?,
            tgt_bpe: bpe("tgt.bpe")?,
            src_vocab: VocabularyMap::load(dir.join("src.vocab"))?,
            tgt_vocab: VocabularyMap::load(dir.join("tgt.vocab"))?,
        })
    }
}

/// A model with the pipeline it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct System<T: Real> {
    pub model: NmtModel<T>,
    pub pipeline: Pipeline,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

impl<T: Real> System<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.pipeline.save(dir)?;
        save_checkpoint(dir.join(CHECKPOINT_FILE), &self.model)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let pipeline = Pipeline::load(dir)?;
        let model: NmtModel<T> = load_checkpoint(dir.join(CHECKPOINT_FILE))?;
        if model.config.src_vocab_size != pipeline.src_vocab.len()
            || model.config.tgt_vocab_size != pipeline.tgt_vocab.len()
        {
            return Err(Error::Checkpoint(format!(
                "{}: model vocabularies {}/{} do not match vocabulary files {}/{}",
                dir.display(),
                model.config.src_vocab_size,
                model.config.tgt_vocab_size,
                pipeline.src_vocab.len(),
                pipeline.tgt_vocab.len()
            )));
        }
        Ok(Self { model, pipeline })
    }

    /// Beam-search translation of word-level sentences.
    pub fn translate_all(&self, sources: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
        sources
            .iter()
            .map(|s| {
                let ids = self.pipeline.encode_source(s)?;
                let h = self.model.translate(&ids)?;
                Ok(self.pipeline.decode_target(&h.tokens))
            })
            .collect()
    }
}
