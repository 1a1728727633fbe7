use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::TextPair;
use crate::error::{Error, Result};
use crate::metrics::{BleuStats, SufficientStats, TerStats};
use crate::model::NmtModel;
use crate::optim::{pas_update, ppas_update, Algorithm, GradientState, OptimizerConfig, SentenceMargin};
use crate::sim::Pipeline;
use crate::tensor::Real;

/// Update time per sentence reported for the original GPU system, shown for
/// context only.
pub const REFERENCE_UPDATE_MS: f64 = 65.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub optimizer: OptimizerConfig,
    pub beam_size: usize,
    pub max_output_length: usize,
}

impl SessionConfig {
    pub fn new(optimizer: OptimizerConfig) -> Self {
        Self {
            optimizer,
            beam_size: 6,
            max_output_length: 50,
        }
    }

    pub fn for_model<T: Real>(optimizer: OptimizerConfig, model: &NmtModel<T>) -> Self {
        Self {
            optimizer,
            beam_size: model.config.beam_size,
            max_output_length: model.config.max_output_length,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "reason")]
pub enum UpdateStatus {
    /// No optimizer: the frozen baseline.
    Frozen,
    Applied,
    /// Passive-aggressive update with a non-positive margin.
    Passive,
    /// The update failed and the parameters were kept.
    Skipped(String),
}

/// One stream sentence. Everything except timing, which lives in
/// [`TimingRecord`] so that replays compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub source: String,
    pub hypothesis: String,
    /// Target indices of the hypothesis, as scored.
    pub hypothesis_ids: Vec<usize>,
    pub log_prob: f64,
    pub truncated: bool,
    pub reference: String,
    pub cumulative_bleu: f64,
    pub cumulative_ter: f64,
    /// Margin for passive-aggressive methods, negative log-likelihood of
    /// the reference for gradient methods, absent for the baseline.
    pub loss: Option<f64>,
    /// Inner iterations (passive-aggressive) or 1 per gradient step.
    pub iterations: usize,
    pub status: UpdateStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub index: usize,
    pub translate_ms: f64,
    pub update_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub name: String,
    pub algorithm: Algorithm,
    pub records: Vec<TraceRecord>,
    pub timings: Vec<TimingRecord>,
}

impl SimulationTrace {
    pub fn hypotheses(&self) -> Vec<Vec<String>> {
        self.records.iter().map(|r| words(&r.hypothesis)).collect()
    }

    pub fn references(&self) -> Vec<Vec<String>> {
        self.records.iter().map(|r| words(&r.reference)).collect()
    }

    pub fn bleu_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cumulative_bleu).collect()
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Appends one JSON line per sentence to `{name}.trace.jsonl` and
/// `{name}.timing.jsonl`, flushing after each.
pub struct TraceWriter {
    trace: BufWriter<File>,
    timing: BufWriter<File>,
    trace_path: PathBuf,
    timing_path: PathBuf,
}

impl TraceWriter {
    pub fn create(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trace_path = dir.join(format!("{name}.trace.jsonl"));
        let timing_path = dir.join(format!("{name}.timing.jsonl"));
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
        Ok(Self {
            trace: open(&trace_path)?,
            timing: open(&timing_path)?,
            trace_path,
            timing_path,
        })
    }

    pub fn append(&mut self, record: &TraceRecord, timing: &TimingRecord) -> Result<()> {
        fn put<S: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &S) -> Result<()> {
            let line = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))
        }
        put(&mut self.trace, &self.trace_path, record)?;
        put(&mut self.timing, &self.timing_path, timing)
    }

    pub fn trace_path(&self) -> &Path {
        &self.trace_path
    }
}

/// Reads a `.trace.jsonl` file back.
pub fn read_trace_records(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

enum Updater<T> {
    Frozen,
    Gradient(GradientState<T>),
    PassiveAggressive,
}

/// The sequential translate, record, update loop over one stream.
pub struct OnlineSession<'p, T: Real> {
    model: NmtModel<T>,
    pipeline: &'p Pipeline,
    cfg: SessionConfig,
    updater: Updater<T>,
    bleu: BleuStats,
    ter: TerStats,
    next_index: usize,
}

impl<'p, T: Real> OnlineSession<'p, T> {
    pub fn new(model: NmtModel<T>, pipeline: &'p Pipeline, cfg: SessionConfig) -> Result<Self> {
        cfg.optimizer.validate()?;
        if cfg.beam_size == 0 || cfg.max_output_length == 0 {
            return Err(Error::Config("beam size and output length must be at least 1".into()));
        }
        let updater = match cfg.optimizer.algorithm {
            Algorithm::None => Updater::Frozen,
            Algorithm::Pas | Algorithm::Ppas => Updater::PassiveAggressive,
            a => Updater::Gradient(GradientState::new(a, &model.params)?),
        };
        Ok(Self {
            model,
            pipeline,
            cfg,
            updater,
            bleu: BleuStats::default(),
            ter: TerStats::default(),
            next_index: 0,
        })
    }

    /// Parameters that will translate the next sentence.
    pub fn model(&self) -> &NmtModel<T> {
        &self.model
    }

    pub fn into_model(self) -> NmtModel<T> {
        self.model
    }

    /// Translates `pair.src` with the current parameters, records the
    /// result, then learns from `pair.tgt` as the post-edit.
    pub fn step(&mut self, pair: &TextPair) -> Result<(TraceRecord, TimingRecord)> {
        let encoded = self.pipeline.encode(pair)?;
        let t0 = Instant::now();
        let hyp = self
            .model
            .beam_search(&encoded.src, self.cfg.beam_size, self.cfg.max_output_length)?;
        let translate_ms = t0.elapsed().as_secs_f64() * 1e3;
        let hyp_words = self.pipeline.decode_target(&hyp.tokens);
        self.bleu += &BleuStats::from_pair(&hyp_words, &pair.tgt);
        self.ter += &TerStats::from_pair(&hyp_words, &pair.tgt, true);

        let t1 = Instant::now();
        let (loss, iterations, status) = self.update(&encoded.src, &encoded.tgt, &hyp.tokens);
        let update_ms = t1.elapsed().as_secs_f64() * 1e3;

        let index = self.next_index;
        self.next_index += 1;
        let record = TraceRecord {
            index,
            source: pair.src_text(),
            hypothesis: hyp_words.join(" "),
            hypothesis_ids: hyp.tokens,
            log_prob: hyp.log_prob.as_f64(),
            truncated: hyp.truncated,
            reference: pair.tgt_text(),
            cumulative_bleu: self.bleu.score(),
            cumulative_ter: self.ter.score(),
            loss,
            iterations,
            status,
        };
        Ok((
            record,
            TimingRecord {
                index,
                translate_ms,
                update_ms,
            },
        ))
    }

    fn update(&mut self, src: &[usize], reference: &[usize], hyp: &[usize]) -> (Option<f64>, usize, UpdateStatus) {
        match &mut self.updater {
            Updater::Frozen => (None, 0, UpdateStatus::Frozen),
            Updater::Gradient(state) => {
                let (lp, mut grads) = match self.model.log_prob_and_grad(src, reference) {
                    Ok(x) => x,
                    Err(e) => return (None, 0, UpdateStatus::Skipped(e.to_string())),
                };
                let loss = -lp.as_f64();
                if !loss.is_finite() {
                    return (Some(loss), 0, UpdateStatus::Skipped("non-finite loss".into()));
                }
                grads.scale(-T::one());
                let mut next = self.model.params.clone();
                match state.step(&self.cfg.optimizer, &mut next, grads) {
                    Ok(_) if next.is_finite() => {
                        self.model.params = next;
                        (Some(loss), 1, UpdateStatus::Applied)
                    }
                    Ok(_) => (Some(loss), 1, UpdateStatus::Skipped("non-finite parameters".into())),
                    Err(e) => (Some(loss), 1, UpdateStatus::Skipped(e.to_string())),
                }
            }
            Updater::PassiveAggressive => {
                let frozen = self.model.clone();
                let mut objective = SentenceMargin {
                    model: &frozen,
                    src,
                    reference,
                    hypothesis: hyp,
                };
                let pa = self.cfg.optimizer.pa_config();
                let outcome = if self.cfg.optimizer.algorithm == Algorithm::Pas {
                    pas_update(&mut self.model.params, &mut objective, &pa)
                } else {
                    ppas_update(&mut self.model.params, &mut objective, &pa)
                };
                match outcome {
                    Err(e) => (None, 0, UpdateStatus::Skipped(e.to_string())),
                    Ok(o) => {
                        let status = match (&o.aborted, o.passive) {
                            (Some(why), _) => UpdateStatus::Skipped(why.clone()),
                            (None, true) => UpdateStatus::Passive,
                            (None, false) => UpdateStatus::Applied,
                        };
                        (Some(o.initial_margin), o.iterations, status)
                    }
                }
            }
        }
    }
}

/// Runs the whole stream, optionally persisting each record as it is
/// produced. Returns the trace and the final parameters.
pub fn run_online_session<T: Real>(
    model: &NmtModel<T>,
    pipeline: &Pipeline,
    stream: &[TextPair],
    cfg: &SessionConfig,
    name: &str,
    mut writer: Option<&mut TraceWriter>,
) -> Result<(SimulationTrace, NmtModel<T>)> {
    let mut session = OnlineSession::new(model.clone(), pipeline, cfg.clone())?;
    let mut records = Vec::with_capacity(stream.len());
    let mut timings = Vec::with_capacity(stream.len());
    for pair in stream {
        let (r, t) = session.step(pair)?;
        if let Some(w) = writer.as_deref_mut() {
            w.append(&r, &t)?;
        }
        records.push(r);
        timings.push(t);
    }
    let trace = SimulationTrace {
        name: name.to_string(),
        algorithm: cfg.optimizer.algorithm,
        records,
        timings,
    };
    Ok((trace, session.into_model()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTimeSummary {
    pub n: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Statistics of the per-sentence update times, translation excluded.
/// The 95th percentile uses the nearest-rank rule.
pub fn measure_update_time(timings: &[TimingRecord]) -> Result<UpdateTimeSummary> {
    if timings.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let mut t: Vec<f64> = timings.iter().map(|r| r.update_ms).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(UpdateTimeSummary {
        n,
        mean_ms: (t.iter().sum::<f64>() / n as f64).clamp(t[0], t[n - 1]),
        p95_ms: t[rank - 1],
        min_ms: t[0],
        max_ms: t[n - 1],
    })
}
