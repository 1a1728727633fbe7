use std::fmt;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::TextPair;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, DEFAULT_BOOTSTRAP_SAMPLES};
use crate::model::{ModelConfig, NmtModel};
use crate::optim::{Algorithm, OptimizerConfig};
use crate::sim::online::{
    measure_update_time, run_online_session, SessionConfig, SimulationTrace, TraceWriter, UpdateTimeSummary,
};
use crate::sim::train::{train_offline, EvalPoint, TrainConfig};
use crate::sim::{Pipeline, System};
use crate::tensor::Real;

/// Which training data a system sees before the online stream.
///
/// 1. out-of-domain only
/// 2. out-of-domain, then fine-tuned on in-domain
/// 3. in-domain only
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    /// Vocabulary sizes are filled in from the fitted pipeline.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fine_tune: TrainConfig,
    pub optimizers: Vec<OptimizerConfig>,
    pub bpe_merges: Option<usize>,
    pub max_vocab: usize,
    pub bootstrap_samples: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(id: u8, model: ModelConfig, optimizers: Vec<OptimizerConfig>, seed: u64) -> Self {
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        Self {
            id,
            model,
            fine_tune: train.clone(),
            train,
            optimizers,
            bpe_merges: None,
            max_vocab: 30_000,
            bootstrap_samples: DEFAULT_BOOTSTRAP_SAMPLES,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioData {
    pub out_train: Vec<TextPair>,
    pub out_dev: Vec<TextPair>,
    pub in_train: Vec<TextPair>,
    pub in_dev: Vec<TextPair>,
    /// The in-domain stream.
    pub test: Vec<TextPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub algorithm: Algorithm,
    pub scores: EvalReport,
    pub bleu_gain: f64,
    pub ter_change: f64,
}

/// Everything needed to compare systems; deterministic given the seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: u8,
    pub n_sentences: usize,
    /// Offline training stages as `(stage, evaluations)`.
    pub training: Vec<(String, Vec<EvalPoint>)>,
    /// Baseline first.
    pub systems: Vec<SystemReport>,
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} ({} sentences)", self.scenario, self.n_sentences)?;
        writeln!(f, "{:<12} {:>16} {:>16} {:>8}", "system", "BLEU", "TER", "dBLEU")?;
        for s in &self.systems {
            writeln!(
                f,
                "{:<12} {:>7.1} +- {:<5.1} {:>7.1} +- {:<5.1} {:>+8.1}",
                s.name, s.scores.bleu, s.scores.bleu_half_width, s.scores.ter, s.scores.ter_half_width, s.bleu_gain
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult<T: Real> {
    /// The offline system every session starts from.
    pub system: System<T>,
    pub baseline: SimulationTrace,
    pub online: Vec<SimulationTrace>,
    pub report: ComparisonReport,
    /// Update-time statistics per online system; wall-clock, so kept out
    /// of the report.
    pub update_times: Vec<(String, UpdateTimeSummary)>,
}

fn require(pairs: &[TextPair], what: &str, id: u8) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config(format!("scenario {id} needs a non-empty {what} corpus")));
    }
    Ok(())
}

fn unique_name(base: &str, taken: &[String]) -> String {
    if !taken.iter().any(|t| t == base) {
        return base.to_string();
    }
    (2..)
        .map(|i| format!("{base}-{i}"))
        .find(|n| !taken.contains(n))
        .expect("unbounded")
}

/// Off-line training for the scenario, then the frozen baseline and one
/// online session per optimizer over `data.test`. With `out_dir`, the
/// system, traces and report are written there.
pub fn run_scenario<T: Real>(
    spec: &ScenarioSpec,
    data: &ScenarioData,
    out_dir: Option<&Path>,
) -> Result<ScenarioResult<T>> {
    let id = spec.id;
    require(&data.test, "test", id)?;
    let mut effective = id;
    match id {
        1 => {
            require(&data.out_train, "out-of-domain training", id)?;
            require(&data.out_dev, "out-of-domain development", id)?;
            if !data.in_train.is_empty() {
                warn!(
                    "scenario 1 ignores the {} in-domain training pairs",
                    data.in_train.len()
                );
            }
        }
        2 => {
            require(&data.out_train, "out-of-domain training", id)?;
            require(&data.out_dev, "out-of-domain development", id)?;
            if data.in_train.is_empty() {
                warn!("scenario 2 without in-domain training data reduces to scenario 1");
                effective = 1;
            } else {
                require(&data.in_dev, "in-domain development", id)?;
            }
        }
        3 => {
            require(&data.in_train, "in-domain training", id)?;
            require(&data.in_dev, "in-domain development", id)?;
        }
        _ => return Err(Error::Config(format!("scenario id must be 1, 2 or 3, got {id}"))),
    }

    let fit_on = if effective == 3 {
        &data.in_train
    } else {
        &data.out_train
    };
    let pipeline = Pipeline::fit(fit_on, spec.bpe_merges, spec.max_vocab)?;
    let mut model_cfg = spec.model.clone();
    model_cfg.src_vocab_size = pipeline.src_vocab.len();
    model_cfg.tgt_vocab_size = pipeline.tgt_vocab.len();
    let init: NmtModel<T> = NmtModel::new(model_cfg, spec.seed)?;

    let mut training = Vec::new();
    let mut model = if effective == 3 {
        info!("scenario 3: training on {} in-domain pairs", data.in_train.len());
        let out = train_offline(&init, &pipeline, &data.in_train, &data.in_dev, &spec.train)?;
        training.push(("in-domain".to_string(), out.evals));
        out.model
    } else {
        info!("training on {} out-of-domain pairs", data.out_train.len());
        let out = train_offline(&init, &pipeline, &data.out_train, &data.out_dev, &spec.train)?;
        training.push(("out-of-domain".to_string(), out.evals));
        out.model
    };
    if effective == 2 {
        info!("fine-tuning on {} in-domain pairs", data.in_train.len());
        let out = train_offline(&model, &pipeline, &data.in_train, &data.in_dev, &spec.fine_tune)?;
        training.push(("fine-tune".to_string(), out.evals));
        model = out.model;
    }
    let system = System { model, pipeline };
    if let Some(dir) = out_dir {
        system.save(dir.join("system"))?;
    }

    let session = |opt: &OptimizerConfig, name: &str| -> Result<SimulationTrace> {
        let cfg = SessionConfig::for_model(opt.clone(), &system.model);
        let mut writer = match out_dir {
            Some(dir) => Some(TraceWriter::create(dir.join("traces"), name)?),
            None => None,
        };
        info!("online session {name}");
        Ok(run_online_session(&system.model, &system.pipeline, &data.test, &cfg, name, writer.as_mut())?.0)
    };
    let baseline = session(&OptimizerConfig::new(Algorithm::None), "baseline")?;
    let mut names = vec![baseline.name.clone()];
    let mut online = Vec::new();
    for opt in spec.optimizers.iter().filter(|o| o.algorithm != Algorithm::None) {
        let name = unique_name(opt.algorithm.name(), &names);
        names.push(name.clone());
        online.push(session(opt, &name)?);
    }

    let report = compare(id, training, &baseline, &online, spec.bootstrap_samples, spec.seed)?;
    let update_times = online
        .iter()
        .map(|t| Ok((t.name.clone(), measure_update_time(&t.timings)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        write_json(&dir.join("report.json"), &report)?;
        write_json(&dir.join("update_times.json"), &update_times)?;
        let p = dir.join("trajectory.tsv");
        std::fs::write(&p, trajectory_series(&baseline, &online)?.to_tsv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(ScenarioResult {
        system,
        baseline,
        online,
        report,
        update_times,
    })
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn compare(
    scenario: u8,
    training: Vec<(String, Vec<EvalPoint>)>,
    baseline: &SimulationTrace,
    online: &[SimulationTrace],
    samples: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let refs = baseline.references();
    let score = |t: &SimulationTrace| EvalReport::compute(&t.hypotheses(), &refs, samples, seed);
    let base_scores = score(baseline)?;
    let mut systems = vec![SystemReport {
        name: baseline.name.clone(),
        algorithm: baseline.algorithm,
        bleu_gain: 0.0,
        ter_change: 0.0,
        scores: base_scores.clone(),
    }];
    for t in online {
        let s = score(t)?;
        systems.push(SystemReport {
            name: t.name.clone(),
            algorithm: t.algorithm,
            bleu_gain: s.bleu - base_scores.bleu,
            ter_change: s.ter - base_scores.ter,
            scores: s,
        });
    }
    Ok(ComparisonReport {
        scenario,
        n_sentences: baseline.records.len(),
        training,
        systems,
    })
}

/// Per-sentence series ready for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub columns: Vec<String>,
    /// `rows[n][j]`: cumulative BLEU of system `j` minus the baseline's,
    /// over the first `n + 1` sentences.
    pub rows: Vec<Vec<f64>>,
}

impl PlotSeries {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("sentence\t{}\n", self.columns.join("\t"));
        for (i, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{}\t{}\n", i + 1, cells.join("\t")));
        }
        out
    }
}

/// Cumulative BLEU differences against the baseline, one column per
/// online trace.
pub fn trajectory_series(baseline: &SimulationTrace, online: &[SimulationTrace]) -> Result<PlotSeries> {
    if online.is_empty() {
        return Err(Error::Config("plot data needs at least one online trace".into()));
    }
    for t in online {
        let same = t.records.len() == baseline.records.len()
            && t.records
                .iter()
                .zip(&baseline.records)
                .all(|(a, b)| a.source == b.source && a.reference == b.reference);
        if !same {
            return Err(Error::Config(format!(
                "trace {} does not cover the same test set as {}",
                t.name, baseline.name
            )));
        }
    }
    let rows = (0..baseline.records.len())
        .map(|i| {
            online
                .iter()
                .map(|t| t.records[i].cumulative_bleu - baseline.records[i].cumulative_bleu)
                .collect()
        })
        .collect();
    Ok(PlotSeries {
        columns: online.iter().map(|t| t.name.clone()).collect(),
        rows,
    })
}
