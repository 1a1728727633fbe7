use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use olnmt::bpe::{learn_bpe, MergeTable};
use olnmt::config::KeyValues;
use olnmt::corpus::{generate_toy_task, TextPair, ToyConfig, ToyKind};
use olnmt::metrics::{self, EvalReport};
use olnmt::model::{ModelConfig, NmtModel};
use olnmt::optim::{Algorithm, OptimizerConfig};
use olnmt::sim::{run_online_session, train_offline, Pipeline, SessionConfig, TrainConfig, UpdateStatus};

type F = f32;

fn err(e: olnmt::Error) -> PyErr {
    match e {
        olnmt::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn words(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| olnmt::tokenize::tokenize(l)).collect()
}

fn pairs(raw: Vec<(String, String)>) -> Vec<TextPair> {
    raw.iter().map(|(s, t)| TextPair::from_lines(s, t)).collect()
}

#[pyfunction]
fn tokenize(line: &str) -> Vec<String> {
    olnmt::tokenize::tokenize(line)
}

/// Corpus BLEU of hypothesis lines against reference lines.
#[pyfunction]
fn bleu(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    metrics::bleu(&words(&hyps), &words(&refs)).map_err(err)
}

/// Corpus TER with shifts.
#[pyfunction]
fn ter(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    metrics::ter(&words(&hyps), &words(&refs)).map_err(err)
}

/// BLEU and TER with bootstrap intervals, as a dict.
#[pyfunction]
#[pyo3(signature = (hyps, refs, samples = 1000, seed = 1))]
fn evaluate<'py>(
    py: Python<'py>,
    hyps: Vec<String>,
    refs: Vec<String>,
    samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = EvalReport::compute(&words(&hyps), &words(&refs), samples, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("n_sentences", r.n_sentences)?;
    for (k, v) in [
        ("bleu", r.bleu),
        ("bleu_low", r.bleu_low),
        ("bleu_high", r.bleu_high),
        ("ter", r.ter),
        ("ter_low", r.ter_low),
        ("ter_high", r.ter_high),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyfunction]
fn optimizers() -> Vec<&'static str> {
    Algorithm::ALL.iter().map(|a| a.name()).collect()
}

/// Synthetic parallel task; every split is a list of (source, target) lines.
#[pyfunction]
#[pyo3(signature = (kind, n_train, n_test, seed = 1, vocab_size = 20, shift = None, n_in_domain_train = 0))]
fn toy_task(
    kind: &str,
    n_train: usize,
    n_test: usize,
    seed: u64,
    vocab_size: usize,
    shift: Option<f64>,
    n_in_domain_train: usize,
) -> PyResult<HashMap<String, Vec<(String, String)>>> {
    let kind: ToyKind = kind.parse().map_err(err)?;
    let mut cfg = ToyConfig::new(kind, n_train, n_test, seed);
    cfg.vocab_size = vocab_size;
    cfg.domain_shift = shift;
    cfg.n_in_domain_train = n_in_domain_train;
    let task = generate_toy_task(&cfg).map_err(err)?;
    let lines = |p: &[TextPair]| p.iter().map(|p| (p.src_text(), p.tgt_text())).collect();
    Ok(HashMap::from([
        ("train".to_string(), lines(&task.train)),
        ("dev".to_string(), lines(&task.dev)),
        ("in_train".to_string(), lines(&task.in_domain_train)),
        ("in_dev".to_string(), lines(&task.in_domain_dev)),
        ("test".to_string(), lines(&task.test)),
    ]))
}

#[pyclass(name = "MergeTable")]
#[derive(Clone)]
struct PyMergeTable(MergeTable);

#[pymethods]
impl PyMergeTable {
    #[staticmethod]
    fn learn(lines: Vec<String>, merges: usize) -> PyResult<Self> {
        let w = words(&lines);
        learn_bpe(w.iter().flatten().map(String::as_str), merges)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        MergeTable::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn apply(&self, line: &str) -> Vec<String> {
        self.0.apply_line(line)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A trained model with its vocabularies and subword tables.
#[pyclass(name = "System")]
#[derive(Clone)]
struct PySystem(olnmt::sim::System<F>);

#[pymethods]
impl PySystem {
    #[staticmethod]
    #[pyo3(signature = (train, dev, dim = 32, max_updates = 10000, eval_every = 1000, patience = 10000, bpe_merges = None, beam_size = 6, max_output_length = 50, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        train: Vec<(String, String)>,
        dev: Vec<(String, String)>,
        dim: usize,
        max_updates: usize,
        eval_every: usize,
        patience: usize,
        bpe_merges: Option<usize>,
        beam_size: usize,
        max_output_length: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let (train, dev) = (pairs(train), pairs(dev));
        py.allow_threads(|| {
            let pipeline = Pipeline::fit(&train, bpe_merges, 30_000)?;
            let mut cfg = ModelConfig::tiny(pipeline.src_vocab.len(), pipeline.tgt_vocab.len(), dim);
            cfg.beam_size = beam_size;
            cfg.max_output_length = max_output_length;
            let init = NmtModel::new(cfg, seed)?;
            let tc = TrainConfig {
                max_updates,
                eval_every,
                patience,
                seed,
                ..TrainConfig::default()
            };
            let model = train_offline(&init, &pipeline, &train, &dev, &tc)?.model;
            Ok(olnmt::sim::System { model, pipeline })
        })
        .map(Self)
        .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        olnmt::sim::System::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn translate(&self, py: Python<'_>, sources: Vec<String>) -> PyResult<Vec<String>> {
        let src = words(&sources);
        let out = py.allow_threads(|| self.0.translate_all(&src)).map_err(err)?;
        Ok(out.into_iter().map(|h| h.join(" ")).collect())
    }

    /// Simulated post-editing over `stream`. Returns one dict per sentence
    /// and the adapted system.
    #[pyo3(signature = (stream, optimizer = "adam", **overrides))]
    fn adapt<'py>(
        &self,
        py: Python<'py>,
        stream: Vec<(String, String)>,
        optimizer: &str,
        overrides: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(Vec<Bound<'py, PyDict>>, Self)> {
        let mut kv = KeyValues::new();
        kv.set("optimizer", optimizer);
        if let Some(o) = overrides {
            for (k, v) in o.iter() {
                kv.set(k.extract::<String>()?, v.str()?.to_string().to_lowercase());
            }
        }
        let opt = OptimizerConfig::from_key_values(&kv).map_err(err)?;
        let cfg = SessionConfig::for_model(opt, &self.0.model);
        let stream = pairs(stream);
        let (trace, model) = py
            .allow_threads(|| run_online_session(&self.0.model, &self.0.pipeline, &stream, &cfg, optimizer, None))
            .map_err(err)?;
        let mut out = Vec::with_capacity(trace.records.len());
        for (r, t) in trace.records.iter().zip(&trace.timings) {
            let d = PyDict::new(py);
            d.set_item("hypothesis", &r.hypothesis)?;
            d.set_item("reference", &r.reference)?;
            d.set_item("cumulative_bleu", r.cumulative_bleu)?;
            d.set_item("cumulative_ter", r.cumulative_ter)?;
            d.set_item("loss", r.loss)?;
            d.set_item("iterations", r.iterations)?;
            let status = match &r.status {
                UpdateStatus::Frozen => "frozen",
                UpdateStatus::Applied => "applied",
                UpdateStatus::Passive => "passive",
                UpdateStatus::Skipped(_) => "skipped",
            };
            d.set_item("status", status)?;
            d.set_item("update_ms", t.update_ms)?;
            out.push(d);
        }
        let adapted = olnmt::sim::System {
            model,
            pipeline: self.0.pipeline.clone(),
        };
        Ok((out, Self(adapted)))
    }

    #[getter]
    fn vocab_sizes(&self) -> (usize, usize) {
        (self.0.pipeline.src_vocab.len(), self.0.pipeline.tgt_vocab.len())
    }
}

#[pymodule]
fn olnmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(ter, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(optimizers, m)?)?;
    m.add_function(wrap_pyfunction!(toy_task, m)?)?;
    m.add_class::<PyMergeTable>()?;
    m.add_class::<PySystem>()?;
    Ok(())
}
