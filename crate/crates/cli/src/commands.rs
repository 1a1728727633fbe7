use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use olnmt::bpe::{learn_bpe, MergeTable};
use olnmt::corpus::{generate_toy_task, load_parallel, read_lines, write_lines, TextPair, ToyConfig, ToyKind};
use olnmt::metrics::{bleu_stats, bootstrap_ci, ter_stats, EvalReport, DEFAULT_BOOTSTRAP_SAMPLES};
use olnmt::model::NmtModel;
use olnmt::optim::Algorithm;
use olnmt::sim::{
    measure_update_time, read_trace_records, run_online_session, run_scenario, train_offline, trajectory_series,
    write_json, Pipeline, ScenarioData, ScenarioSpec, SessionConfig, SimulationTrace, System, TraceWriter,
    REFERENCE_UPDATE_MS,
};
use olnmt::tokenize::tokenize;
use olnmt::vocab::VocabularyMap;

use crate::settings::Settings;
use crate::CliError;

type F = f32;

const DEFAULT_MAX_VOCAB: usize = 30_000;

pub fn dispatch(name: &str, s: &mut Settings, out: &Path) -> Result<(), CliError> {
    match name {
        "bpe-learn" => bpe_learn(s, out),
        "bpe-apply" => bpe_apply(s, out),
        "vocab" => vocab(s, out),
        "train" => train(s, out),
        "adapt" => adapt(s, out),
        "translate" => translate(s, out),
        "evaluate" => evaluate(s, out),
        "scenario" => scenario(s, out),
        "plot-data" => plot_data(s, out),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn inputs(s: &mut Settings) -> Result<Vec<PathBuf>, CliError> {
    let files = s.list("input")?;
    if files.is_empty() {
        return Err(CliError::Usage("missing required --input".into()));
    }
    Ok(files.into_iter().map(PathBuf::from).collect())
}

fn tokenized(files: &[PathBuf]) -> Result<Vec<Vec<String>>, CliError> {
    let mut out = Vec::new();
    for f in files {
        out.extend(read_lines(f)?.iter().map(|l| tokenize(l)));
    }
    Ok(out)
}

fn bpe_learn(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let files = inputs(s)?;
    let merges = s.require::<usize>("bpe_merges")?;
    let lines = tokenized(&files)?;
    let table = learn_bpe(lines.iter().flatten().map(String::as_str), merges)?;
    let p = out.join("codes.bpe");
    table.save(&p)?;
    println!("{} merges -> {}", table.len(), p.display());
    Ok(())
}

fn bpe_apply(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let table = MergeTable::load(s.path("codes")?)?;
    let input = s.path("input")?;
    let name = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let p = out.join(format!("{name}.bpe"));
    write_lines(&p, read_lines(&input)?.iter().map(|l| table.apply_line(l).join(" ")))?;
    println!("{}", p.display());
    Ok(())
}

fn vocab(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let files = inputs(s)?;
    let max = s.get("max_vocab", DEFAULT_MAX_VOCAB)?;
    let lines = tokenized(&files)?;
    let v = VocabularyMap::build(lines.iter().flatten().map(String::as_str), max)?;
    let p = out.join("vocab.tsv");
    v.save(&p)?;
    println!("{} symbols -> {}", v.len(), p.display());
    Ok(())
}

fn corpus(s: &mut Settings, src: &str, tgt: &str) -> Result<Vec<TextPair>, CliError> {
    let (sp, tp) = (s.path(src)?, s.path(tgt)?);
    let c = load_parallel(&sp, &tp)?;
    if c.dropped > 0 {
        log::warn!("{}: dropped {} pairs with an empty side", sp.display(), c.dropped);
    }
    Ok(c.pairs)
}

fn opt_corpus(s: &mut Settings, src: &str, tgt: &str) -> Result<Vec<TextPair>, CliError> {
    match (s.opt_path(src)?, s.opt_path(tgt)?) {
        (None, None) => Ok(Vec::new()),
        (Some(_), Some(_)) => corpus(s, src, tgt),
        _ => Err(CliError::Usage(format!(
            "--{} and --{} must be given together",
            src.replace('_', "-"),
            tgt.replace('_', "-")
        ))),
    }
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    updates: usize,
    best_update: usize,
    best_dev_score: f64,
    diverged: bool,
    evals: &'a [olnmt::sim::EvalPoint],
}

fn train(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let seed = s.seed()?;
    let train = corpus(s, "train_src", "train_tgt")?;
    let dev = corpus(s, "dev_src", "dev_tgt")?;
    let (init, pipeline) = match s.opt_path("init")? {
        Some(dir) => {
            let sys = System::<F>::load(&dir)?;
            (sys.model, sys.pipeline)
        }
        None => {
            let merges = s.bpe_merges()?;
            let max_vocab = s.get("max_vocab", DEFAULT_MAX_VOCAB)?;
            let pipeline = Pipeline::fit(&train, merges, max_vocab)?;
            let mut cfg = s.model()?;
            cfg.src_vocab_size = pipeline.src_vocab.len();
            cfg.tgt_vocab_size = pipeline.tgt_vocab.len();
            (NmtModel::new(cfg, seed)?, pipeline)
        }
    };
    let cfg = s.train("", seed, init.config.weight_noise_sigma)?;
    let outcome = train_offline(&init, &pipeline, &train, &dev, &cfg)?;
    let system = System {
        model: outcome.model,
        pipeline,
    };
    system.save(out.join("system"))?;
    write_json(
        &out.join("training.json"),
        &TrainingSummary {
            updates: outcome.updates,
            best_update: outcome.best_update,
            best_dev_score: outcome.best_dev_score,
            diverged: outcome.diverged,
            evals: &outcome.evals,
        },
    )?;
    let last = outcome.evals.iter().find(|e| e.update == outcome.best_update);
    println!(
        "{} updates, best at {} (dev BLEU {:.2}) -> {}",
        outcome.updates,
        outcome.best_update,
        last.map_or(0.0, |e| e.dev_bleu),
        out.join("system").display()
    );
    Ok(())
}

fn load_system(s: &mut Settings) -> Result<System<F>, CliError> {
    let mut sys = System::<F>::load(s.path("system")?)?;
    if let Some(b) = s.opt::<usize>("beam_size")? {
        sys.model.config.beam_size = b;
    }
    Ok(sys)
}

fn adapt(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let seed = s.seed()?;
    let sys = load_system(s)?;
    let test = corpus(s, "test_src", "test_tgt")?;
    let opt = s.optimizer(Algorithm::Adam)?;
    let samples = s.get("bootstrap_samples", DEFAULT_BOOTSTRAP_SAMPLES)?;
    let cfg = SessionConfig::for_model(opt.clone(), &sys.model);
    let name = opt.algorithm.name();
    let mut writer = TraceWriter::create(out, name)?;
    let (trace, _) = run_online_session(&sys.model, &sys.pipeline, &test, &cfg, name, Some(&mut writer))?;
    write_lines(
        &out.join("hypotheses.txt"),
        trace.records.iter().map(|r| r.hypothesis.clone()),
    )?;
    let report = EvalReport::compute(&trace.hypotheses(), &trace.references(), samples, seed)?;
    write_json(&out.join("report.json"), &report)?;
    print_scores(s, &report)?;
    if opt.algorithm != Algorithm::None {
        let t = measure_update_time(&trace.timings)?;
        write_json(&out.join("update_time.json"), &t)?;
        println!(
            "update time {:.2} ms mean, {:.2} ms p95 (reference {REFERENCE_UPDATE_MS} ms)",
            t.mean_ms, t.p95_ms
        );
    }
    Ok(())
}

fn translate(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let sys = load_system(s)?;
    let sources: Vec<Vec<String>> = read_lines(s.path("input")?)?.iter().map(|l| tokenize(l)).collect();
    let hyps = sys.translate_all(&sources)?;
    let p = out.join("hypotheses.txt");
    write_lines(&p, hyps.iter().map(|h| h.join(" ")))?;
    info!("{} sentences -> {}", hyps.len(), p.display());
    Ok(())
}

fn print_scores(s: &mut Settings, r: &EvalReport) -> Result<(), CliError> {
    let metric = s.get::<String>("metric", "all".into())?;
    if metric != "ter" {
        println!("BLEU {:.1} ± {:.1}", r.bleu, r.bleu_half_width);
    }
    if metric != "bleu" {
        println!("TER {:.1} ± {:.1}", r.ter, r.ter_half_width);
    }
    Ok(())
}

fn evaluate(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let seed = s.seed()?;
    let hyps: Vec<Vec<String>> = read_lines(s.path("hyp")?)?.iter().map(|l| tokenize(l)).collect();
    let refs: Vec<Vec<String>> = read_lines(s.path("ref")?)?.iter().map(|l| tokenize(l)).collect();
    let samples = s.get("bootstrap_samples", DEFAULT_BOOTSTRAP_SAMPLES)?;
    let metric = s.get::<String>("metric", "all".into())?;
    let mut scores = serde_json::Map::new();
    if metric != "ter" {
        let ci = bootstrap_ci(&bleu_stats(&hyps, &refs)?, samples, seed);
        println!("BLEU {:.1} ± {:.1}", ci.point, ci.half_width());
        scores.insert("bleu".into(), serde_json::to_value(ci).expect("plain struct"));
    }
    if metric != "bleu" {
        let ci = bootstrap_ci(&ter_stats(&hyps, &refs, true)?, samples, seed);
        println!("TER {:.1} ± {:.1}", ci.point, ci.half_width());
        scores.insert("ter".into(), serde_json::to_value(ci).expect("plain struct"));
    }
    write_json(&out.join("evaluation.json"), &scores)?;
    Ok(())
}

fn toy_data(s: &mut Settings, id: u8, seed: u64) -> Result<ScenarioData, CliError> {
    let kind: ToyKind = s.get("toy_kind", "substitution".to_string())?.parse()?;
    let mut cfg = ToyConfig::new(kind, s.get("toy_train", 5000)?, s.get("toy_test", 1000)?, seed);
    cfg.n_dev = s.get("toy_dev", 200)?;
    cfg.vocab_size = s.get("toy_vocab", cfg.vocab_size)?;
    cfg.n_in_domain_train = s.get("toy_in_train", if id == 1 { 0 } else { 1000 })?;
    cfg.domain_shift = Some(s.get("toy_shift", 0.3)?);
    let task = generate_toy_task(&cfg)?;
    Ok(ScenarioData {
        out_train: task.train,
        out_dev: task.dev,
        in_train: task.in_domain_train,
        in_dev: task.in_domain_dev,
        test: task.test,
    })
}

fn scenario(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let seed = s.seed()?;
    let id = s.require::<u8>("id")?;
    let data = if s.get("toy", false)? {
        toy_data(s, id, seed)?
    } else {
        let (out_train, out_dev) = if id == 3 {
            (Vec::new(), Vec::new())
        } else {
            (corpus(s, "train_src", "train_tgt")?, corpus(s, "dev_src", "dev_tgt")?)
        };
        ScenarioData {
            out_train,
            out_dev,
            in_train: opt_corpus(s, "in_train_src", "in_train_tgt")?,
            in_dev: opt_corpus(s, "in_dev_src", "in_dev_tgt")?,
            test: corpus(s, "test_src", "test_tgt")?,
        }
    };
    let model = s.model()?;
    let mut spec = ScenarioSpec::new(id, model, s.optimizers()?, seed);
    spec.train = s.train("", seed, spec.model.weight_noise_sigma)?;
    if id == 2 {
        spec.fine_tune = s.train("fine_tune_", seed, spec.model.weight_noise_sigma)?;
    }
    spec.bpe_merges = s.bpe_merges()?;
    spec.max_vocab = s.get("max_vocab", DEFAULT_MAX_VOCAB)?;
    spec.bootstrap_samples = s.get("bootstrap_samples", DEFAULT_BOOTSTRAP_SAMPLES)?;
    let result = run_scenario::<F>(&spec, &data, Some(out))?;
    print!("{}", result.report);
    for (name, t) in &result.update_times {
        println!(
            "{name}: update {:.2} ms mean (reference {REFERENCE_UPDATE_MS} ms)",
            t.mean_ms
        );
    }
    Ok(())
}

fn load_trace(path: &Path) -> Result<SimulationTrace, CliError> {
    let records = read_trace_records(path)?;
    let file = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = file.strip_suffix(".trace.jsonl").unwrap_or(&file).to_string();
    let algorithm = name
        .split('-')
        .next()
        .and_then(|a| a.parse().ok())
        .unwrap_or(Algorithm::None);
    Ok(SimulationTrace {
        name,
        algorithm,
        records,
        timings: Vec::new(),
    })
}

fn plot_data(s: &mut Settings, out: &Path) -> Result<(), CliError> {
    let baseline = load_trace(&s.path("baseline")?)?;
    let online = s
        .list("online")?
        .iter()
        .map(|p| load_trace(Path::new(p)))
        .collect::<Result<Vec<_>, _>>()?;
    if online.is_empty() {
        return Err(CliError::Usage("missing required --online".into()));
    }
    let series = trajectory_series(&baseline, &online)?;
    let p = out.join("trajectory.tsv");
    std::fs::write(&p, series.to_tsv()).map_err(|e| olnmt::Error::Io {
        path: p.clone(),
        source: e,
    })?;
    println!("{}", p.display());
    Ok(())
}
