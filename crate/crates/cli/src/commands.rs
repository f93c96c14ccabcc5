use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use coanno_core::context::{EnsembleModels, HeadKind, PoolingPredicate};
use coanno_core::engine::{mean_curve, run_episode, AssistantConfig, ContextAssistant, EpisodeTranscript, Systems};
use coanno_core::init::IaModel;
use coanno_core::io::{Dataset, SceneData};
use coanno_core::training::pipeline::{train_context_assistant, tuning_split};
use coanno_core::training::{
    context_accuracy, generate_episode_logs, read_shard, sample_add_examples, sample_relabel_examples, train_context,
    train_ia_with_mining, write_shard, ContextExample, EpisodeLog,
};
use coanno_core::training::ia::tune_stop_threshold;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::output::{self, RunSummary};
use crate::{Cli, Command};

pub const IA_FILE: &str = "ia.json";
pub const LOG_FILE_VERSION: u32 = 1;
/// Subdirectories written by `examples`.
pub const LOGS_DIR: &str = "logs";
pub const SHARDS_DIR: &str = "shards";

/// Runs `f` on a pool of `jobs` threads, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

pub fn dispatch(cli: &Cli, mut cfg: Config) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            if let Some(seed) = cli.seed {
                cfg.world.seed = seed;
            }
            cfg.validate()?;
            synth(&cfg, &a.out, &a.split)
        }
        Command::Examples(a) => {
            cfg.validate()?;
            examples(&cfg, &a.data, &a.out)
        }
        Command::TrainContext(a) => {
            cfg.validate()?;
            let shards = expand_globs(&a.shards)?;
            let tune = expand_globs(&a.tune_shards)?;
            train_context_cmd(&cfg, a.data.as_deref(), &shards, &tune, &a.out)
        }
        Command::TrainIa(a) => {
            cfg.validate()?;
            let logs = expand_globs(&a.logs)?;
            train_ia_cmd(&cfg, &a.data, &logs, &a.out)
        }
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            s.budget = a.budget.unwrap_or(s.budget);
            s.tau = a.tau.unwrap_or(s.tau);
            s.max_adds = a.max_adds.unwrap_or(s.max_adds);
            s.ia &= !a.no_ia;
            s.ca_add &= !a.no_ca_add;
            s.ca_relabel &= !a.no_ca_relabel;
            cfg.validate()?;
            simulate_cmd(&cfg, &a.data, a.ca.as_deref(), a.ia.as_deref(), &a.out, a.variant.as_deref())
        }
        Command::Eval(a) => {
            if !a.target.is_empty() {
                cfg.eval.targets = a.target.clone();
            }
            cfg.validate()?;
            let runs = a.run.iter().map(|r| output::parse_named_run(r)).collect::<Result<Vec<_>>>()?;
            eval_cmd(&cfg, a.data.as_deref(), a.ca.as_deref(), &runs, &a.out)
        }
        Command::ExportCurve(a) => {
            let runs = a.run.iter().map(|r| output::parse_named_run(r)).collect::<Result<Vec<_>>>()?;
            export_curve(&runs, &a.out)
        }
        Command::Serve(a) => {
            if let Some(addr) = &a.addr {
                cfg.serve.addr = addr.clone();
            }
            cfg.validate()?;
            serve_cmd(&cfg, a)
        }
    }
}

/// Expands shell-style patterns into a sorted, duplicate-free path list. A
/// pattern that matches nothing is a data error.
pub fn expand_globs(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let paths = glob::glob(p).map_err(|e| CliError::Config(format!("bad glob {p:?}: {e}")))?;
        let before = out.len();
        for path in paths {
            out.push(path.map_err(|e| CliError::Data(e.to_string()))?);
        }
        if out.len() == before {
            return Err(CliError::Data(format!("{p:?} matches no files")));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    config: &'a Config,
}

fn write_run_record(dir: &Path, command: &str, cfg: &Config) -> Result<()> {
    let record = RunRecord { command, seed: cfg.seed, config: cfg };
    output::write_text(&dir.join(output::RUN_FILE), &serde_json::to_string_pretty(&record).expect("record serializes"))
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

pub fn load_scenes(dir: &Path, predicate: PoolingPredicate) -> Result<Vec<SceneData>> {
    Ok(Dataset::read(dir)?.prepare(predicate)?)
}

pub fn load_ia(path: &Path) -> Result<IaModel> {
    let file = if path.is_dir() { path.join(IA_FILE) } else { path.to_path_buf() };
    Ok(IaModel::load(&file)?)
}

pub fn load_ca(dir: &Path, predicate: PoolingPredicate) -> Result<ContextAssistant> {
    Ok(ContextAssistant::load(dir, predicate)?)
}

pub fn synth(cfg: &Config, out: &Path, split: &str) -> Result<()> {
    let splits: Vec<&str> = if split == "all" { vec!["train", "val", "test"] } else { vec![split] };
    output::create_dir(out)?;
    for s in &splits {
        let data = Dataset::synthesize(&cfg.world, &cfg.splits, s)?;
        data.write(&out.join(s))?;
        log::info!("wrote {} scenes to {}", data.items.len(), out.join(s).display());
    }
    write_run_record(out, "synth", cfg)?;
    print_json(&json!({ "splits": splits, "out": out }));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    version: u32,
    count: usize,
}

pub fn write_logs(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::data_io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut lines = vec![serde_json::to_string(&LogHeader { version: LOG_FILE_VERSION, count: logs.len() }).unwrap()];
    lines.extend(logs.iter().map(|l| serde_json::to_string(l).expect("log serializes")));
    for line in lines {
        writeln!(w, "{line}").map_err(|e| CliError::data_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::data_io(path, e))
}

pub fn read_logs(path: &Path) -> Result<Vec<EpisodeLog>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::data_io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let bad = |m: String| CliError::Data(format!("{}: {m}", path.display()));
    let first = lines.next().ok_or_else(|| bad("empty log file".into()))?.map_err(|e| bad(e.to_string()))?;
    let header: LogHeader = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
    if header.version != LOG_FILE_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
        }
    }
    if out.len() != header.count {
        return Err(bad(format!("header promises {} logs, found {}", header.count, out.len())));
    }
    Ok(out)
}

pub fn examples(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let p = &cfg.training;
    let scenes = load_scenes(data, p.predicate)?;
    let (fit, tune) = tuning_split(&scenes, p)?;
    let (log_dir, shard_dir) = (out.join(LOGS_DIR), out.join(SHARDS_DIR));
    output::create_dir(&log_dir)?;
    output::create_dir(&shard_dir)?;
    let mut counts = BTreeMap::new();
    for (role, part) in [("fit", fit), ("tune", tune)] {
        let logs = generate_episode_logs(part, p.log_budget)?;
        write_logs(&log_dir.join(format!("{role}.jsonl")), &logs)?;
        let rel = sample_relabel_examples(part, &logs, &p.sampling)?;
        let add = sample_add_examples(part, &logs, &p.sampling)?;
        write_shard(&shard_dir.join(format!("relabel-{role}.jsonl")), HeadKind::Relabel, &rel)?;
        write_shard(&shard_dir.join(format!("add-{role}.jsonl")), HeadKind::Add, &add)?;
        counts.insert(format!("relabel-{role}"), rel.len());
        counts.insert(format!("add-{role}"), add.len());
    }
    write_run_record(out, "examples", cfg)?;
    print_json(&json!({ "examples": counts }));
    Ok(())
}

fn read_shards(paths: &[PathBuf]) -> Result<(Vec<ContextExample>, Vec<ContextExample>)> {
    let (mut rel, mut add) = (Vec::new(), Vec::new());
    for path in paths {
        let (head, examples) = read_shard(path)?;
        match head {
            HeadKind::Relabel => rel.extend(examples),
            HeadKind::Add => add.extend(examples),
        }
    }
    Ok((rel, add))
}

pub fn train_context_cmd(cfg: &Config, data: Option<&Path>, shards: &[PathBuf], tune: &[PathBuf], out: &Path) -> Result<()> {
    let p = &cfg.training;
    let (ca, rel_report, add_report, n_rel, n_add) = if shards.is_empty() {
        let data = data.ok_or_else(|| CliError::Config("train-context needs --data or --shards".into()))?;
        train_context_assistant(&load_scenes(data, p.predicate)?, p)?
    } else {
        let (rel, add) = read_shards(shards)?;
        let (rel_t, add_t) = read_shards(tune)?;
        let num_classes = rel
            .first()
            .map(|e| e.x_p.scores.len())
            .ok_or_else(|| CliError::Data("no relabel examples among the shards".into()))?;
        if add.is_empty() {
            return Err(CliError::Data("no add examples among the shards".into()));
        }
        let (relabel, rel_report) = train_context(HeadKind::Relabel, num_classes, &rel, &rel_t, &p.context)?;
        let (add_models, add_report) = train_context(HeadKind::Add, num_classes, &add, &add_t, &p.context)?;
        (ContextAssistant { relabel, add: add_models, predicate: p.predicate }, rel_report, add_report, rel.len(), add.len())
    };
    output::create_dir(out)?;
    ca.save(out)?;
    let report = json!({
        "relabel": rel_report,
        "add": add_report,
        "relabel_examples": n_rel,
        "add_examples": n_add,
    });
    output::write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report).unwrap())?;
    write_run_record(out, "train-context", cfg)?;
    print_json(&json!({ "out": out, "relabel_examples": n_rel, "add_examples": n_add }));
    Ok(())
}

pub fn train_ia_cmd(cfg: &Config, data: &Path, log_files: &[PathBuf], out: &Path) -> Result<()> {
    let p = &cfg.training;
    let scenes = load_scenes(data, p.predicate)?;
    let num_classes = scenes.first().map(|d| d.scene.num_classes()).ok_or_else(|| CliError::Data("empty training split".into()))?;
    let (fit, tune) = tuning_split(&scenes, p)?;
    let logs = if log_files.is_empty() {
        generate_episode_logs(fit, p.log_budget)?
    } else {
        let mut by_id = BTreeMap::new();
        for path in log_files {
            for log in read_logs(path)? {
                by_id.insert(log.image_id.clone(), log);
            }
        }
        fit.iter()
            .map(|d| {
                let id = &d.scene.proposals.image_id;
                by_id.remove(id).ok_or_else(|| CliError::Data(format!("no episode log for {id}")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let (mut ia, rounds) = train_ia_with_mining(num_classes, fit, &logs, &p.ia)?;
    let mut tuned_pq = None;
    if p.tune_stop_threshold {
        let (t, pq) = tune_stop_threshold(&ia, tune)?;
        ia.stop_threshold = t;
        tuned_pq = Some(pq);
    }
    output::create_dir(out)?;
    ia.save(&out.join(IA_FILE))?;
    let report = json!({ "mining": rounds, "stop_threshold": ia.stop_threshold, "tuning_init_pq": tuned_pq });
    output::write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report).unwrap())?;
    write_run_record(out, "train-ia", cfg)?;
    print_json(&json!({ "out": out, "stop_threshold": ia.stop_threshold, "tuning_init_pq": tuned_pq }));
    Ok(())
}

/// `baseline`, `full`, or the enabled parts joined by `+`.
pub fn variant_name(ia: bool, relabel: bool, add: bool) -> String {
    match (ia, relabel, add) {
        (false, false, false) => "baseline".into(),
        (true, true, true) => "full".into(),
        _ => [(ia, "ia"), (relabel, "rel"), (add, "add")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("+"),
    }
}

/// Runs one episode per scene in parallel; the output keeps scene order.
pub fn simulate(scenes: &[SceneData], systems: &Systems, budget: usize) -> Result<(Vec<EpisodeTranscript>, Vec<f64>)> {
    let transcripts = scenes
        .par_iter()
        .map(|d| run_episode(&d.scene, &d.gt, systems, budget))
        .collect::<coanno_core::Result<Vec<_>>>()?;
    let curves: Vec<Vec<f64>> = transcripts.iter().map(|t| t.curve.clone()).collect();
    Ok((transcripts, mean_curve(&curves)))
}

pub fn simulate_cmd(
    cfg: &Config,
    data: &Path,
    ca_dir: Option<&Path>,
    ia_path: Option<&Path>,
    out: &Path,
    variant: Option<&str>,
) -> Result<()> {
    let s = &cfg.simulate;
    let predicate = cfg.training.predicate;
    let uses_ca = s.ca_relabel || s.ca_add;
    if s.ia && ia_path.is_none() {
        return Err(CliError::Config("--ia is required unless --no-ia is given".into()));
    }
    if uses_ca && ca_dir.is_none() {
        return Err(CliError::Config("--ca is required unless both --no-ca-add and --no-ca-relabel are given".into()));
    }
    let ia = ia_path.filter(|_| s.ia).map(load_ia).transpose()?;
    let ca = ca_dir.filter(|_| uses_ca).map(|d| load_ca(d, predicate)).transpose()?;
    let scenes = load_scenes(data, predicate)?;
    let systems = Systems {
        ia: ia.as_ref(),
        ca: ca.as_ref(),
        assistant: AssistantConfig { relabel: s.ca_relabel, add: s.ca_add, tau: s.tau, max_adds: s.max_adds, time_budget: None },
        visibility_threshold: s.visibility_threshold,
    };
    let (transcripts, curve) = simulate(&scenes, &systems, s.budget)?;
    let name = variant.map(String::from).unwrap_or_else(|| variant_name(s.ia, s.ca_relabel, s.ca_add));
    output::create_dir(out)?;
    output::write_transcripts(&out.join(output::TRANSCRIPTS_FILE), &transcripts)?;
    output::write_curves(&out.join(output::CURVES_FILE), &transcripts)?;
    output::write_mean_curve(&out.join(output::MEAN_CURVE_FILE), &curve)?;
    let summary = RunSummary::new(&name, &transcripts, &curve, s.budget, &cfg.eval.targets);
    output::write_text(&out.join(output::SUMMARY_FILE), &serde_json::to_string_pretty(&summary).unwrap())?;
    write_run_record(out, "simulate", cfg)?;
    print_json(&serde_json::to_value(&summary).unwrap());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub k: usize,
    pub ensemble_accuracy: f64,
    pub generic_accuracy: f64,
    pub proposal_accuracy: f64,
    pub scenes: usize,
    pub targets: usize,
}

pub fn accuracy_rows(scenes: &[SceneData], relabel: &EnsembleModels, cfg: &Config) -> Result<Vec<AccuracyRow>> {
    let generic = EnsembleModels::generic_only(relabel.generic.clone(), relabel.k_split);
    let ens = context_accuracy(scenes, relabel, &cfg.eval.accuracy)?;
    let gen = context_accuracy(scenes, &generic, &cfg.eval.accuracy)?;
    Ok((0..ens.accuracy.len())
        .map(|k| AccuracyRow {
            k,
            ensemble_accuracy: ens.accuracy[k],
            generic_accuracy: gen.accuracy[k],
            proposal_accuracy: ens.proposal_accuracy,
            scenes: ens.scenes,
            targets: ens.targets,
        })
        .collect())
}

/// Tolerance under which a curve counts as having reached the baseline's
/// final PQ.
pub const FINAL_PQ_TOLERANCE: f64 = 0.01;

pub fn eval_cmd(cfg: &Config, data: Option<&Path>, ca_dir: Option<&Path>, runs: &[(String, PathBuf)], out: &Path) -> Result<()> {
    if ca_dir.is_none() && runs.is_empty() {
        return Err(CliError::Config("eval needs --ca (with --data) or at least one --run".into()));
    }
    output::create_dir(out)?;
    let mut report = serde_json::Map::new();
    if let Some(dir) = ca_dir {
        let data = data.ok_or_else(|| CliError::Config("--ca needs --data".into()))?;
        let ca = load_ca(dir, cfg.training.predicate)?;
        let scenes = load_scenes(data, cfg.training.predicate)?;
        let rows = accuracy_rows(&scenes, &ca.relabel, cfg)?;
        let path = out.join("context_accuracy.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::data_io(&path, e))?;
        for r in &rows {
            w.serialize(r).map_err(|e| CliError::data_io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::data_io(&path, e))?;
        report.insert("context_accuracy".into(), serde_json::to_value(&rows).unwrap());
    }
    if !runs.is_empty() {
        let curves = runs
            .iter()
            .map(|(name, dir)| Ok((name.clone(), output::read_mean_curve(&dir.join(output::MEAN_CURVE_FILE))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut targets = cfg.eval.targets.clone();
        if let Some((_, base)) = curves.iter().find(|(n, _)| n == "baseline") {
            targets.push(base[base.len() - 1] - FINAL_PQ_TOLERANCE);
        }
        output::write_summary_csv(&out.join("summary.csv"), &curves, &targets)?;
        report.insert("targets".into(), json!(targets));
        report.insert(
            "runs".into(),
            json!(curves
                .iter()
                .map(|(n, c)| json!({
                    "variant": n,
                    "init_pq": c[0],
                    "final_pq": c[c.len() - 1],
                    "actions_to": targets.iter().map(|&t| coanno_core::engine::actions_to_reach(c, t)).collect::<Vec<_>>(),
                }))
                .collect::<Vec<_>>()),
        );
    }
    let report = serde_json::Value::Object(report);
    output::write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report).unwrap())?;
    write_run_record(out, "eval", cfg)?;
    print_json(&report);
    Ok(())
}

pub fn export_curve(runs: &[(String, PathBuf)], out: &Path) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    if let Some((dup, _)) = runs.iter().find(|(n, _)| !seen.insert(n.clone())) {
        return Err(CliError::Config(format!("run name {dup:?} given twice")));
    }
    let curves = runs
        .iter()
        .map(|(name, dir)| Ok((name.clone(), output::read_mean_curve(&dir.join(output::MEAN_CURVE_FILE))?)))
        .collect::<Result<Vec<_>>>()?;
    output::create_dir(out)?;
    for (name, curve) in &curves {
        output::write_mean_curve(&out.join(format!("{name}.csv")), curve)?;
        if !output::is_monotone(curve) {
            log::warn!("mean curve of {name} decreases somewhere");
        }
    }
    output::write_combined_csv(&out.join("curves.csv"), &curves)?;
    let plot = output::plot_data(&curves);
    output::write_text(&out.join("plot_data.json"), &serde_json::to_string_pretty(&plot).unwrap())?;
    print_json(&json!({ "out": out, "series": curves.iter().map(|(n, _)| n).collect::<Vec<_>>() }));
    Ok(())
}

pub fn serve_cmd(cfg: &Config, a: &crate::ServeArgs) -> Result<()> {
    let predicate = cfg.training.predicate;
    let addr: std::net::SocketAddr =
        cfg.serve.addr.parse().map_err(|e| CliError::Config(format!("bad address {:?}: {e}", cfg.serve.addr)))?;
    let models = coanno_service::Models {
        context: a.ca.as_deref().map(|d| load_ca(d, predicate)).transpose()?,
        initialization: a.ia.as_deref().map(load_ia).transpose()?,
        refs: coanno_service::CheckpointRefs {
            context: a.ca.as_ref().map(|p| p.display().to_string()),
            initialization: a.ia.as_ref().map(|p| p.display().to_string()),
        },
    };
    let config = coanno_service::ServiceConfig {
        sessions_dir: a.sessions.clone(),
        images_dir: a.images.clone(),
        turn_budget: (cfg.serve.turn_budget_ms > 0).then(|| Duration::from_millis(cfg.serve.turn_budget_ms)),
    };
    let service = Arc::new(coanno_service::Service::new(load_scenes(&a.data, predicate)?, models, config)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(format!("runtime: {e}")))?;
    runtime
        .block_on(coanno_service::serve(service, addr))
        .map_err(|e| CliError::Data(format!("serving on {addr}: {e}")))
}
