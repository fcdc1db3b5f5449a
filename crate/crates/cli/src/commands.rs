//! Subcommand implementations.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use oracle_al::alcore::{ALConfig, Evaluator, Order, QualityRecord, ScoreCache, Workbench};
use oracle_al::analysis::{
    crossing_curves_demo, distribution_trace, emit_report, order_overlap, seed_mismatch_matrix, transfer_matrix,
    Architecture, DistributionTrace, Labeler, QualityMatrix, Report, ReportFormat,
};
use oracle_al::dataset::{generate_synthetic, load_csv, load_idx, make_splits, Dataset, SyntheticSpec};
use oracle_al::dmr::{accessible_inputs, fit_bins, BinMethod, IdmrSelector, OdmrSelector};
use oracle_al::heuristics::{run_acquisition, run_acquisition_with, AcquisitionStrategy, TopScores};
use oracle_al::learner::LearnerSpec;
use oracle_al::sasearch::{Checkpoint, Phase, Search, ValidationQuality};

use crate::config::{Config, Source};
use crate::error::{CliError, CliResult};
use crate::run::{read_input, read_json, write_atomic, RunDir, CONFIG_SNAPSHOT};

const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg];

/// Shared state for config-driven subcommands.
pub struct Context {
    pub config: Config,
    pub cache: Arc<ScoreCache>,
    bench: Workbench,
}

/// Cache directory: `ORACLE_AL_CACHE`, then `output.cache`, then
/// `<output.dir>/cache`.
pub fn cache_dir(config: Option<&Config>, out: Option<&Path>) -> PathBuf {
    if let Some(dir) = std::env::var_os("ORACLE_AL_CACHE") {
        return PathBuf::from(dir);
    }
    if let Some(dir) = config.and_then(|c| c.output.cache.clone()) {
        return dir;
    }
    out.map(Path::to_path_buf)
        .or_else(|| config.map(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join("cache")
}

pub fn load_dataset(config: &Config) -> CliResult<Dataset> {
    let d = &config.dataset;
    let data = match d.source {
        Source::Synthetic => generate_synthetic(d.synthetic.as_ref().unwrap_or(&SyntheticSpec::reference()), d.seed)?,
        Source::Idx => load_idx(d.images.as_ref().unwrap(), d.labels.as_ref().unwrap())?,
        Source::Csv => load_csv(d.path.as_ref().unwrap())?,
    };
    Ok(match d.max_examples {
        Some(max) => data.subsample(max, d.seed),
        None => data,
    })
}

impl Context {
    pub fn new(config: Config, out: Option<&Path>) -> CliResult<Context> {
        let data = Arc::new(load_dataset(&config)?);
        let splits = make_splits(&data, &config.dataset.splits)?;
        let bench = Workbench::new(data, splits, config.learner.clone(), config.train_config(), config.al.metric)?;
        let cache = Arc::new(ScoreCache::on_disk(cache_dir(Some(&config), out))?);
        Ok(Context { config, cache, bench })
    }

    pub fn al(&self) -> ALConfig {
        ALConfig::new(self.config.al.batch_size, self.config.al.iterations)
    }

    pub fn bench(&self, learner: &LearnerSpec) -> CliResult<Workbench> {
        Ok(self.bench.with_learner(learner.clone())?)
    }

    pub fn evaluator(&self, learner: &LearnerSpec) -> CliResult<Evaluator> {
        Ok(Evaluator::cached(self.bench(learner)?, self.cache.clone()))
    }

    fn random_orders(&self, n: usize) -> CliResult<Vec<Order>> {
        let zeta = self.config.seeds.zeta;
        (0..n as u64)
            .map(|i| Ok(run_acquisition(&AcquisitionStrategy::random(zeta + i), &self.bench, 0, self.al())?))
            .collect()
    }
}

fn order_name(prefix: &str, xi: u64) -> String {
    format!("{prefix}_xi{xi}")
}

fn write_order(run: &RunDir, name: &str, order: &Order) -> CliResult<()> {
    run.write(&format!("orders/{name}.json"), (order.to_json()? + "\n").as_bytes())
}

fn read_order(path: &Path) -> CliResult<Order> {
    let bytes = read_input(path)?;
    let text = String::from_utf8_lossy(&bytes);
    Ok(Order::from_json(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub xi: u64,
    pub q_initial: f64,
    pub q_best: f64,
    pub q_val: f64,
    pub q_test: f64,
}

fn steps_done(c: &Checkpoint) -> usize {
    match c.phase {
        Phase::Anneal => c.completed,
        Phase::Greedy => c.config.anneal_steps + c.completed,
    }
}

fn truncate_lines(path: &Path, keep: usize) -> CliResult<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text.lines().take(keep).map(|l| format!("{l}\n")).collect();
    if kept.lines().count() != keep {
        return Err(CliError::Runtime(format!("{} has fewer than {keep} trace lines", path.display())));
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Outcome of a search invocation.
pub enum SearchOutcome {
    Done(Vec<SearchSummary>),
    /// Step limit reached; the run can be resumed.
    Paused,
}

/// SA search per training seed, with incremental trace and checkpoints.
/// With `step_limit`, stops after that many steps in this invocation.
pub fn search(ctx: &Context, run: &RunDir, step_limit: Option<usize>) -> CliResult<SearchOutcome> {
    let cfg = &ctx.config;
    let ev = ctx.evaluator(&cfg.learner)?;
    let pool = &ev.workbench().splits.pool;
    let mut budget = step_limit.unwrap_or(usize::MAX);
    let mut summaries = Vec::new();
    for &xi in &cfg.seeds.xi {
        let name = order_name("search", xi);
        let ckpt_rel = format!("checkpoints/{name}.json");
        let trace_path = run.file(&format!("traces/{name}.jsonl"));
        let objective = ValidationQuality { evaluator: &ev, xi };
        let mut search = if run.file(&ckpt_rel).is_file() {
            let ckpt: Checkpoint = read_json(&run.file(&ckpt_rel))?;
            truncate_lines(&trace_path, steps_done(&ckpt))?;
            Search::restore(ckpt, pool)?
        } else {
            let s = Search::new(&objective, pool, ctx.al(), cfg.sa_config())?;
            write_atomic(&trace_path, b"")?;
            run.write_json(&ckpt_rel, &s.checkpoint())?;
            s
        };
        let file = fs::OpenOptions::new().append(true).open(&trace_path)?;
        let mut trace = BufWriter::new(file);
        let every = cfg.search.checkpoint_every;
        let mut since = 0;
        while !search.is_done() {
            if budget == 0 {
                trace.flush()?;
                run.write_json(&ckpt_rel, &search.checkpoint())?;
                return Ok(SearchOutcome::Paused);
            }
            let Some(record) = search.step(&objective)? else { break };
            budget -= 1;
            writeln!(trace, "{}", serde_json::to_string(&record)?)?;
            since += 1;
            if since == every {
                since = 0;
                trace.flush()?;
                run.write_json(&ckpt_rel, &search.checkpoint())?;
            }
        }
        trace.flush()?;
        run.write_json(&ckpt_rel, &search.checkpoint())?;
        let (best, q_best) = search.best();
        write_order(run, &name, best)?;
        let record = ev.evaluate_order(best, xi)?;
        run.write_json(&format!("records/{name}.json"), &record)?;
        summaries.push(SearchSummary { xi, q_initial: search.q_initial(), q_best, q_val: record.q_val, q_test: record.q_test });
    }
    run.write_json("summary.json", &summaries)?;
    Ok(SearchOutcome::Done(summaries))
}

/// Order from the configured acquisition strategy per training seed.
pub fn heuristic(ctx: &Context, run: &RunDir) -> CliResult<Vec<(String, QualityRecord)>> {
    let cfg = &ctx.config;
    let bench = ctx.bench(&cfg.learner)?;
    let ev = ctx.evaluator(&cfg.learner)?;
    let strategy = cfg.strategy.strategy(cfg.seeds.zeta);
    let label = cfg.strategy.label();
    let bins = match &cfg.strategy.dmr {
        Some(d @ crate::config::DmrSection::Idmr { bins, bin_seed, .. }) => {
            let b = fit_bins(&bench.dataset, &accessible_inputs(&bench), d.bin_method()?, *bins, *bin_seed)?;
            run.write_json("bins.json", &b)?;
            Some(b)
        }
        _ => None,
    };
    let mut out = Vec::new();
    for &xi in &cfg.seeds.xi {
        let order = match (&bins, cfg.strategy.dmr.as_ref().and_then(|d| d.odmr_variant())) {
            (Some(b), _) => run_acquisition_with(&strategy, &bench, xi, ctx.al(), &mut IdmrSelector::new(&bench, b.clone()))?,
            (None, Some(v)) => run_acquisition_with(&strategy, &bench, xi, ctx.al(), &mut OdmrSelector::new(&bench, v))?,
            (None, None) => run_acquisition_with(&strategy, &bench, xi, ctx.al(), &mut TopScores)?,
        };
        let name = order_name(&label, xi);
        write_order(run, &name, &order)?;
        let record = ev.evaluate_order(&order, xi)?;
        run.write_json(&format!("records/{name}.json"), &record)?;
        out.push((name, record));
    }
    Ok(out)
}

/// Quality record of a stored order under every configured seed.
pub fn evaluate(ctx: &Context, run: &mut RunDir, order_path: &Path) -> CliResult<Vec<QualityRecord>> {
    let order = read_order(order_path)?;
    run.add_input("order", order_path)?;
    let ev = ctx.evaluator(&ctx.config.learner)?;
    order.validate(&ev.workbench().splits.pool)?;
    let mut out = Vec::new();
    for &xi in &ctx.config.seeds.xi {
        let record = ev.evaluate_order(&order, xi)?;
        run.write_json(&format!("records/evaluate_xi{xi}.json"), &record)?;
        out.push(record);
    }
    Ok(out)
}

fn emit(run: &RunDir, report: &Report) -> CliResult<()> {
    emit_report(report, &run.file("report"), &ALL_FORMATS)?;
    Ok(())
}

pub fn seed_matrix(ctx: &Context, run: &mut RunDir, from: &Path) -> CliResult<QualityMatrix> {
    let mut orders = std::collections::BTreeMap::new();
    for &xi in &ctx.config.seeds.xi {
        let path = from.join(format!("orders/{}.json", order_name("search", xi)));
        orders.insert(xi, read_order(&path)?);
        run.add_input(&format!("search_xi{xi}"), &path)?;
    }
    let m = seed_mismatch_matrix(&ctx.evaluator(&ctx.config.learner)?, &orders, &ctx.config.seeds.xi)?;
    run.write_json("analysis/matrix_seed.json", &m)?;
    emit(run, &Report { matrices: vec![("seed".into(), m.clone())], ..Report::default() })?;
    Ok(m)
}

pub fn transfer(ctx: &Context, run: &mut RunDir, from: &[PathBuf]) -> CliResult<QualityMatrix> {
    if from.is_empty() {
        return Err(CliError::Missing("transfer needs at least one --from search run".into()));
    }
    let xi = ctx.config.seeds.xi[0];
    let mut sources = Vec::new();
    for dir in from {
        let text = String::from_utf8_lossy(&read_input(&dir.join(CONFIG_SNAPSHOT))?).into_owned();
        let src = Config::parse(&text)?;
        if src.dataset != ctx.config.dataset {
            return Err(CliError::Config(format!("{}: dataset section differs from the current config", dir.display())));
        }
        let name = ctx
            .config
            .analysis
            .architectures
            .iter()
            .find(|a| a.learner == src.learner)
            .map(|a| a.name.clone())
            .unwrap_or_else(|| src.learner.label());
        let path = dir.join(format!("orders/{}.json", order_name("search", xi)));
        sources.push((Architecture { name: name.clone(), learner: src.learner }, read_order(&path)?));
        run.add_input(&format!("{name}/search_xi{xi}"), &path)?;
    }
    let targets: Vec<Architecture> = if ctx.config.analysis.architectures.is_empty() {
        sources.iter().map(|(a, _)| a.clone()).collect()
    } else {
        ctx.config.analysis.architectures.iter().map(|a| Architecture { name: a.name.clone(), learner: a.learner.clone() }).collect()
    };
    let randoms = ctx.random_orders(ctx.config.analysis.random_orders)?;
    let m = transfer_matrix(&ctx.bench, &ctx.cache, &sources, &targets, &randoms, xi)?;
    run.write_json("analysis/matrix_transfer.json", &m)?;
    emit(run, &Report { matrices: vec![("transfer".into(), m.clone())], ..Report::default() })?;
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapOutput {
    pub a: String,
    pub b: String,
    pub report: oracle_al::analysis::OverlapReport,
}

pub fn overlap(run: &mut RunDir, a: &Path, b: &Path) -> CliResult<OverlapOutput> {
    let (oa, ob) = (read_order(a)?, read_order(b)?);
    run.add_input("a", a)?;
    run.add_input("b", b)?;
    let out = OverlapOutput { a: run.inputs["a"].clone(), b: run.inputs["b"].clone(), report: order_overlap(&oa, &ob)? };
    run.write_json("analysis/overlap.json", &out)?;
    Ok(out)
}

pub fn trace(ctx: &Context, run: &mut RunDir, order_path: &Path) -> CliResult<Vec<(String, DistributionTrace)>> {
    let order = read_order(order_path)?;
    run.add_input("order", order_path)?;
    let bench = &ctx.bench;
    let mut traces = vec![("labels".to_string(), distribution_trace(&order, bench, &Labeler::Label)?)];
    let a = &ctx.config.analysis;
    if a.bins > 0 {
        let bins = fit_bins(&bench.dataset, &accessible_inputs(bench), BinMethod::default(), a.bins, a.bin_seed)?;
        run.write_json("bins.json", &bins)?;
        traces.push(("bins".into(), distribution_trace(&order, bench, &Labeler::Bins(bins))?));
    }
    for (name, t) in &traces {
        run.write_json(&format!("analysis/trace_{name}.json"), t)?;
    }
    emit(run, &Report { traces: traces.clone(), ..Report::default() })?;
    Ok(traces)
}

pub fn crossing(ctx: &Context, run: &RunDir) -> CliResult<oracle_al::analysis::CrossingDemo> {
    let orders = ctx.random_orders(ctx.config.analysis.crossing_orders)?;
    let demo = crossing_curves_demo(&ctx.evaluator(&ctx.config.learner)?, orders, ctx.config.seeds.xi[0])?;
    run.write_json("analysis/crossing.json", &demo)?;
    let curves = demo.curves.iter().enumerate().map(|(i, c)| (format!("random_{i}"), c.clone())).collect();
    emit(run, &Report { curves, ..Report::default() })?;
    Ok(demo)
}

fn sorted_json_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Collects test curves, matrices and traces from finished runs.
pub fn report(run: &mut RunDir, from: &[PathBuf]) -> CliResult<Report> {
    if from.is_empty() {
        return Err(CliError::Missing("report needs at least one --from run".into()));
    }
    let mut report = Report::default();
    for dir in from {
        let manifest = dir.join(crate::run::MANIFEST);
        let run_name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        run.add_input(&run_name, &manifest)?;
        for p in sorted_json_files(&dir.join("records"))? {
            let rec: QualityRecord = read_json(&p)?;
            report.curves.push((format!("{run_name}/{}", stem(&p)), rec.curve_test));
        }
        for p in sorted_json_files(&dir.join("analysis"))? {
            let s = stem(&p);
            if let Some(name) = s.strip_prefix("matrix_") {
                report.matrices.push((format!("{run_name}/{name}"), read_json(&p)?));
            } else if let Some(name) = s.strip_prefix("trace_") {
                report.traces.push((format!("{run_name}/{name}"), read_json(&p)?));
            }
        }
    }
    emit(run, &report)?;
    Ok(report)
}
