use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use dtal_core::active::{write_iteration_csv, IterationLog, OracleAnnotator};
use dtal_core::baselines::{self, read_features_csv, GaussianNb, LogReg};
use dtal_core::checkpoint;
use dtal_core::data::{
    block, read_json, split, write_json, BlockOptions, CandidateSet, EntityTable, GoldMatches, PreparedDataset,
    Provenance, SplitSpec, META_FILE,
};
use dtal_core::experiment::{run_experiment, ExperimentConfig, ExperimentReport, Summary};
use dtal_core::model::ErModel;
use dtal_core::pipeline::{self, encode_dataset, EncodedDataset, PipelineError};
use dtal_core::synth::SynthConfig;
use dtal_core::trainer::{append_metrics_csv, evaluate, EvalReport, LabeledPair, MetricsRow};
use dtal_serve::api::{CreateSession, Init};
use dtal_serve::{AppState, ServeConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Algo, AnnotatorKind, Cli, CliError, Command, Common, SplitName};

type Result<T> = std::result::Result<T, CliError>;

fn rt(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// What every run command leaves in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_labels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub split: String,
    /// None when the evaluated split has no gold labels.
    pub report: Option<EvalReport>,
}

impl RunSummary {
    fn new(command: &str, split: &str, report: Option<EvalReport>) -> Self {
        Self {
            command: command.into(),
            mode: None,
            human_labels: None,
            best_epoch: None,
            split: split.into(),
            report,
        }
    }
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    /// Loads, overrides and validates the configuration, then creates the
    /// output directory and echoes the resolved configuration into it.
    fn start(name: &str, common: &Common, argv: &[String], tweak: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.reseed(seed);
        }
        tweak(&mut cfg);
        cfg.validate()?;
        let out = match &common.out {
            Some(out) => out.clone(),
            None => {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
                PathBuf::from("runs").join(format!("{name}-{secs}-seed{}", cfg.train.seed))
            }
        };
        fs::create_dir_all(&out).map_err(|e| rt(format!("{}: {e}", out.display())))?;
        write_json(&out.join("config.json"), &cfg).map_err(rt)?;
        write_json(&out.join("command.json"), &serde_json::json!({ "argv": argv })).map_err(rt)?;
        info!("{name}: writing to {}", out.display());
        Ok(Self { cfg, out })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn finish(&self, summary: &RunSummary) -> Result<()> {
        write_json(&self.path(SUMMARY_FILE), summary).map_err(rt)?;
        write_report_csv(&self.path(REPORT_FILE), &summary.split, summary.report.as_ref())?;
        match &summary.report {
            Some(r) => println!(
                "{} {}: precision {:.2} recall {:.2} f1 {:.2}",
                summary.command, summary.split, r.precision, r.recall, r.f1
            ),
            None => println!("{}: no gold labels on {}", summary.command, summary.split),
        }
        Ok(())
    }

    fn save(&self, model: &ErModel, training: serde_json::Value) -> Result<()> {
        checkpoint::save(model, self.path(CHECKPOINT_FILE), training).map_err(rt)
    }

    fn init_model(&self, init: &str) -> Result<ErModel> {
        if init == "random" {
            return pipeline::new_model(self.cfg.model.clone(), self.cfg.tokenizer, self.cfg.store()?).map_err(rt);
        }
        let path = Path::new(init);
        let (manifest, _) = checkpoint::read_manifest(path).map_err(rt)?;
        let store = checkpoint::store_for(&manifest, self.cfg.pretrained()?);
        let (model, _) = checkpoint::load(path, store, false).map_err(rt)?;
        Ok(model)
    }
}

fn write_report_csv(path: &Path, split: &str, report: Option<&EvalReport>) -> Result<()> {
    let mut text = String::from("split,precision,recall,f1,tp,fp,fn,tn\n");
    if let Some(r) = report {
        text += &format!(
            "{split},{:.4},{:.4},{:.4},{},{},{},{}\n",
            r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_, r.tn
        );
    }
    fs::write(path, text).map_err(|e| rt(format!("{}: {e}", path.display())))
}

fn write_fresh(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<PreparedDataset> {
    PreparedDataset::load(dir).map_err(|e| rt(format!("{}: {e}", dir.display())))
}

fn test_report(model: &ErModel, ds: &EncodedDataset) -> Result<Option<EvalReport>> {
    match pipeline::test_report(model, ds) {
        Ok(r) => Ok(Some(r)),
        Err(PipelineError::Unlabeled(..)) => {
            warn!("{}: test split has no gold labels", ds.name);
            Ok(None)
        }
        Err(e) => Err(rt(e)),
    }
}

pub fn run(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            source,
            entities,
            split_seed,
            name,
        } => synth(&out, seed, source, entities, split_seed, name),
        Command::Prepare {
            left,
            right,
            matches,
            block,
            candidates,
            out,
            seed,
            name,
            allow_large,
            config,
        } => prepare(PrepareArgs {
            left,
            right,
            matches,
            block,
            candidates,
            out,
            seed,
            name,
            allow_large,
            config,
        }),
        Command::Train { data, init, common } => train(&data, &init, &common, argv),
        Command::Transfer {
            sources,
            target,
            adapt,
            common,
        } => transfer(&sources, &target, adapt, &common, argv),
        Command::Active {
            data,
            annotator,
            k,
            t,
            init,
            port,
            token,
            common,
        } => {
            let run = Run::start("active", &common, argv, |cfg| {
                if let Some(k) = k {
                    cfg.active.k = k;
                }
                if let Some(t) = t {
                    cfg.active.iterations = t;
                }
            })?;
            match annotator {
                AnnotatorKind::Oracle => active_oracle(&run, &data, &init),
                AnnotatorKind::Serve => active_served(&run, &data, &init, port, token),
            }
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            common,
        } => eval(&data, &checkpoint, split, &common, argv),
        Command::Features { data, common } => {
            let run = Run::start("features", &common, argv, |_| {})?;
            dump_features(&load_dataset(&data)?, &run.out)?;
            Ok(())
        }
        Command::Baseline {
            data,
            algo,
            train_features,
            test_features,
            common,
        } => baseline(&data, algo, train_features.zip(test_features), &common, argv),
        Command::Repeat { seeds, out, command } => repeat(&seeds, &out, &command),
        Command::Experiment { config, seeds, out } => experiment(config.as_deref(), seeds, &out),
        Command::Serve {
            data_root,
            port,
            token,
            journal_dir,
            config,
        } => serve(data_root, port, token, journal_dir, config.as_deref()),
    }
}

fn synth(
    out: &Path,
    seed: u64,
    source: bool,
    entities: Option<usize>,
    split_seed: Option<u64>,
    name: Option<String>,
) -> Result<()> {
    if out.join(META_FILE).exists() {
        return Err(rt(format!("{} already holds a prepared dataset", out.display())));
    }
    let mut cfg = if source {
        SynthConfig::source(seed)
    } else {
        SynthConfig::target(seed)
    };
    if let Some(n) = entities {
        if n == 0 {
            return Err(CliError::Config("--entities must be at least 1".into()));
        }
        cfg.entities = n;
    }
    let name = name.unwrap_or_else(|| dir_name(out));
    let stats = pipeline::write_synth_dataset(out, &name, &cfg, split_seed.unwrap_or(seed)).map_err(rt)?;
    write_json(&out.join("synth.json"), &cfg).map_err(rt)?;
    println!("{name}: {} pairs, {} matches", stats.pairs, stats.matches);
    Ok(())
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string()
}

struct PrepareArgs {
    left: PathBuf,
    right: PathBuf,
    matches: Option<PathBuf>,
    block: Option<PathBuf>,
    candidates: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    name: Option<String>,
    allow_large: bool,
    config: Option<PathBuf>,
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.split_seed = seed;
    }
    let rules = match &a.block {
        Some(path) => read_json(path).map_err(|e| CliError::Config(e.to_string()))?,
        None => cfg.blocking.clone(),
    };
    cfg.blocking = rules;
    cfg.validate()?;
    if a.candidates.is_none() && cfg.blocking.is_empty() && a.block.is_none() {
        return Err(CliError::Config("give --block, --candidates, or blocking rules in the config".into()));
    }
    if a.out.join(META_FILE).exists() {
        return Err(rt(format!("{} already holds a prepared dataset", a.out.display())));
    }
    let left = EntityTable::load(&a.left, dir_stem(&a.left)).map_err(rt)?;
    let right = EntityTable::load(&a.right, dir_stem(&a.right)).map_err(rt)?;
    let gold = a.matches.as_ref().map(GoldMatches::load).transpose().map_err(rt)?;
    let candidates = match &a.candidates {
        Some(path) => {
            let mut set = CandidateSet::load(path).map_err(rt)?;
            if let Some(gold) = &gold {
                set.attach_labels(gold);
            }
            set.validate(&left, &right).map_err(rt)?;
            set.provenance = Provenance {
                left_table: dir_stem(&a.left),
                right_table: dir_stem(&a.right),
                ..set.provenance
            };
            set
        }
        None => block(
            &left,
            &right,
            &cfg.blocking,
            gold.as_ref(),
            BlockOptions {
                allow_large: a.allow_large,
            },
        )
        .map_err(rt)?,
    };
    let splits = split(&candidates, SplitSpec { seed: cfg.split_seed }).map_err(rt)?;
    let name = a.name.unwrap_or_else(|| dir_name(&a.out));
    let stats = PreparedDataset::write(&a.out, &name, &left, &right, &candidates, &splits).map_err(rt)?;
    write_json(&a.out.join("config.json"), &cfg).map_err(rt)?;
    println!(
        "{name}: {} pairs, {} matches; train {} dev {} test {}",
        stats.pairs, stats.matches, splits.manifest.train, splits.manifest.dev, splits.manifest.test
    );
    Ok(())
}

fn dir_stem(path: &Path) -> String {
    path.file_stem().and_then(|n| n.to_str()).unwrap_or("table").to_string()
}

fn write_history(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_fresh(path)?;
    append_metrics_csv(path, rows).map_err(rt)
}

fn train(data: &Path, init: &str, common: &Common, argv: &[String]) -> Result<()> {
    let run = Run::start("train", common, argv, |_| {})?;
    let ds = load_dataset(data)?;
    let mut model = run.init_model(init)?;
    let enc = encode_dataset(&mut model, &ds).map_err(rt)?;
    let train = enc.require_train_labels().map_err(rt)?;
    if enc.dev.is_empty() {
        return Err(rt(format!("{}: dev split has no gold labels", ds.name)));
    }
    let outcome = dtal_core::trainer::train_supervised(&mut model, &train, &enc.dev, &run.cfg.train).map_err(rt)?;
    model.schema = enc.schema.clone();
    write_history(&run.path("metrics.csv"), &outcome.history)?;
    run.save(&model, serde_json::json!({ "best_epoch": outcome.checkpoint.epoch, "dev": outcome.checkpoint.dev }))?;
    let mut summary = RunSummary::new("train", "test", test_report(&model, &enc)?);
    summary.best_epoch = Some(outcome.checkpoint.epoch);
    run.finish(&summary)
}

fn transfer(sources: &[PathBuf], target: &Path, adapt: bool, common: &Common, argv: &[String]) -> Result<()> {
    let src: Vec<PreparedDataset> = sources.iter().map(|p| load_dataset(p)).collect::<Result<_>>()?;
    let tgt = load_dataset(target)?;
    let mut names: Vec<String> = Vec::new();
    for ds in src.iter().chain([&tgt]) {
        let mut name = ds.name.clone();
        while names.contains(&name) {
            name.push('\'');
        }
        names.push(name);
    }
    let run = Run::start("transfer", common, argv, |cfg| {
        if cfg.model.datasets.is_empty() {
            cfg.model.datasets = names.clone();
        }
    })?;
    if run.cfg.model.datasets.len() != names.len() {
        return Err(CliError::Config(format!(
            "model.datasets lists {} names for {} datasets",
            run.cfg.model.datasets.len(),
            names.len()
        )));
    }
    let mode = if adapt { "adversarial" } else { "supervised" };
    info!("transfer mode: {mode}");
    let mut model = run.init_model("random")?;
    let encoded: Vec<EncodedDataset> = src
        .iter()
        .map(|ds| encode_dataset(&mut model, ds))
        .collect::<std::result::Result<_, _>>()
        .map_err(rt)?;
    let target_enc = encode_dataset(&mut model, &tgt).map_err(rt)?;
    let pairs: Vec<(usize, &EncodedDataset)> = encoded.iter().enumerate().collect();
    let outcome =
        pipeline::transfer(&mut model, &pairs, &target_enc, src.len(), adapt, &run.cfg.train).map_err(rt)?;
    write_history(&run.path("metrics.csv"), &outcome.history)?;
    run.save(
        &model,
        serde_json::json!({ "mode": mode, "best_epoch": outcome.checkpoint.epoch, "dev": outcome.checkpoint.dev }),
    )?;
    let mut summary = RunSummary::new("transfer", "test", test_report(&model, &target_enc)?);
    summary.mode = Some(mode.into());
    summary.best_epoch = Some(outcome.checkpoint.epoch);
    run.finish(&summary)
}

fn finish_active(run: &Run, model: &mut ErModel, ds: &PreparedDataset, logs: &[IterationLog]) -> Result<()> {
    write_iteration_csv(&run.path("iterations.csv"), logs).map_err(rt)?;
    let enc = encode_dataset(model, ds).map_err(rt)?;
    model.schema = enc.schema.clone();
    run.save(model, serde_json::json!({ "iterations": logs.len() }))?;
    let mut summary = RunSummary::new("active", "test", test_report(model, &enc)?);
    summary.human_labels = Some(logs.iter().map(|l| l.human_labels).sum());
    run.finish(&summary)
}

fn active_oracle(run: &Run, data: &Path, init: &str) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut model = run.init_model(init)?;
    let enc = encode_dataset(&mut model, &ds).map_err(rt)?;
    let gold = enc
        .train_gold
        .clone()
        .ok_or_else(|| rt(format!("{}: the oracle needs gold train labels", ds.name)))?;
    let mut oracle = OracleAnnotator::new(gold);
    let out = pipeline::active(&mut model, &enc, &run.cfg.active, &mut oracle).map_err(rt)?;
    finish_active(run, &mut model, &ds, &out.logs)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(rt)
}

fn active_served(run: &Run, data: &Path, init: &str, port: u16, token: Option<String>) -> Result<()> {
    let ds = load_dataset(data)?;
    let data_root = data
        .canonicalize()
        .map_err(|e| rt(format!("{}: {e}", data.display())))?
        .parent()
        .map(Path::to_path_buf)
        .ok_or_else(|| rt("dataset directory has no parent"))?;
    let app = AppState::new(ServeConfig {
        data_root,
        journal_dir: Some(run.path("journal")),
        token,
        embeddings: run.cfg.pretrained()?,
    })
    .map_err(rt)?;
    let runtime = runtime()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(("0.0.0.0", port)))
        .map_err(|e| rt(format!("port {port}: {e}")))?;
    runtime.spawn(dtal_serve::serve(app.clone(), listener));
    let request = CreateSession {
        dataset: dir_name(data),
        config: run.cfg.active.clone(),
        init: if init == "random" {
            Init::Random
        } else {
            Init::Checkpoint(PathBuf::from(init))
        },
        model: Some(run.cfg.model.clone()),
        attach_gold: ds.labeled,
    };
    let id = app.create_session(request).map_err(|e| match e.status.as_u16() {
        400 => CliError::Config(e.message),
        _ => rt(e.message),
    })?;
    println!("session {id}: label at http://127.0.0.1:{port}/sessions/{id}/batch");
    let outcome = app.wait_finished(&id).map_err(|e| rt(e.message))?;
    if let Some(e) = outcome.error {
        return Err(rt(e));
    }
    let mut model = outcome.model.ok_or_else(|| rt("session finished without a model"))?;
    finish_active(run, &mut model, &ds, &outcome.history)
}

fn eval(data: &Path, ckpt: &Path, split: SplitName, common: &Common, argv: &[String]) -> Result<()> {
    let run = Run::start("eval", common, argv, |_| {})?;
    let ds = load_dataset(data)?;
    let mut model = run.init_model(&ckpt.to_string_lossy())?;
    let enc = encode_dataset(&mut model, &ds).map_err(rt)?;
    let (name, pairs): (&str, Vec<LabeledPair>) = match split {
        SplitName::Train => ("train", enc.require_train_labels().map_err(rt)?),
        SplitName::Dev => ("dev", enc.dev.clone()),
        SplitName::Test => ("test", enc.test.clone()),
    };
    if pairs.is_empty() {
        return Err(rt(format!("{}: {name} split has no gold labels", ds.name)));
    }
    let report = evaluate(&model, &pairs).map_err(rt)?;
    run.finish(&RunSummary::new("eval", name, Some(report)))
}

const FEATURE_SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `<split>_features.csv` for every split and returns their paths.
fn dump_features(ds: &PreparedDataset, out: &Path) -> Result<Vec<PathBuf>> {
    let schema = ds.schema().names().to_vec();
    let mut paths = Vec::new();
    for (name, pairs) in FEATURE_SPLITS.iter().zip([&ds.train, &ds.dev, &ds.test]) {
        let texts: Vec<(Vec<String>, Vec<String>)> = ds
            .texts(pairs)
            .map_err(rt)?
            .into_iter()
            .map(|t| (t.left, t.right))
            .collect();
        let features = baselines::extract_many(&texts);
        let ids: Vec<(String, String)> = pairs.iter().map(|p| (p.left.clone(), p.right.clone())).collect();
        let labels: Vec<Option<bool>> = pairs.iter().map(|p| p.label).collect();
        let path = out.join(format!("{name}_features.csv"));
        baselines::write_features_csv(&path, &schema, &ids, &labels, &features).map_err(rt)?;
        paths.push(path);
    }
    Ok(paths)
}

fn labeled_features(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let dump = read_features_csv(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    let labels: Option<Vec<bool>> = dump.labels.iter().copied().collect();
    let labels = labels.ok_or_else(|| rt(format!("{}: every row needs a gold label", path.display())))?;
    Ok((dump.features, labels))
}

fn baseline(
    data: &Path,
    algo: Algo,
    dumps: Option<(PathBuf, PathBuf)>,
    common: &Common,
    argv: &[String],
) -> Result<()> {
    let run = Run::start("baseline", common, argv, |_| {})?;
    let (train_path, test_path) = match dumps {
        Some(pair) => pair,
        None => {
            let paths = dump_features(&load_dataset(data)?, &run.out)?;
            (paths[0].clone(), paths[2].clone())
        }
    };
    let (x_train, y_train) = labeled_features(&train_path)?;
    let (x_test, y_test) = labeled_features(&test_path)?;
    let b = &run.cfg.baseline;
    let (probs, model_json) = match algo {
        Algo::Logreg => {
            let m = LogReg::train(&x_train, &y_train, b.lr, b.epochs).map_err(rt)?;
            (x_test.iter().map(|x| m.predict(x)).collect::<Vec<_>>(), serde_json::to_value(&m))
        }
        Algo::Gnb => {
            let m = GaussianNb::train(&x_train, &y_train).map_err(rt)?;
            (x_test.iter().map(|x| m.predict(x)).collect(), serde_json::to_value(&m))
        }
    };
    write_json(&run.path("model.json"), &model_json.map_err(rt)?).map_err(rt)?;
    let (report, _) = dtal_core::trainer::score_probs(&probs, &y_test);
    let mut summary = RunSummary::new("baseline", "test", Some(report));
    summary.mode = Some(format!("{algo:?}").to_lowercase());
    run.finish(&summary)
}

const REPEATABLE: [&str; 5] = ["train", "transfer", "active", "eval", "baseline"];

fn repeat(seeds: &[u64], out: &Path, command: &[String]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CliError::Config("--seeds is empty".into()));
    }
    if !command.first().is_some_and(|c| REPEATABLE.contains(&c.as_str())) {
        return Err(CliError::Config(format!("repeat wraps one of: {}", REPEATABLE.join(", "))));
    }
    if command.iter().any(|a| a == "--out" || a == "--seed" || a.starts_with("--out=") || a.starts_with("--seed=")) {
        return Err(CliError::Config("repeat sets --out and --seed itself".into()));
    }
    fs::create_dir_all(out).map_err(|e| rt(format!("{}: {e}", out.display())))?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let dir = out.join(format!("seed-{seed}"));
        let mut argv = vec!["dtal".to_string()];
        argv.extend(command.iter().cloned());
        argv.extend(["--seed".into(), seed.to_string(), "--out".into(), dir.display().to_string()]);
        let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Config(e.to_string()))?;
        info!("repeat: seed {seed}");
        run(cli.command, &argv).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("seed {seed}: {m}")),
            CliError::Runtime(m) => rt(format!("seed {seed}: {m}")),
        })?;
        let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE)).map_err(rt)?;
        let report = summary.report.ok_or_else(|| rt(format!("seed {seed}: no gold labels to aggregate")))?;
        rows.push((seed, report));
    }
    let mut per_seed = String::from("seed,precision,recall,f1\n");
    for (seed, r) in &rows {
        per_seed += &format!("{seed},{:.4},{:.4},{:.4}\n", r.precision, r.recall, r.f1);
    }
    fs::write(out.join("seeds.csv"), per_seed).map_err(rt)?;
    let mut aggregate = String::from("metric,mean,std,n,formatted\n");
    let metrics: [(&str, fn(&EvalReport) -> f64); 3] =
        [("precision", |r| r.precision), ("recall", |r| r.recall), ("f1", |r| r.f1)];
    for (name, get) in metrics {
        let s = Summary::of(&rows.iter().map(|(_, r)| get(r)).collect::<Vec<_>>());
        aggregate += &format!("{name},{:.4},{:.4},{},{s}\n", s.mean, s.std, s.n);
        println!("{name}: {s}");
    }
    fs::write(out.join("aggregate.csv"), aggregate).map_err(rt)?;
    Ok(())
}

fn write_experiment(out: &Path, cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    write_json(&out.join("config.json"), cfg).map_err(rt)?;
    let mut per_seed = String::from("seed,random,transfer,high_conf_partition,top_k_entropy\n");
    let mut curves = String::from("seed,iteration,labels,test_f1\n");
    for s in &report.seeds {
        per_seed += &format!(
            "{},{:.4},{:.4},{:.4},{:.4}\n",
            s.seed, s.random, s.transfer, s.high_conf_partition, s.top_k_entropy
        );
        for (i, f1) in s.curve.iter().enumerate() {
            curves += &format!("{},{},{},{f1:.4}\n", s.seed, i + 1, (i + 1) * cfg.k);
        }
    }
    fs::write(out.join("experiment.csv"), per_seed).map_err(rt)?;
    fs::write(out.join("curves.csv"), curves).map_err(rt)?;
    let mut aggregate = String::from("method,mean,std,n,formatted\n");
    for (name, s) in [
        ("random", report.random()),
        ("transfer", report.transfer()),
        ("high_conf_partition", report.high_conf_partition()),
        ("top_k_entropy", report.top_k_entropy()),
    ] {
        aggregate += &format!("{name},{:.4},{:.4},{},{s}\n", s.mean, s.std, s.n);
        println!("{name}: {s}");
    }
    fs::write(out.join("aggregate.csv"), aggregate).map_err(rt)
}

fn experiment(config: Option<&Path>, seeds: Option<Vec<u64>>, out: &Path) -> Result<()> {
    let mut cfg: ExperimentConfig = match config {
        Some(path) => read_json(path).map_err(|e| CliError::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    if cfg.seeds.is_empty() || cfg.k < 2 || cfg.k % 2 != 0 || cfg.iterations == 0 || cfg.epochs == 0 {
        return Err(CliError::Config("need seeds, an even k of at least 2, and positive iterations and epochs".into()));
    }
    fs::create_dir_all(out).map_err(|e| rt(format!("{}: {e}", out.display())))?;
    let report = run_experiment(&cfg).map_err(rt)?;
    info!("experiment took {:.0} s", report.seconds);
    write_experiment(out, &cfg, &report)
}

fn serve(
    data_root: PathBuf,
    port: u16,
    token: Option<String>,
    journal_dir: Option<PathBuf>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let app = AppState::new(ServeConfig {
        data_root,
        journal_dir,
        token,
        embeddings: cfg.pretrained()?,
    })
    .map_err(rt)?;
    let recovered = app.recover().map_err(rt)?;
    if !recovered.is_empty() {
        info!("resumed {} session(s)", recovered.len());
    }
    let runtime = runtime()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
            .await
            .map_err(|e| rt(format!("port {port}: {e}")))?;
        dtal_serve::serve(app, listener).await.map_err(rt)
    })
}
