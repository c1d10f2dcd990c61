//! Command-line front end.
//!
//! Every command resolves an output root (`--out`, then `UNIMETRIC_OUT`,
//! then `output_dir` from the config file, then `runs`) and writes only under
//! `{root}/{run_id}/`. Failures print one line `error[<category>]: <message>`
//! to stderr and exit with status 1; usage errors exit with status 2.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{validate_run_id, ExperimentConfig, OUT_OF_DOMAIN_ID};
use crate::data::{load_dataset, save_dataset, Dataset, Split};
use crate::encoder::{load_checkpoint, save_checkpoint, Checkpoint, EncoderParams};
use crate::evaluation::{
    curves_csv, distance_ratio_stats, evaluate_sources, overfit_curves, ConcatPca, RecallReport, ResultsTable,
};
use crate::numerics::RngSeed;
use crate::sampling::SamplingPolicy;
use crate::training::{
    distill_with, train_fused_with, train_specialist_with, LogRecord, SpecialistSet, TrainLog, TrainObserver,
    TrainOutcome,
};
use crate::{Error, Result, SourceId};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "UNIMETRIC_OUT";
pub const DEFAULT_OUT: &str = "runs";
/// Where `gen-data` writes, relative to the output root, with the default run id.
pub const DEFAULT_DATASET: &str = "data/dataset.umds";

#[derive(Debug, Parser)]
#[command(name = "unimetric", version, about = "Multi-source embedding retrieval experiments")]
pub struct Cli {
    /// Experiment config file (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Dataset file (default: `{out}/data/dataset.umds`).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Seed of the run (the data seed for `gen-data`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub iterations: Option<u64>,
    #[arg(long, global = true)]
    pub checkpoint_every: Option<u64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Naive,
    Ss,
    Bal,
    Boosted,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and split the synthetic benchmark.
    GenData {
        /// Add the large out-of-domain source (id 3).
        #[arg(long)]
        ood: bool,
    },
    /// Train one specialist on one source.
    TrainSpecialist {
        #[arg(long)]
        source: SourceId,
    },
    /// Train one model on all sources with the direct metric loss.
    TrainFused {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        /// Boost factor for `--policy boosted`.
        #[arg(long, default_value_t = 100.0)]
        boost: f64,
        /// Sources to boost (default: every source except the out-of-domain one).
        #[arg(long = "boost-source")]
        boost_sources: Vec<SourceId>,
    },
    /// Distill specialists into one universal model.
    Distill {
        /// `<source>=<checkpoint>`, once per specialist.
        #[arg(long = "specialist", value_parser = parse_assignment)]
        specialists: Vec<(SourceId, PathBuf)>,
        /// Source trained with the direct metric loss instead of a teacher.
        #[arg(long = "direct-source")]
        direct_sources: Vec<SourceId>,
        /// Boost every distilled source's sampling weight by this factor.
        #[arg(long)]
        boost: Option<f64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `<source>=<checkpoint>` specialists for ratio statistics and the
        /// concatenation baseline.
        #[arg(long = "specialists", value_parser = parse_assignment, num_args = 1..)]
        specialists: Vec<(SourceId, PathBuf)>,
        /// Restrict evaluation to these sources.
        #[arg(long = "source")]
        sources: Vec<SourceId>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also evaluate the concatenation + PCA baseline of the specialists.
        #[arg(long)]
        concat: bool,
        /// Training log to turn into curve data (default: `log.csv` next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Tabulate evaluation runs: `DIR` or `NAME=DIR[,DIR...]` to merge disjoint sources into one row.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<String>,
    },
}

fn parse_assignment(s: &str) -> std::result::Result<(SourceId, PathBuf), String> {
    let (id, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected <source>=<path>, got '{s}'"))?;
    let id = id.trim().parse::<SourceId>().map_err(|e| format!("bad source id '{id}': {e}"))?;
    if path.is_empty() {
        return Err(format!("empty checkpoint path for source {id}"));
    }
    Ok((id, PathBuf::from(path)))
}

struct Context {
    cfg: ExperimentConfig,
    root: PathBuf,
    dataset_path: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(r) = &cli.run_id {
            cfg.run_id = Some(r.clone());
        }
        if let Some(n) = cli.iterations {
            cfg.train.iterations = n;
        }
        if let Some(n) = cli.checkpoint_every {
            cfg.train.checkpoint_every = n;
        }
        if let Some(lr) = cli.lr {
            cfg.train.lr = lr;
        }
        if let Some(s) = cli.seed {
            if matches!(cli.command, Command::GenData { .. }) {
                cfg.data.seed = s;
            } else {
                cfg.train.seed = s;
            }
        }
        if let Command::GenData { ood: true } = cli.command {
            cfg.data.out_of_domain = true;
        }
        cfg.validate()?;
        let root = cli
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let dataset_path = cli
            .dataset
            .clone()
            .or_else(|| cfg.dataset.clone())
            .unwrap_or_else(|| root.join(DEFAULT_DATASET));
        Ok(Context { cfg, root, dataset_path })
    }

    fn run_dir(&self, default_id: &str) -> Result<PathBuf> {
        let id = self.cfg.run_id.clone().unwrap_or_else(|| default_id.to_string());
        validate_run_id(&id)?;
        let dir = self.root.join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn dataset(&self) -> Result<Dataset> {
        let d = load_dataset(&self.dataset_path)?;
        if !d.registry.is_split() {
            return Err(Error::format(&self.dataset_path, "dataset has no train/val/test split"));
        }
        Ok(d)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

/// Saves `ckpt_{iteration}` files and prints progress to stderr.
struct CheckpointWriter {
    dir: PathBuf,
    seed: RngSeed,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, iteration: u64, params: &EncoderParams, records: &[LogRecord]) -> Result<()> {
        let ckpt = Checkpoint {
            params: params.clone(),
            step: iteration,
            seed: self.seed,
        };
        save_checkpoint(&ckpt, &self.dir.join(format!("ckpt_{iteration}")))?;
        let parts: Vec<String> = records
            .iter()
            .map(|r| format!("src{} {:.4}", r.source_id, r.val_recall1))
            .collect();
        let loss = records.first().map_or(f64::NAN, |r| r.loss_avg);
        eprintln!("iteration {iteration}: loss {loss:.5} val R@1 {}", parts.join(" "));
        Ok(())
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    command: &'a str,
    iterations: u64,
    best_iteration: u64,
    best_val_recall1: BTreeMap<SourceId, f64>,
}

fn finish_training(dir: &Path, command: &str, cfg: &ExperimentConfig, out: &TrainOutcome) -> Result<()> {
    let best = Checkpoint {
        params: out.params.clone(),
        step: out.best_iteration,
        seed: cfg.train.rng_seed(),
    };
    save_checkpoint(&best, &dir.join("ckpt_best"))?;
    write(&dir.join("log.csv"), &out.log.to_csv())?;
    write(&dir.join("curves.csv"), &curves_csv(&out.log))?;
    let best_val_recall1 = out
        .log
        .records
        .iter()
        .filter(|r| r.iteration == out.best_iteration)
        .map(|r| (r.source_id, r.val_recall1))
        .collect();
    let summary = TrainSummary {
        command,
        iterations: cfg.train.iterations,
        best_iteration: out.best_iteration,
        best_val_recall1,
    };
    write(&dir.join("summary.json"), &to_json(&summary))?;
    println!("{}: best checkpoint at iteration {} -> {}", command, out.best_iteration, dir.join("ckpt_best").display());
    Ok(())
}

fn start_run(ctx: &Context, default_id: &str) -> Result<(PathBuf, CheckpointWriter)> {
    let dir = ctx.run_dir(default_id)?;
    write(&dir.join("config.toml"), &ctx.cfg.to_toml())?;
    let writer = CheckpointWriter {
        dir: dir.clone(),
        seed: ctx.cfg.train.rng_seed(),
    };
    Ok((dir, writer))
}

fn load_specialists(list: &[(SourceId, PathBuf)]) -> Result<SpecialistSet> {
    let mut set = SpecialistSet::new();
    for (id, path) in list {
        if set.contains(*id) {
            return Err(Error::Config(format!("specialist for source {id} given twice")));
        }
        set.insert(*id, load_checkpoint(path)?.params)?;
    }
    Ok(set)
}

fn default_boosted(d: &Dataset, exclude: &BTreeSet<SourceId>) -> BTreeSet<SourceId> {
    d.registry
        .source_ids()
        .into_iter()
        .filter(|id| !exclude.contains(id))
        .collect()
}

fn cmd_gen_data(ctx: &Context) -> Result<()> {
    let dir = ctx.run_dir("data")?;
    let d = ctx.cfg.data.build()?;
    let path = dir.join("dataset.umds");
    save_dataset(&d, &path)?;
    println!("wrote {} ({} samples, input_dim {})", path.display(), d.samples.len(), d.input_dim);
    println!("source,classes,samples,train,val,test");
    for s in &d.registry.sources {
        let sp = &d.registry.splits[&s.source_id];
        println!(
            "{},{},{},{},{},{}",
            s.source_id,
            s.n_classes,
            s.num_samples(),
            sp.train.len(),
            sp.val.len(),
            sp.test.len()
        );
    }
    Ok(())
}

fn cmd_train_specialist(ctx: &Context, source: SourceId) -> Result<()> {
    let d = ctx.dataset()?;
    let (dir, mut writer) = start_run(ctx, &format!("specialist-{source}"))?;
    let out = train_specialist_with(&d, source, &ctx.cfg.train, &mut writer)?;
    finish_training(&dir, "train-specialist", &ctx.cfg, &out)
}

fn cmd_train_fused(ctx: &mut Context, policy: PolicyArg, boost: f64, boost_sources: &[SourceId]) -> Result<()> {
    let d = ctx.dataset()?;
    ctx.cfg.train.policy = match policy {
        PolicyArg::Naive => SamplingPolicy::Naive,
        PolicyArg::Ss => SamplingPolicy::SourceSpecific,
        PolicyArg::Bal => SamplingPolicy::SourceBalanced,
        PolicyArg::Boosted => SamplingPolicy::Boosted {
            factor: boost,
            boosted: if boost_sources.is_empty() {
                default_boosted(&d, &[OUT_OF_DOMAIN_ID].into_iter().collect())
            } else {
                boost_sources.iter().copied().collect()
            },
        },
    };
    ctx.cfg.train.validate()?;
    let name = ctx.cfg.train.policy.name();
    let (dir, mut writer) = start_run(ctx, &format!("fused-{name}"))?;
    let out = train_fused_with(&d, &ctx.cfg.train, &mut writer)?;
    finish_training(&dir, "train-fused", &ctx.cfg, &out)
}

fn cmd_distill(ctx: &mut Context, specialists: &[(SourceId, PathBuf)], direct: &[SourceId], boost: Option<f64>) -> Result<()> {
    let d = ctx.dataset()?;
    let set = load_specialists(specialists)?;
    ctx.cfg.train.mixed_direct_sources.extend(direct.iter().copied());
    if let Some(factor) = boost {
        ctx.cfg.train.policy = SamplingPolicy::Boosted {
            factor,
            boosted: default_boosted(&d, &ctx.cfg.train.mixed_direct_sources),
        };
    }
    ctx.cfg.train.validate()?;
    let (dir, mut writer) = start_run(ctx, "distill")?;
    let out = distill_with(&d, &set, &ctx.cfg.train, &mut writer)?;
    finish_training(&dir, "distill", &ctx.cfg, &out)
}

fn cmd_eval(
    ctx: &Context,
    checkpoint: &Path,
    specialists: &[(SourceId, PathBuf)],
    sources: &[SourceId],
    split: Split,
    concat: bool,
    log: Option<&Path>,
) -> Result<()> {
    let d = ctx.dataset()?;
    let model = load_checkpoint(checkpoint)?.params;
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    let default_id = format!(
        "eval-{}",
        parent.file_name().and_then(|n| n.to_str()).unwrap_or("model")
    );
    let dir = ctx.run_dir(&default_id)?;
    let sources = if sources.is_empty() {
        d.registry.source_ids()
    } else {
        sources.to_vec()
    };
    let report = evaluate_sources(&model, &d, split, &ctx.cfg.ks, &sources)?;
    write(&dir.join("report.json"), &to_json(&report))?;
    for s in &report.sources {
        let cells: Vec<String> = report
            .ks
            .iter()
            .zip(&s.recall)
            .map(|(k, r)| format!("R@{k} {:.4}", r))
            .collect();
        println!("source {}: {}", s.source_id, cells.join(" "));
    }
    if !specialists.is_empty() {
        let set = load_specialists(specialists)?;
        let stats = distance_ratio_stats(&model, &set, &d, split)?;
        write(&dir.join("ratios.json"), &to_json(&stats))?;
        if concat {
            let cat = ConcatPca::fit(&set, &d, model.config().embed_dim)?;
            let report = evaluate_sources(&cat, &d, split, &ctx.cfg.ks, &sources)?;
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("eval");
            let cat_dir = ctx.root.join(format!("{name}-concat"));
            fs::create_dir_all(&cat_dir).map_err(|e| Error::io(&cat_dir, e))?;
            write(&cat_dir.join("report.json"), &to_json(&report))?;
        }
    } else if concat {
        return Err(Error::Config("--concat needs --specialists".into()));
    }
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| parent.join("log.csv"));
    if log_path.exists() {
        let file = fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log = TrainLog::read_csv(file).map_err(|e| Error::format(&log_path, e.to_string()))?;
        write(&dir.join("curves.csv"), &curves_csv(&log))?;
        if let Ok(c) = overfit_curves(&log) {
            write(&dir.join("curves.json"), &to_json(&c))?;
        }
    } else if log.is_some() {
        return Err(Error::io(&log_path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn read_report(dir: &Path) -> Result<RecallReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: RecallReport = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    report.check().map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(report)
}

fn cmd_report(ctx: &Context, runs: &[String]) -> Result<()> {
    let mut rows = Vec::new();
    for spec in runs {
        let (name, dirs): (String, Vec<PathBuf>) = match spec.split_once('=') {
            Some((name, list)) => (name.to_string(), list.split(',').map(PathBuf::from).collect()),
            None => {
                let p = PathBuf::from(spec);
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or(spec).to_string();
                (name, vec![p])
            }
        };
        let mut merged: Option<RecallReport> = None;
        for dir in &dirs {
            let r = read_report(dir)?;
            match &mut merged {
                None => merged = Some(r),
                Some(m) => {
                    if m.ks != r.ks || m.split != r.split {
                        return Err(Error::Config(format!("{} uses different cutoffs or split", dir.display())));
                    }
                    for s in r.sources {
                        if m.source(s.source_id).is_some() {
                            return Err(Error::Config(format!("source {} appears twice in row {name}", s.source_id)));
                        }
                        m.sources.push(s);
                    }
                }
            }
        }
        let mut m = merged.expect("at least one directory per row");
        m.sources.sort_by_key(|s| s.source_id);
        rows.push((name, m));
    }
    let table = ResultsTable::assemble(&rows)?;
    let dir = ctx.run_dir("report")?;
    let csv = table.to_csv();
    write(&dir.join("table.csv"), &csv)?;
    write(&dir.join("table.json"), &to_json(&table))?;
    print!("{csv}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut ctx = Context::new(&cli)?;
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&ctx),
        Command::TrainSpecialist { source } => cmd_train_specialist(&ctx, *source),
        Command::TrainFused {
            policy,
            boost,
            boost_sources,
        } => cmd_train_fused(&mut ctx, *policy, *boost, boost_sources),
        Command::Distill {
            specialists,
            direct_sources,
            boost,
        } => cmd_distill(&mut ctx, specialists, direct_sources, *boost),
        Command::Eval {
            checkpoint,
            specialists,
            sources,
            split,
            concat,
            log,
        } => cmd_eval(&ctx, checkpoint, specialists, sources, *split, *concat, log.as_deref()),
        Command::Report { runs } => cmd_report(&ctx, runs),
    }
}

/// Entry point used by the `unimetric` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments() {
        assert_eq!(parse_assignment("2=a/b").unwrap(), (2, PathBuf::from("a/b")));
        assert!(parse_assignment("x=a").is_err());
        assert!(parse_assignment("2").is_err());
        assert!(parse_assignment("2=").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "unimetric",
            "distill",
            "--specialist",
            "0=a",
            "--specialist",
            "1=b",
            "--direct-source",
            "3",
            "--boost",
            "100",
            "--lr",
            "0.01",
        ])
        .unwrap();
        match cli.command {
            Command::Distill {
                specialists,
                direct_sources,
                boost,
            } => {
                assert_eq!(specialists.len(), 2);
                assert_eq!(direct_sources, vec![3]);
                assert_eq!(boost, Some(100.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cli.lr, Some(0.01));
        assert!(Cli::try_parse_from(["unimetric", "train-fused", "--policy", "greedy"]).is_err());
    }
}
