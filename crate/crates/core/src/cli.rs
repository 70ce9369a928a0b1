//! Command-line front end. Every command validates its configuration in
//! full before it reads or writes anything.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{format_manifest, generate_synthetic, read_dataset, split_path, write_synthetic};
use crate::error::{Error, Result};
use crate::features::{DataSchema, Example};
use crate::gradsuite::{format_reports, run_suite, Fault};
use crate::metrics::GaucWeighting;
use crate::model::{Ablation, InfNet};
use crate::train::{evaluate, format_history, train, TrainOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "infnet",
    version,
    about = "Task-aware information flow network for multi-task CTR prediction"
)]
pub struct Cli {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub split: Option<Split>,
    /// Ablation mode: full, wo1, wo2 or wo3.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate planted-rule synthetic train/val/test files and a manifest.
    GenData,
    /// Train a model; writes best/last checkpoints and a history table.
    Train,
    /// Per-task AUC and gAUC of a checkpoint on one split.
    Eval,
    /// Train every ablation variant with identical settings and compare.
    Ablate,
    /// Final-block task and shared-task attention weights for one example.
    DumpAttention {
        /// 0-based example index within the split.
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
    /// Finite-difference gradient check of every operation and component.
    GradCheck {
        /// Break the PGU backward on purpose (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Parses and validates the run configuration from the global flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &cli.out_dir {
        overrides.push(format!("out_dir={}", d.display()));
    }
    if let Some(m) = &cli.mode {
        overrides.push(format!("mode={m}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command, returning the process exit code on success. Output
/// tables go to `out`.
pub fn run(cli: &Cli, out: &mut String) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Eval => cmd_eval(
            &cfg,
            need_checkpoint(cli)?,
            cli.split.unwrap_or(Split::Test),
            out,
        ),
        Command::Ablate => cmd_ablate(&cfg, out),
        Command::DumpAttention { example } => cmd_dump_attention(
            &cfg,
            need_checkpoint(cli)?,
            cli.split.unwrap_or(Split::Test),
            *example,
            out,
        ),
        Command::GradCheck { inject_fault } => {
            let fault = inject_fault.then_some(Fault::PguSignFlip);
            let reports = run_suite(cfg.seed, fault)?;
            out.push_str(&format_reports(&reports));
            Ok(if reports.iter().all(|r| r.report.passed) {
                0
            } else {
                1
            })
        }
    }
}

fn need_checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &mut String) -> Result<i32> {
    cfg.validate_for_generation()?;
    let data = generate_synthetic(&cfg.synth, cfg.seed)?;
    write_synthetic(&cfg.data_dir, &cfg.synth, &data)?;
    out.push_str(&format_manifest(&cfg.synth, &data));
    Ok(0)
}

fn load_split(cfg: &RunConfig, split: &str, expected: &DataSchema) -> Result<Vec<Example>> {
    let path = split_path(&cfg.data_dir, split);
    let (schema, examples) = read_dataset(&path)?;
    if &schema != expected {
        return Err(Error::Schema(format!(
            "{}: dataset schema {schema:?} does not match the model schema {expected:?}",
            path.display()
        )));
    }
    Ok(examples)
}

fn train_mode(cfg: &RunConfig) -> Result<(TrainOutcome, Vec<Example>)> {
    let train_set = load_split(cfg, "train", &cfg.schema.data)?;
    let val_set = load_split(cfg, "val", &cfg.schema.data)?;
    let model = InfNet::new(cfg.schema.clone(), cfg.model.clone(), cfg.seed)?;
    let outcome = train(model, &cfg.train, &train_set, &val_set)?;
    Ok((outcome, val_set))
}

fn save_run(dir: &Path, outcome: &TrainOutcome, tasks: usize) -> Result<()> {
    create_dir(dir)?;
    save_checkpoint(&dir.join("best.ckpt"), &outcome.best)?;
    save_checkpoint(&dir.join("last.ckpt"), &outcome.last)?;
    write(
        &dir.join("history.tsv"),
        &format_history(&outcome.history, tasks),
    )
}

fn cmd_train(cfg: &RunConfig, out: &mut String) -> Result<i32> {
    let (outcome, _) = train_mode(cfg)?;
    let tasks = cfg.schema.tasks();
    save_run(&cfg.out_dir, &outcome, tasks)?;
    out.push_str(&format_history(&outcome.history, tasks));
    Ok(0)
}

fn metrics_table(aucs: &[f64], gaucs: &[f64]) -> String {
    let mut s = String::from("task\tauc\tgauc\n");
    for (i, (a, g)) in aucs.iter().zip(gaucs).enumerate() {
        writeln!(s, "{}\t{a:.6}\t{g:.6}", i + 1).unwrap();
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    writeln!(s, "mean\t{:.6}\t{:.6}", mean(aucs), mean(gaucs)).unwrap();
    s
}

fn load_compatible(
    cfg: &RunConfig,
    path: &Path,
    split: Split,
) -> Result<(Checkpoint, Vec<Example>)> {
    let ck = load_checkpoint(path)?;
    let examples = load_split(cfg, split.name(), &ck.model.schema().data)?;
    Ok((ck, examples))
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, split: Split, out: &mut String) -> Result<i32> {
    let (ck, examples) = load_compatible(cfg, ckpt, split)?;
    let (aucs, gaucs) = evaluate(&ck.model, &examples, GaucWeighting::Impressions)?;
    let table = metrics_table(&aucs, &gaucs);
    create_dir(&cfg.out_dir)?;
    write(
        &cfg.out_dir.join(format!("eval_{}.tsv", split.name())),
        &table,
    )?;
    out.push_str(&table);
    Ok(0)
}

fn cmd_ablate(cfg: &RunConfig, out: &mut String) -> Result<i32> {
    let tasks = cfg.schema.tasks();
    let test_set = load_split(cfg, "test", &cfg.schema.data)?;
    let mut columns = Vec::new();
    for mode in Ablation::ALL {
        eprintln!("ablate: mode={mode} seed={}", cfg.seed);
        let mcfg = cfg.with_mode(mode);
        let (outcome, _) = train_mode(&mcfg)?;
        save_run(&cfg.out_dir.join(mode.as_str()), &outcome, tasks)?;
        let (aucs, _) = evaluate(&outcome.best.model, &test_set, GaucWeighting::Impressions)?;
        columns.push(aucs);
    }
    let mut table = String::from("task");
    for mode in Ablation::ALL {
        write!(table, "\t{mode}").unwrap();
    }
    table.push('\n');
    for t in 0..tasks {
        write!(table, "{}", t + 1).unwrap();
        for c in &columns {
            write!(table, "\t{:.6}", c[t]).unwrap();
        }
        table.push('\n');
    }
    table.push_str("mean");
    for c in &columns {
        write!(table, "\t{:.6}", c.iter().sum::<f64>() / tasks as f64).unwrap();
    }
    table.push('\n');
    write(&cfg.out_dir.join("ablation.tsv"), &table)?;
    out.push_str(&table);
    Ok(0)
}

/// Flows dumped for the final block, in output order.
pub const ATTENTION_FLOWS: [&str; 4] = [
    "task_from_cat",
    "task_from_seq",
    "shared_from_cat",
    "shared_from_seq",
];

/// Column labels: `c{j}` for categorical fields, `s{a}_{t}` for position t
/// of behavior a (both 1-based).
fn key_labels(flow: &str, schema: &DataSchema) -> Vec<String> {
    if flow.ends_with("_cat") {
        (1..=schema.num_fields()).map(|j| format!("c{j}")).collect()
    } else {
        schema
            .lens
            .iter()
            .enumerate()
            .flat_map(|(a, &n)| (1..=n).map(move |t| format!("s{}_{t}", a + 1)))
            .collect()
    }
}

fn cmd_dump_attention(
    cfg: &RunConfig,
    ckpt: &Path,
    split: Split,
    index: usize,
    out: &mut String,
) -> Result<i32> {
    let (ck, examples) = load_compatible(cfg, ckpt, split)?;
    let ex = examples.get(index).ok_or_else(|| {
        Error::Config(format!(
            "example {index} out of range ({} examples in {})",
            examples.len(),
            split.name()
        ))
    })?;
    let model = &ck.model;
    let mode = model.config().ablation;
    if !(mode.task_tokens() && mode.heterogeneous()) {
        return Err(Error::Config(format!(
            "mode {mode} has no task attention to dump"
        )));
    }
    let last = model.config().blocks - 1;
    let caps = model.attention(ex)?;
    let schema = &model.schema().data;
    let dir = cfg.out_dir.join("attention");
    create_dir(&dir)?;
    for flow in ATTENTION_FLOWS {
        let cap = caps
            .iter()
            .find(|c| c.block == last && c.flow == flow)
            .ok_or_else(|| Error::Config(format!("no `{flow}` attention recorded")))?;
        let prefix = if flow.starts_with("task") {
            "task"
        } else {
            "shared"
        };
        let mut table = String::from("query");
        for label in key_labels(flow, schema) {
            write!(table, "\t{label}").unwrap();
        }
        table.push('\n');
        for r in 0..cap.weights.rows() {
            write!(table, "{prefix}{}", r + 1).unwrap();
            for v in cap.weights.row(r) {
                write!(table, "\t{v:.9}").unwrap();
            }
            table.push('\n');
        }
        write(&dir.join(format!("{flow}.tsv")), &table)?;
        writeln!(out, "# block {} {flow}", last + 1).unwrap();
        out.push_str(&table);
    }
    Ok(0)
}
