//! Command-line front end.
//!
//! Settings come from an optional TOML file (`--config`) with command-line
//! flags taking precedence. Path flags also read `INCSQL_*` environment
//! variables. Every output file is written atomically.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::dataset::{
    build_vocab, example_to_json, load_examples, load_tables, query_from_json, table_to_json, tokenize, Example,
    Rejected, Table, TableMap,
};
use crate::decoding::{decode, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, report_write};
use crate::oracles::{oracle_stats, OracleKind};
use crate::policy::{checkpoint, Policy, PolicyConfig};
use crate::query_model::{AggOp, Query};
use crate::sql_engine::execute;
use crate::synth::{generate, SynthConfig};
use crate::training::{fit, LogRecord, TrainOptions, Trainer};
use crate::transitions::format_trace;
use crate::util::write_atomic;

#[derive(Parser, Debug)]
#[command(name = "incsql", version, about = "Incremental NL-to-SQL parser for WikiSQL-style data")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = "INCSQL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct PathArgs {
    #[arg(long, env = "INCSQL_TABLES")]
    tables: Option<PathBuf>,
    #[arg(long, env = "INCSQL_TRAIN")]
    train: Option<PathBuf>,
    #[arg(long, env = "INCSQL_DEV")]
    dev: Option<PathBuf>,
    #[arg(long, env = "INCSQL_TEST")]
    test: Option<PathBuf>,
    #[arg(long, env = "INCSQL_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "INCSQL_EMBEDDINGS")]
    embedding_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Beam,
    Eg,
}

#[derive(Args, Debug, Default, Clone)]
struct DecodeArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Beam width for `beam` and `eg`.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long = "max-conds")]
    max_conds: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
struct PolicyArgs {
    #[arg(long)]
    word_emb_dim: Option<usize>,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    #[arg(long)]
    decoder_hidden: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load tables and example files and report what was accepted.
    Ingest {
        #[command(flatten)]
        paths: PathArgs,
        /// Extra example files besides --train/--dev/--test.
        #[arg(long)]
        examples: Vec<PathBuf>,
        #[arg(long)]
        min_count: Option<usize>,
        /// Write the training-split vocabulary snapshot here.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        /// Write rejected records as JSON lines here.
        #[arg(long)]
        rejected_out: Option<PathBuf>,
    },
    /// Train a policy and checkpoint the best-dev model.
    Train {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        /// static | nondet-order | nondet-anycol
        #[arg(long)]
        oracle: Option<OracleKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        eval_every: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        min_count: Option<usize>,
        /// Training log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode a split and write one JSON record per example.
    Decode {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Examples to decode (defaults to --test).
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write a report.
    Eval {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Examples to score (defaults to --test).
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-example JSON-lines detail.
        #[arg(long)]
        detail: Option<PathBuf>,
        /// Leave the wall-clock speed out so reports are reproducible.
        #[arg(long)]
        omit_timing: bool,
    },
    /// Parse one question against one table.
    Parse {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        table_id: String,
        #[arg(long)]
        question: String,
        /// Also print the action trace.
        #[arg(long)]
        trace: bool,
    },
    /// Oracle-set size and accepted-sequence histograms.
    OracleStats {
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long)]
        examples: Option<PathBuf>,
        /// One oracle, or all three when omitted.
        #[arg(long)]
        oracle: Option<OracleKind>,
        /// Stop enumerating an example after this many sequences.
        #[arg(long, default_value_t = 10_000)]
        cap: usize,
    },
    /// Execute a WikiSQL `sql` object against a table.
    RunSql {
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long)]
        table_id: String,
        /// e.g. '{"sel": 3, "agg": 0, "conds": [[1, 0, "willis tower"]]}'
        #[arg(long)]
        sql: String,
    },
    /// Write a synthetic corpus in WikiSQL layout.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        num_examples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(default, deny_unknown_fields)]
struct PathsSection {
    tables: Option<PathBuf>,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    test: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    embedding_file: Option<PathBuf>,
    log: Option<PathBuf>,
}

#[derive(Deserialize, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    oracle: OracleKind,
    epochs: usize,
    eval_every: Option<u64>,
    seed: Option<u64>,
    min_count: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            oracle: OracleKind::NonDetOrderAnyCol,
            epochs: 10,
            eval_every: None,
            seed: None,
            min_count: 1,
        }
    }
}

#[derive(Deserialize, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
struct DecodeSection {
    mode: String,
    beam: usize,
    max_conditions: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: "greedy".into(),
            beam: 5,
            max_conditions: 4,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Deserialize, Debug, Default, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    paths: PathsSection,
    policy: PolicyConfig,
    train: TrainSection,
    decode: DecodeSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn merge_paths(&mut self, p: &PathArgs) {
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut self.paths.tables, &p.tables);
        set(&mut self.paths.train, &p.train);
        set(&mut self.paths.dev, &p.dev);
        set(&mut self.paths.test, &p.test);
        set(&mut self.paths.checkpoint, &p.checkpoint);
        set(&mut self.paths.embedding_file, &p.embedding_file);
    }

    fn decode_config(&self, d: &DecodeArgs) -> Result<DecodeConfig> {
        let k = d.beam.unwrap_or(self.decode.beam);
        if k == 0 {
            return Err(Error::Config("--beam must be at least 1".into()));
        }
        let mode = match d.mode {
            Some(ModeArg::Greedy) => DecodeMode::Greedy,
            Some(ModeArg::Beam) => DecodeMode::Beam(k),
            Some(ModeArg::Eg) => DecodeMode::ExecGuided(k),
            None => match self.decode.mode.as_str() {
                "greedy" => DecodeMode::Greedy,
                "beam" => DecodeMode::Beam(k),
                "eg" => DecodeMode::ExecGuided(k),
                other => return Err(Error::Config(format!("unknown decode mode {other:?} (greedy|beam|eg)"))),
            },
        };
        Ok(DecodeConfig {
            mode,
            max_conditions: d.max_conds.unwrap_or(self.decode.max_conditions),
        })
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what} path (flag, config file or environment)")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p)
}

fn existing(p: &Option<PathBuf>, what: &str) -> Result<()> {
    match p {
        Some(_) => required(p, what).map(|_| ()),
        None => Ok(()),
    }
}

fn json_line(out: &mut Vec<u8>, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::contract(e.to_string()))?;
    out.push(b'\n');
    Ok(())
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return write!(out, "{e}").map_err(io_out);
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Ingest {
            paths,
            examples,
            min_count,
            vocab_out,
            rejected_out,
        } => {
            cfg.merge_paths(&paths);
            let tables = load_tables(required(&cfg.paths.tables, "tables")?)?;
            writeln!(out, "tables: {}", tables.len()).map_err(io_out)?;
            let mut files: Vec<PathBuf> = [&cfg.paths.train, &cfg.paths.dev, &cfg.paths.test]
                .into_iter()
                .flatten()
                .cloned()
                .collect();
            files.extend(examples);
            for f in &files {
                required(&Some(f.clone()), "examples")?;
            }
            let mut all_rejected = Vec::new();
            let mut train_examples = None;
            for f in &files {
                let (ex, rej) = load_examples(f, &tables)?;
                let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
                for r in &rej {
                    *reasons.entry(r.reason.as_str()).or_default() += 1;
                }
                writeln!(out, "{}: {} accepted, {} rejected {:?}", f.display(), ex.len(), rej.len(), reasons)
                    .map_err(io_out)?;
                if Some(f) == cfg.paths.train.as_ref() {
                    train_examples = Some(ex);
                }
                all_rejected.extend(rej);
            }
            if let Some(path) = vocab_out {
                let ex = train_examples
                    .ok_or_else(|| Error::Config("--vocab-out needs a --train split".into()))?;
                let vocab = build_vocab(&ex, &tables, min_count.unwrap_or(cfg.train.min_count));
                vocab.write_snapshot(&path)?;
                writeln!(out, "vocabulary: {} entries -> {}", vocab.len(), path.display()).map_err(io_out)?;
            }
            if let Some(path) = rejected_out {
                let mut buf = Vec::new();
                for r in &all_rejected {
                    json_line(&mut buf, r)?;
                }
                write_atomic(&path, &buf)?;
            }
            Ok(())
        }
        Command::Train {
            paths,
            policy,
            decode: dargs,
            oracle,
            epochs,
            eval_every,
            seed,
            min_count,
            log,
        } => {
            cfg.merge_paths(&paths);
            let decode_cfg = cfg.decode_config(&dargs)?;
            let mut pc = cfg.policy.clone();
            let set = |slot: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *slot = v;
                }
            };
            set(&mut pc.word_emb_dim, policy.word_emb_dim);
            set(&mut pc.encoder_hidden, policy.encoder_hidden);
            set(&mut pc.decoder_hidden, policy.decoder_hidden);
            set(&mut pc.decoder_layers, policy.decoder_layers);
            set(&mut pc.batch_size, policy.batch_size);
            if let Some(v) = policy.dropout {
                pc.dropout = v;
            }
            if let Some(v) = policy.learning_rate {
                pc.learning_rate = v;
            }
            if let Some(s) = seed.or(cfg.train.seed) {
                pc.seed = s;
            }
            if cfg.paths.embedding_file.is_some() {
                pc.embedding_file.clone_from(&cfg.paths.embedding_file);
            }
            let kind = oracle.unwrap_or(cfg.train.oracle);
            pc.anycol = kind.uses_anycol();
            pc.validate()?;
            let log_path = log.or(cfg.paths.log.clone());
            let ckpt = cfg
                .paths
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("missing checkpoint output path".into()))?;
            existing(&cfg.paths.dev, "dev")?;
            existing(&pc.embedding_file, "embedding file")?;
            let tables = load_tables(required(&cfg.paths.tables, "tables")?)?;
            let (train, train_rej) = load_examples(required(&cfg.paths.train, "train")?, &tables)?;
            let (dev, dev_rej) = match &cfg.paths.dev {
                Some(p) => load_examples(p, &tables)?,
                None => (Vec::new(), Vec::new()),
            };
            writeln!(
                out,
                "train: {} examples ({} rejected); dev: {} examples ({} rejected); oracle {kind}",
                train.len(),
                train_rej.len(),
                dev.len(),
                dev_rej.len()
            )
            .map_err(io_out)?;
            let vocab = build_vocab(&train, &tables, min_count.unwrap_or(cfg.train.min_count));
            let trainer = Trainer::new(Policy::new(pc, vocab)?, kind);
            let opts = TrainOptions {
                epochs: epochs.unwrap_or(cfg.train.epochs),
                eval_every: eval_every.or(cfg.train.eval_every),
                decode: decode_cfg,
            };
            let mut log_buf = Vec::new();
            let result = fit(trainer, &train, &dev, &dev_rej, &tables, &opts, |r: &LogRecord| {
                json_line(&mut log_buf, r)?;
                if r.dev_acc_ex.is_some() {
                    if let Some(p) = &log_path {
                        write_atomic(p, &log_buf)?;
                    }
                }
                Ok(())
            })?;
            if let Some(p) = &log_path {
                write_atomic(p, &log_buf)?;
            }
            checkpoint::save(&result.best, &ckpt)?;
            let acc = result
                .best_dev_acc_ex
                .map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
            writeln!(
                out,
                "best dev Acc_ex {acc} at step {}; checkpoint -> {}",
                result.best_step,
                ckpt.display()
            )
            .map_err(io_out)?;
            Ok(())
        }
        Command::Decode {
            paths,
            decode: dargs,
            examples,
            out: out_path,
        } => {
            cfg.merge_paths(&paths);
            let dc = cfg.decode_config(&dargs)?;
            let (policy, tables, exs, rejected) = load_eval_inputs(&cfg, examples)?;
            let mut buf = Vec::new();
            for ex in &exs {
                let rec = match tables.get(&ex.table_id) {
                    None => json!({"id": ex.id, "error": format!("missing table {}", ex.table_id)}),
                    Some(table) => match decode(&policy, ex, table, &dc).and_then(|h| Ok((h.query()?, h))) {
                        Ok((q, h)) => json!({
                            "id": ex.id,
                            "query": q.render(table),
                            "sql": sql_json(&q),
                            "trace": format_trace(&h.actions),
                            "logprob": h.logprob,
                            "result": execute(table, &q),
                        }),
                        Err(e) => json!({"id": ex.id, "error": e.to_string()}),
                    },
                };
                json_line(&mut buf, &rec)?;
            }
            for r in &rejected {
                json_line(&mut buf, &json!({"id": r.id, "error": format!("rejected at ingestion: {}", r.reason)}))?;
            }
            write_atomic(&out_path, &buf)?;
            writeln!(out, "decoded {} examples ({}) -> {}", exs.len() + rejected.len(), dc.mode, out_path.display())
                .map_err(io_out)?;
            Ok(())
        }
        Command::Eval {
            paths,
            decode: dargs,
            examples,
            report,
            detail,
            omit_timing,
        } => {
            cfg.merge_paths(&paths);
            let dc = cfg.decode_config(&dargs)?;
            let (policy, tables, exs, rejected) = load_eval_inputs(&cfg, examples)?;
            let r = evaluate(&policy, &exs, &rejected, &tables, &dc, !omit_timing);
            if let Some(path) = report {
                report_write(&r, &path, detail.as_deref())?;
            } else if detail.is_some() {
                return Err(Error::Config("--detail needs --report".into()));
            }
            write!(out, "{}", r.summary_table()).map_err(io_out)?;
            Ok(())
        }
        Command::Parse {
            paths,
            decode: dargs,
            table_id,
            question,
            trace,
        } => {
            cfg.merge_paths(&paths);
            let dc = cfg.decode_config(&dargs)?;
            let policy = checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
            let tables = load_tables(required(&cfg.paths.tables, "tables")?)?;
            let table = lookup(&tables, &table_id)?;
            let ex = Example {
                id: "parse".into(),
                question_tokens: tokenize(&question),
                question,
                table_id: table_id.clone(),
                gold: Query::new(AggOp::None, 0, Vec::new()),
                gold_spans: Vec::new(),
            };
            let h = decode(&policy, &ex, table, &dc)?;
            let q = h.query()?;
            if trace {
                for a in &h.actions {
                    writeln!(out, "{a}").map_err(io_out)?;
                }
            }
            writeln!(out, "{}", q.render(table)).map_err(io_out)?;
            writeln!(out, "{}", serde_json::to_string(&execute(table, &q)).expect("serializable")).map_err(io_out)?;
            Ok(())
        }
        Command::OracleStats {
            paths,
            examples,
            oracle,
            cap,
        } => {
            cfg.merge_paths(&paths);
            let tables = load_tables(required(&cfg.paths.tables, "tables")?)?;
            let file = examples.or(cfg.paths.train.clone());
            let (exs, rej) = load_examples(required(&file, "examples")?, &tables)?;
            writeln!(out, "{} examples ({} rejected)", exs.len(), rej.len()).map_err(io_out)?;
            let kinds = match oracle {
                Some(k) => vec![k],
                None => OracleKind::ALL.to_vec(),
            };
            for k in kinds {
                let s = oracle_stats(k, &exs, &tables, cap);
                writeln!(out, "{}", serde_json::to_string(&s).expect("serializable")).map_err(io_out)?;
            }
            Ok(())
        }
        Command::RunSql { paths, table_id, sql } => {
            cfg.merge_paths(&paths);
            let tables = load_tables(required(&cfg.paths.tables, "tables")?)?;
            let table = lookup(&tables, &table_id)?;
            let q = query_from_json(&sql).map_err(|e| Error::Config(format!("bad --sql: {e}")))?;
            writeln!(out, "{}", q.render(table)).map_err(io_out)?;
            writeln!(out, "{}", serde_json::to_string(&execute(table, &q)).expect("serializable")).map_err(io_out)?;
            Ok(())
        }
        Command::Synth {
            out_dir,
            num_examples,
            seed,
        } => {
            let corpus = generate(
                &SynthConfig {
                    num_examples,
                    ..SynthConfig::default()
                },
                seed,
            );
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let mut tb = Vec::new();
            for t in corpus.tables.values() {
                json_line(&mut tb, &table_to_json(t))?;
            }
            let mut eb = Vec::new();
            for e in &corpus.examples {
                json_line(&mut eb, &example_to_json(&e.question, &e.table_id, &e.gold))?;
            }
            write_atomic(&out_dir.join("tables.jsonl"), &tb)?;
            write_atomic(&out_dir.join("examples.jsonl"), &eb)?;
            writeln!(
                out,
                "{} tables, {} examples -> {}",
                corpus.tables.len(),
                corpus.examples.len(),
                out_dir.display()
            )
            .map_err(io_out)?;
            Ok(())
        }
    }
}

fn lookup<'t>(tables: &'t TableMap, id: &str) -> Result<&'t Table> {
    tables
        .get(id)
        .ok_or_else(|| Error::Config(format!("unknown table {id:?}")))
}

fn sql_json(q: &Query) -> serde_json::Value {
    let conds: Vec<serde_json::Value> = q
        .conds
        .iter()
        .map(|c| {
            let col = c.column.index().map_or(json!("ANYCOL"), |i| json!(i));
            json!([col, c.op.code(), c.value])
        })
        .collect();
    json!({"sel": q.sel_col, "agg": q.agg.code(), "conds": conds})
}

type EvalInputs = (Policy, TableMap, Vec<Example>, Vec<Rejected>);

fn load_eval_inputs(cfg: &RunConfig, examples: Option<PathBuf>) -> Result<EvalInputs> {
    let file = examples.or(cfg.paths.test.clone());
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?;
    let tables_path = required(&cfg.paths.tables, "tables")?;
    let file = required(&file, "examples")?;
    let policy = checkpoint::load(ckpt)?;
    let tables = load_tables(tables_path)?;
    let (exs, rej) = load_examples(file, &tables)?;
    Ok((policy, tables, exs, rej))
}
