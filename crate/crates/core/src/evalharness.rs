//! Logical-form and execution accuracy over a split.
//!
//! Report files: a JSON summary
//! `{mode, n, n_rejected, n_errors, acc_lf, acc_ex, speed}` (accuracies are
//! `null` for an empty split, `speed` is examples/second or `null` when timing
//! is off) and an optional JSON-lines detail file with one [`ExampleRecord`]
//! per example, rejected ones included.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Rejected, Table, TableMap};
use crate::decoding::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::query_model::Query;
use crate::sql_engine::{equal_results, execute, ExecResult};
use crate::transitions::format_trace;
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub question: String,
    pub gold: Option<String>,
    pub predicted: Option<String>,
    pub trace: Option<String>,
    pub gold_result: Option<ExecResult>,
    pub predicted_result: Option<ExecResult>,
    pub lf_match: bool,
    pub ex_match: bool,
    /// Why the example could not be scored normally (rejection reason, missing table, decode failure).
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: String,
    pub n: usize,
    pub n_rejected: usize,
    pub n_errors: usize,
    pub acc_lf: Option<f64>,
    pub acc_ex: Option<f64>,
    pub speed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn acc_lf(&self) -> Option<f64> {
        self.summary.acc_lf
    }

    pub fn acc_ex(&self) -> Option<f64> {
        self.summary.acc_ex
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let s = &self.summary;
        let mut out = String::new();
        out.push_str(&format!("{:<12} {}\n", "mode", s.mode));
        out.push_str(&format!("{:<12} {}\n", "examples", s.n));
        out.push_str(&format!("{:<12} {}\n", "rejected", s.n_rejected));
        out.push_str(&format!("{:<12} {}\n", "errors", s.n_errors));
        out.push_str(&format!("{:<12} {}\n", "Acc_lf", pct(s.acc_lf)));
        out.push_str(&format!("{:<12} {}\n", "Acc_ex", pct(s.acc_ex)));
        if let Some(v) = s.speed {
            out.push_str(&format!("{:<12} {:.1} ex/s\n", "speed", v));
        }
        out
    }
}

fn failure(id: &str, question: &str, gold: Option<String>, error: String) -> ExampleRecord {
    ExampleRecord {
        id: id.to_string(),
        question: question.to_string(),
        gold,
        predicted: None,
        trace: None,
        gold_result: None,
        predicted_result: None,
        lf_match: false,
        ex_match: false,
        error: Some(error),
    }
}

/// A prediction: the query plus, optionally, the action trace that produced it.
pub type Prediction = (Query, Option<String>);

/// Scores predictions from any source. `predict` is only called for accepted
/// examples whose table is present; rejected records count as failures.
pub fn evaluate_with(
    mode: &str,
    examples: &[Example],
    rejected: &[Rejected],
    tables: &TableMap,
    timing: bool,
    mut predict: impl FnMut(&Example, &Table) -> Result<Prediction>,
) -> EvalReport {
    let mut records = Vec::with_capacity(examples.len() + rejected.len());
    let start = Instant::now();
    let mut decoded = 0usize;
    let mut lf_without_ex = 0usize;
    for ex in examples {
        let Some(table) = tables.get(&ex.table_id) else {
            records.push(failure(
                &ex.id,
                &ex.question,
                Some(ex.gold.render_plain()),
                format!("missing table {}", ex.table_id),
            ));
            continue;
        };
        decoded += 1;
        let gold_text = Some(ex.gold.render(table));
        match predict(ex, table) {
            Ok((pred, trace)) => {
                let gold_result = execute(table, &ex.gold).normalize_count(ex.gold.agg);
                let pred_result = execute(table, &pred).normalize_count(pred.agg);
                let lf_match = pred.exact_equal(&ex.gold);
                let ex_match = equal_results(&gold_result, &pred_result);
                lf_without_ex += usize::from(lf_match && !ex_match);
                records.push(ExampleRecord {
                    id: ex.id.clone(),
                    question: ex.question.clone(),
                    gold: gold_text,
                    predicted: Some(pred.render(table)),
                    trace,
                    gold_result: Some(gold_result),
                    predicted_result: Some(pred_result),
                    lf_match,
                    ex_match,
                    error: None,
                });
            }
            Err(e) => records.push(failure(&ex.id, &ex.question, gold_text, format!("decode failed: {e}"))),
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    for r in rejected {
        records.push(failure(
            &r.id,
            &r.question,
            r.gold.as_ref().map(Query::render_plain),
            format!("rejected at ingestion: {}", r.reason),
        ));
    }
    let n = records.len();
    let frac = |k: usize| (n > 0).then(|| k as f64 / n as f64);
    let acc_lf = frac(records.iter().filter(|r| r.lf_match).count());
    let acc_ex = frac(records.iter().filter(|r| r.ex_match).count());
    if lf_without_ex == 0 {
        assert!(acc_ex >= acc_lf, "execution accuracy fell below logical-form accuracy");
    }
    let summary = EvalSummary {
        mode: mode.to_string(),
        n,
        n_rejected: rejected.len(),
        n_errors: records.iter().filter(|r| r.error.is_some()).count(),
        acc_lf,
        acc_ex,
        speed: timing.then(|| if decoded == 0 { 0.0 } else { decoded as f64 / elapsed.max(1e-9) }),
    };
    EvalReport { summary, records }
}

/// Decodes every accepted example with `policy` and scores the split.
pub fn evaluate(
    policy: &Policy,
    examples: &[Example],
    rejected: &[Rejected],
    tables: &TableMap,
    cfg: &DecodeConfig,
    timing: bool,
) -> EvalReport {
    evaluate_with(&cfg.mode.to_string(), examples, rejected, tables, timing, |ex, table| {
        let h = decode(policy, ex, table, cfg)?;
        Ok((h.query()?, Some(format_trace(&h.actions))))
    })
}

/// Decoding speed in examples per second (0 for an empty corpus).
pub fn throughput(policy: &Policy, examples: &[Example], tables: &TableMap, cfg: &DecodeConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let start = Instant::now();
    for ex in examples {
        let table = tables
            .get(&ex.table_id)
            .ok_or_else(|| Error::contract(format!("missing table {}", ex.table_id)))?;
        decode(policy, ex, table, cfg)?;
    }
    Ok(examples.len() as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Writes the JSON summary and, if requested, the per-example JSON-lines detail.
pub fn report_write(report: &EvalReport, summary_path: &Path, detail_path: Option<&Path>) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(&report.summary).map_err(|e| Error::contract(e.to_string()))?;
    json.push(b'\n');
    write_atomic(summary_path, &json)?;
    if let Some(path) = detail_path {
        let mut buf = Vec::new();
        for r in &report.records {
            serde_json::to_writer(&mut buf, r).map_err(|e| Error::contract(e.to_string()))?;
            buf.write_all(b"\n").expect("writing to a Vec cannot fail");
        }
        write_atomic(path, &buf)?;
    }
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<EvalSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
