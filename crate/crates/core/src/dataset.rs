//! WikiSQL-format ingestion: tables, examples, tokenization, span alignment
//! and vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::query_model::{AggOp, ColumnRef, CondOp, Condition, Query};

/// Bumped whenever [`tokenize`] changes; spans stored anywhere are relative to it.
pub const TOKENIZER_VERSION: &str = "incsql-tok-1";

/// Lowercases and splits into word runs, numbers (keeping internal `.`/`,`
/// groups such as `1,000.5`), and single punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    static TOKEN: OnceLock<Regex> = OnceLock::new();
    let re = TOKEN.get_or_init(|| {
        Regex::new(r"[0-9]+(?:[.,][0-9]+)+|\w+|[^\w\s]").expect("static tokenizer pattern")
    });
    let lowered = text.to_lowercase();
    re.find_iter(&lowered)
        .map(|m| m.as_str().to_string())
        .collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Real(f64),
    Text(String),
}

impl Cell {
    pub fn as_text(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Real(x) => format_number(*x),
        }
    }
}

pub(crate) fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Parses a numeric literal as it appears in questions and cells (`1,000.5` → 1000.5).
pub fn parse_number(text: &str) -> Option<f64> {
    let cleaned: String = text
        .chars()
        .filter(|c| *c != ',' && !c.is_whitespace())
        .collect();
    if cleaned.is_empty() {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|x| x.is_finite())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    /// Raw column headers as they appear in the source file.
    pub header: Vec<String>,
    pub column_tokens: Vec<Vec<String>>,
    pub column_types: Vec<ColumnType>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    /// Builds a table, checking row arity and REAL-column cell types.
    pub fn new(
        id: impl Into<String>,
        header: Vec<String>,
        column_types: Vec<ColumnType>,
        rows: Vec<Vec<Cell>>,
    ) -> std::result::Result<Table, String> {
        if header.len() != column_types.len() {
            return Err(format!(
                "{} headers but {} types",
                header.len(),
                column_types.len()
            ));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != header.len() {
                return Err(format!(
                    "row {r} has {} cells, expected {}",
                    row.len(),
                    header.len()
                ));
            }
            for (c, cell) in row.iter().enumerate() {
                if column_types[c] == ColumnType::Real && !matches!(cell, Cell::Real(_)) {
                    return Err(format!("row {r} column {c}: non-numeric cell in real column"));
                }
            }
        }
        let column_tokens = header.iter().map(|h| tokenize(h)).collect();
        Ok(Table {
            id: id.into(),
            header,
            column_tokens,
            column_types,
            rows,
        })
    }

    pub fn num_columns(&self) -> usize {
        self.header.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn has_real_column(&self) -> bool {
        self.column_types.contains(&ColumnType::Real)
    }
}

pub type TableMap = BTreeMap<String, Table>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub question_tokens: Vec<String>,
    pub table_id: String,
    pub gold: Query,
    /// Inclusive `(start, end)` token span of each gold condition's value.
    pub gold_spans: Vec<(usize, usize)>,
}

/// A record that could not be turned into an [`Example`]. Kept so that
/// evaluation denominators match the raw file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rejected {
    pub id: String,
    pub line: usize,
    pub table_id: String,
    pub question: String,
    pub gold: Option<Query>,
    pub reason: String,
}

#[derive(Deserialize)]
struct RawTable {
    id: String,
    header: Vec<String>,
    types: Vec<String>,
    #[serde(default)]
    rows: Vec<Vec<Value>>,
}

#[derive(Deserialize)]
struct RawSql {
    sel: i64,
    agg: i64,
    #[serde(default)]
    conds: Vec<(i64, i64, Value)>,
}

#[derive(Deserialize)]
struct RawExample {
    question: String,
    table_id: String,
    sql: RawSql,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn value_to_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => n.as_f64().map(format_number),
        _ => None,
    }
}

fn parse_table(raw: RawTable) -> std::result::Result<Table, String> {
    let types = raw
        .types
        .iter()
        .map(|t| match t.to_ascii_lowercase().as_str() {
            "text" => Ok(ColumnType::Text),
            "real" => Ok(ColumnType::Real),
            other => Err(format!("unknown column type {other:?}")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(raw.rows.len());
    for (r, raw_row) in raw.rows.iter().enumerate() {
        let mut row = Vec::with_capacity(raw_row.len());
        for (c, v) in raw_row.iter().enumerate() {
            let cell = match types.get(c) {
                Some(ColumnType::Real) => {
                    let x = match v {
                        Value::Number(n) => n.as_f64(),
                        Value::String(s) => parse_number(s),
                        _ => None,
                    }
                    .ok_or_else(|| format!("row {r} column {c}: unparseable real cell {v}"))?;
                    Cell::Real(x)
                }
                _ => Cell::Text(
                    value_to_text(v)
                        .ok_or_else(|| format!("row {r} column {c}: unsupported cell {v}"))?,
                ),
            };
            row.push(cell);
        }
        rows.push(row);
    }
    Table::new(raw.id, raw.header, types, rows)
}

/// Reads a WikiSQL `*.tables.jsonl` file.
pub fn load_tables(path: impl AsRef<Path>) -> Result<TableMap> {
    let path = path.as_ref();
    let mut tables = TableMap::new();
    for (line, text) in read_lines(path)? {
        let ingest_err = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let raw: RawTable = serde_json::from_str(&text).map_err(|e| ingest_err(e.to_string()))?;
        let table = parse_table(raw).map_err(ingest_err)?;
        tables.insert(table.id.clone(), table);
    }
    Ok(tables)
}

/// Finds the shortest span of `question` whose tokens equal the tokenized
/// value, earliest start first.
pub fn align_value(question: &[String], value: &str) -> Option<(usize, usize)> {
    let target = tokenize(value);
    if target.is_empty() || target.len() > question.len() {
        return None;
    }
    question
        .windows(target.len())
        .position(|w| w == target.as_slice())
        .map(|start| (start, start + target.len() - 1))
}

/// Converts one parsed record into an [`Example`], or explains why it can't.
pub fn build_example(
    id: String,
    question: &str,
    table: &Table,
    gold: Query,
) -> std::result::Result<Example, String> {
    let tokens = tokenize(question);
    if gold.sel_col >= table.num_columns() {
        return Err("selected column out of range".into());
    }
    let mut spans = Vec::with_capacity(gold.conds.len());
    for cond in &gold.conds {
        match cond.column {
            ColumnRef::Indexed(c) if c < table.num_columns() => {}
            _ => return Err("condition column out of range".into()),
        }
        if cond.value.trim().is_empty() {
            return Err("empty condition value".into());
        }
        let span = align_value(&tokens, &cond.value).ok_or("unalignable value")?;
        spans.push(span);
    }
    Ok(Example {
        id,
        question: question.to_string(),
        question_tokens: tokens,
        table_id: table.id.clone(),
        gold,
        gold_spans: spans,
    })
}

fn raw_sql_to_query(raw: &RawSql) -> std::result::Result<Query, String> {
    let agg = AggOp::from_code(raw.agg).ok_or_else(|| format!("unknown aggregator code {}", raw.agg))?;
    let sel_col = usize::try_from(raw.sel).map_err(|_| format!("negative selected column {}", raw.sel))?;
    let mut conds = Vec::with_capacity(raw.conds.len());
    for (col, op, value) in &raw.conds {
        let col = usize::try_from(*col).map_err(|_| format!("negative condition column {col}"))?;
        let op = CondOp::from_code(*op).ok_or_else(|| format!("unsupported operator code {op}"))?;
        let value = value_to_text(value).ok_or_else(|| format!("bad value {value}"))?;
        conds.push(Condition::new(ColumnRef::Indexed(col), op, value));
    }
    Ok(Query::new(agg, sel_col, conds))
}

/// Parses a WikiSQL `sql` object: `{"sel": 3, "agg": 0, "conds": [[1, 0, "x"]]}`.
pub fn query_from_json(text: &str) -> std::result::Result<Query, String> {
    let raw: RawSql = serde_json::from_str(text).map_err(|e| e.to_string())?;
    raw_sql_to_query(&raw)
}

/// Reads a WikiSQL examples file. Records with unknown tables or values that
/// cannot be aligned to the question come back in the rejected list.
pub fn load_examples(
    path: impl AsRef<Path>,
    tables: &TableMap,
) -> Result<(Vec<Example>, Vec<Rejected>)> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut examples = Vec::new();
    let mut rejected = Vec::new();
    for (line, text) in read_lines(path)? {
        let ingest_err = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let raw: RawExample = serde_json::from_str(&text).map_err(|e| ingest_err(e.to_string()))?;
        let gold = raw_sql_to_query(&raw.sql).map_err(ingest_err)?;
        let id = format!("{stem}:{line}");
        let reject = |reason: String, gold: Query| Rejected {
            id: id.clone(),
            line,
            table_id: raw.table_id.clone(),
            question: raw.question.clone(),
            gold: Some(gold),
            reason,
        };
        match tables.get(&raw.table_id) {
            None => rejected.push(reject("unknown table".into(), gold)),
            Some(table) => match build_example(id.clone(), &raw.question, table, gold.clone()) {
                Ok(ex) => examples.push(ex),
                Err(reason) => rejected.push(reject(reason, gold)),
            },
        }
    }
    Ok((examples, rejected))
}

/// Serializes a table in the WikiSQL line layout.
pub fn table_to_json(table: &Table) -> Value {
    serde_json::json!({
        "id": table.id,
        "header": table.header,
        "types": table.column_types,
        "rows": table.rows,
    })
}

/// Serializes an example in the WikiSQL line layout.
pub fn example_to_json(question: &str, table_id: &str, gold: &Query) -> Value {
    let conds: Vec<Value> = gold
        .conds
        .iter()
        .map(|c| {
            let col = c.column.index().expect("WikiSQL layout has no ANYCOL");
            serde_json::json!([col, c.op.code(), c.value])
        })
        .collect();
    serde_json::json!({
        "question": question,
        "table_id": table_id,
        "sql": { "sel": gold.sel_col, "agg": gold.agg.code(), "conds": conds },
    })
}

pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Vocabulary {
        let mut all = vec![UNK.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != UNK));
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens: all,
            index,
            min_count,
        }
    }

    /// Index of `token`, or 0 (UNK) when absent.
    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in index order; line 0 is the UNK token.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        crate::util::write_atomic(path, text.as_bytes())
    }

    pub fn read_snapshot(path: impl AsRef<Path>, min_count: usize) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(UNK) => {}
            _ => {
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("vocabulary snapshot must start with {UNK}"),
                })
            }
        }
        Ok(Vocabulary::from_tokens(
            lines.map(str::to_string).collect(),
            min_count,
        ))
    }
}

/// Counts question and column-name tokens; keeps those seen at least `min_count` times.
pub fn build_vocab(examples: &[Example], tables: &TableMap, min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in examples {
        for t in &ex.question_tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    for table in tables.values() {
        for t in table.column_tokens.iter().flatten() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let kept = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count)
        .map(|(t, _)| t.to_string())
        .collect();
    Vocabulary::from_tokens(kept, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const FIG1_TABLE: &str = r#"{"id": "1-1", "header": ["Rank", "Name", "Location", "Height (ft)"], "types": ["real", "text", "text", "real"], "rows": [[1, "Willis Tower", "Chicago", 1451], [2, "Trump Tower", "Chicago", 1389], [3, "Empire State Building", "New York City", 1250]]}"#;
    const FIG1_EXAMPLE: &str = r#"{"phase": 1, "table_id": "1-1", "question": "what is the height of willis tower in chicago", "sql": {"sel": 3, "agg": 0, "conds": [[1, 0, "Willis Tower"], [2, 0, "Chicago"]]}}"#;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("Willis Tower"), vec!["willis", "tower"]);
        assert_eq!(tokenize("Height (ft)"), vec!["height", "(", "ft", ")"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("1,000.5 m?"), vec!["1,000.5", "m", "?"]);
    }

    #[test]
    fn tokenizer_is_idempotent_on_joined_output() {
        for s in ["Height (ft)", "O'Neil's 3.5-inch, 1,000 items!", "a  b\tc"] {
            let toks = tokenize(s);
            assert_eq!(tokenize(&detokenize(&toks)), toks);
        }
    }

    #[test]
    fn loads_skyscraper_table() {
        let f = write_tmp(FIG1_TABLE);
        let tables = load_tables(f.path()).unwrap();
        let t = &tables["1-1"];
        assert_eq!(t.num_columns(), 4);
        assert_eq!(t.column_tokens[3], vec!["height", "(", "ft", ")"]);
        assert_eq!(t.rows[0][3], Cell::Real(1451.0));
    }

    #[test]
    fn empty_rows_is_a_valid_table() {
        let f = write_tmp(r#"{"id": "e", "header": ["a"], "types": ["text"], "rows": []}"#);
        let tables = load_tables(f.path()).unwrap();
        assert_eq!(tables["e"].num_rows(), 0);
    }

    #[test]
    fn wrong_arity_row_is_an_error_naming_the_line() {
        let f = write_tmp(&format!(
            "{FIG1_TABLE}\n{}",
            r#"{"id": "x", "header": ["a", "b"], "types": ["text", "text"], "rows": [["only one"]]}"#
        ));
        match load_tables(f.path()) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_type_tag_is_an_error() {
        let f = write_tmp(r#"{"id": "x", "header": ["a"], "types": ["date"], "rows": []}"#);
        assert!(matches!(load_tables(f.path()), Err(Error::Ingest { .. })));
    }

    #[test]
    fn skyscraper_example_aligns_to_expected_spans() {
        let tf = write_tmp(FIG1_TABLE);
        let tables = load_tables(tf.path()).unwrap();
        let ef = write_tmp(FIG1_EXAMPLE);
        let (examples, rejected) = load_examples(ef.path(), &tables).unwrap();
        assert!(rejected.is_empty());
        assert_eq!(examples[0].gold_spans, vec![(5, 6), (8, 8)]);
        assert_eq!(examples[0].question_tokens.len(), 9);
    }

    #[test]
    fn unalignable_and_unknown_table_records_are_rejected() {
        let tf = write_tmp(FIG1_TABLE);
        let tables = load_tables(tf.path()).unwrap();
        let ef = write_tmp(concat!(
            r#"{"table_id": "1-1", "question": "how tall is it", "sql": {"sel": 3, "agg": 0, "conds": [[1, 0, "Willis Tower"]]}}"#,
            "\n",
            r#"{"table_id": "nope", "question": "q", "sql": {"sel": 0, "agg": 3, "conds": []}}"#
        ));
        let (examples, rejected) = load_examples(ef.path(), &tables).unwrap();
        assert!(examples.is_empty());
        assert_eq!(rejected.len(), 2);
        assert_eq!(rejected[0].reason, "unalignable value");
        assert_eq!(rejected[1].reason, "unknown table");
        assert_eq!(rejected[1].gold.as_ref().unwrap().agg, AggOp::Count);
    }

    #[test]
    fn reserved_operator_code_is_rejected() {
        let tf = write_tmp(FIG1_TABLE);
        let tables = load_tables(tf.path()).unwrap();
        let ef = write_tmp(
            r#"{"table_id": "1-1", "question": "chicago", "sql": {"sel": 0, "agg": 0, "conds": [[2, 3, "Chicago"]]}}"#,
        );
        assert!(load_examples(ef.path(), &tables).is_err());
    }

    #[test]
    fn numeric_values_align() {
        let toks = tokenize("which tower is 1,451 feet tall");
        assert_eq!(align_value(&toks, "1,451"), Some((3, 3)));
        assert_eq!(align_value(&toks, "feet tall"), Some((4, 5)));
        assert_eq!(align_value(&toks, "  "), None);
    }

    #[test]
    fn vocab_thresholds() {
        let tf = write_tmp(FIG1_TABLE);
        let tables = load_tables(tf.path()).unwrap();
        let ef = write_tmp(FIG1_EXAMPLE);
        let (examples, _) = load_examples(ef.path(), &tables).unwrap();

        let v2 = build_vocab(&examples, &tables, 2);
        // "what" appears once, "height" twice (question + header).
        assert_eq!(v2.get("what"), 0);
        assert_ne!(v2.get("height"), 0);

        let v1 = build_vocab(&examples, &tables, 1);
        for t in examples[0].question_tokens.iter().chain(tables["1-1"].column_tokens.iter().flatten()) {
            assert!(v1.contains(t), "{t} missing");
        }

        let empty = build_vocab(&[], &TableMap::new(), 2);
        assert_eq!(empty.len(), 1);
        assert_eq!(empty.tokens()[0], UNK);
    }

    #[test]
    fn vocab_snapshot_round_trip() {
        let v = Vocabulary::from_tokens(vec!["a".into(), "b".into()], 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.write_snapshot(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "<unk>\na\nb\n");
        assert_eq!(Vocabulary::read_snapshot(&p, 2).unwrap(), v);
    }

    #[test]
    fn ingestion_is_deterministic() {
        let tf = write_tmp(FIG1_TABLE);
        let ef = write_tmp(FIG1_EXAMPLE);
        let a = load_tables(tf.path()).unwrap();
        let b = load_tables(tf.path()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let (ea, _) = load_examples(ef.path(), &a).unwrap();
        let (eb, _) = load_examples(ef.path(), &b).unwrap();
        assert_eq!(serde_json::to_string(&ea).unwrap(), serde_json::to_string(&eb).unwrap());
    }
}
