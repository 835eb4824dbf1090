//! A linear-scan executor for single-table WikiSQL queries, including
//! ANYCOL disjunctive expansion and partial-query execution.

use serde::{Deserialize, Serialize};

use crate::dataset::{parse_number, Cell, ColumnType, Table};
use crate::query_model::{normalize_value, AggOp, ColumnRef, CondOp, Condition, Query};
use crate::transitions::ParserState;

/// Relative tolerance for numeric comparisons.
pub const NUMERIC_TOLERANCE: f64 = 1e-9;

pub const AGGREGATE_OVER_TEXT: &str = "aggregate over text";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ExecResult {
    Rows(Vec<Cell>),
    Scalar(f64),
    RuntimeError(String),
    Empty,
}

impl ExecResult {
    pub fn is_error(&self) -> bool {
        matches!(self, ExecResult::RuntimeError(_))
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ExecResult::Empty)
    }

    /// Execution guidance keeps only results that are neither errors nor empty.
    pub fn is_usable(&self) -> bool {
        !self.is_error() && !self.is_empty()
    }

    /// COUNT over zero rows is reported as `Empty` by the engine; scoring
    /// treats it as `Scalar(0)`.
    pub fn normalize_count(self, agg: AggOp) -> ExecResult {
        match (agg, self) {
            (AggOp::Count, ExecResult::Empty) => ExecResult::Scalar(0.0),
            (_, r) => r,
        }
    }
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= NUMERIC_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// A condition with its value pre-normalized for repeated row tests.
struct Predicate {
    column: ColumnRef,
    op: CondOp,
    text: String,
    number: Option<f64>,
}

impl Predicate {
    fn new(cond: &Condition) -> Self {
        Predicate {
            column: cond.column,
            op: cond.op,
            text: normalize_value(&cond.value),
            number: parse_number(&cond.value),
        }
    }

    fn cell_holds(&self, cell: &Cell) -> bool {
        match cell {
            Cell::Real(x) => match (self.number, self.op) {
                (None, _) => false,
                (Some(v), CondOp::Eq) => approx_eq(*x, v),
                (Some(v), CondOp::Gt) => *x > v,
                (Some(v), CondOp::Lt) => *x < v,
            },
            Cell::Text(s) => self.op == CondOp::Eq && normalize_value(s) == self.text,
        }
    }

    fn row_holds(&self, row: &[Cell]) -> bool {
        match self.column {
            ColumnRef::Indexed(c) => row.get(c).is_some_and(|cell| self.cell_holds(cell)),
            ColumnRef::AnyCol => row.iter().any(|cell| self.cell_holds(cell)),
        }
    }
}

/// Indices of rows satisfying every condition. An ANYCOL condition holds when
/// it holds for at least one column.
pub fn filter_rows<'a>(table: &Table, conds: impl IntoIterator<Item = &'a Condition>) -> Vec<usize> {
    let preds: Vec<Predicate> = conds.into_iter().map(Predicate::new).collect();
    table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, row)| preds.iter().all(|p| p.row_holds(row)))
        .map(|(i, _)| i)
        .collect()
}

fn project(table: &Table, rows: &[usize], agg: AggOp, sel_col: usize) -> ExecResult {
    let Some(&col_type) = table.column_types.get(sel_col) else {
        return ExecResult::RuntimeError(format!("no column {sel_col}"));
    };
    if agg.is_numeric() && col_type == ColumnType::Text {
        return ExecResult::RuntimeError(AGGREGATE_OVER_TEXT.into());
    }
    if rows.is_empty() {
        return ExecResult::Empty;
    }
    let cells = rows.iter().map(|&r| &table.rows[r][sel_col]);
    let numbers = || {
        cells.clone().map(|c| match c {
            Cell::Real(x) => *x,
            Cell::Text(_) => unreachable!("numeric aggregate over checked real column"),
        })
    };
    match agg {
        AggOp::None => ExecResult::Rows(cells.cloned().collect()),
        AggOp::Count => ExecResult::Scalar(rows.len() as f64),
        AggOp::Max => ExecResult::Scalar(numbers().fold(f64::NEG_INFINITY, f64::max)),
        AggOp::Min => ExecResult::Scalar(numbers().fold(f64::INFINITY, f64::min)),
        AggOp::Sum => ExecResult::Scalar(numbers().sum()),
        AggOp::Avg => ExecResult::Scalar(numbers().sum::<f64>() / rows.len() as f64),
    }
}

/// Runs a complete query. Aggregate/type violations are checked before
/// emptiness, so SUM over a text column is an error even with no matches.
pub fn execute(table: &Table, query: &Query) -> ExecResult {
    let rows = filter_rows(table, &query.conds);
    project(table, &rows, query.agg, query.sel_col)
}

/// Runs the completed part of a partial parse. The trailing incomplete
/// condition is ignored; without a selected column the result is the list of
/// matched row indices.
pub fn execute_partial(table: &Table, state: &ParserState) -> ExecResult {
    let rows = filter_rows(table, state.completed_conditions());
    match state.sel_col() {
        Some(sel) => project(table, &rows, state.agg().unwrap_or(AggOp::None), sel),
        None => {
            if state.agg().is_some_and(AggOp::is_numeric) && !table.has_real_column() {
                ExecResult::RuntimeError(AGGREGATE_OVER_TEXT.into())
            } else if rows.is_empty() {
                ExecResult::Empty
            } else {
                ExecResult::Rows(rows.into_iter().map(|r| Cell::Real(r as f64)).collect())
            }
        }
    }
}

fn cell_key(cell: &Cell) -> (u8, f64, String) {
    match cell {
        Cell::Real(x) => (0, *x, String::new()),
        Cell::Text(s) => (1, 0.0, normalize_value(s)),
    }
}

fn cells_equal(a: &Cell, b: &Cell) -> bool {
    match (a, b) {
        (Cell::Real(x), Cell::Real(y)) => approx_eq(*x, *y),
        (Cell::Text(s), Cell::Text(t)) => normalize_value(s) == normalize_value(t),
        _ => false,
    }
}

/// Answer equality: rows as multisets, scalars within tolerance. A runtime
/// error never equals anything, itself included.
pub fn equal_results(a: &ExecResult, b: &ExecResult) -> bool {
    match (a, b) {
        (ExecResult::Empty, ExecResult::Empty) => true,
        (ExecResult::Scalar(x), ExecResult::Scalar(y)) => approx_eq(*x, *y),
        (ExecResult::Rows(xs), ExecResult::Rows(ys)) => {
            if xs.len() != ys.len() {
                return false;
            }
            fn sorted(cells: &[Cell]) -> Vec<&Cell> {
                let mut keyed: Vec<_> = cells.iter().map(|c| (cell_key(c), c)).collect();
                keyed.sort_by(|(ka, _), (kb, _)| {
                    ka.0.cmp(&kb.0)
                        .then(ka.1.total_cmp(&kb.1))
                        .then_with(|| ka.2.cmp(&kb.2))
                });
                keyed.into_iter().map(|(_, c)| c).collect()
            }
            sorted(xs)
                .into_iter()
                .zip(sorted(ys))
                .all(|(x, y)| cells_equal(x, y))
        }
        _ => false,
    }
}
