//! SQL logical forms of the WikiSQL template
//! `SELECT agg selcol WHERE col op val (AND col op val)*`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{tokenize, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AggOp {
    None,
    Max,
    Min,
    Count,
    Sum,
    Avg,
}

impl AggOp {
    pub const ALL: [AggOp; 6] = [
        AggOp::None,
        AggOp::Max,
        AggOp::Min,
        AggOp::Count,
        AggOp::Sum,
        AggOp::Avg,
    ];

    /// Maps the integer codes of the WikiSQL release (`agg_ops = ['', 'MAX', 'MIN', 'COUNT', 'SUM', 'AVG']`).
    pub fn from_code(code: i64) -> Option<AggOp> {
        usize::try_from(code).ok().and_then(|c| Self::ALL.get(c).copied())
    }

    pub fn code(self) -> usize {
        self as usize
    }

    /// True for aggregators that need numeric input.
    pub fn is_numeric(self) -> bool {
        matches!(self, AggOp::Max | AggOp::Min | AggOp::Sum | AggOp::Avg)
    }

    pub fn name(self) -> &'static str {
        match self {
            AggOp::None => "NONE",
            AggOp::Max => "MAX",
            AggOp::Min => "MIN",
            AggOp::Count => "COUNT",
            AggOp::Sum => "SUM",
            AggOp::Avg => "AVG",
        }
    }

    pub fn from_name(name: &str) -> Option<AggOp> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CondOp {
    Eq,
    Gt,
    Lt,
}

impl CondOp {
    pub const ALL: [CondOp; 3] = [CondOp::Eq, CondOp::Gt, CondOp::Lt];

    /// WikiSQL codes `['=', '>', '<', 'OP']`; the reserved fourth slot is rejected.
    pub fn from_code(code: i64) -> Option<CondOp> {
        usize::try_from(code).ok().and_then(|c| Self::ALL.get(c).copied())
    }

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CondOp::Eq => "=",
            CondOp::Gt => ">",
            CondOp::Lt => "<",
        }
    }

    pub fn from_symbol(sym: &str) -> Option<CondOp> {
        Self::ALL.into_iter().find(|o| o.symbol() == sym)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ColumnRef {
    Indexed(usize),
    /// Expands to a disjunction of the condition over every column at execution time.
    AnyCol,
}

impl ColumnRef {
    pub fn index(self) -> Option<usize> {
        match self {
            ColumnRef::Indexed(i) => Some(i),
            ColumnRef::AnyCol => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Condition {
    pub column: ColumnRef,
    pub op: CondOp,
    pub value: String,
}

impl Condition {
    pub fn new(column: ColumnRef, op: CondOp, value: impl Into<String>) -> Self {
        Condition {
            column,
            op,
            value: value.into(),
        }
    }

    /// Structural equality with value comparison per [`values_match`].
    pub fn matches(&self, other: &Condition) -> bool {
        self.column == other.column && self.op == other.op && values_match(&self.value, &other.value)
    }

    fn sort_key(&self) -> (ColumnRef, CondOp, String) {
        (self.column, self.op, normalize_value(&self.value))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Query {
    pub agg: AggOp,
    pub sel_col: usize,
    pub conds: Vec<Condition>,
}

/// Canonical comparison form of a condition value: tokenized (lowercased,
/// punctuation split off) and re-joined with single spaces.
pub fn normalize_value(value: &str) -> String {
    tokenize(value).join(" ")
}

pub fn values_match(a: &str, b: &str) -> bool {
    normalize_value(a) == normalize_value(b)
}

impl Query {
    pub fn new(agg: AggOp, sel_col: usize, conds: Vec<Condition>) -> Self {
        Query { agg, sel_col, conds }
    }

    /// Logical-form exact match. Condition order matters.
    pub fn exact_equal(&self, other: &Query) -> bool {
        self.agg == other.agg
            && self.sel_col == other.sel_col
            && self.conds.len() == other.conds.len()
            && self
                .conds
                .iter()
                .zip(&other.conds)
                .all(|(a, b)| a.matches(b))
    }

    /// Like [`Query::exact_equal`] but compares conditions as multisets.
    pub fn condition_set_equal(&self, other: &Query) -> bool {
        if self.agg != other.agg
            || self.sel_col != other.sel_col
            || self.conds.len() != other.conds.len()
        {
            return false;
        }
        let mut a: Vec<_> = self.conds.iter().map(Condition::sort_key).collect();
        let mut b: Vec<_> = other.conds.iter().map(Condition::sort_key).collect();
        a.sort();
        b.sort();
        a == b
    }

    pub fn uses_anycol(&self) -> bool {
        self.conds.iter().any(|c| c.column == ColumnRef::AnyCol)
    }

    /// Renders `SELECT AGG(col) FROM t WHERE col op 'val' AND ...` using the table's headers.
    pub fn render(&self, table: &Table) -> String {
        let col_name = |c: ColumnRef| match c {
            ColumnRef::Indexed(i) => table
                .header
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("col{i}")),
            ColumnRef::AnyCol => "ANYCOL".to_string(),
        };
        self.render_with(col_name)
    }

    /// Rendering without a table; columns print as `col<N>`.
    pub fn render_plain(&self) -> String {
        self.render_with(|c| match c {
            ColumnRef::Indexed(i) => format!("col{i}"),
            ColumnRef::AnyCol => "ANYCOL".to_string(),
        })
    }

    fn render_with(&self, col_name: impl Fn(ColumnRef) -> String) -> String {
        let sel = col_name(ColumnRef::Indexed(self.sel_col));
        let mut out = match self.agg {
            AggOp::None => format!("SELECT {sel} FROM t"),
            agg => format!("SELECT {}({sel}) FROM t", agg.name()),
        };
        for (i, c) in self.conds.iter().enumerate() {
            out.push_str(if i == 0 { " WHERE " } else { " AND " });
            out.push_str(&format!(
                "{} {} '{}'",
                col_name(c.column),
                c.op.symbol(),
                c.value.replace('\'', "''")
            ));
        }
        out
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_plain())
    }
}
