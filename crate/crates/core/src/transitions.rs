//! The incremental parser's transition system: actions, persistent parser
//! states, legality and terminal-state query extraction.
//!
//! Legal sequences have the shape
//! `AGG SELCOL (CONDCOL CONDOP CONDVAL_START CONDVAL_END)* END`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{detokenize, Example, Table};
use crate::error::{Error, Result};
use crate::query_model::{values_match, AggOp, ColumnRef, CondOp, Condition, Query};

/// Variant order doubles as the action ordinal used for tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Agg(AggOp),
    SelCol(usize),
    CondCol(ColumnRef),
    CondOp(CondOp),
    CondValStart(usize),
    CondValEnd(usize),
    End,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Agg(a) => write!(f, "AGG {}", a.name()),
            Action::SelCol(c) => write!(f, "SELCOL {c}"),
            Action::CondCol(ColumnRef::Indexed(c)) => write!(f, "CONDCOL {c}"),
            Action::CondCol(ColumnRef::AnyCol) => write!(f, "CONDCOL ANYCOL"),
            Action::CondOp(op) => write!(f, "CONDOP {}", op.symbol()),
            Action::CondValStart(i) => write!(f, "CONDVAL_START {i}"),
            Action::CondValEnd(j) => write!(f, "CONDVAL_END {j}"),
            Action::End => write!(f, "END"),
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(line: &str) -> Result<Action> {
        let bad = || Error::contract(format!("unparseable action {line:?}"));
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(bad());
        }
        let index = |a: Option<&str>| a.and_then(|s| s.parse::<usize>().ok()).ok_or_else(bad);
        Ok(match kind {
            "AGG" => Action::Agg(arg.and_then(AggOp::from_name).ok_or_else(bad)?),
            "SELCOL" => Action::SelCol(index(arg)?),
            "CONDCOL" if arg == Some("ANYCOL") => Action::CondCol(ColumnRef::AnyCol),
            "CONDCOL" => Action::CondCol(ColumnRef::Indexed(index(arg)?)),
            "CONDOP" => Action::CondOp(arg.and_then(CondOp::from_symbol).ok_or_else(bad)?),
            "CONDVAL_START" => Action::CondValStart(index(arg)?),
            "CONDVAL_END" => Action::CondValEnd(index(arg)?),
            "END" if arg.is_none() => Action::End,
            _ => return Err(bad()),
        })
    }
}

/// One action per line.
pub fn format_trace(actions: &[Action]) -> String {
    actions.iter().map(|a| format!("{a}\n")).collect()
}

pub fn parse_trace(text: &str) -> Result<Vec<Action>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionConfig {
    /// Whether `CONDCOL(ANYCOL)` is a legal action.
    pub anycol: bool,
    /// Once this many conditions are complete, only `END` remains legal.
    pub max_conditions: Option<usize>,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            anycol: true,
            max_conditions: None,
        }
    }
}

/// The slot the next action fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Agg,
    SelCol,
    CondColOrEnd,
    CondOp,
    ValStart,
    ValEnd { start: usize },
    Terminal,
}

/// The trailing condition while it is being built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialCondition {
    pub column: ColumnRef,
    pub op: Option<CondOp>,
}

/// An immutable partial parse. [`ParserState::apply`] returns a new state.
#[derive(Clone, Debug)]
pub struct ParserState {
    tokens: Arc<[String]>,
    num_columns: usize,
    config: TransitionConfig,
    agg: Option<AggOp>,
    sel_col: Option<usize>,
    conds: Vec<Condition>,
    spans: Vec<(usize, usize)>,
    partial: Option<PartialCondition>,
    pending_span_start: Option<usize>,
    terminal: bool,
    history: Vec<Action>,
}

impl ParserState {
    pub fn initial(tokens: Arc<[String]>, num_columns: usize, config: TransitionConfig) -> Self {
        ParserState {
            tokens,
            num_columns,
            config,
            agg: None,
            sel_col: None,
            conds: Vec::new(),
            spans: Vec::new(),
            partial: None,
            pending_span_start: None,
            terminal: false,
            history: Vec::new(),
        }
    }

    pub fn agg(&self) -> Option<AggOp> {
        self.agg
    }

    pub fn sel_col(&self) -> Option<usize> {
        self.sel_col
    }

    pub fn completed_conditions(&self) -> &[Condition] {
        &self.conds
    }

    /// Token spans of the completed conditions, parallel to [`Self::completed_conditions`].
    pub fn completed_spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn partial_condition(&self) -> Option<&PartialCondition> {
        self.partial.as_ref()
    }

    pub fn pending_span_start(&self) -> Option<usize> {
        self.pending_span_start
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn history(&self) -> &[Action] {
        &self.history
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn num_columns(&self) -> usize {
        self.num_columns
    }

    pub fn config(&self) -> TransitionConfig {
        self.config
    }

    pub fn phase(&self) -> Phase {
        if self.terminal {
            Phase::Terminal
        } else if self.agg.is_none() {
            Phase::Agg
        } else if self.sel_col.is_none() {
            Phase::SelCol
        } else {
            match (&self.partial, self.pending_span_start) {
                (None, _) => Phase::CondColOrEnd,
                (Some(PartialCondition { op: None, .. }), _) => Phase::CondOp,
                (Some(_), None) => Phase::ValStart,
                (Some(_), Some(start)) => Phase::ValEnd { start },
            }
        }
    }

    fn condition_cap_reached(&self) -> bool {
        self.tokens.is_empty()
            || self
                .config
                .max_conditions
                .is_some_and(|cap| self.conds.len() >= cap)
    }

    /// The grammar-legal continuations, in ascending action order.
    pub fn valid_actions(&self) -> Result<Vec<Action>> {
        let n = self.tokens.len();
        Ok(match self.phase() {
            Phase::Terminal => {
                return Err(Error::contract("valid_actions called on a terminal state"))
            }
            Phase::Agg => AggOp::ALL.into_iter().map(Action::Agg).collect(),
            Phase::SelCol => (0..self.num_columns).map(Action::SelCol).collect(),
            Phase::CondColOrEnd => {
                let mut out = Vec::new();
                if !self.condition_cap_reached() {
                    out.extend((0..self.num_columns).map(|c| Action::CondCol(ColumnRef::Indexed(c))));
                    if self.config.anycol {
                        out.push(Action::CondCol(ColumnRef::AnyCol));
                    }
                }
                out.push(Action::End);
                out
            }
            Phase::CondOp => CondOp::ALL.into_iter().map(Action::CondOp).collect(),
            Phase::ValStart => (0..n).map(Action::CondValStart).collect(),
            Phase::ValEnd { start } => (start..n).map(Action::CondValEnd).collect(),
        })
    }

    pub fn is_valid(&self, action: Action) -> bool {
        let n = self.tokens.len();
        match (self.phase(), action) {
            (Phase::Agg, Action::Agg(_)) => true,
            (Phase::SelCol, Action::SelCol(c)) => c < self.num_columns,
            (Phase::CondColOrEnd, Action::End) => true,
            (Phase::CondColOrEnd, Action::CondCol(col)) => {
                !self.condition_cap_reached()
                    && match col {
                        ColumnRef::Indexed(c) => c < self.num_columns,
                        ColumnRef::AnyCol => self.config.anycol,
                    }
            }
            (Phase::CondOp, Action::CondOp(_)) => true,
            (Phase::ValStart, Action::CondValStart(i)) => i < n,
            (Phase::ValEnd { start }, Action::CondValEnd(j)) => start <= j && j < n,
            _ => false,
        }
    }

    /// Returns the successor state; `self` is untouched.
    pub fn apply(&self, action: Action) -> Result<ParserState> {
        if !self.is_valid(action) {
            return Err(Error::contract(format!(
                "illegal action {action} in state {}",
                self.summary()
            )));
        }
        let mut next = self.clone();
        next.history.push(action);
        match action {
            Action::Agg(a) => next.agg = Some(a),
            Action::SelCol(c) => next.sel_col = Some(c),
            Action::CondCol(column) => next.partial = Some(PartialCondition { column, op: None }),
            Action::CondOp(op) => {
                if let Some(p) = next.partial.as_mut() {
                    p.op = Some(op);
                }
            }
            Action::CondValStart(i) => next.pending_span_start = Some(i),
            Action::CondValEnd(j) => {
                let start = next.pending_span_start.take().expect("phase checked");
                let partial = next.partial.take().expect("phase checked");
                let value = detokenize(&self.tokens[start..=j]);
                next.conds.push(Condition::new(
                    partial.column,
                    partial.op.expect("phase checked"),
                    value,
                ));
                next.spans.push((start, j));
            }
            Action::End => next.terminal = true,
        }
        Ok(next)
    }

    /// Applies a whole sequence.
    pub fn apply_all(&self, actions: &[Action]) -> Result<ParserState> {
        actions
            .iter()
            .try_fold(self.clone(), |state, &a| state.apply(a))
    }

    pub fn extract_query(&self) -> Result<Query> {
        if !self.terminal {
            return Err(Error::contract(format!(
                "extract_query on non-terminal state {}",
                self.summary()
            )));
        }
        Ok(Query::new(
            self.agg.expect("terminal implies agg"),
            self.sel_col.expect("terminal implies selcol"),
            self.conds.clone(),
        ))
    }

    /// Short human-readable description for diagnostics.
    pub fn summary(&self) -> String {
        format!(
            "[agg={:?} sel={:?} conds={} partial={:?} start={:?} terminal={} steps={}]",
            self.agg,
            self.sel_col,
            self.conds.len(),
            self.partial,
            self.pending_span_start,
            self.terminal,
            self.history.len()
        )
    }
}

pub fn initial_state(example: &Example, table: &Table, config: TransitionConfig) -> ParserState {
    ParserState::initial(
        Arc::from(example.question_tokens.clone()),
        table.num_columns(),
        config,
    )
}

/// The canonical (static) action sequence for `query`, conditions in stored order.
pub fn actions_for_query(
    query: &Query,
    spans: &[(usize, usize)],
    tokens: &[String],
) -> Result<Vec<Action>> {
    if spans.len() != query.conds.len() {
        return Err(Error::contract(format!(
            "{} spans for {} conditions",
            spans.len(),
            query.conds.len()
        )));
    }
    let mut out = Vec::with_capacity(3 + 4 * spans.len());
    out.push(Action::Agg(query.agg));
    out.push(Action::SelCol(query.sel_col));
    for (cond, &(i, j)) in query.conds.iter().zip(spans) {
        if i > j || j >= tokens.len() {
            return Err(Error::contract(format!("span ({i},{j}) out of range")));
        }
        let text = detokenize(&tokens[i..=j]);
        if !values_match(&text, &cond.value) {
            return Err(Error::contract(format!(
                "span ({i},{j}) = {text:?} does not match value {:?}",
                cond.value
            )));
        }
        out.extend([
            Action::CondCol(cond.column),
            Action::CondOp(cond.op),
            Action::CondValStart(i),
            Action::CondValEnd(j),
        ]);
    }
    out.push(Action::End);
    Ok(out)
}

/// [`actions_for_query`] on an example's gold annotation.
pub fn gold_actions(example: &Example) -> Result<Vec<Action>> {
    actions_for_query(&example.gold, &example.gold_spans, &example.question_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::skyscraper;

    fn skyscraper_actions() -> Vec<Action> {
        use Action::*;
        vec![
            Agg(AggOp::None),
            SelCol(3),
            CondCol(ColumnRef::Indexed(1)),
            CondOp(crate::query_model::CondOp::Eq),
            CondValStart(5),
            CondValEnd(6),
            CondCol(ColumnRef::Indexed(2)),
            CondOp(crate::query_model::CondOp::Eq),
            CondValStart(8),
            CondValEnd(8),
            End,
        ]
    }

    fn init() -> ParserState {
        let (table, ex) = skyscraper();
        initial_state(&ex, &table, TransitionConfig::default())
    }

    #[test]
    fn initial_state_is_empty_and_offers_only_aggregators() {
        let s = init();
        assert_eq!(s.agg(), None);
        assert_eq!(s.sel_col(), None);
        assert!(s.completed_conditions().is_empty());
        assert!(!s.is_terminal());
        assert_eq!(
            s.valid_actions().unwrap(),
            AggOp::ALL.map(Action::Agg).to_vec()
        );
        assert_eq!(init().summary(), s.summary());
    }

    #[test]
    fn condition_boundary_offers_columns_anycol_and_end() {
        let s = init()
            .apply_all(&[Action::Agg(AggOp::None), Action::SelCol(3)])
            .unwrap();
        let v = s.valid_actions().unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.contains(&Action::CondCol(ColumnRef::AnyCol)));
        assert_eq!(v.last(), Some(&Action::End));
    }

    #[test]
    fn span_end_never_precedes_start() {
        let s = init().apply_all(&skyscraper_actions()[..5]).unwrap();
        assert_eq!(
            s.valid_actions().unwrap(),
            (5..9).map(Action::CondValEnd).collect::<Vec<_>>()
        );
        assert!(s.apply(Action::CondValEnd(4)).is_err());
    }

    #[test]
    fn after_condcol_only_operators() {
        let s = init().apply_all(&skyscraper_actions()[..3]).unwrap();
        assert_eq!(
            s.valid_actions().unwrap(),
            CondOp::ALL.map(Action::CondOp).to_vec()
        );
    }

    #[test]
    fn skyscraper_sequence_builds_skyscraper_query() {
        let (_, ex) = skyscraper();
        let end = init().apply_all(&skyscraper_actions()).unwrap();
        assert!(end.is_terminal());
        let q = end.extract_query().unwrap();
        assert!(q.exact_equal(&ex.gold));
        assert_eq!(gold_actions(&ex).unwrap(), skyscraper_actions());
        assert!(end.valid_actions().is_err());
    }

    #[test]
    fn conditionless_query() {
        let q = Query::new(AggOp::Count, 0, vec![]);
        let acts = actions_for_query(&q, &[], &[]).unwrap();
        assert_eq!(acts.len(), 3);
        let end = init().apply_all(&acts).unwrap();
        assert!(end.extract_query().unwrap().conds.is_empty());
    }

    #[test]
    fn apply_leaves_original_untouched() {
        let s = init();
        let before = s.summary();
        let _ = s.apply(Action::Agg(AggOp::Max)).unwrap();
        assert_eq!(s.summary(), before);
        assert!(s.history().is_empty());
    }

    #[test]
    fn extract_on_non_terminal_is_an_error() {
        assert!(init().extract_query().is_err());
    }

    #[test]
    fn mismatched_span_is_an_error() {
        let (_, ex) = skyscraper();
        assert!(actions_for_query(&ex.gold, &[(5, 6), (7, 8)], &ex.question_tokens).is_err());
        assert!(actions_for_query(&ex.gold, &[(5, 6)], &ex.question_tokens).is_err());
    }

    #[test]
    fn anycol_flag_and_cap_gate_condcol() {
        let (table, ex) = skyscraper();
        let cfg = TransitionConfig {
            anycol: false,
            max_conditions: Some(1),
        };
        let s = initial_state(&ex, &table, cfg)
            .apply_all(&[Action::Agg(AggOp::None), Action::SelCol(0)])
            .unwrap();
        let v = s.valid_actions().unwrap();
        assert!(!v.contains(&Action::CondCol(ColumnRef::AnyCol)));
        assert_eq!(v.len(), 5);
        let s = s.apply_all(&skyscraper_actions()[2..6]).unwrap();
        assert_eq!(s.valid_actions().unwrap(), vec![Action::End]);
    }

    #[test]
    fn trace_round_trip() {
        let text = format_trace(&skyscraper_actions());
        assert!(text.contains("CONDVAL_START 5\n"));
        assert_eq!(parse_trace(&text).unwrap(), skyscraper_actions());
        assert!(parse_trace("CONDVAL_START x").is_err());
        assert_eq!(
            "CONDCOL ANYCOL".parse::<Action>().unwrap(),
            Action::CondCol(ColumnRef::AnyCol)
        );
    }

    /// Walks every reachable state up to a depth, checking legality soundness.
    #[test]
    fn legality_is_sound_on_reachable_states() {
        let (table, ex) = skyscraper();
        let cfg = TransitionConfig {
            anycol: true,
            max_conditions: Some(1),
        };
        let mut frontier = vec![initial_state(&ex, &table, cfg)];
        let probe: Vec<Action> = {
            let mut p: Vec<Action> = AggOp::ALL.map(Action::Agg).to_vec();
            p.extend((0..6).map(Action::SelCol));
            p.extend((0..5).map(|c| Action::CondCol(ColumnRef::Indexed(c))));
            p.push(Action::CondCol(ColumnRef::AnyCol));
            p.extend(CondOp::ALL.map(Action::CondOp));
            p.extend((0..10).map(Action::CondValStart));
            p.extend((0..10).map(Action::CondValEnd));
            p.push(Action::End);
            p
        };
        let mut visited = 0;
        while let Some(s) = frontier.pop() {
            visited += 1;
            let valid = s.valid_actions().unwrap();
            for a in &probe {
                let ok = s.apply(*a);
                assert_eq!(ok.is_ok(), valid.contains(a), "{a} at {}", s.summary());
                if let Ok(next) = ok {
                    if !next.is_terminal() {
                        frontier.push(next);
                    } else {
                        next.extract_query().unwrap();
                    }
                }
            }
        }
        assert!(visited > 1000);
    }
}
