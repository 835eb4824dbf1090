//! Training oracles: given a gold example and a partial parse, the set of
//! actions that can still lead to a correct parse.
//!
//! The static oracle follows the single canonical linearization. The
//! non-deterministic oracles accept any not-yet-emitted gold condition next,
//! and optionally `ANYCOL` in place of a column when the disjunctive
//! expansion selects exactly the rows of the gold column.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Table, TableMap};
use crate::error::{Error, Result};
use crate::query_model::{ColumnRef, Condition};
use crate::sql_engine::filter_rows;
use crate::transitions::{gold_actions, initial_state, Action, ParserState, Phase, TransitionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OracleKind {
    #[serde(rename = "static")]
    Static,
    #[serde(rename = "nondet-order")]
    NonDetOrder,
    #[serde(rename = "nondet-anycol")]
    NonDetOrderAnyCol,
}

impl OracleKind {
    pub const ALL: [OracleKind; 3] = [
        OracleKind::Static,
        OracleKind::NonDetOrder,
        OracleKind::NonDetOrderAnyCol,
    ];

    pub fn uses_anycol(self) -> bool {
        self == OracleKind::NonDetOrderAnyCol
    }

    /// Transition legality for parsers trained with this oracle.
    pub fn transition_config(self) -> TransitionConfig {
        TransitionConfig {
            anycol: self.uses_anycol(),
            max_conditions: None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OracleKind::Static => "static",
            OracleKind::NonDetOrder => "nondet-order",
            OracleKind::NonDetOrderAnyCol => "nondet-anycol",
        }
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OracleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown oracle {s:?} (static|nondet-order|nondet-anycol)")))
    }
}

/// Correct continuations, sorted by action order and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleSet {
    actions: Vec<Action>,
}

impl OracleSet {
    fn new(mut actions: Vec<Action>) -> Self {
        actions.sort();
        actions.dedup();
        OracleSet { actions }
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn contains(&self, a: Action) -> bool {
        self.actions.binary_search(&a).is_ok()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// True iff the condition's ANYCOL expansion selects exactly the rows the
/// gold column does.
pub fn anycol_safe(table: &Table, cond: &Condition) -> bool {
    let any = Condition {
        column: ColumnRef::AnyCol,
        ..cond.clone()
    };
    filter_rows(table, [cond]) == filter_rows(table, [&any])
}

/// Oracle bound to one gold example.
pub struct Oracle<'a> {
    kind: OracleKind,
    example: &'a Example,
    gold: Vec<Action>,
    safe: Vec<bool>,
}

impl<'a> Oracle<'a> {
    pub fn new(kind: OracleKind, example: &'a Example, table: &Table) -> Result<Self> {
        let gold = gold_actions(example)?;
        let safe = example
            .gold
            .conds
            .iter()
            .map(|c| kind.uses_anycol() && c.column != ColumnRef::AnyCol && anycol_safe(table, c))
            .collect();
        Ok(Oracle {
            kind,
            example,
            gold,
            safe,
        })
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    fn violation(&self, state: &ParserState, what: &str) -> Error {
        Error::Oracle {
            example: self.example.id.clone(),
            message: format!("{what} at state {}", state.summary()),
        }
    }

    /// Can `column` stand for gold condition `g`?
    fn column_fits(&self, column: ColumnRef, g: usize) -> bool {
        column == self.example.gold.conds[g].column || (column == ColumnRef::AnyCol && self.safe[g])
    }

    /// All sets of gold conditions that the state's completed conditions can
    /// be matched against, as bitmasks.
    fn emitted_masks(&self, state: &ParserState) -> Vec<u32> {
        let emitted = state.completed_conditions();
        let spans = state.completed_spans();
        let gold = &self.example.gold.conds;
        let mut masks = Vec::new();
        fn walk(
            oracle: &Oracle<'_>,
            emitted: &[crate::query_model::Condition],
            spans: &[(usize, usize)],
            i: usize,
            used: u32,
            gold_len: usize,
            masks: &mut Vec<u32>,
        ) {
            if i == emitted.len() {
                masks.push(used);
                return;
            }
            for g in 0..gold_len {
                if used & (1 << g) != 0 {
                    continue;
                }
                let gc = &oracle.example.gold.conds[g];
                if emitted[i].op == gc.op
                    && spans[i] == oracle.example.gold_spans[g]
                    && oracle.column_fits(emitted[i].column, g)
                {
                    walk(oracle, emitted, spans, i + 1, used | (1 << g), gold_len, masks);
                }
            }
        }
        walk(self, emitted, spans, 0, 0, gold.len(), &mut masks);
        masks.sort_unstable();
        masks.dedup();
        masks
    }

    /// Gold conditions still available to the trailing partial condition.
    fn open_candidates(&self, state: &ParserState, masks: &[u32]) -> Vec<usize> {
        let partial = state.partial_condition();
        let start = state.pending_span_start();
        let mut out = Vec::new();
        for &mask in masks {
            for g in 0..self.example.gold.conds.len() {
                if mask & (1 << g) != 0 {
                    continue;
                }
                let gc = &self.example.gold.conds[g];
                let fits = partial.is_some_and(|p| {
                    self.column_fits(p.column, g) && p.op.is_none_or(|op| op == gc.op)
                }) && start.is_none_or(|s| s == self.example.gold_spans[g].0);
                if fits {
                    out.push(g);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// The correct continuations at `state`.
    pub fn next(&self, state: &ParserState) -> Result<OracleSet> {
        let set = match self.kind {
            OracleKind::Static => {
                let history = state.history();
                if !self.gold.starts_with(history) || history.len() >= self.gold.len() {
                    return Err(self.violation(state, "state is off the static oracle path"));
                }
                vec![self.gold[history.len()]]
            }
            OracleKind::NonDetOrder | OracleKind::NonDetOrderAnyCol => self.next_nondet(state)?,
        };
        let set: Vec<Action> = set.into_iter().filter(|&a| state.is_valid(a)).collect();
        if set.is_empty() {
            return Err(self.violation(state, "empty oracle set"));
        }
        Ok(OracleSet::new(set))
    }

    fn next_nondet(&self, state: &ParserState) -> Result<Vec<Action>> {
        let gold = &self.example.gold;
        let phase = state.phase();
        if phase != Phase::Agg && state.agg() != Some(gold.agg) {
            return Err(self.violation(state, "aggregator differs from gold"));
        }
        if !matches!(phase, Phase::Agg | Phase::SelCol) && state.sel_col() != Some(gold.sel_col) {
            return Err(self.violation(state, "selected column differs from gold"));
        }
        match phase {
            Phase::Terminal => Err(self.violation(state, "terminal state")),
            Phase::Agg => Ok(vec![Action::Agg(gold.agg)]),
            Phase::SelCol => Ok(vec![Action::SelCol(gold.sel_col)]),
            _ => {
                let masks = self.emitted_masks(state);
                if masks.is_empty() {
                    return Err(self.violation(state, "completed conditions do not match gold"));
                }
                let mut out = Vec::new();
                if phase == Phase::CondColOrEnd {
                    let all = (1u32 << gold.conds.len()) - 1;
                    for &mask in &masks {
                        if mask == all {
                            out.push(Action::End);
                        }
                        for g in 0..gold.conds.len() {
                            if mask & (1 << g) == 0 {
                                out.push(Action::CondCol(gold.conds[g].column));
                                if self.safe[g] {
                                    out.push(Action::CondCol(ColumnRef::AnyCol));
                                }
                            }
                        }
                    }
                    return Ok(out);
                }
                for g in self.open_candidates(state, &masks) {
                    out.push(match phase {
                        Phase::CondOp => Action::CondOp(gold.conds[g].op),
                        Phase::ValStart => Action::CondValStart(self.example.gold_spans[g].0),
                        Phase::ValEnd { .. } => Action::CondValEnd(self.example.gold_spans[g].1),
                        _ => unreachable!("handled above"),
                    });
                }
                Ok(out)
            }
        }
    }
}

/// Convenience wrapper: `O(x, a_<t)` for a single call.
pub fn oracle_next(
    kind: OracleKind,
    example: &Example,
    table: &Table,
    state: &ParserState,
) -> Result<OracleSet> {
    Oracle::new(kind, example, table)?.next(state)
}

#[derive(Clone, Debug, Default)]
pub struct Enumeration {
    pub sequences: Vec<Vec<Action>>,
    pub truncated: bool,
    /// Sizes of every oracle set computed during the walk.
    pub set_sizes: Vec<usize>,
}

/// Depth-first enumeration of every action sequence the oracle accepts,
/// stopping after `cap` complete sequences.
pub fn enumerate_oracle_sequences(
    kind: OracleKind,
    example: &Example,
    table: &Table,
    cap: usize,
) -> Result<Enumeration> {
    let oracle = Oracle::new(kind, example, table)?;
    let mut out = Enumeration::default();
    let mut stack = vec![initial_state(example, table, kind.transition_config())];
    while let Some(state) = stack.pop() {
        if state.is_terminal() {
            if out.sequences.len() >= cap {
                out.truncated = true;
                break;
            }
            out.sequences.push(state.history().to_vec());
            continue;
        }
        let set = oracle.next(&state)?;
        out.set_sizes.push(set.len());
        for &a in set.actions().iter().rev() {
            stack.push(state.apply(a)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleStats {
    pub kind: Option<OracleKind>,
    pub examples: usize,
    pub set_size_histogram: BTreeMap<usize, usize>,
    pub sequence_count_histogram: BTreeMap<usize, usize>,
    pub truncated: usize,
    pub failures: usize,
}

/// Histograms of oracle-set sizes and accepted-sequence counts over a split.
pub fn oracle_stats(kind: OracleKind, examples: &[Example], tables: &TableMap, cap: usize) -> OracleStats {
    let mut stats = OracleStats {
        kind: Some(kind),
        ..Default::default()
    };
    for ex in examples {
        stats.examples += 1;
        let Some(table) = tables.get(&ex.table_id) else {
            stats.failures += 1;
            continue;
        };
        match enumerate_oracle_sequences(kind, ex, table, cap) {
            Ok(e) => {
                for s in e.set_sizes {
                    *stats.set_size_histogram.entry(s).or_default() += 1;
                }
                *stats
                    .sequence_count_histogram
                    .entry(e.sequences.len())
                    .or_default() += 1;
                stats.truncated += usize::from(e.truncated);
            }
            Err(_) => stats.failures += 1,
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_example, Cell, ColumnType};
    use crate::query_model::{AggOp, CondOp, Query};
    use crate::synth::skyscraper;
    use ColumnRef::{AnyCol, Indexed};

    fn after_selcol(kind: OracleKind) -> OracleSet {
        let (table, ex) = skyscraper();
        let s = initial_state(&ex, &table, kind.transition_config())
            .apply_all(&[Action::Agg(AggOp::None), Action::SelCol(3)])
            .unwrap();
        oracle_next(kind, &ex, &table, &s).unwrap()
    }

    #[test]
    fn skyscraper_second_condition_position() {
        assert_eq!(after_selcol(OracleKind::Static).actions(), &[Action::CondCol(Indexed(1))]);
        assert_eq!(
            after_selcol(OracleKind::NonDetOrder).actions(),
            &[Action::CondCol(Indexed(1)), Action::CondCol(Indexed(2))]
        );
        assert_eq!(
            after_selcol(OracleKind::NonDetOrderAnyCol).actions(),
            &[Action::CondCol(Indexed(1)), Action::CondCol(Indexed(2)), Action::CondCol(AnyCol)]
        );
    }

    #[test]
    fn anycol_safety() {
        let (table, _) = skyscraper();
        assert!(anycol_safe(&table, &Condition::new(Indexed(1), CondOp::Eq, "Willis Tower")));
        let empty = Table::new("e", vec!["a".into()], vec![ColumnType::Text], vec![]).unwrap();
        assert!(anycol_safe(&empty, &Condition::new(Indexed(0), CondOp::Eq, "x")));

        // 'chicago' is also a Name on a row whose Location is elsewhere.
        let t = |s: &str| Cell::Text(s.into());
        let tricky = Table::new(
            "t",
            vec!["Name".into(), "Location".into()],
            vec![ColumnType::Text, ColumnType::Text],
            vec![vec![t("Willis Tower"), t("Chicago")], vec![t("Chicago"), t("Boston")]],
        )
        .unwrap();
        let cond = Condition::new(Indexed(1), CondOp::Eq, "Chicago");
        // Brute force: gold selects row 0; disjunction selects rows 0 and 1.
        assert_eq!(filter_rows(&tricky, [&cond]), vec![0]);
        assert!(!anycol_safe(&tricky, &cond));
    }

    #[test]
    fn enumeration_counts_for_skyscraper() {
        let (table, ex) = skyscraper();
        let n = |k| enumerate_oracle_sequences(k, &ex, &table, 1000).unwrap().sequences.len();
        assert_eq!(n(OracleKind::Static), 1);
        assert_eq!(n(OracleKind::NonDetOrder), 2);
        // Both conditions are ANYCOL-safe: 2 orders x 2 x 2 column choices.
        assert_eq!(n(OracleKind::NonDetOrderAnyCol), 8);
    }

    #[test]
    fn three_conditions_give_six_orders() {
        let t = |s: &str| Cell::Text(s.into());
        let table = Table::new(
            "t",
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![ColumnType::Text; 4],
            vec![vec![t("x"), t("y"), t("z"), t("w")]],
        )
        .unwrap();
        let gold = Query::new(
            AggOp::None,
            3,
            vec![
                Condition::new(Indexed(0), CondOp::Eq, "x"),
                Condition::new(Indexed(1), CondOp::Eq, "y"),
                Condition::new(Indexed(2), CondOp::Eq, "z"),
            ],
        );
        let ex = build_example("e".into(), "x y z", &table, gold).unwrap();
        let e = enumerate_oracle_sequences(OracleKind::NonDetOrder, &ex, &table, 100).unwrap();
        assert_eq!(e.sequences.len(), 6);
        assert!(!e.truncated);
        let capped = enumerate_oracle_sequences(OracleKind::NonDetOrder, &ex, &table, 4).unwrap();
        assert_eq!(capped.sequences.len(), 4);
        assert!(capped.truncated);
    }

    #[test]
    fn same_column_conditions_bind_late() {
        // Two gold conditions on the same column with different operators.
        let table = Table::new(
            "t",
            vec!["n".into(), "m".into()],
            vec![ColumnType::Real, ColumnType::Real],
            vec![vec![Cell::Real(5.0), Cell::Real(1.0)]],
        )
        .unwrap();
        let gold = Query::new(
            AggOp::None,
            1,
            vec![
                Condition::new(Indexed(0), CondOp::Gt, "3"),
                Condition::new(Indexed(0), CondOp::Lt, "9"),
            ],
        );
        let ex = build_example("e".into(), "more than 3 less than 9", &table, gold).unwrap();
        let s = initial_state(&ex, &table, OracleKind::NonDetOrder.transition_config())
            .apply_all(&[Action::Agg(AggOp::None), Action::SelCol(1), Action::CondCol(Indexed(0))])
            .unwrap();
        let set = oracle_next(OracleKind::NonDetOrder, &ex, &table, &s).unwrap();
        assert_eq!(set.actions(), &[Action::CondOp(CondOp::Gt), Action::CondOp(CondOp::Lt)]);
        let s = s.apply(Action::CondOp(CondOp::Lt)).unwrap();
        let set = oracle_next(OracleKind::NonDetOrder, &ex, &table, &s).unwrap();
        assert_eq!(set.actions(), &[Action::CondValStart(5)]);
        let e = enumerate_oracle_sequences(OracleKind::NonDetOrder, &ex, &table, 100).unwrap();
        assert_eq!(e.sequences.len(), 2);
    }

    #[test]
    fn off_path_states_are_violations() {
        let (table, ex) = skyscraper();
        let s = initial_state(&ex, &table, TransitionConfig::default())
            .apply(Action::Agg(AggOp::Max))
            .unwrap();
        for kind in OracleKind::ALL {
            assert!(matches!(oracle_next(kind, &ex, &table, &s), Err(Error::Oracle { .. })));
        }
    }

    #[test]
    fn oracle_kind_parses() {
        for k in OracleKind::ALL {
            assert_eq!(k.name().parse::<OracleKind>().unwrap(), k);
        }
        assert!("dynamic".parse::<OracleKind>().is_err());
    }
}
