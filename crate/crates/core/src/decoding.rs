//! Greedy, beam and execution-guided decoding over the transition system.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Table};
use crate::error::{Error, Result};
use crate::policy::{DecoderState, EncodedInput, Graph, Policy};
use crate::query_model::Query;
use crate::sql_engine::{execute_partial, ExecResult};
use crate::transitions::{Action, ParserState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
    ExecGuided(usize),
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Greedy => write!(f, "greedy"),
            DecodeMode::Beam(k) => write!(f, "beam-{k}"),
            DecodeMode::ExecGuided(k) => write!(f, "eg-{k}"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    /// `greedy`, `beam-K` or `eg-K`.
    fn from_str(s: &str) -> Result<Self> {
        let width = |k: &str| -> Result<usize> {
            match k.parse::<usize>() {
                Ok(k) if k > 0 => Ok(k),
                _ => Err(Error::Config(format!("bad beam width in {s:?}"))),
            }
        };
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            _ => match s.split_once('-') {
                Some(("beam", k)) => Ok(DecodeMode::Beam(width(k)?)),
                Some(("eg", k)) => Ok(DecodeMode::ExecGuided(width(k)?)),
                _ => Err(Error::Config(format!("unknown decode mode {s:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Upper bound on emitted conditions; keeps decoding finite.
    pub max_conditions: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_conditions: 4,
        }
    }
}

/// A finished (or in-progress) decoding path.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub actions: Vec<Action>,
    pub logprob: f64,
    pub state: ParserState,
    /// Execution of the (partial) query, filled in by execution-guided decoding.
    pub exec: Option<ExecResult>,
}

impl Hypothesis {
    pub fn query(&self) -> Result<Query> {
        self.state.extract_query()
    }
}

/// Anything that assigns log-probabilities to candidate actions along a path.
pub trait Scorer {
    type State: Clone;
    fn start(&mut self) -> Self::State;
    fn log_probs(&mut self, state: &Self::State, candidates: &[Action]) -> Result<Vec<f64>>;
    fn advance(&mut self, state: &Self::State, action: Action) -> Self::State;
}

/// The trained policy, evaluated without dropout.
pub struct PolicyScorer<'p> {
    policy: &'p Policy,
    graph: Graph<'p>,
    enc: EncodedInput,
}

impl<'p> PolicyScorer<'p> {
    pub fn new(policy: &'p Policy, example: &Example, table: &Table) -> Self {
        let mut graph = Graph::new(&policy.params);
        let enc = policy.encode(&mut graph, example, table, None);
        PolicyScorer { policy, graph, enc }
    }
}

impl Scorer for PolicyScorer<'_> {
    type State = DecoderState;

    fn start(&mut self) -> DecoderState {
        self.policy.start(&mut self.graph, &self.enc, None)
    }

    fn log_probs(&mut self, state: &DecoderState, candidates: &[Action]) -> Result<Vec<f64>> {
        self.policy.score_actions(&mut self.graph, &self.enc, state, candidates)
    }

    fn advance(&mut self, state: &DecoderState, action: Action) -> DecoderState {
        self.policy.advance(&mut self.graph, &self.enc, state, action, None)
    }
}

/// Decodes one example with the trained policy.
pub fn decode(policy: &Policy, example: &Example, table: &Table, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let mut scorer = PolicyScorer::new(policy, example, table);
    let init = policy.initial_state(example, table, Some(cfg.max_conditions));
    decode_with(&mut scorer, init, table, cfg.mode)
}

/// Decodes from `init` with an arbitrary scorer.
pub fn decode_with<S: Scorer>(scorer: &mut S, init: ParserState, table: &Table, mode: DecodeMode) -> Result<Hypothesis> {
    match mode {
        DecodeMode::Greedy => greedy(scorer, init),
        DecodeMode::Beam(k) => first(beam(scorer, init, table, k, false)?),
        // The most likely finished query that executes to something.
        DecodeMode::ExecGuided(k) => {
            let ranked = beam(scorer, init, table, k, true)?;
            match ranked.iter().position(non_empty) {
                Some(i) => Ok(ranked.into_iter().nth(i).expect("index in range")),
                None => first(ranked),
            }
        }
    }
}

/// All finished beam hypotheses, best first.
pub fn decode_beam(policy: &Policy, example: &Example, table: &Table, k: usize, max_conditions: usize) -> Result<Vec<Hypothesis>> {
    let mut scorer = PolicyScorer::new(policy, example, table);
    let init = policy.initial_state(example, table, Some(max_conditions));
    beam(&mut scorer, init, table, k, false)
}

fn first(ranked: Vec<Hypothesis>) -> Result<Hypothesis> {
    ranked
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("decoding produced no hypothesis"))
}

/// Index of the maximum; ties go to the lowest index (lowest action ordinal,
/// since candidates are sorted).
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn greedy<S: Scorer>(scorer: &mut S, init: ParserState) -> Result<Hypothesis> {
    let mut dec = scorer.start();
    let mut state = init;
    let mut logprob = 0.0;
    loop {
        let cands = state.valid_actions()?;
        let lp = scorer.log_probs(&dec, &cands)?;
        let i = argmax(&lp);
        logprob += lp[i];
        state = state.apply(cands[i])?;
        if state.is_terminal() {
            break;
        }
        dec = scorer.advance(&dec, cands[i]);
    }
    Ok(Hypothesis {
        actions: state.history().to_vec(),
        logprob,
        state,
        exec: None,
    })
}

struct Live<T> {
    hyp: Hypothesis,
    dec: T,
}

struct Child {
    parent: usize,
    action: Action,
    logprob: f64,
    state: ParserState,
    exec: Option<ExecResult>,
}

fn by_score(a: &Child, b: &Child) -> Ordering {
    b.logprob.total_cmp(&a.logprob)
}

/// Beam search; with `guided`, children whose partial execution fails or
/// comes back empty are dropped before the top-k cut.
fn beam<S: Scorer>(scorer: &mut S, init: ParserState, table: &Table, k: usize, guided: bool) -> Result<Vec<Hypothesis>> {
    if k == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            actions: Vec::new(),
            logprob: 0.0,
            state: init,
            exec: None,
        },
        dec: scorer.start(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut children = Vec::new();
        for (p, h) in live.iter().enumerate() {
            let cands = h.hyp.state.valid_actions()?;
            let lp = scorer.log_probs(&h.dec, &cands)?;
            for (a, l) in cands.into_iter().zip(lp) {
                let state = h.hyp.state.apply(a)?;
                let exec = guided.then(|| execute_partial(table, &state));
                children.push(Child {
                    parent: p,
                    action: a,
                    logprob: h.hyp.logprob + l,
                    state,
                    exec,
                });
            }
        }
        // Stable: ties keep parent order, then action order.
        children.sort_by(by_score);
        let chosen: Vec<Child> = if guided {
            let usable = children
                .iter()
                .filter(|c| c.exec.as_ref().is_some_and(ExecResult::is_usable))
                .count();
            if usable > 0 {
                children
                    .into_iter()
                    .filter(|c| c.exec.as_ref().is_some_and(ExecResult::is_usable))
                    .take(k)
                    .collect()
            } else {
                // Everything is empty or broken: keep the best non-error paths.
                children
                    .into_iter()
                    .filter(|c| !c.exec.as_ref().is_some_and(ExecResult::is_error))
                    .take(k)
                    .collect()
            }
        } else {
            children.into_iter().take(k).collect()
        };

        let mut next = Vec::new();
        for c in chosen {
            let parent = &live[c.parent];
            let mut actions = parent.hyp.actions.clone();
            actions.push(c.action);
            let hyp = Hypothesis {
                actions,
                logprob: c.logprob,
                state: c.state,
                exec: c.exec,
            };
            if hyp.state.is_terminal() {
                finished.push(hyp);
            } else {
                let dec = scorer.advance(&parent.dec, c.action);
                next.push(Live { hyp, dec });
            }
        }
        live = next;
        // Scores only decrease along a path, so nothing live can overtake
        // the best finished hypothesis once it leads.
        let best_live = live.iter().map(|h| h.hyp.logprob).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        if !finished.is_empty() && best_done >= best_live && (!guided || finished.iter().any(non_empty)) {
            break;
        }
    }
    // Stable sort: equal scores keep the order in which they finished.
    finished.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    Ok(finished)
}
fn non_empty(h: &Hypothesis) -> bool {
    h.exec.as_ref().is_some_and(ExecResult::is_usable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query_model::{AggOp, ColumnRef};
    use crate::synth::skyscraper;
    use crate::transitions::{initial_state, TransitionConfig};

    /// Scores actions from a fixed preference function of (history, action).
    struct Rigged<F: FnMut(&[Action], Action) -> f64>(F);

    impl<F: FnMut(&[Action], Action) -> f64> Scorer for Rigged<F> {
        type State = Vec<Action>;
        fn start(&mut self) -> Vec<Action> {
            Vec::new()
        }
        fn log_probs(&mut self, h: &Vec<Action>, cands: &[Action]) -> Result<Vec<f64>> {
            let s: Vec<f64> = cands.iter().map(|&a| (self.0)(h, a)).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = s.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            Ok(s.iter().map(|x| x - z).collect())
        }
        fn advance(&mut self, h: &Vec<Action>, a: Action) -> Vec<Action> {
            let mut h = h.clone();
            h.push(a);
            h
        }
    }

    fn capped() -> TransitionConfig {
        TransitionConfig {
            anycol: true,
            max_conditions: Some(2),
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("greedy".parse::<DecodeMode>().unwrap(), DecodeMode::Greedy);
        assert_eq!("beam-5".parse::<DecodeMode>().unwrap(), DecodeMode::Beam(5));
        assert_eq!("eg-3".parse::<DecodeMode>().unwrap(), DecodeMode::ExecGuided(3));
        assert!("beam-0".parse::<DecodeMode>().is_err());
        assert!("nope".parse::<DecodeMode>().is_err());
    }

    #[test]
    fn greedy_follows_the_rigged_preference() {
        let (table, ex) = skyscraper();
        let init = initial_state(&ex, &table, capped());
        let mut s = Rigged(|_: &[Action], a: Action| match a {
            Action::SelCol(3) | Action::End => 5.0,
            _ => 0.0,
        });
        let h = decode_with(&mut s, init, &table, DecodeMode::Greedy).unwrap();
        assert_eq!(h.actions, vec![Action::Agg(AggOp::None), Action::SelCol(3), Action::End]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (table, ex) = skyscraper();
        for seed in 0..20u64 {
            let pref = |h: &[Action], a: Action| {
                let x = (seed.wrapping_mul(2654435761) ^ (h.len() as u64 * 97) ^ (a.to_string().len() as u64 * 31)) % 13;
                x as f64 / 3.0
            };
            let g = decode_with(&mut Rigged(pref), initial_state(&ex, &table, capped()), &table, DecodeMode::Greedy).unwrap();
            let b = decode_with(&mut Rigged(pref), initial_state(&ex, &table, capped()), &table, DecodeMode::Beam(1)).unwrap();
            assert_eq!(g.actions, b.actions);
            assert!((g.logprob - b.logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_finds_the_exhaustive_optimum() {
        // With no conditions allowed the space is AGG × SELCOL × END; a beam
        // as wide as the space must return the global optimum.
        let (table, ex) = skyscraper();
        let cfg = TransitionConfig {
            anycol: false,
            max_conditions: Some(0),
        };
        let pref = |h: &[Action], a: Action| match (h.first(), a) {
            (_, Action::Agg(AggOp::Count)) => 1.0,
            (Some(Action::Agg(AggOp::Max)), Action::SelCol(0)) => 9.0,
            _ => 0.0,
        };
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let root = initial_state(&ex, &table, cfg);
        let mut rig = Rigged(pref);
        for a in root.valid_actions().unwrap() {
            let s1 = root.apply(a).unwrap();
            let l1 = rig.log_probs(&vec![], &root.valid_actions().unwrap()).unwrap();
            let i1 = root.valid_actions().unwrap().binary_search(&a).unwrap();
            for c in s1.valid_actions().unwrap() {
                let l2 = rig.log_probs(&vec![a], &s1.valid_actions().unwrap()).unwrap();
                let i2 = s1.valid_actions().unwrap().binary_search(&c).unwrap();
                let total = l1[i1] + l2[i2];
                if total > best.0 {
                    best = (total, vec![a, c, Action::End]);
                }
            }
        }
        let h = decode_with(&mut Rigged(pref), root, &table, DecodeMode::Beam(24)).unwrap();
        assert_eq!(h.actions, best.1);
        assert!((h.logprob - best.0).abs() < 1e-12);
        // Greedy is myopic here: COUNT wins the first step.
        let g = decode_with(&mut Rigged(pref), initial_state(&ex, &table, cfg), &table, DecodeMode::Greedy).unwrap();
        assert_eq!(g.actions[0], Action::Agg(AggOp::Count));
        assert_eq!(h.actions[0], Action::Agg(AggOp::Max));
    }

    #[test]
    fn execution_guidance_avoids_sum_over_text() {
        let (table, ex) = skyscraper();
        // Strongly prefers SUM(Name), which is a type error.
        let pref = |_: &[Action], a: Action| match a {
            Action::Agg(AggOp::Sum) => 4.0,
            Action::SelCol(1) => 4.0,
            Action::End => 2.0,
            _ => 0.0,
        };
        let g = decode_with(&mut Rigged(pref), initial_state(&ex, &table, capped()), &table, DecodeMode::Greedy).unwrap();
        assert!(crate::sql_engine::execute(&table, &g.query().unwrap()).is_error());
        let e = decode_with(&mut Rigged(pref), initial_state(&ex, &table, capped()), &table, DecodeMode::ExecGuided(3)).unwrap();
        let r = crate::sql_engine::execute(&table, &e.query().unwrap());
        assert!(r.is_usable(), "{r:?}");
    }

    #[test]
    fn execution_guidance_skips_empty_conditions() {
        let (table, ex) = skyscraper();
        // Prefers "Location = willis tower", which matches nothing; the
        // runner-up column gives a non-empty answer.
        let pref = |_: &[Action], a: Action| match a {
            Action::CondCol(ColumnRef::Indexed(2)) => 6.0,
            Action::CondCol(ColumnRef::Indexed(1)) => 5.0,
            Action::CondOp(crate::query_model::CondOp::Eq) => 5.0,
            Action::CondValStart(5) | Action::CondValEnd(6) => 5.0,
            Action::Agg(AggOp::None) | Action::SelCol(0) => 10.0,
            _ => 0.0,
        };
        let g = decode_with(&mut Rigged(pref), initial_state(&ex, &table, capped()), &table, DecodeMode::Greedy).unwrap();
        assert!(crate::sql_engine::execute(&table, &g.query().unwrap()).is_empty());
        let e = decode_with(&mut Rigged(pref), initial_state(&ex, &table, capped()), &table, DecodeMode::ExecGuided(3)).unwrap();
        let q = e.query().unwrap();
        assert!(crate::sql_engine::execute(&table, &q).is_usable(), "{q}");
    }
}
