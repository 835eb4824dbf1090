//! The trainable scoring model.
//!
//! Encoder: word + type-feature embeddings, a question bi-LSTM, per-column
//! bi-LSTMs followed by self-attention across columns, cross-serial
//! dot-product attention between question tokens and columns, and final
//! bi-LSTMs producing `r^W` and `r^C`.
//!
//! Decoder: a stacked LSTM whose input at each step is the previous action
//! representation concatenated with dot-product attention contexts over
//! `r^W` and `r^C`. Candidate actions are scored bilinearly,
//! `s_a = h^T U r_a`, and normalized over the legal candidates only.

pub mod checkpoint;
pub mod optim;
pub mod tape;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Table, Vocabulary};
use crate::error::{Error, Result};
use crate::oracles::{Oracle, OracleKind};
use crate::query_model::ColumnRef;
use crate::transitions::{gold_actions, initial_state, Action, ParserState, TransitionConfig};

pub use tape::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub word_emb_dim: usize,
    pub action_emb_dim: usize,
    pub type_emb_dim: usize,
    /// Total width of every encoder bi-LSTM (half per direction).
    pub encoder_hidden: usize,
    pub decoder_layers: usize,
    /// Must equal `encoder_hidden`: decoder states attend to encoder outputs by dot product.
    pub decoder_hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub embedding_file: Option<PathBuf>,
    /// Whether `CONDCOL(ANYCOL)` is in this model's action space.
    pub anycol: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            word_emb_dim: 300,
            action_emb_dim: 16,
            type_emb_dim: 4,
            encoder_hidden: 256,
            decoder_layers: 2,
            decoder_hidden: 256,
            dropout: 0.3,
            learning_rate: 0.001,
            batch_size: 64,
            grad_clip: 5.0,
            seed: 1,
            embedding_file: None,
            anycol: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if [
            self.word_emb_dim,
            self.action_emb_dim,
            self.type_emb_dim,
            self.encoder_hidden,
            self.decoder_layers,
            self.decoder_hidden,
            self.batch_size,
        ]
        .contains(&0)
        {
            return bad("all dimensions, layer counts and batch size must be positive");
        }
        if !self.encoder_hidden.is_multiple_of(2) {
            return bad("encoder_hidden must be even (split across two directions)");
        }
        if self.decoder_hidden != self.encoder_hidden {
            return bad("decoder_hidden must equal encoder_hidden for dot-product attention");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return bad("learning_rate and grad_clip must be positive");
        }
        Ok(())
    }

    pub fn transition_config(&self) -> TransitionConfig {
        TransitionConfig {
            anycol: self.anycol,
            max_conditions: None,
        }
    }
}

const NUM_ACTION_LABELS: usize = 15;
const BOS_LABEL: usize = 14;

/// Row of the action-embedding table for an action (its type, plus the
/// operator for AGG/CONDOP).
fn action_label(a: Action) -> usize {
    match a {
        Action::Agg(op) => op.code(),
        Action::SelCol(_) => 6,
        Action::CondCol(_) => 7,
        Action::CondOp(op) => 8 + op.code(),
        Action::CondValStart(_) => 11,
        Action::CondValEnd(_) => 12,
        Action::End => 13,
    }
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
struct BiLstm {
    fw: Lstm,
    bw: Lstm,
}

#[derive(Clone, Copy, Debug)]
struct Handles {
    word_emb: ParamId,
    type_emb: ParamId,
    question_enc: BiLstm,
    column_enc: BiLstm,
    self_att_q: ParamId,
    self_att_k: ParamId,
    self_att_v: ParamId,
    question_final: BiLstm,
    column_final: BiLstm,
    action_emb: ParamId,
    anycol_vec: ParamId,
    bilinear: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-scale..scale))
            .collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, rows, cols, scale)
    }

    fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> Lstm {
        let wx = self.glorot(&format!("{name}.wx"), input, 4 * hidden);
        let wh = self.glorot(&format!("{name}.wh"), hidden, 4 * hidden);
        let mut bias = vec![0.0; 4 * hidden];
        // Gate layout is [input, forget, cell, output]; forget bias starts at 1.
        bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let b = self.store.add(format!("{name}.b"), Tensor::from_vec(1, 4 * hidden, bias));
        Lstm { wx, wh, b, hidden }
    }

    fn bilstm(&mut self, name: &str, input: usize, hidden: usize) -> BiLstm {
        BiLstm {
            fw: self.lstm(&format!("{name}.fw"), input, hidden),
            bw: self.lstm(&format!("{name}.bw"), input, hidden),
        }
    }
}

/// Per-example encoder output.
#[derive(Clone, Copy, Debug)]
pub struct EncodedInput {
    /// `T × E` question token representations.
    pub rw: Var,
    /// `n × E` column representations.
    pub rc: Var,
    /// `[rc; rw; anycol; 0]` stacked, for gathering action parameter representations.
    memory: Var,
    pub num_tokens: usize,
    pub num_columns: usize,
}

impl EncodedInput {
    fn memory_row(&self, a: Action) -> usize {
        let n = self.num_columns;
        let t = self.num_tokens;
        match a {
            Action::SelCol(c) | Action::CondCol(ColumnRef::Indexed(c)) => c,
            Action::CondCol(ColumnRef::AnyCol) => n + t,
            Action::CondValStart(i) | Action::CondValEnd(i) => n + i,
            Action::Agg(_) | Action::CondOp(_) | Action::End => n + t + 1,
        }
    }
}

/// Recurrent state of the stacked decoder LSTM.
#[derive(Clone, Debug)]
pub struct DecoderState {
    h: Vec<Var>,
    c: Vec<Var>,
}

impl DecoderState {
    pub fn top(&self) -> Var {
        *self.h.last().expect("at least one decoder layer")
    }
}

/// Per-parameter-group outcome of [`Policy::gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub group: String,
    pub rel_error: f64,
    pub grad_norm: f64,
    pub checked: usize,
}

/// Model parameters, configuration and vocabulary.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    handles: Handles,
    decoder: Vec<Lstm>,
}

type TrainRng<'a> = Option<&'a mut ChaCha8Rng>;

impl Policy {
    /// Randomly initialized parameters; seeded from `config.seed`.
    pub fn new(config: PolicyConfig, vocab: Vocabulary) -> Result<Policy> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let e = config.encoder_hidden;
        let half = e / 2;
        let emb_in = config.word_emb_dim + config.type_emb_dim;
        let rep = config.action_emb_dim + e;
        let (handles, decoder) = {
            let mut init = Init {
                store: &mut store,
                rng: &mut rng,
            };
            let handles = Handles {
                word_emb: init.uniform("word_emb", vocab.len(), config.word_emb_dim, 0.1),
                type_emb: init.uniform("type_emb", 2, config.type_emb_dim, 0.1),
                question_enc: init.bilstm("question_enc", emb_in, half),
                column_enc: init.bilstm("column_enc", emb_in, half),
                self_att_q: init.glorot("column_self_att.q", e, e),
                self_att_k: init.glorot("column_self_att.k", e, e),
                self_att_v: init.glorot("column_self_att.v", e, e),
                question_final: init.bilstm("question_final", 2 * e, half),
                column_final: init.bilstm("column_final", 2 * e, half),
                action_emb: init.uniform("action_emb", NUM_ACTION_LABELS, config.action_emb_dim, 0.1),
                anycol_vec: init.uniform("anycol", 1, e, 0.1),
                bilinear: init.glorot("bilinear", config.decoder_hidden, rep),
            };
            let decoder = (0..config.decoder_layers)
                .map(|l| {
                    let input = if l == 0 { rep + 2 * e } else { config.decoder_hidden };
                    init.lstm(&format!("decoder.{l}"), input, config.decoder_hidden)
                })
                .collect();
            (handles, decoder)
        };
        let mut policy = Policy {
            config,
            vocab,
            params: store,
            handles,
            decoder,
        };
        if let Some(path) = policy.config.embedding_file.clone() {
            policy.load_embeddings(&path)?;
        }
        Ok(policy)
    }

    /// Overwrites word-embedding rows from a `token v1 ... vd` text file.
    /// Returns the number of vocabulary entries initialized.
    pub fn load_embeddings(&mut self, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dim = self.config.word_emb_dim;
        let table = &mut self.params.tensors[self.handles.word_emb.0];
        let mut hits = 0;
        for (line_no, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Ingest {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    message: format!("bad embedding value: {e}"),
                })?;
            if values.len() != dim {
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if self.vocab.contains(token) {
                let row = self.vocab.get(token);
                table.data[row * dim..(row + 1) * dim].copy_from_slice(&values);
                hits += 1;
            }
        }
        Ok(hits)
    }

    /// Parameter-group names in declaration order.
    pub fn param_names(&self) -> &[String] {
        &self.params.names
    }

    fn lstm_cell(&self, g: &mut Graph<'_>, cell: &Lstm, x_proj: Var, h: Var, c: Var) -> (Var, Var) {
        let wh = g.param(cell.wh);
        let hh = g.matmul(h, wh);
        let gates = g.add(x_proj, hh);
        let n = cell.hidden;
        let i = g.slice_cols(gates, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, n, n);
        let f = g.sigmoid(f);
        let u = g.slice_cols(gates, 2 * n, n);
        let u = g.tanh(u);
        let o = g.slice_cols(gates, 3 * n, n);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c2 = g.add(fc, iu);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        (h2, c2)
    }

    /// Runs one direction over the rows of `xs`; returns per-position hidden states.
    fn lstm_seq(&self, g: &mut Graph<'_>, cell: &Lstm, xs: Var, reverse: bool) -> Vec<Var> {
        let len = g.value(xs).rows;
        let wx = g.param(cell.wx);
        let b = g.param(cell.b);
        let proj = g.matmul(xs, wx);
        let proj = g.add_row(proj, b);
        let mut h = g.zeros(1, cell.hidden);
        let mut c = g.zeros(1, cell.hidden);
        let mut out = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let xp = g.row(proj, t);
            (h, c) = self.lstm_cell(g, cell, xp, h, c);
            out[t] = h;
        }
        out
    }

    /// Bi-LSTM over rows; returns the `len × 2h` state matrix and the
    /// concatenated final states `[fw_last ; bw_first]`.
    fn bilstm(&self, g: &mut Graph<'_>, cell: &BiLstm, xs: Var) -> (Var, Var) {
        let fw = self.lstm_seq(g, &cell.fw, xs, false);
        let bw = self.lstm_seq(g, &cell.bw, xs, true);
        let rows: Vec<Var> = fw
            .iter()
            .zip(&bw)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect();
        let states = g.concat_rows(&rows);
        let last = g.concat_cols(&[*fw.last().expect("non-empty"), bw[0]]);
        (states, last)
    }

    fn embed(&self, g: &mut Graph<'_>, tokens: &[String], features: &[usize], rng: &mut TrainRng<'_>) -> Var {
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.get(t)).collect();
        let we = g.param(self.handles.word_emb);
        let te = g.param(self.handles.type_emb);
        let w = g.gather_rows(we, &ids);
        let t = g.gather_rows(te, features);
        let x = g.concat_cols(&[w, t]);
        self.dropout(g, x, rng)
    }

    fn dropout(&self, g: &mut Graph<'_>, x: Var, rng: &mut TrainRng<'_>) -> Var {
        match rng {
            Some(r) => g.dropout(x, self.config.dropout, *r),
            None => x,
        }
    }

    /// `softmax(query · keysᵀ) · values`, row-wise.
    fn attend(g: &mut Graph<'_>, query: Var, keys: Var, values: Var) -> Var {
        let scores = g.matmul_bt(query, keys);
        let alpha = g.softmax_rows(scores);
        g.matmul(alpha, values)
    }

    /// Encodes a question/table pair. Dropout is active only when `rng` is given.
    pub fn encode(&self, g: &mut Graph<'_>, example: &Example, table: &Table, mut rng: TrainRng<'_>) -> EncodedInput {
        let pad = |toks: &[String]| -> Vec<String> {
            if toks.is_empty() {
                vec![crate::dataset::UNK.to_string()]
            } else {
                toks.to_vec()
            }
        };
        let question = pad(&example.question_tokens);
        let in_columns = |t: &String| table.column_tokens.iter().flatten().any(|c| c == t);
        let q_feats: Vec<usize> = question.iter().map(|t| usize::from(in_columns(t))).collect();
        let xq = self.embed(g, &question, &q_feats, &mut rng);
        let (hw, _) = self.bilstm(g, &self.handles.question_enc, xq);

        let mut col_vecs = Vec::with_capacity(table.num_columns());
        for toks in &table.column_tokens {
            let toks = pad(toks);
            let feats: Vec<usize> = toks
                .iter()
                .map(|t| usize::from(example.question_tokens.contains(t)))
                .collect();
            let xc = self.embed(g, &toks, &feats, &mut rng);
            let (_, last) = self.bilstm(g, &self.handles.column_enc, xc);
            col_vecs.push(last);
        }
        let c0 = g.concat_rows(&col_vecs);

        // Single-head scaled dot-product self-attention with a residual connection.
        let e = self.config.encoder_hidden;
        let (wq, wk, wv) = (
            g.param(self.handles.self_att_q),
            g.param(self.handles.self_att_k),
            g.param(self.handles.self_att_v),
        );
        let q = g.matmul(c0, wq);
        let k = g.matmul(c0, wk);
        let v = g.matmul(c0, wv);
        let scores = g.matmul_bt(q, k);
        let scores = g.scale(scores, 1.0 / (e as f64).sqrt());
        let alpha = g.softmax_rows(scores);
        let mixed = g.matmul(alpha, v);
        let hc = g.add(c0, mixed);

        // Cross-serial attention: tokens over columns and columns over tokens.
        let ctx_w = Self::attend(g, hw, hc, hc);
        let ctx_c = Self::attend(g, hc, hw, hw);
        let xw = g.concat_cols(&[hw, ctx_w]);
        let xw = self.dropout(g, xw, &mut rng);
        let xc = g.concat_cols(&[hc, ctx_c]);
        let xc = self.dropout(g, xc, &mut rng);
        let (rw, _) = self.bilstm(g, &self.handles.question_final, xw);
        let (rc, _) = self.bilstm(g, &self.handles.column_final, xc);

        let anycol = g.param(self.handles.anycol_vec);
        let zero = g.zeros(1, e);
        let memory = g.concat_rows(&[rc, rw, anycol, zero]);
        EncodedInput {
            rw,
            rc,
            memory,
            num_tokens: question.len(),
            num_columns: table.num_columns(),
        }
    }

    /// `r^A` rows for `actions`: action embedding beside the parameter representation.
    fn action_reps(&self, g: &mut Graph<'_>, enc: &EncodedInput, actions: &[Action]) -> Var {
        let labels: Vec<usize> = actions.iter().map(|&a| action_label(a)).collect();
        let rows: Vec<usize> = actions.iter().map(|&a| enc.memory_row(a)).collect();
        let ae = g.param(self.handles.action_emb);
        let emb = g.gather_rows(ae, &labels);
        let par = g.gather_rows(enc.memory, &rows);
        g.concat_cols(&[emb, par])
    }

    fn step(&self, g: &mut Graph<'_>, enc: &EncodedInput, dec: &DecoderState, rep: Var, rng: &mut TrainRng<'_>) -> DecoderState {
        let top = dec.top();
        let ew = Self::attend(g, top, enc.rw, enc.rw);
        let ec = Self::attend(g, top, enc.rc, enc.rc);
        let mut input = g.concat_cols(&[rep, ew, ec]);
        let mut next = DecoderState {
            h: Vec::with_capacity(self.decoder.len()),
            c: Vec::with_capacity(self.decoder.len()),
        };
        for (l, cell) in self.decoder.iter().enumerate() {
            let x = self.dropout(g, input, rng);
            let wx = g.param(cell.wx);
            let b = g.param(cell.b);
            let proj = g.matmul(x, wx);
            let proj = g.add_row(proj, b);
            let (h, c) = self.lstm_cell(g, cell, proj, dec.h[l], dec.c[l]);
            next.h.push(h);
            next.c.push(c);
            input = h;
        }
        next
    }

    /// Zero initial state advanced by one step on the begin-of-sequence input.
    pub fn start(&self, g: &mut Graph<'_>, enc: &EncodedInput, mut rng: TrainRng<'_>) -> DecoderState {
        let d = self.config.decoder_hidden;
        let zero = DecoderState {
            h: (0..self.decoder.len()).map(|_| g.zeros(1, d)).collect(),
            c: (0..self.decoder.len()).map(|_| g.zeros(1, d)).collect(),
        };
        let ae = g.param(self.handles.action_emb);
        let bos = g.row(ae, BOS_LABEL);
        let pad = g.zeros(1, self.config.encoder_hidden);
        let rep = g.concat_cols(&[bos, pad]);
        self.step(g, enc, &zero, rep, &mut rng)
    }

    /// Feeds the chosen action back into the decoder.
    pub fn advance(&self, g: &mut Graph<'_>, enc: &EncodedInput, dec: &DecoderState, action: Action, mut rng: TrainRng<'_>) -> DecoderState {
        let rep = self.action_reps(g, enc, &[action]);
        self.step(g, enc, dec, rep, &mut rng)
    }

    /// Bilinear scores `h^T U r_a` for each candidate, as a `1 × k` row.
    pub fn scores(&self, g: &mut Graph<'_>, enc: &EncodedInput, dec: &DecoderState, candidates: &[Action]) -> Result<Var> {
        if candidates.is_empty() {
            return Err(Error::contract("score_actions needs at least one candidate"));
        }
        let reps = self.action_reps(g, enc, candidates);
        let u = g.param(self.handles.bilinear);
        let q = g.matmul(dec.top(), u);
        Ok(g.matmul_bt(q, reps))
    }

    /// Log-probabilities over exactly `candidates`.
    pub fn log_probs(&self, g: &mut Graph<'_>, enc: &EncodedInput, dec: &DecoderState, candidates: &[Action]) -> Result<Var> {
        let s = self.scores(g, enc, dec, candidates)?;
        Ok(g.log_softmax_row(s))
    }

    /// Plain-value convenience for inference: per-candidate log-probabilities.
    pub fn score_actions(&self, g: &mut Graph<'_>, enc: &EncodedInput, dec: &DecoderState, candidates: &[Action]) -> Result<Vec<f64>> {
        let lp = self.log_probs(g, enc, dec, candidates)?;
        Ok(g.value(lp).data.clone())
    }

    /// The negated per-example objective `-Σ_i log Σ_{a∈O} P(a | x, a_<i)`,
    /// rolling out along the highest-scoring correct action.
    pub fn oracle_loss<'g>(
        &self,
        g: &mut Graph<'g>,
        example: &Example,
        table: &Table,
        kind: OracleKind,
        mut rng: TrainRng<'_>,
    ) -> Result<Var> {
        let oracle = Oracle::new(kind, example, table)?;
        let enc = self.encode(g, example, table, rng.as_deref_mut());
        let mut dec = self.start(g, &enc, rng.as_deref_mut());
        let mut state = initial_state(example, table, self.config.transition_config());
        let mut terms = Vec::new();
        while !state.is_terminal() {
            let valid = state.valid_actions()?;
            let correct = oracle.next(&state)?;
            let idx: Vec<usize> = correct
                .actions()
                .iter()
                .map(|a| valid.binary_search(a).expect("oracle actions are legal"))
                .collect();
            let s = self.scores(g, &enc, &dec, &valid)?;
            let lp = g.log_softmax_row(s);
            terms.push(g.log_sum_exp_at(lp, &idx));
            let sv = &g.value(s).data;
            // Highest-scoring correct action; ties go to the lower action ordinal.
            let best = idx
                .iter()
                .copied()
                .fold(None::<usize>, |acc, i| match acc {
                    Some(j) if sv[j] >= sv[i] => Some(j),
                    _ => Some(i),
                })
                .expect("non-empty oracle set");
            let action = valid[best];
            state = state.apply(action)?;
            if !state.is_terminal() {
                dec = self.advance(g, &enc, &dec, action, rng.as_deref_mut());
            }
        }
        let total = g.sum(&terms);
        Ok(g.scale(total, -1.0))
    }

    /// Teacher-forced cross-entropy on the canonical gold sequence.
    pub fn cross_entropy_loss<'g>(&self, g: &mut Graph<'g>, example: &Example, table: &Table, mut rng: TrainRng<'_>) -> Result<Var> {
        let gold = gold_actions(example)?;
        let enc = self.encode(g, example, table, rng.as_deref_mut());
        let mut dec = self.start(g, &enc, rng.as_deref_mut());
        let mut state = initial_state(example, table, self.config.transition_config());
        let mut terms = Vec::with_capacity(gold.len());
        for (t, &action) in gold.iter().enumerate() {
            let valid = state.valid_actions()?;
            let k = valid
                .binary_search(&action)
                .map_err(|_| Error::contract(format!("gold action {action} is not legal")))?;
            let lp = self.log_probs(g, &enc, &dec, &valid)?;
            terms.push(g.pick(lp, k));
            state = state.apply(action)?;
            if t + 1 < gold.len() {
                dec = self.advance(g, &enc, &dec, action, rng.as_deref_mut());
            }
        }
        let total = g.sum(&terms);
        Ok(g.scale(total, -1.0))
    }

    /// Loss value and, when `grads` is given, `scale ·` its gradient accumulated in.
    pub fn loss_and_grad(
        &self,
        example: &Example,
        table: &Table,
        kind: OracleKind,
        rng: TrainRng<'_>,
        grads: Option<(&mut Gradients, f64)>,
    ) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let loss = self.oracle_loss(&mut g, example, table, kind, rng)?;
        let value = g.value(loss).scalar();
        if let Some((grads, scale)) = grads {
            g.backward(loss, scale, grads);
        }
        Ok(value)
    }

    fn loss_on(&self, params: &ParamStore, example: &Example, table: &Table, kind: OracleKind) -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = self.oracle_loss(&mut g, example, table, kind, None)?;
        Ok(g.value(loss).scalar())
    }

    /// Compares analytic gradients of the eval-mode objective against central
    /// finite differences (five-point stencil), on at most `max_per_group` evenly spaced entries of each
    /// parameter group. Returns one relative error per group:
    /// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
    pub fn gradient_check(
        &self,
        example: &Example,
        table: &Table,
        kind: OracleKind,
        eps: f64,
        max_per_group: usize,
    ) -> Result<Vec<GradCheck>> {
        let mut grads = self.params.zeros_like();
        self.loss_and_grad(example, table, kind, None, Some((&mut grads, 1.0)))?;
        let mut work = self.params.clone();
        let mut out = Vec::with_capacity(self.params.len());
        for (p, name) in self.params.names.iter().enumerate() {
            let len = work.tensors[p].data.len();
            let stride = len.div_ceil(max_per_group.max(1)).max(1);
            let (mut diff, mut an, mut nn, mut checked) = (0.0, 0.0, 0.0, 0);
            for k in (0..len).step_by(stride) {
                let orig = work.tensors[p].data[k];
                let mut at = |d: f64| -> Result<f64> {
                    work.tensors[p].data[k] = orig + d;
                    self.loss_on(&work, example, table, kind)
                };
                // Fourth-order central stencil: round-off and truncation both stay near 1e-12.
                let num = (at(-2.0 * eps)? - 8.0 * at(-eps)? + 8.0 * at(eps)? - at(2.0 * eps)?) / (12.0 * eps);
                work.tensors[p].data[k] = orig;
                let ana = grads.tensors[p].data[k];
                diff += (ana - num) * (ana - num);
                an += ana * ana;
                nn += num * num;
                checked += 1;
            }
            let rel = diff.sqrt() / (an.sqrt() + nn.sqrt()).max(1e-12);
            out.push(GradCheck {
                group: name.clone(),
                rel_error: rel,
                grad_norm: an.sqrt(),
                checked,
            });
        }
        Ok(out)
    }

    /// Redraws every parameter uniformly from `[-scale, scale)`.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut self.params.tensors {
            t.data.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
        }
    }

    /// Greedy rollout state used by decoding: a fresh encoder/decoder pair.
    pub fn begin<'s>(&'s self, example: &Example, table: &Table) -> (Graph<'s>, EncodedInput, DecoderState) {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, example, table, None);
        let dec = self.start(&mut g, &enc, None);
        (g, enc, dec)
    }

    /// The initial parser state under this model's action space.
    pub fn initial_state(&self, example: &Example, table: &Table, max_conditions: Option<usize>) -> ParserState {
        initial_state(
            example,
            table,
            TransitionConfig {
                anycol: self.config.anycol,
                max_conditions,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_vocab, TableMap};
    use crate::synth::skyscraper;

    pub(crate) fn tiny_config() -> PolicyConfig {
        PolicyConfig {
            word_emb_dim: 6,
            action_emb_dim: 4,
            type_emb_dim: 2,
            encoder_hidden: 6,
            decoder_layers: 2,
            decoder_hidden: 6,
            dropout: 0.0,
            seed: 5,
            ..PolicyConfig::default()
        }
    }

    fn skyscraper_policy() -> (Policy, Table, Example) {
        let (table, ex) = skyscraper();
        let mut tables = TableMap::new();
        tables.insert(table.id.clone(), table.clone());
        let vocab = build_vocab(std::slice::from_ref(&ex), &tables, 1);
        (Policy::new(tiny_config(), vocab).unwrap(), table, ex)
    }

    #[test]
    fn encoder_shapes() {
        let (p, table, ex) = skyscraper_policy();
        let mut g = Graph::new(&p.params);
        let enc = p.encode(&mut g, &ex, &table, None);
        assert_eq!(g.value(enc.rw).shape(), (9, 6));
        assert_eq!(g.value(enc.rc).shape(), (4, 6));
    }

    #[test]
    fn candidate_distribution_properties() {
        let (p, table, ex) = skyscraper_policy();
        let (mut g, enc, dec) = p.begin(&ex, &table);
        let cands = p.initial_state(&ex, &table, None).valid_actions().unwrap();
        let lp = p.score_actions(&mut g, &enc, &dec, &cands).unwrap();
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);

        let single = p.score_actions(&mut g, &enc, &dec, &cands[2..3]).unwrap();
        assert_eq!(single, vec![0.0]);

        let mut rev = cands.clone();
        rev.reverse();
        let lp_rev = p.score_actions(&mut g, &enc, &dec, &rev).unwrap();
        for (a, b) in lp.iter().zip(lp_rev.iter().rev()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.score_actions(&mut g, &enc, &dec, &[]).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (p, table, ex) = skyscraper_policy();
        let a = p.loss_and_grad(&ex, &table, OracleKind::NonDetOrderAnyCol, None, None).unwrap();
        let b = p.loss_and_grad(&ex, &table, OracleKind::NonDetOrderAnyCol, None, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a.is_finite());
    }

    #[test]
    fn static_loss_is_cross_entropy() {
        let (p, table, ex) = skyscraper_policy();
        let oracle = p.loss_and_grad(&ex, &table, OracleKind::Static, None, None).unwrap();
        let mut g = Graph::new(&p.params);
        let ce = p.cross_entropy_loss(&mut g, &ex, &table, None).unwrap();
        assert!((oracle - g.value(ce).scalar()).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (mut p, table, ex) = skyscraper_policy();
        // Check away from the small-weight initialization, where some groups
        // (self-attention in particular) have gradients near round-off.
        p.randomize(0.5, 9);
        let checks = p
            .gradient_check(&ex, &table, OracleKind::NonDetOrderAnyCol, 1e-3, 25)
            .unwrap();
        assert_eq!(checks.len(), p.params.len());
        for c in &checks {
            assert!(c.grad_norm > 0.0, "{} has no gradient", c.group);
            assert!(c.rel_error < 1e-4, "{}: {}", c.group, c.rel_error);
        }
    }

    #[test]
    fn nondet_loss_ignores_condition_order() {
        let (p, table, ex) = skyscraper_policy();
        let mut gold = ex.gold.clone();
        gold.conds.reverse();
        let swapped = crate::dataset::build_example(ex.id.clone(), &ex.question, &table, gold).unwrap();
        for kind in [OracleKind::NonDetOrder, OracleKind::NonDetOrderAnyCol] {
            let a = p.loss_and_grad(&ex, &table, kind, None, None).unwrap();
            let b = p.loss_and_grad(&swapped, &table, kind, None, None).unwrap();
            assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
        }
        let a = p.loss_and_grad(&ex, &table, OracleKind::Static, None, None).unwrap();
        let b = p.loss_and_grad(&swapped, &table, OracleKind::Static, None, None).unwrap();
        assert!((a - b).abs() > 1e-9);
    }

    #[test]
    fn single_example_overfits() {
        let (table, ex) = skyscraper();
        let mut tables = TableMap::new();
        tables.insert(table.id.clone(), table.clone());
        let vocab = build_vocab(std::slice::from_ref(&ex), &tables, 1);
        let cfg = PolicyConfig {
            word_emb_dim: 12,
            encoder_hidden: 12,
            decoder_hidden: 12,
            decoder_layers: 1,
            learning_rate: 0.01,
            dropout: 0.0,
            ..PolicyConfig::default()
        };
        let mut trainer = crate::training::Trainer::new(Policy::new(cfg, vocab).unwrap(), OracleKind::Static);
        for _ in 0..200 {
            trainer.train_step(&[&ex], &tables).unwrap();
        }
        let h = crate::decoding::decode(&trainer.policy, &ex, &table, &Default::default()).unwrap();
        assert!(h.query().unwrap().exact_equal(&ex.gold));
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        let bad = PolicyConfig {
            dropout: 1.0,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PolicyConfig {
            decoder_hidden: 128,
            ..PolicyConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embedding_file_overrides_rows() {
        let (mut p, _, _) = skyscraper_policy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "tower 1 2 3 4 5 6\nzzz 0 0 0 0 0 0\n").unwrap();
        assert_eq!(p.load_embeddings(&path).unwrap(), 1);
        let row = p.vocab.get("tower");
        assert_eq!(p.params.tensors[0].row(row), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        fs::write(&path, "tower 1 2\n").unwrap();
        assert!(p.load_embeddings(&path).is_err());
    }
}
