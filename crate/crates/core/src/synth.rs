//! Synthetic WikiSQL-style corpora for tests, fuzzing and desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{build_example, format_number, Cell, ColumnType, Example, Table, TableMap};
use crate::query_model::{AggOp, ColumnRef, CondOp, Condition, Query};
use crate::sql_engine::execute;

/// A small skyscraper table with the question
/// "what is the height of willis tower in chicago".
pub fn skyscraper() -> (Table, Example) {
    let t = |s: &str| Cell::Text(s.to_string());
    let table = Table::new(
        "skyscraper",
        vec!["Rank".into(), "Name".into(), "Location".into(), "Height (ft)".into()],
        vec![ColumnType::Real, ColumnType::Text, ColumnType::Text, ColumnType::Real],
        vec![
            vec![Cell::Real(1.0), t("Willis Tower"), t("Chicago"), Cell::Real(1451.0)],
            vec![Cell::Real(2.0), t("Trump International Hotel and Tower"), t("Chicago"), Cell::Real(1389.0)],
            vec![Cell::Real(3.0), t("Empire State Building"), t("New York City"), Cell::Real(1250.0)],
            vec![Cell::Real(4.0), t("Bank of America Tower"), t("New York City"), Cell::Real(1200.0)],
        ],
    )
    .expect("fixture table is well formed");
    let gold = Query::new(
        AggOp::None,
        3,
        vec![
            Condition::new(ColumnRef::Indexed(1), CondOp::Eq, "Willis Tower"),
            Condition::new(ColumnRef::Indexed(2), CondOp::Eq, "Chicago"),
        ],
    );
    let ex = build_example(
        "skyscraper".into(),
        "what is the height of willis tower in chicago",
        &table,
        gold,
    )
    .expect("fixture example aligns");
    (table, ex)
}

struct ColumnSpec {
    name: &'static str,
    ty: ColumnType,
    values: &'static [&'static str],
}

const COLUMNS: &[ColumnSpec] = &[
    ColumnSpec { name: "name", ty: ColumnType::Text, values: &["john smith", "maria lopez", "jordan", "victoria", "chelsea", "ali khan", "li wei", "anna berg"] },
    ColumnSpec { name: "city", ty: ColumnType::Text, values: &["paris", "lima", "oslo", "victoria", "quito", "perth", "dakar", "kyoto"] },
    ColumnSpec { name: "country", ty: ColumnType::Text, values: &["france", "peru", "norway", "jordan", "ecuador", "japan", "senegal", "chile"] },
    ColumnSpec { name: "team", ty: ColumnType::Text, values: &["red hawks", "blue jays", "tigers", "falcons", "sharks", "wolves", "lions", "comets"] },
    ColumnSpec { name: "position", ty: ColumnType::Text, values: &["guard", "forward", "center", "goalkeeper", "defender", "striker", "pitcher", "catcher"] },
    ColumnSpec { name: "school", ty: ColumnType::Text, values: &["duke", "stanford", "purdue", "rice", "baylor", "tulane", "auburn", "yale"] },
    ColumnSpec { name: "venue", ty: ColumnType::Text, values: &["wembley", "old trafford", "anfield", "camp nou", "san siro", "maracana", "azteca", "chelsea"] },
    ColumnSpec { name: "club", ty: ColumnType::Text, values: &["ajax", "porto", "benfica", "celtic", "chelsea", "lazio", "napoli", "sevilla"] },
    ColumnSpec { name: "genre", ty: ColumnType::Text, values: &["jazz", "blues", "rock", "opera", "reggae", "techno", "polka", "salsa"] },
    ColumnSpec { name: "year", ty: ColumnType::Real, values: &[] },
    ColumnSpec { name: "points", ty: ColumnType::Real, values: &[] },
    ColumnSpec { name: "rank", ty: ColumnType::Real, values: &[] },
    ColumnSpec { name: "goals", ty: ColumnType::Real, values: &[] },
    ColumnSpec { name: "wins", ty: ColumnType::Real, values: &[] },
    ColumnSpec { name: "age", ty: ColumnType::Real, values: &[] },
];

fn real_value(name: &str, rng: &mut impl Rng) -> f64 {
    match name {
        "year" => rng.gen_range(1990..=2020) as f64,
        "age" => rng.gen_range(18..=40) as f64,
        _ => rng.gen_range(1..=30) as f64,
    }
}

/// Knobs for [`generate`].
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_examples: usize,
    pub examples_per_table: usize,
    pub min_columns: usize,
    pub max_columns: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub max_conditions: usize,
    /// Probability that a text-column condition omits its column name from the question.
    pub implicit_column_prob: f64,
    /// Probability that a real-column condition uses `>` or `<` instead of `=`.
    pub inequality_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_examples: 200,
            examples_per_table: 4,
            min_columns: 3,
            max_columns: 6,
            min_rows: 4,
            max_rows: 8,
            max_conditions: 3,
            implicit_column_prob: 0.3,
            inequality_prob: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub tables: TableMap,
    pub examples: Vec<Example>,
}

fn random_table(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Table, Vec<&'static ColumnSpec>) {
    let ncols = rng.gen_range(cfg.min_columns..=cfg.max_columns.min(COLUMNS.len()));
    let specs: Vec<&ColumnSpec> = COLUMNS.choose_multiple(rng, ncols).collect();
    let nrows = rng.gen_range(cfg.min_rows..=cfg.max_rows);
    let rows = (0..nrows)
        .map(|_| {
            specs
                .iter()
                .map(|s| match s.ty {
                    ColumnType::Text => Cell::Text(s.values.choose(rng).expect("non-empty pool").to_string()),
                    ColumnType::Real => Cell::Real(real_value(s.name, rng)),
                })
                .collect()
        })
        .collect();
    let table = Table::new(
        id,
        specs.iter().map(|s| s.name.to_string()).collect(),
        specs.iter().map(|s| s.ty).collect(),
        rows,
    )
    .expect("generated table is well formed");
    (table, specs)
}

fn agg_phrase(agg: AggOp) -> &'static str {
    match agg {
        AggOp::None => "what is the",
        AggOp::Count => "how many",
        AggOp::Max => "what is the highest",
        AggOp::Min => "what is the lowest",
        AggOp::Sum => "what is the total",
        AggOp::Avg => "what is the average",
    }
}

fn op_phrase(op: CondOp) -> &'static str {
    match op {
        CondOp::Eq => "is",
        CondOp::Gt => "is more than",
        CondOp::Lt => "is less than",
    }
}

/// Draws one example over `table`, anchored on a random row so the gold
/// query always selects at least one row. Returns `None` when the table
/// can't host a query (fewer than two columns or no rows).
fn random_example(
    id: String,
    table: &Table,
    specs: &[&ColumnSpec],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Example> {
    let ncols = table.num_columns();
    if ncols < 2 || table.rows.is_empty() {
        return None;
    }
    let row = &table.rows[rng.gen_range(0..table.num_rows())];
    let sel_col = rng.gen_range(0..ncols);
    let agg = match table.column_types[sel_col] {
        ColumnType::Real if rng.gen_bool(0.5) => *[AggOp::Max, AggOp::Min, AggOp::Sum, AggOp::Avg, AggOp::Count]
            .choose(rng)
            .unwrap(),
        _ if rng.gen_bool(0.2) => AggOp::Count,
        _ => AggOp::None,
    };
    let mut cond_cols: Vec<usize> = (0..ncols).filter(|&c| c != sel_col).collect();
    cond_cols.shuffle(rng);
    let nconds = rng.gen_range(0..=cfg.max_conditions.min(cond_cols.len()));
    cond_cols.truncate(nconds);

    let mut conds = Vec::new();
    let mut phrases = Vec::new();
    for &c in &cond_cols {
        let name = specs[c].name;
        let (op, value) = match &row[c] {
            Cell::Text(s) => (CondOp::Eq, s.clone()),
            Cell::Real(x) => {
                let x = *x;
                if rng.gen_bool(cfg.inequality_prob) {
                    if rng.gen_bool(0.5) {
                        (CondOp::Gt, format_number(x - rng.gen_range(1..=3) as f64))
                    } else {
                        (CondOp::Lt, format_number(x + rng.gen_range(1..=3) as f64))
                    }
                } else {
                    (CondOp::Eq, format_number(x))
                }
            }
        };
        let implicit = table.column_types[c] == ColumnType::Text
            && op == CondOp::Eq
            && rng.gen_bool(cfg.implicit_column_prob);
        phrases.push(if implicit {
            format!("for {value}")
        } else {
            format!("when {name} {} {value}", op_phrase(op))
        });
        conds.push(Condition::new(ColumnRef::Indexed(c), op, value));
    }
    let mut question = format!("{} {}", agg_phrase(agg), specs[sel_col].name);
    if !phrases.is_empty() {
        question.push(' ');
        question.push_str(&phrases.join(" and "));
    }
    question.push_str(" ?");
    let gold = Query::new(agg, sel_col, conds);
    debug_assert!(!execute(table, &gold).is_error());
    build_example(id, &question, table, gold).ok()
}

/// Generates a deterministic corpus from `seed`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables = TableMap::new();
    let mut examples = Vec::with_capacity(cfg.num_examples);
    let per_table = cfg.examples_per_table.max(1);
    let mut t = 0usize;
    while examples.len() < cfg.num_examples {
        let (table, specs) = random_table(format!("synth-{seed}-{t}"), cfg, &mut rng);
        t += 1;
        for _ in 0..per_table {
            if examples.len() >= cfg.num_examples {
                break;
            }
            let id = format!("synth-{seed}-{}", examples.len());
            if let Some(ex) = random_example(id, &table, &specs, cfg, &mut rng) {
                examples.push(ex);
            }
        }
        tables.insert(table.id.clone(), table);
    }
    SynthCorpus { tables, examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sql_engine::ExecResult;
    use crate::transitions::{gold_actions, initial_state, TransitionConfig};

    #[test]
    fn generated_gold_queries_are_non_empty_and_error_free() {
        let corpus = generate(&SynthConfig::default(), 7);
        assert_eq!(corpus.examples.len(), 200);
        for ex in &corpus.examples {
            let table = &corpus.tables[&ex.table_id];
            let r = execute(table, &ex.gold);
            assert!(!matches!(r, ExecResult::RuntimeError(_) | ExecResult::Empty), "{}", ex.question);
        }
    }

    #[test]
    fn generated_examples_replay_through_transitions() {
        let corpus = generate(&SynthConfig::default(), 11);
        for ex in &corpus.examples {
            let table = &corpus.tables[&ex.table_id];
            let end = initial_state(ex, table, TransitionConfig::default())
                .apply_all(&gold_actions(ex).unwrap())
                .unwrap();
            assert!(end.extract_query().unwrap().exact_equal(&ex.gold));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SynthConfig::default(), 3);
        let b = generate(&SynthConfig::default(), 3);
        assert_eq!(
            serde_json::to_string(&a.examples).unwrap(),
            serde_json::to_string(&b.examples).unwrap()
        );
    }
}
