use std::fs;
use std::path::Path;

use incsql::cli::run;

fn cli(args: &[&str]) -> incsql::Result<String> {
    let mut out = Vec::new();
    run(std::iter::once("incsql").chain(args.iter().copied()), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn first_table_id(dir: &Path) -> String {
    let line = fs::read_to_string(dir.join("d/tables.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    v["id"].as_str().unwrap().to_string()
}

#[test]
fn help_and_version_go_to_stdout() {
    assert!(cli(&["--help"]).unwrap().contains("Usage"));
    assert!(cli(&["train", "--help"]).unwrap().contains("--oracle"));
    assert!(cli(&["--version"]).unwrap().contains(env!("CARGO_PKG_VERSION")));
    assert!(cli(&["no-such-command"]).is_err());
}

#[test]
fn run_sql_executes_wikisql_objects() {
    let dir = tempfile::tempdir().unwrap();
    cli(&["synth", "--out-dir", &p(dir.path(), "d"), "--num-examples", "5", "--seed", "3"]).unwrap();
    let tables = p(dir.path(), "d/tables.jsonl");
    let id = first_table_id(dir.path());
    let out = cli(&["run-sql", "--tables", &tables, "--table-id", &id, "--sql", r#"{"sel":0,"agg":3,"conds":[]}"#])
        .unwrap();
    assert!(out.contains("SELECT COUNT"), "{out}");
    assert!(out.contains(r#""kind":"scalar""#), "{out}");
    let bad = cli(&["run-sql", "--tables", &tables, "--table-id", &id, "--sql", r#"{"sel":99,"agg":0,"conds":[]}"#])
        .unwrap();
    assert!(bad.contains("runtime_error"), "{bad}");
    assert!(cli(&["run-sql", "--tables", &tables, "--table-id", "nope", "--sql", "{}"]).is_err());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cli(&["synth", "--out-dir", &p(d, "d"), "--num-examples", "12", "--seed", "4"]).unwrap();
    let config = format!(
        r#"
[paths]
tables = "{}"
train = "{}"
checkpoint = "{}"

[policy]
word_emb_dim = 8
encoder_hidden = 8
decoder_hidden = 8
decoder_layers = 1
batch_size = 4

[train]
oracle = "nondet-order"
epochs = 3

[decode]
mode = "eg"
beam = 2
"#,
        p(d, "d/tables.jsonl"),
        p(d, "d/examples.jsonl"),
        p(d, "model.ckpt"),
    );
    let cfg = p(d, "run.toml");
    fs::write(&cfg, config).unwrap();
    let log = p(d, "train.log");
    cli(&["--config", &cfg, "train", "--epochs", "1", "--log", &log]).unwrap();
    let epochs: Vec<u64> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs.iter().max(), Some(&1), "the flag wins over the file");
    assert_eq!(epochs.len(), 3, "12 examples in batches of 4");

    let id = first_table_id(d);
    let out = cli(&["--config", &cfg, "parse", "--table-id", &id, "--question", "what is the year ?", "--trace"])
        .unwrap();
    assert!(out.contains("SELECT"), "{out}");
    assert!(out.contains("END"), "{out}");

    let report = p(d, "report.json");
    cli(&["--config", &cfg, "eval", "--examples", &p(d, "d/examples.jsonl"), "--report", &report, "--omit-timing"])
        .unwrap();
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["n"], 12);
    assert!(r["speed"].is_null());
    assert!(r["mode"].as_str().unwrap().starts_with("eg"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "bad.toml");
    fs::write(&cfg, "[policy]\nword_embedding_size = 3\n").unwrap();
    let err = cli(&["--config", &cfg, "synth", "--out-dir", &p(dir.path(), "x")]).unwrap_err();
    assert!(err.to_string().contains("bad.toml"), "{err}");
}

#[test]
fn missing_required_path_is_a_clear_error() {
    let err = cli(&["train"]).unwrap_err().to_string();
    assert!(err.contains("missing"), "{err}");
}
