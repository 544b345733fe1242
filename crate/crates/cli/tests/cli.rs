use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mamo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mamo")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        r#"
pool_size_per_type = 400
retention_ratio = 0.02
eval_queries_per_type = 3
seeds = [0]

[graph.synthetic]
num_entities = 60
num_relations = 3
edges_per_relation = 150

[train]
steps = 4
dim = 4
"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn make_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let made = mamo(&["make-data", "--config", &cfg, "--out", out]);
    assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));
    let names: Vec<String> = fs::read_dir(Path::new(out).join("data/eval"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 6);

    assert_eq!(
        mamo(&["make-data", "--config", &cfg, "--out", out]).status.code(),
        Some(2)
    );

    let trained = mamo(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out,
        "--algorithm",
        "mamo",
        "--scheme",
        "O",
    ]);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    let log = fs::read_to_string(Path::new(out).join("runs/mamo-O-s0/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.contains("\"O:")));

    let args = [
        "eval",
        "--config",
        &cfg,
        "--out",
        out,
        "--algorithm",
        "mamo",
        "--scheme",
        "O",
    ];
    let first = mamo(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(text.starts_with("Model") && text.contains("MAMO(O)") && text.contains("6p"));
    assert_eq!(mamo(&args).stdout, first.stdout);

    let ckpt = Path::new(out).join("runs/mamo-O-s0/checkpoint.json");
    let wrong = mamo(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        out,
        "--scheme",
        "I",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("empty");
    assert_eq!(
        mamo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn bad_flags_are_config_errors() {
    assert_eq!(mamo(&["train", "--scheme", "X"]).status.code(), Some(2));
    assert_eq!(mamo(&["train", "--setting", "nope"]).status.code(), Some(2));
}
