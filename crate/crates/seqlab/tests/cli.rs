//! End-to-end checks of the command-line interface: pipelines complete,
//! outputs are well formed, and failures map to the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqlab"))
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

/// A small CoNLL 2003-style file: four columns, comments, a DOCSTART line.
const USER_CONLL: &str = "\
-DOCSTART- -X- -X- O

anna NNP B-NP B-PER
marie NNP I-NP I-PER
flew VBD B-VP O
to TO B-PP O
oslo NNP B-NP B-LOC

peter NNP B-NP B-PER
left VBD B-VP O
lima NNP B-NP B-LOC

maria NNP B-NP B-PER
saw VBD B-VP O
bern NNP B-NP B-LOC

anna NNP B-NP B-PER
visited VBD B-VP O
quito NNP B-NP B-LOC
";

const USER_VECTORS: &str = "\
4 5
anna 0.1 0.2 0.3 0.4 0.5
flew -0.1 -0.2 -0.3 -0.4 -0.5
to 0.5 0.4 0.3 0.2 0.1
oslo 0.9 0.8 0.7 0.6 0.5
";

fn write_user_files(dir: &Path) -> (String, String) {
    let conll = dir.join("user.conll");
    let vectors = dir.join("user.vec");
    std::fs::write(&conll, USER_CONLL).unwrap();
    std::fs::write(&vectors, USER_VECTORS).unwrap();
    (
        conll.to_str().unwrap().to_string(),
        vectors.to_str().unwrap().to_string(),
    )
}

fn user_config(dir: &Path) -> String {
    let (conll, vectors) = write_user_files(dir);
    let text = format!(
        r#"
spec_version = "1"

[data]
train = "{conll}"
dev = "{conll}"
test = "{conll}"
vectors = "{vectors}"

[model]
family = "ort"
d_model = 16
num_heads = 2
num_layers = 1
d_embed = 8
dropout = 0.0

[train]
epochs = 6
batch_size = 2
learning_rate = 0.005
seed = 5
"#
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval_completes_on_user_conll_and_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let config = user_config(dir.path());
    let run_dir = dir.path().join("run");

    let out = bin()
        .args(["train", "--config", &config, "--out-dir", run_dir.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);

    // the run directory holds the documented artifacts
    for file in ["model.json", "report.tsv", "report.txt", "resolved_config.toml", "training_log.tsv"]
    {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }

    // the resolved config is valid TOML carrying the seed
    let resolved: toml::Value = std::fs::read_to_string(run_dir.join("resolved_config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(resolved["train"]["seed"].as_integer(), Some(5));

    // vectors note the embedding width; the report is well formed
    let note = String::from_utf8_lossy(&out.stderr);
    assert!(note.contains("vectors cover"), "stderr: {note}");
    let tsv = std::fs::read_to_string(run_dir.join("report.tsv")).unwrap();
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(header[0], "dataset");
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), header.len(), "ragged row {line:?}");
        for metric in &fields[4..8] {
            let v: f64 = metric.parse().expect("metric fields are numbers");
            assert!((0.0..=1.0).contains(&v), "metric out of range: {line:?}");
        }
        rows += 1;
    }
    assert!(rows >= 3, "expected dev, test, and noisy rows, got {rows}");

    // eval the saved model on the same user file
    let eval_dir = dir.path().join("evalout");
    let (conll, _) = write_user_files(dir.path());
    let out = bin()
        .args([
            "eval",
            "--model",
            run_dir.join("model.json").to_str().unwrap(),
            "--data",
            &conll,
            "--noisy-k",
            "1",
            "--out-dir",
            eval_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("span precision"), "stdout: {text}");
    let tsv = std::fs::read_to_string(eval_dir.join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3, "header + clean + one noisy row");
    assert!(eval_dir.join("report.txt").exists());
}

#[test]
fn predict_round_trips_sentence_and_token_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = user_config(dir.path());
    let run_dir = dir.path().join("run");
    ok(&bin()
        .args(["train", "--config", &config, "--out-dir", run_dir.to_str().unwrap()])
        .output()
        .unwrap());

    let (conll, _) = write_user_files(dir.path());
    let pred_path = dir.path().join("pred.conll");
    let out = bin()
        .args([
            "predict",
            "--model",
            run_dir.join("model.json").to_str().unwrap(),
            "--data",
            &conll,
            "--out",
            pred_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);

    let text = std::fs::read_to_string(&pred_path).unwrap();
    let sentences: Vec<&str> = text.trim_end().split("\n\n").collect();
    assert_eq!(sentences.len(), 4);
    assert_eq!(sentences[0].lines().count(), 5, "five tokens in sentence one");
    for line in sentences.iter().flat_map(|s| s.lines()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 2, "token and label: {line:?}");
        assert!(
            fields[1] == "O" || fields[1].starts_with("B-") || fields[1].starts_with("I-"),
            "unexpected label {line:?}"
        );
    }

    // predicting to stdout gives the same content
    let out = bin()
        .args([
            "predict",
            "--model",
            run_dir.join("model.json").to_str().unwrap(),
            "--data",
            &conll,
        ])
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout), text);
}

#[test]
fn augment_keeps_originals_and_k0_copies_change_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (conll, _) = write_user_files(dir.path());
    let out_path = dir.path().join("aug.conll");
    let out = bin()
        .args([
            "augment", "--data", &conll,
            "--out", out_path.to_str().unwrap(),
            "--copies", "1", "--k", "0", "--seed", "3",
        ])
        .output()
        .unwrap();
    ok(&out);
    let text = std::fs::read_to_string(&out_path).unwrap();
    let sentences: Vec<&str> = text.trim_end().split("\n\n").collect();
    assert_eq!(sentences.len(), 8, "original + one copy each");
    for pair in sentences.chunks(2) {
        assert_eq!(pair[0], pair[1], "k=0 copies must equal their originals");
    }

    // unbounded shuffling keeps the token multiset per sentence
    let out2 = dir.path().join("aug_inf.conll");
    ok(&bin()
        .args([
            "augment", "--data", &conll,
            "--out", out2.to_str().unwrap(),
            "--copies", "2", "--k", "inf", "--seed", "3",
        ])
        .output()
        .unwrap());
    let text = std::fs::read_to_string(&out2).unwrap();
    let sentences: Vec<&str> = text.trim_end().split("\n\n").collect();
    assert_eq!(sentences.len(), 12);
    fn sort_lines(s: &str) -> Vec<&str> {
        let mut v: Vec<&str> = s.lines().collect();
        v.sort();
        v
    }
    for group in sentences.chunks(3) {
        let orig = sort_lines(group[0]);
        assert_eq!(sort_lines(group[1]), orig);
        assert_eq!(sort_lines(group[2]), orig);
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        ok(&bin()
            .args(["synth", "--out-dir", out.to_str().unwrap(), "--seed", seed])
            .output()
            .unwrap());
    }
    for file in [
        "source_train.conll",
        "source_dev.conll",
        "source_test.conll",
        "target_train.conll",
        "target_test.conll",
        "synth_spec.toml",
    ] {
        let read = |d: &Path| std::fs::read_to_string(d.join(file)).unwrap();
        assert_eq!(read(&a), read(&b), "{file} differs across equal seeds");
        if file != "synth_spec.toml" {
            assert_ne!(read(&a), read(&c), "{file} identical across different seeds");
        }
    }
}

#[test]
fn grid_validates_cells_up_front_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&bin()
        .args(["synth", "--out-dir", corpus.to_str().unwrap(), "--seed", "4"])
        .output()
        .unwrap());
    let grid_text = format!(
        r#"
spec_version = "1"
seeds = [1]

[base]
spec_version = "1"

[base.data]
train = "{train}"
dev = "{dev}"

[base.model]
family = "ort"
d_model = 8
num_heads = 2
num_layers = 1
d_embed = 8
dropout = 0.0

[base.train]
epochs = 1
batch_size = 32

[base.eval]
noisy_ks = []

[[axes]]
key = "model.head"
values = ["crf", "softmax"]
"#,
        train = corpus.join("source_train.conll").display(),
        dev = corpus.join("source_dev.conll").display(),
    );
    let grid_path = dir.path().join("grid.toml");
    std::fs::write(&grid_path, &grid_text).unwrap();
    let out_dir = dir.path().join("gridout");
    let out = bin()
        .args([
            "grid",
            "--config", grid_path.to_str().unwrap(),
            "--out-dir", out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let tsv = std::fs::read_to_string(out_dir.join("grid.tsv")).unwrap();
    // 2 cells x (1 seed + 1 mean)
    assert_eq!(tsv.lines().count(), 1 + 4);
    assert!(std::fs::read_to_string(out_dir.join("grid.txt"))
        .unwrap()
        .contains("mean"));
    assert!(out_dir.join("grid_config.toml").exists());

    // one invalid cell value rejects the grid before any training
    let bad = grid_text.replace("[\"crf\", \"softmax\"]", "[\"crf\", \"oracle\"]");
    std::fs::write(&grid_path, bad).unwrap();
    let out = bin()
        .args([
            "grid",
            "--config", grid_path.to_str().unwrap(),
            "--out-dir", dir.path().join("gridbad").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("oracle"));
}

#[test]
fn exit_codes_distinguish_config_data_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();

    // unknown config key -> 1
    let bad_config = dir.path().join("bad.toml");
    std::fs::write(
        &bad_config,
        "spec_version = \"1\"\nbanana = 1\n[data]\ntrain = \"x\"\ndev = \"x\"\n[model]\nfamily = \"ort\"\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "train",
            "--config", bad_config.to_str().unwrap(),
            "--out-dir", dir.path().join("o1").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // well-formed config pointing at missing data -> 2
    let missing = dir.path().join("missing.toml");
    std::fs::write(
        &missing,
        "spec_version = \"1\"\n[data]\ntrain = \"/nonexistent.conll\"\ndev = \"/nonexistent.conll\"\n[model]\nfamily = \"ort\"\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "train",
            "--config", missing.to_str().unwrap(),
            "--out-dir", dir.path().join("o2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // an exploding learning rate -> non-finite forward pass -> 3
    let config = user_config(dir.path());
    let out = bin()
        .args([
            "train",
            "--config", &config,
            "--set", "train.learning_rate=1e200",
            "--set", "train.epochs=2",
            "--out-dir", dir.path().join("o3").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("numeric"), "diagnostic names the failure: {stderr}");

    // bad --set syntax -> 1
    let out = bin()
        .args([
            "train",
            "--config", &config,
            "--set", "no_equals_sign",
            "--out-dir", dir.path().join("o4").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = user_config(dir.path());
    let run = dir.path().join("seeded");
    ok(&bin()
        .args([
            "train",
            "--config", &config,
            "--seed", "99",
            "--set", "train.seed=7",
            "--out-dir", run.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    let resolved: toml::Value = std::fs::read_to_string(run.join("resolved_config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(resolved["train"]["seed"].as_integer(), Some(99));
}
