use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 7
sentences = 80
split_ratio = [9, 1]
test_sentences = 6
budget = 30
inits = ["random", "dec-pretrain"]
seeds = [1, 2]
beam = 2
strategies = [{ kind = "non-overlapped" }, { kind = "overlapped", accents_per_sentence = 3 }]

[world]
inventory_size = 12
confusables = 2
dim = 4
len_range = [3, 6]
accents = 3
train_speakers = 4
test_speakers = 2
codebook_sentences = 30

[world.kmeans]
k = 11
max_iters = 20
tol = 1e-6
seed = 0

[model]
model_dim = 8
heads = 2
ffn_dim = 16
enc_layers = 1
dec_layers = 1
rel_window = 4
stack = 2

[train]
total_updates = 6
micro_batch = 2
accumulation = 2
eval_interval = 3

[pretrain]
total_updates = 3
micro_batch = 2
accumulation = 1
"#;

fn unitac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitac"))
        .current_dir(dir)
        .args(["--config", "config.toml", "--out-dir", "out", "--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = unitac(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_stages(dir: &Path) {
    fs::write(dir.join("config.toml"), CONFIG).unwrap();
    ok(dir, &["corpus", "sample"]);
    ok(dir, &["corpus", "split", "--manifest", "out/manifest.tsv", "--test", "6"]);
    ok(dir, &["synth", "native", "--manifest", "out/manifest.tsv", "--role", "train", "--out", "out/native"]);
    ok(
        dir,
        &["synth", "render", "--manifest", "out/manifest.tsv", "--role", "test", "--accent", "1", "--speaker", "4", "--out", "out/accented"],
    );
    ok(dir, &["s2u", "fit", "--features", "out/native"]);
    ok(dir, &["s2u", "quantize", "--codebook", "out/codebook.uacb", "--features", "out/native"]);
    ok(dir, &["u2s", "fit", "--codebook", "out/codebook.uacb", "--features", "out/native"]);
    ok(
        dir,
        &["u2s", "synth", "--decoder", "out/decoder.uadc", "--codebook", "out/codebook.uacb", "--units", "out/units.txt", "--speaker-from", "out/accented/s000080.uaft"],
    );
    ok(
        dir,
        &["augment", "build", "--manifest", "out/manifest.tsv", "--codebook", "out/codebook.uacb", "--strategy", "overlapped:3", "--budget", "30"],
    );
    ok(
        dir,
        &["augment", "build", "--manifest", "out/manifest.tsv", "--codebook", "out/codebook.uacb", "--role", "val", "--all-accents", "--out", "out/val"],
    );
    ok(
        dir,
        &["augment", "build", "--manifest", "out/manifest.tsv", "--codebook", "out/codebook.uacb", "--role", "test", "--all-accents", "--out", "out/test"],
    );
    ok(dir, &["pc", "pretrain-dec", "--units", "out/units.txt", "--codebook", "out/codebook.uacb"]);
    ok(dir, &["pc", "pretrain-enc", "--features", "out/native", "--codebook", "out/codebook.uacb"]);
    ok(
        dir,
        &["pc", "train", "--corpus", "out/corpus", "--val", "out/val", "--codebook", "out/codebook.uacb", "--init-from", "dec:out/pretrain_dec.uack", "--init-from", "enc:out/pretrain_enc.uack"],
    );
    ok(dir, &["pc", "decode", "--model", "out/model.uack", "--features", "out/accented", "--beam", "2", "--max-len-mult", "2"]);
    ok(
        dir,
        &["eval", "run", "--model", "out/model.uack", "--corpus", "out/test", "--codebook", "out/codebook.uacb", "--decoder", "out/decoder.uadc", "--test-manifest", "out/manifest.tsv", "--beam", "2"],
    );
    ok(
        dir,
        &["convert", "--model", "out/model.uack", "--codebook", "out/codebook.uacb", "--decoder", "out/decoder.uadc", "--input", "out/accented/s000081.uaft", "--beam", "2"],
    );
}

const ARTIFACTS: &[&str] = &[
    "manifest.tsv",
    "native/s000000.uaft",
    "accented/s000083.uaft",
    "codebook.uacb",
    "units.txt",
    "decoder.uadc",
    "synth/000000.uaft",
    "corpus/index.tsv",
    "corpus/targets.txt",
    "corpus/features/000007.uaft",
    "pretrain_dec.uack",
    "pretrain_enc.uack",
    "model.uack",
    "model.log.jsonl",
    "decoded.txt",
    "eval.txt",
    "eval.jsonl",
    "convert/units.txt",
    "convert/features.uaft",
];

#[test]
fn every_stage_runs_and_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_stages(a.path());
    run_stages(b.path());
    for name in ARTIFACTS {
        let x = fs::read(a.path().join("out").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let report = fs::read_to_string(a.path().join("out/eval.txt")).unwrap();
    assert!(report.contains("ppl"));
}

#[test]
fn experiment_grid_writes_reproducible_cells() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let stdout = ok(dir.path(), &["experiment", "--seeds", "1"]);
    assert!(stdout.contains("overlapped < non-overlapped"));
    let cells = dir.path().join("out/cells");
    assert_eq!(fs::read_dir(&cells).unwrap().count(), 4);
    let cell = cells.join("overlapped_dec-pretrain_seed1");
    let before = fs::read(cell.join("model.uack")).unwrap();
    let result = fs::read(cell.join("result.json")).unwrap();
    fs::remove_dir_all(&cell).unwrap();
    ok(dir.path(), &["experiment", "--seeds", "1"]);
    assert_eq!(fs::read(cell.join("model.uack")).unwrap(), before);
    assert_eq!(fs::read(cell.join("result.json")).unwrap(), result);
    let grid: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/grid.json")).unwrap()).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn exit_codes_distinguish_usage_data_and_success() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let code = |args: &[&str]| unitac(dir.path(), args).status.code();
    assert_eq!(code(&["corpus", "sample", "--n", "5"]), Some(0));
    assert_eq!(code(&["corpus", "frobnicate"]), Some(1));
    assert_eq!(code(&["corpus", "sample", "--len-min", "0"]), Some(1));
    assert_eq!(code(&["s2u", "fit", "--features", "missing"]), Some(2));
    fs::write(dir.path().join("bad.tsv"), "sentence_id\trole\tphonemes\nx\ttrain\t1 2\n").unwrap();
    assert_eq!(code(&["synth", "native", "--manifest", "bad.tsv"]), Some(2));
    fs::write(dir.path().join("config.toml"), "seeds = [1, 1]\n").unwrap();
    assert_eq!(code(&["experiment"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
}
