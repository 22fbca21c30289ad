use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# four single-block stages on 8x8 images
model.depth = 4
model.interval = 1
model.embed_dim = 16
model.heads = 2
model.mlp_hidden = 32
model.image_size = 8
model.patch_size = 4
model.adapter.rank = 4
train.total_epochs = 2
train.batch_size = 16
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dynadapter"));
    for (k, _) in std::env::vars() {
        if k.starts_with("DYN_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn table(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .take_while(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    model: PathBuf,
    root: PathBuf,
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = p(&root, "data.bin");
    let config = p(&root, "run.cfg");
    let model = p(&root, "model.dyna");
    std::fs::write(&config, TINY).unwrap();
    ok(&["synth", "--out", s(&data), "--samples", "120", "--image-size", "8"]);
    ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&model)]);
    Fixture { _dir: dir, data, config, model, root }
}

#[test]
fn synth_reports_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "d.bin");
    let t = table(&ok(&["synth", "--out", s(&out)]));
    assert_eq!(t[0], ["samples", "train", "val", "classes", "image_size", "channels", "task"]);
    assert_eq!(t[1][..3], ["1000", "800", "200"]);
    let again = p(dir.path(), "e.bin");
    ok(&["synth", "--out", s(&again)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn full_pipeline() {
    let f = trained();
    let metrics = p(&f.root, "metrics.csv");
    let model2 = p(&f.root, "model2.dyna");
    let stdout = ok(&[
        "train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&model2), "--metrics", s(&metrics),
    ]);
    let rows = table(&stdout);
    assert_eq!(rows[0].len(), 2 + 4 + 4 + 1);
    assert_eq!(rows.len(), 3);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), stdout);
    assert_eq!(std::fs::read(&f.model).unwrap(), std::fs::read(&model2).unwrap());

    let fused = p(&f.root, "fused.dyna");
    let dev = table(&ok(&["fuse", "--checkpoint", s(&f.model), "--out", s(&fused), "--data", s(&f.data)]));
    assert_eq!(dev[0], ["samples", "max_deviation"]);
    assert!(dev[1][1].parse::<f64>().unwrap() <= 1e-4);
    let refuse = run(&["fuse", "--checkpoint", s(&fused), "--out", s(&p(&f.root, "x.dyna"))]);
    assert!(!refuse.status.success());

    let policy = p(&f.root, "policy.txt");
    let cal = table(&ok(&[
        "calibrate", "--checkpoint", s(&fused), "--data", s(&f.data), "--budget", "0.6", "--out", s(&policy),
    ]));
    assert_eq!(cal[0], ["budget", "tau", "achieved", "within_tolerance", "unreachable"]);
    let achieved: f64 = cal[1][2].parse().unwrap();

    let eval = ok(&["eval", "--checkpoint", s(&fused), "--data", s(&f.data), "--policy", s(&policy)]);
    let stages = table(&eval);
    assert_eq!(stages.len(), 5);
    let counts: usize = stages[1..].iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 24);
    let summary = table(eval.split("\n\n").nth(1).unwrap());
    assert_eq!(summary[0], ["samples", "accuracy", "mean_flops", "flops_fraction"]);
    assert!((summary[1][3].parse::<f64>().unwrap() - achieved).abs() < 1e-3);

    let infer = table(&ok(&["infer", "--checkpoint", s(&fused), "--data", s(&f.data), "--policy", s(&policy)]));
    assert_eq!(infer.len(), 25);
    assert_eq!(infer[0], ["sample", "exit_stage", "confidence", "prediction", "label", "flops"]);

    let cka = table(&ok(&["analyze", "--checkpoint", s(&f.model), "--data", s(&f.data), "--pooling", "mean"]));
    assert_eq!(cka.len(), 5);
    assert!(cka[1..].iter().all(|r| (0.0..=1.0).contains(&r[2].parse::<f64>().unwrap())));
}

#[test]
fn unreachable_inline_policy_exits_at_the_last_stage() {
    let f = trained();
    let eval = table(&ok(&[
        "eval", "--checkpoint", s(&f.model), "--data", s(&f.data), "--budget-policy", "tau=2.0",
    ]));
    let counts: Vec<usize> = eval[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(counts, vec![0, 0, 0, 24]);
}

#[test]
fn flops_table_on_defaults() {
    let t = table(&ok(&["flops"]));
    assert_eq!(t[0], ["stage", "blocks", "cumulative_flops", "fraction"]);
    assert_eq!(t.len(), 5);
    let costs: Vec<u64> = t[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(costs.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(t[4][3], "1.0000");
    let unfused = table(&ok(&["flops", "--unfused"]));
    assert!(unfused[4][2].parse::<u64>().unwrap() > costs[3]);
}

#[test]
fn env_overrides_apply_and_unknown_ones_fail() {
    let t = table(&String::from_utf8(bin().args(["flops"]).env("DYN_MODEL_INTERVAL", "6").output().unwrap().stdout).unwrap());
    assert_eq!(t.len(), 3);
    let o = bin().args(["flops"]).env("DYN_MODEL_DEPHT", "6").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error[config]:"), "{err}");
}

fn single_error_line(o: &Output, category: &str) {
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{category}]:")), "{err}");
}

#[test]
fn failures_are_single_categorised_lines() {
    let f = trained();
    single_error_line(&run(&["eval", "--checkpoint", "/nonexistent.dyna", "--data", s(&f.data)]), "io");

    let mut bytes = std::fs::read(&f.model).unwrap();
    bytes[100] ^= 0x10;
    let broken = p(&f.root, "broken.dyna");
    std::fs::write(&broken, bytes).unwrap();
    single_error_line(&run(&["eval", "--checkpoint", s(&broken), "--data", s(&f.data)]), "checksum");

    let other = p(&f.root, "other.bin");
    ok(&["synth", "--out", s(&other), "--samples", "20", "--image-size", "12"]);
    single_error_line(&run(&["eval", "--checkpoint", s(&f.model), "--data", s(&other)]), "config");
    single_error_line(&run(&["synth", "--out", s(&other), "--classes", "1"]), "config");
    single_error_line(&run(&["eval", "--checkpoint", s(&f.data), "--data", s(&f.data)]), "checksum");
    single_error_line(&run(&["train", "--data", s(&f.model), "--out", s(&other)]), "format");
    single_error_line(
        &run(&["eval", "--checkpoint", s(&f.model), "--data", s(&f.data), "--budget-policy", "tau=x"]),
        "config",
    );

    let usage = run(&["train", "--data"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).starts_with("error[usage]:"));
}
