use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reve"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The shipped example config, shrunk so that a run takes a moment.
fn small_config(dir: &Path) -> String {
    let text = include_str!("../../../configs/blobs.toml")
        .replace("epochs = 30", "epochs = 2")
        .replace("train = 2000", "train = 300")
        .replace("test = 2000", "test = 200");
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn trained(dir: &Path, extra: &[&str]) -> String {
    let config = small_config(dir);
    let run = dir.join("run");
    let mut args = vec!["train", "--config", &config, "--out", run.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = reve(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    run.join("checkpoint.bin").to_str().unwrap().to_string()
}

#[test]
fn example_config_parses() {
    let config =
        reve_core::runner::RunConfig::from_toml(include_str!("../../../configs/blobs.toml"))
            .unwrap();
    config.validate().unwrap();
    assert_eq!(config.reve.unwrap(), reve_core::reve::ReveConfig::default());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = trained(
        dir.path(),
        &[
            "--seed",
            "9",
            "--beta",
            "0",
            "--sigma2",
            "0.5",
            "--s-samples",
            "3",
        ],
    );
    let saved = fs::read_to_string(Path::new(&checkpoint).with_file_name("config.toml")).unwrap();
    let config = reve_core::runner::RunConfig::from_toml(&saved).unwrap();
    let reve = config.reve.unwrap();
    assert_eq!(
        (config.seed, reve.beta, reve.sigma2, reve.samples),
        (9, 0.0, 0.5, 3)
    );
    assert_eq!(config.epochs, 2);
}

#[test]
fn train_then_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = trained(dir.path(), &[]);
    let metrics = fs::read_to_string(Path::new(&checkpoint).with_file_name("metrics.csv")).unwrap();
    let last: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    let out = reve(&["evaluate", "--checkpoint", &checkpoint]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), last[6]);
    let out = reve(&["evaluate", "--checkpoint", &checkpoint, "--data", "train"]);
    assert_eq!(stdout(&out).trim(), last[5]);
}

#[test]
fn density_export_writes_every_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = trained(dir.path(), &[]);
    let target = dir.path().join("d.txt");
    let out = reve(&[
        "export-density",
        "--checkpoint",
        &checkpoint,
        "--coords",
        "0,1,31",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let columns =
        reve_core::runner::parse_density_table(&fs::read_to_string(&target).unwrap()).unwrap();
    assert_eq!(columns.len(), 12);
    assert_eq!(columns[11].0, "density_z31");
    for pair in columns.chunks(2) {
        assert!((reve_core::kde::trapezoid(&pair[0].1, &pair[1].1) - 1.0).abs() <= 1e-3);
    }

    let out = reve(&[
        "export-density",
        "--checkpoint",
        &checkpoint,
        "--coords",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).starts_with("error: config: "),
        "{}",
        stderr(&out)
    );
}

#[test]
fn verify_reports_every_suite() {
    let out = reve(&["verify", "--trials", "50"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("checkpoint.bin");
    for (args, prefix, code) in [
        (
            vec!["evaluate", "--checkpoint", missing.to_str().unwrap()],
            "error: config: ",
            1,
        ),
        (vec!["train"], "error: usage: ", 2),
        (vec!["frobnicate"], "error: usage: ", 2),
    ] {
        let out = reve(&args);
        let err = stderr(&out);
        assert_eq!(out.status.code(), Some(code), "{err}");
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(prefix), "{err}");
    }

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = 1\nunknown = 3\n").unwrap();
    let out = reve(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: config: "));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = trained(dir.path(), &[]);
    fs::write(&checkpoint, b"not a checkpoint").unwrap();
    let out = reve(&["evaluate", "--checkpoint", &checkpoint]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).starts_with("error: checkpoint: "),
        "{}",
        stderr(&out)
    );
}
