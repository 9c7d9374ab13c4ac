use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn agiqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agiqa"))
        .args(args)
        .output()
        .expect("run agiqa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, n: usize, seed: u64) {
    let o = agiqa(&[
        "gen-synth",
        "--n",
        &n.to_string(),
        "--dim",
        "16",
        "--quality-dim",
        "9",
        "--seed",
        &seed.to_string(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const FAST: [&str; 6] = [
    "--set",
    "train.d=16",
    "--set",
    "train.epochs=3",
    "--set",
    "train.optim.lr=1e-3",
];

#[test]
fn gen_synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 60, 7);
    gen(&b, 60, 7);
    for f in [
        "manifest.csv",
        "semantic.mafc",
        "quality.mafc",
        "prompts.txt",
        "synth.toml",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let info = agiqa(&["cache-info", a.join("semantic.mafc").to_str().unwrap()]);
    assert!(info.status.success());
    let text = stdout(&info);
    assert!(text.contains("checksum OK"), "{text}");
    assert!(text.contains("entries     120"), "{text}");
    assert!(
        text.contains("tag a       60") && text.contains("tag b       60"),
        "{text}"
    );
}

#[test]
fn cache_info_reports_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20, 1);
    let path = tmp.path().join("quality.mafc");
    let mut bytes = fs::read(&path).unwrap();
    bytes[40] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let o = agiqa(&["cache-info", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("checksum FAIL"), "{}", stdout(&o));

    let o = agiqa(&["cache-info", ""]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_manifest_line_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20, 1);
    let manifest = tmp.path().join("manifest.csv");
    let mut text = fs::read_to_string(&manifest).unwrap();
    text = text.replacen("img00003,", "img00003,synth:1:0.5,not-a-number\nx,", 1);
    fs::write(&manifest, text).unwrap();
    let out = tmp.path().join("run");
    let o = agiqa(&[
        "train",
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--seed",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn train_requires_seed_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20, 1);
    let dir = tmp.path().to_str().unwrap();
    let o = agiqa(&["train", "--data-dir", dir, "--out-dir", dir]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let o = agiqa(&[
        "train",
        "--data-dir",
        dir,
        "--out-dir",
        dir,
        "--seed",
        "1",
        "--set",
        "train.epoch=3",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));

    let o = agiqa(&[
        "train",
        "--data-dir",
        dir,
        "--out-dir",
        dir,
        "--seed",
        "1",
        "--set",
        "train.epochs=0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_cache_file_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 20, 1);
    fs::remove_file(tmp.path().join("semantic.mafc")).unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = agiqa(&["train", "--data-dir", dir, "--out-dir", dir, "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_eval_and_replay_from_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 80, 3);
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--seed",
        "5",
        "--out-dir",
        run.to_str().unwrap(),
    ];
    args.extend(FAST);
    let o = agiqa(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("SRCC↑") && text.contains("RMSE↓"), "{text}");
    assert!(
        text.lines().any(|l| l.starts_with("REPORT\ttest\t16\t")),
        "{text}"
    );
    for f in ["checkpoint.mack", "run_log.tsv", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("run_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 + 1);

    // replay from the echo into a second directory
    let replay = tmp.path().join("replay");
    let o = agiqa(&[
        "train",
        "--config",
        run.join("config.toml").to_str().unwrap(),
        "--out-dir",
        replay.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(run.join("checkpoint.mack")).unwrap(),
        fs::read(replay.join("checkpoint.mack")).unwrap()
    );
    assert_eq!(log, fs::read_to_string(replay.join("run_log.tsv")).unwrap());

    // eval on the test part reproduces the training report and leaves inputs untouched
    let before: Vec<Vec<u8>> = ["manifest.csv", "semantic.mafc", "quality.mafc"]
        .iter()
        .map(|f| fs::read(data.join(f)).unwrap())
        .collect();
    let ck = run.join("checkpoint.mack");
    let o = agiqa(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let test_line = |s: &str| {
        s.lines()
            .find(|l| l.starts_with("REPORT\ttest"))
            .map(str::to_string)
    };
    assert_eq!(test_line(&stdout(&o)), test_line(&text));
    let after: Vec<Vec<u8>> = ["manifest.csv", "semantic.mafc", "quality.mafc"]
        .iter()
        .map(|f| fs::read(data.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);

    let o = agiqa(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--part",
        "nope",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cross_reports_direction_and_checks_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 60, 1);
    gen(&b, 60, 2);
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data-dir",
        a.to_str().unwrap(),
        "--seed",
        "1",
        "--out-dir",
        run.to_str().unwrap(),
    ];
    args.extend(FAST);
    assert!(agiqa(&args).status.success());
    let ck = run.join("checkpoint.mack");
    let o = agiqa(&[
        "cross",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("REPORT\tcross\t12\t"), "{}", stdout(&o));

    let wide = tmp.path().join("wide");
    let o = agiqa(&[
        "gen-synth",
        "--n",
        "20",
        "--dim",
        "32",
        "--quality-dim",
        "9",
        "--seed",
        "3",
        "--out-dir",
        wide.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = agiqa(&[
        "cross",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        wide.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("semantic_dim=16") && stderr(&o).contains("semantic_dim=32"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn prompts_match_registry() {
    let o = agiqa(&["prompts"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("a\t") && text.contains("\nb\t"));
}
