//! End-to-end CLI behavior: exit codes, help, determinism of generated
//! artifacts, and the tiny-pipeline smoke path.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmvqa"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().expect("spawn mmvqa");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let (code, _, err) = run(&[]);
    assert_eq!(code, 1, "stderr: {err}");
    assert!(err.contains("Usage") || err.contains("usage"), "{err}");
}

#[test]
fn help_lists_every_key_with_defaults() {
    for sub in [
        "gen-synth",
        "build-vocab",
        "pretrain",
        "finetune",
        "evaluate",
        "predict",
        "attnmap",
    ] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(
            text.contains("configuration keys"),
            "{sub} help lacks the key listing: {text}"
        );
        assert!(text.contains("default"), "{sub} help lacks defaults");
        assert!(text.contains("seed"), "{sub} help lacks the seed key");
    }
}

#[test]
fn unknown_config_key_is_usage_error() {
    let (code, _, err) = run(&["pretrain", "--set", "learning_rate=1"]);
    assert_eq!(code, 1);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn missing_dataset_is_data_error() {
    let (code, _, err) = run(&[
        "build-vocab",
        "--set",
        "corpus=/nonexistent/corpus.tsv",
        "--set",
        "out=/tmp/never.vocab",
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn evaluate_without_per_category_checkpoints_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tsv");
    std::fs::write(&data, "img.ppm\tplane\twhat plane?\taxial\n").unwrap();
    let vocab = dir.path().join("v.txt");
    std::fs::write(&vocab, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\naxial\n").unwrap();
    let empty = dir.path().join("ckpts");
    std::fs::create_dir(&empty).unwrap();
    let (code, _, err) = run(&[
        "evaluate",
        "--set",
        "variant=exclusive",
        "--set",
        &format!("dataset={}", data.display()),
        "--set",
        &format!("train_dataset={}", data.display()),
        "--set",
        &format!("vocab={}", vocab.display()),
        "--set",
        &format!("checkpoint_dir={}", empty.display()),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn gen_synth_echoes_config_and_is_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "gen-synth".to_string(),
            "--set".into(),
            format!("out={}", out.display()),
            "--set".into(),
            "canvas=48".into(),
            "--set".into(),
            "pretrain_n=4".into(),
            "--set".into(),
            "train_n=2".into(),
            "--set".into(),
            "val_n=1".into(),
            "--set".into(),
            "test_n=1".into(),
            "--seed".into(),
            "9".into(),
        ]
    };
    let out1 = bin().args(args(d1.path())).output().unwrap();
    assert_eq!(out1.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out1.stdout);
    assert!(stdout.contains("resolved configuration:"), "{stdout}");
    assert!(stdout.contains("seed=9"), "{stdout}");
    let out2 = bin().args(args(d2.path())).output().unwrap();
    assert_eq!(out2.status.code(), Some(0));

    for rel in ["pretrain.tsv", "vqa_train.tsv", "boxes.tsv", "images/img_000000.ppm"] {
        let a = std::fs::read(d1.path().join(rel)).unwrap();
        let b = std::fs::read(d2.path().join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

#[test]
fn tiny_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = run(&[
        "gen-synth",
        "--set",
        &format!("out={}", data.display()),
        "--set",
        "canvas=48",
        "--set",
        "pretrain_n=6",
        "--set",
        "train_n=3",
        "--set",
        "val_n=2",
        "--set",
        "test_n=2",
    ]);
    assert_eq!(code, 0, "{err}");

    let vocab = dir.path().join("vocab.txt");
    let (code, _, err) = run(&[
        "build-vocab",
        "--set",
        &format!("corpus={}/pretrain.tsv", data.display()),
        "--set",
        &format!("out={}", vocab.display()),
        "--set",
        "target_size=96",
        "--set",
        "min_freq=1",
    ]);
    assert_eq!(code, 0, "{err}");

    let ckpt = dir.path().join("pre.ckpt");
    let model_args = [
        "--set",
        "dim=16",
        "--set",
        "layers=1",
        "--set",
        "heads=2",
        "--set",
        "ffn=32",
        "--set",
        "max_text=12",
        "--set",
        "image_size=48",
        "--set",
        "widths=4,4,8,8,8",
    ];
    let mut args = vec![
        "pretrain".to_string(),
        "--set".into(),
        format!("corpus={}/pretrain.tsv", data.display()),
        "--set".into(),
        format!("vocab={}", vocab.display()),
        "--set".into(),
        format!("out={}", ckpt.display()),
        "--set".into(),
        "epochs=1".into(),
        "--set".into(),
        "batch=4".into(),
        "--set".into(),
        "quiet=true".into(),
    ];
    args.extend(model_args.iter().map(|s| s.to_string()));
    let out = bin().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());

    // finetune from the pretrained checkpoint, then predict one sample
    let ft = dir.path().join("gen.ckpt");
    let (code, _, err) = run(&[
        "finetune",
        "--set",
        &format!("dataset={}/vqa_train.tsv", data.display()),
        "--set",
        &format!("vocab={}", vocab.display()),
        "--set",
        &format!("init={}", ckpt.display()),
        "--set",
        &format!("out={}", ft.display()),
        "--set",
        "epochs=1",
        "--set",
        "batch=4",
        "--set",
        "val_fraction=0.25",
        "--set",
        "quiet=true",
    ]);
    assert_eq!(code, 0, "{err}");

    let (code, stdout, err) = run(&[
        "predict",
        "--set",
        &format!("image={}/images/img_000006.ppm", data.display()),
        "--set",
        "question=what shape is shown?",
        "--set",
        &format!("checkpoint={}", ft.display()),
        "--set",
        &format!("vocab={}", vocab.display()),
        "--set",
        &format!("train_dataset={}/vqa_train.tsv", data.display()),
    ]);
    assert_eq!(code, 0, "{err}");
    let answer = stdout.lines().last().unwrap_or("");
    assert!(!answer.is_empty());

    // evaluate the general model and compare exported predictions
    let preds = dir.path().join("preds.tsv");
    let (code, stdout, err) = run(&[
        "evaluate",
        "--set",
        &format!("dataset={}/vqa_test.tsv", data.display()),
        "--set",
        &format!("train_dataset={}/vqa_train.tsv", data.display()),
        "--set",
        &format!("vocab={}", vocab.display()),
        "--set",
        &format!("checkpoint={}", ft.display()),
        "--set",
        &format!("out={}", preds.display()),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("overall"), "{stdout}");
    let text = std::fs::read_to_string(&preds).unwrap();
    assert!(text.starts_with("id\tcategory\tquestion\tgold\tprediction\tcorrect\tbleu"));
    assert_eq!(text.lines().count(), 9); // header + 2 images x 4 questions
}
