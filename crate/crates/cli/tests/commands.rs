use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdvc::checkpoint;
use mdvc::corpus_dir::read_corpus;
use mdvc::report::REPORT_HEADER;
use mdvc::vcf;
use mdvc::verify::check_custom_unary;
use mdvc_core::train::{TrainConfig, Trainer, Variant};

fn mdvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdvc"))
        .args(args)
        .env_remove("VCF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mdvc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn small_corpus(dir: &Path) -> PathBuf {
    let c = dir.join("corpus");
    ok(&[
        "gen-corpus", "--speakers", "2", "--train", "4", "--eval", "3", "--frames", "70", "--seed", "5", "--out", s(&c),
    ]);
    c
}

const TINY: [&str; 12] = [
    "--batch-size", "2", "--crop-frames", "24", "--lr", "1e-3", "--critic-steps", "2", "--stage1-steps", "2",
    "--stage2-steps", "2",
];

#[test]
fn gen_corpus_writes_every_file_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flags = ["--speakers", "4", "--train", "81", "--eval", "35", "--frames", "20", "--seed", "2"];
    ok(&[&["gen-corpus"][..], &flags, &["--out", s(&a)]].concat());
    ok(&[&["gen-corpus"][..], &flags, &["--out", s(&b)]].concat());
    let fa = files_under(&a);
    let vcfs = fa.iter().filter(|p| p.extension().is_some_and(|x| x == "vcf")).count();
    assert_eq!(vcfs, 4 * (81 + 35));
    let fb = files_under(&b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn single_speaker_corpus_generates_but_cycle_training_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c");
    ok(&["gen-corpus", "--speakers", "1", "--train", "2", "--eval", "1", "--frames", "30", "--out", s(&c)]);
    let out = mdvc(&[
        "train", "--corpus", s(&c), "--out", s(&dir.path().join("r")), "--variant", "cyclevae-multi",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mdvc(&["gen-corpus", "--speakers", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(mdvc(&["gen-corpus", "--speakers", "0", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(mdvc(&["train", "--variant", "vea"]).status.code(), Some(2));
    let c = small_corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"variant": "vae", "stage1_step": 3}"#).unwrap();
    let out = mdvc(&["train", "--config", s(&cfg), "--corpus", s(&c), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1_step"));
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["gen-corpus", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for d in ["[default: 4]", "[default: 81]", "[default: 35]", "[default: 160]"] {
        assert!(text.contains(d), "missing {d} in\n{text}");
    }
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--variant", "--steps", "--lambda1", "--lambda2", "--lr", "--seed", "--config"] {
        let line = text.lines().find(|l| l.trim_start().starts_with(flag)).unwrap();
        assert!(line.contains("[default:"), "{line}");
    }
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let r = dir.path().join("run");
    ok(&["train", "--corpus", s(&c), "--out", s(&r), "--variant", "cyclevaewgan-multi", "--steps", "0", "--seed", "4"]);
    let saved = checkpoint::load(&r.join("model.vck"), Some(Variant::CyclevaewganMulti)).unwrap();
    let config = TrainConfig {
        stage1_steps: 0,
        stage2_steps: Some(0),
        seed: 4,
        ..TrainConfig::new(Variant::CyclevaewganMulti)
    };
    let init = Trainer::new(config, &read_corpus(&c).unwrap()).unwrap().checkpoint();
    assert_eq!(saved, init);
    let trace = fs::read_to_string(r.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn train_writes_a_trace_row_per_step_and_honours_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"variant": "cyclevae-single", "seed": 3, "batch_size": 2, "crop_frames": 24, "stage1_steps": 3, "corpus": {:?}}}"#,
            s(&c)
        ),
    )
    .unwrap();
    let r = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&r), "--stage1-steps", "4"]);
    let trace = fs::read_to_string(r.join("loss_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,stage,speaker,total,kl,recon,cycle_kl,cycle_recon,wgan,critic,wall_secs"
    );
    assert_eq!(lines.count(), 4);
    let ckpt = checkpoint::load(&r.join("model.vck"), None).unwrap();
    assert_eq!(ckpt.config.variant, Variant::CyclevaeSingle);
    assert_eq!(ckpt.config.seed, 3);
    assert_eq!(ckpt.step, 4);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let r = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_mdvc"))
        .args(["train", "--corpus", s(&c), "--out", s(&r), "--steps", "0"])
        .env("VCF_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(checkpoint::load(&r.join("model.vck"), None).unwrap().config.seed, 17);
}

#[test]
fn convert_keeps_shapes_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let r = dir.path().join("run");
    ok(&[&["train", "--corpus", s(&c), "--out", s(&r), "--variant", "cyclevae-multi"][..], &TINY[..10]].concat());
    let model = r.join("model.vck");
    let one = dir.path().join("one");
    let input = c.join("SF1/eval/e00000.vcf");
    ok(&["convert", "--checkpoint", s(&model), "--input", s(&input), "--source", "SF1", "--target", "SM1", "--out", s(&one)]);
    let x = vcf::read_features(&input, 0).unwrap();
    let y = vcf::read_features(&one.join("e00000.vcf"), 1).unwrap();
    assert_eq!(x.frames(), y.frames());

    let many = dir.path().join("many");
    ok(&[
        "convert", "--checkpoint", s(&model), "--input", s(&c.join("SM1/eval")), "--source", "SM1", "--target", "SM1",
        "--out", s(&many),
    ]);
    assert_eq!(files_under(&many).len(), 3);

    let bad = mdvc(&[
        "convert", "--checkpoint", s(&model), "--input", s(&input), "--source", "SF1", "--target", "SX9", "--out",
        s(&dir.path().join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("bad").exists());
}

fn copy_eval(corpus: &Path, speaker: &str, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for f in files_under(&corpus.join(speaker).join("eval")) {
        fs::copy(&f, to.join(f.file_name().unwrap())).unwrap();
    }
}

#[test]
fn evaluating_references_against_themselves_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let conv = dir.path().join("converted");
    for seed in ["0", "1"] {
        copy_eval(&c, "SM1", &conv.join("ref").join(seed).join("SF1-to-SM1"));
        copy_eval(&c, "SF1", &conv.join("ref").join(seed).join("SM1-to-SF1"));
    }
    let out = dir.path().join("eval");
    ok(&["evaluate", "--converted", s(&conv), "--reference", s(&c), "--out", s(&out)]);
    let mut rd = csv::Reader::from_path(out.join("report.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), &csv::StringRecord::from(REPORT_HEADER.to_vec()));
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    // 3 labels x 2 metrics x (2 seeds + mean + std)
    assert_eq!(rows.len(), 3 * 2 * 4);
    for r in &rows {
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0, "{r:?}");
    }
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert!(labels.contains(&"M-to-F") && labels.contains(&"F-to-M") && labels.contains(&"Average"));
    assert!(out.join("gv_ref.csv").is_file() && out.join("gv_reference.csv").is_file());
    let gv = fs::read_to_string(out.join("gv_ref.csv")).unwrap();
    assert_eq!(gv.lines().next(), Some("dim,value"));
    assert_eq!(gv.lines().count(), 37);
}

#[test]
fn evaluate_average_is_the_mean_of_pair_rows() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let conv = dir.path().join("converted");
    // mismatched content: converting reference SF1 into the SM1 condition
    copy_eval(&c, "SF1", &conv.join("SF1-to-SM1"));
    copy_eval(&c, "SF1", &conv.join("SM1-to-SF1"));
    let out = dir.path().join("eval");
    ok(&["evaluate", "--converted", s(&conv), "--reference", s(&c), "--out", s(&out)]);
    let mut rd = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).filter(|r| &r[2] == "0").collect();
    for metric in ["mcd", "msd"] {
        let get = |label: &str| -> f64 {
            rows.iter().find(|r| &r[0] == label && &r[3] == metric).unwrap()[4].parse().unwrap()
        };
        let (fm, mf, avg) = (get("F-to-M"), get("M-to-F"), get("Average"));
        assert!(fm > 0.0);
        assert_eq!(mf, 0.0);
        assert!((avg - (fm + mf) / 2.0).abs() <= 1e-12 * fm);
    }
}

#[test]
fn evaluate_lists_missing_references() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let pair = dir.path().join("converted").join("SF1-to-SM1");
    copy_eval(&c, "SM1", &pair);
    fs::copy(pair.join("e00000.vcf"), pair.join("e00042.vcf")).unwrap();
    let out = mdvc(&[
        "evaluate", "--converted", s(&dir.path().join("converted")), "--reference", s(&c), "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("e00042"));
}

#[test]
fn experiment_writes_report_models_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let out = dir.path().join("exp");
    let run = ok(&[
        &["experiment", "--corpus", s(&c), "--out", s(&out), "--variants", "vae,cyclevaewgan-multi", "--seeds", "1,2"][..],
        &TINY,
        &["--jobs", "2"],
    ]
    .concat());
    assert!(String::from_utf8_lossy(&run.stdout).contains("Average"));
    for v in ["vae", "cyclevaewgan-multi"] {
        for seed in ["1", "2"] {
            assert!(out.join(v).join(seed).join("model.vck").is_file());
            assert!(out.join(v).join(seed).join("loss_trace.csv").is_file());
        }
        assert!(out.join(format!("gv_{v}.csv")).is_file());
    }
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    // 3 labels x 2 metrics x (2 seeds + mean + std) per variant
    assert_eq!(report.lines().count(), 1 + 2 * 3 * 2 * 4);
}

#[test]
fn verify_passes_and_catches_a_wrong_backward_rule() {
    let out = ok(&["verify", "--trials", "20"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!text.lines().any(|l| l.starts_with("FAIL")));

    let right = check_custom_unary("sin", 20, f64::sin, |x, _| x.cos());
    assert!(right.passed, "{right}");
    let flipped = check_custom_unary("sin", 20, f64::sin, |x, _| -x.cos());
    assert!(!flipped.passed, "{flipped}");
}
