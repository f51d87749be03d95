use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitbridge"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--set", "data.paired=30",
    "--set", "data.pretrain_speech=30",
    "--set", "data.pretrain_text=40",
    "--set", "data.finetune=16",
    "--set", "data.dev=8",
    "--set", "data.test=8",
    "--set", "model.layers=2",
    "--set", "model.d_model=32",
    "--set", "model.heads=2",
    "--set", "model.ffn=64",
    "--set", "train.steps=12",
    "--set", "train.warmup=2",
    "--set", "train.eval_every=6",
    "--set", "train.ft_steps=6",
    "--set", "train.ft_warmup=1",
    "--set", "train.ft_eval_every=3",
    "--set", "kmeans.k=8",
    "--set", "t2u_run.epochs=1",
];

fn with_small<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_data_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let out = run(d, &with_small(&["gen-data"]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["corpus.bin", "manifest.tsv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn grad_check_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["grad-check"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    let max = stdout.lines().find_map(|l| l.strip_prefix("max\t")).unwrap();
    assert!(max.parse::<f64>().unwrap() < 1e-5);
}

#[test]
fn bad_config_key_fails_with_one_line_naming_it() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["--set", "train.lamda=1", "gen-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\tconfig\t") && err.contains("train.lamda"), "{err}");

    std::fs::write(d.path().join("run.cfg"), "model.layers = many\n").unwrap();
    let out = run(d.path(), &["--config", "run.cfg", "gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.layers"));
}

#[test]
fn missing_checkpoint_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &with_small(&["eval"]));
    assert!(!out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn pipeline_runs_end_to_end_for_both_variants() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    for args in [&["gen-data"][..], &["fit-kmeans"], &["train-t2u"]] {
        let out = run(p, &with_small(args));
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for v in ["P", "H"] {
        let tv = format!("train.variant={v}");
        let steps: [&[&str]; 6] = [
            &["tokenize", "--split", "pretrain-text"],
            &["pretrain"],
            &["finetune"],
            &["eval", "--split", "test"],
            &["probe-alignment"],
            &["probe-alignment", "--checkpoint", "init"],
        ];
        for args in steps {
            let mut all = with_small(&["--set", &tv]);
            all.extend_from_slice(args);
            let out = run(p, &all);
            assert!(out.status.success(), "{v} {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        let eval = std::fs::read_to_string(p.join(format!("eval-test-{v}.tsv"))).unwrap();
        assert!(eval.starts_with("split\tper\twer"));
        assert!(p.join(format!("probe-pretrain-{v}-points.tsv")).exists());
        assert!(p.join(format!("tokens-pretrain-text-{v}.tsv")).exists());
    }
    // Resuming at the final step is a no-op that keeps the checkpoint.
    let before = std::fs::read(p.join("pretrain-P.ck")).unwrap();
    let out = run(p, &with_small(&["pretrain", "--resume"]));
    assert!(out.status.success());
    assert_eq!(before, std::fs::read(p.join("pretrain-P.ck")).unwrap());
}

#[test]
fn ablate_single_cell_writes_summary() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &with_small(&["ablate", "--cell", "no-swap(P)", "--seed", "2"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(d.path().join("ablation.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("no-swap(P)\tP\t2\t"));
}
