use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
checkpoint_every = 2

[corpora]
mono = 40
parallel = 40
test = 10

[model]
layers = 1
hidden = 16
heads = 2
ffn_mult = 2
max_len = 16

[train]
batch_size = 4
gen_batch_size = 2
pretrain_steps = 3
rounds = 4

[eval]
max_len = 16
"#;

fn pivotmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pivotmt"))
        .args(args)
        .output()
        .expect("spawn pivotmt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join("run");
    (cfg.to_str().unwrap().into(), out.to_str().unwrap().into())
}

#[test]
fn synth_writes_every_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(tmp.path());
    let o = pivotmt(&["synth", "-c", &cfg, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = Path::new(&out).join("data");
    for f in ["mono.L0.txt", "mono.L1.txt", "mono.L2.txt", "parallel.L0-L1.txt", "test.L0-L2.txt"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    assert!(Path::new(&out).join("family.meta").is_file());
}

#[test]
fn train_resume_translate_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(tmp.path());
    let full = tmp.path().join("full");
    let o = pivotmt(&["train", "-c", &cfg, "--out", full.to_str().unwrap(), "--sequential"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("round 4"));

    let o = pivotmt(&["train", "-c", &cfg, "--out", &out, "--stop-after", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = pivotmt(&["train", "-c", &cfg, "--out", &out, "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(full.join("metrics.jsonl")).unwrap(),
        fs::read(Path::new(&out).join("metrics.jsonl")).unwrap()
    );

    let ckpt = Path::new(&out).join("checkpoints/final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let input = Path::new(&out).join("data/mono.L0.txt");
    let translated = tmp.path().join("l2.txt");
    let o = pivotmt(&[
        "translate", "-c", &cfg, "--checkpoint", ckpt,
        "--input", input.to_str().unwrap(), "--output", translated.to_str().unwrap(),
        "--src", "L0", "--tgt", "L2", "--beam", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = fs::read_to_string(&translated).unwrap().lines().count();
    assert_eq!(lines, fs::read_to_string(&input).unwrap().lines().count());

    // Input in the wrong language is a data error.
    let o = pivotmt(&[
        "translate", "-c", &cfg, "--checkpoint", ckpt,
        "--input", input.to_str().unwrap(), "--output", translated.to_str().unwrap(),
        "--src", "L1", "--tgt", "L2",
    ]);
    assert_eq!(code(&o), 3);

    let o = pivotmt(&["eval", "-c", &cfg, "--checkpoint", ckpt]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("L0->L2"));

    // Training rows are not admissible test data.
    let leak = Path::new(&out).join("data/parallel.L0-L1.txt");
    let o = pivotmt(&["eval", "-c", &cfg, "--checkpoint", ckpt, "--test", leak.to_str().unwrap()]);
    assert_eq!(code(&o), 3);

    // Same vocabulary under another data seed loads fine; another vocabulary does not.
    let o = pivotmt(&["eval", "-c", &cfg, "--checkpoint", ckpt, "--data-seed", "99"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let other = tmp.path().join("other.toml");
    let toml = TINY.replace("[model]", "[family]\nvocab_size = 100\n\n[model]\nvocab_size = 100");
    fs::write(&other, toml).unwrap();
    let o = pivotmt(&["eval", "-c", other.to_str().unwrap(), "--checkpoint", ckpt]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(tmp.path());
    let o = pivotmt(&["ablate", "-c", &cfg, "--out", &out, "--variants", "unmt-only,w-para", "--seeds", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("unmt-only") && s.contains("w-para"));
    assert!(Path::new(&out).join("ablation.tsv").is_file());
}

#[test]
fn bad_input_maps_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nhidden = \"wide\"\n").unwrap();
    assert_eq!(code(&pivotmt(&["synth", "-c", bad.to_str().unwrap()])), 2);

    let (cfg, _) = setup(tmp.path());
    let o = pivotmt(&["ablate", "-c", &cfg, "--variants", "nope"]);
    assert_eq!(code(&o), 2);

    let missing = tmp.path().join("missing.toml");
    assert_eq!(code(&pivotmt(&["synth", "-c", missing.to_str().unwrap()])), 1);
}
