//! End-to-end checks of the `morphdiff` binary: subcommand contracts, exit
//! codes, and byte-level determinism of everything it writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_morphdiff"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("morphdiff-cli-{}-{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, into);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                into.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut map = BTreeMap::new();
    walk(root, root, &mut map);
    map
}

fn gen(dir: &Path, subjects: &str, seed: Option<&str>, env_seed: Option<&str>) -> Output {
    let mut cmd = bin();
    cmd.args(["gen-data", "--subjects", subjects, "--out"]).arg(dir);
    if let Some(s) = seed {
        cmd.args(["--seed", s]);
    }
    if let Some(s) = env_seed {
        cmd.env("MORPHDIFF_SEED", s);
    }
    cmd.output().unwrap()
}

#[test]
fn gen_data_reports_splits_and_repeats_bitwise() {
    let root = scratch("gendata");
    let a = root.join("a");
    let b = root.join("b");
    let out = gen(&a, "10", Some("7"), None);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("train=7 val=1 test=2 bae=3"), "stdout: {text}");
    assert!(gen(&b, "10", Some("7"), None).status.success());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    // Env fallback must behave exactly like the flag.
    let c = root.join("c");
    assert!(gen(&c, "10", None, Some("7")).status.success());
    assert_eq!(tree_bytes(&a), tree_bytes(&c));

    let bad_env = gen(&root.join("d"), "10", None, Some("nope"));
    assert_eq!(bad_env.status.code(), Some(1));

    let too_few = gen(&root.join("e"), "2", Some("7"), None);
    assert_eq!(too_few.status.code(), Some(2));
    let err = String::from_utf8_lossy(&too_few.stderr).into_owned();
    assert!(err.contains("non-empty"), "stderr: {err}");

    let _ = fs::remove_dir_all(&root);
}

fn write_config(path: &Path, data: &Path, ckpt: &Path) {
    let text = format!(
        "dataset_dir = {}\nsteps = 4\nbeta_start = 0.1\nbeta_end = 0.4\n\
         lambda1 = 1.0\nlambda2 = 0.5\nlambda3 = 0.1\ngamma = 0.01\n\
         u_max = 10\naux_slots = 3\nlr = 0.001\nepochs = 1\nbatch_size = 2\n\
         seed = 5\ncheckpoint_path = {}\ncheckpoint_every = 1\n\
         age_min = 40\nage_max = 90\nbae_epochs = 1\nbae_lr = 0.001\n",
        data.display(),
        ckpt.display()
    );
    fs::write(path, text).unwrap();
}

#[test]
fn train_sample_evaluate_round_trip() {
    let root = scratch("roundtrip");
    let data = root.join("data");
    run_ok(bin().args(["gen-data", "--subjects", "8", "--bae-subjects", "2"])
        .args(["--fractions", "0.5", "0.25", "0.25"])
        .args(["--seed", "7", "--out"])
        .arg(&data));

    let cfg = root.join("run.kv");
    let ckpt = root.join("model.dfck");
    write_config(&cfg, &data, &ckpt);
    let out = run_ok(bin().args(["train", "--config"]).arg(&cfg));
    let log = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(log.contains("epoch   1/1"), "stdout: {log}");
    assert!(ckpt.is_file());

    let test_ids = fs::read_to_string(data.join("test.txt")).unwrap();
    let tid = test_ids.lines().next().unwrap();
    let src = data.join("subjects").join(tid).join("t0_img.dftn");
    let seg = data.join("subjects").join(tid).join("t0_seg.dftn");

    let sample = |dir: &Path| {
        run_ok(bin()
            .args(["sample", "--checkpoint"]).arg(&ckpt)
            .args(["--source"]).arg(&src)
            .args(["--seg"]).arg(&seg)
            .args(["--target-age", "80", "--seed", "3", "--config"]).arg(&cfg)
            .args(["--out"]).arg(dir));
    };
    let s1 = root.join("samp1");
    let s2 = root.join("samp2");
    sample(&s1);
    sample(&s2);
    assert_eq!(tree_bytes(&s1), tree_bytes(&s2));
    for name in ["field_normalized.dftn", "field.dftn", "completed.dftn", "completed_seg.dftn"] {
        assert!(s1.join(name).is_file(), "missing {name}");
    }
    let warped_seg = morphdiff_core::dftn::load(&s1.join("completed_seg.dftn")).unwrap();
    assert!(warped_seg
        .to_vec()
        .iter()
        .all(|&v| v == 0.0 || v == 1.0 || v == 2.0));

    // One aux image more than the encoder has slots for.
    let mut overflow = bin();
    overflow
        .args(["sample", "--checkpoint"]).arg(&ckpt)
        .args(["--source"]).arg(&src)
        .args(["--target-age", "80", "--seed", "3", "--config"]).arg(&cfg)
        .args(["--out"]).arg(root.join("samp3"));
    for _ in 0..4 {
        overflow.args(["--aux"]).arg(&src);
    }
    let out = overflow.output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at most 3"));

    let eval = |stem: &Path, seed: &str| {
        run_ok(bin()
            .args(["evaluate", "--checkpoint"]).arg(&ckpt)
            .args(["--config"]).arg(&cfg)
            .args(["--seed", seed, "--out"]).arg(stem));
    };
    eval(&root.join("rep1"), "11");
    eval(&root.join("rep2"), "11");
    assert!(root.join("rep1.kv").is_file() && root.join("rep1.csv").is_file());
    assert_eq!(
        fs::read(root.join("rep1.csv")).unwrap(),
        fs::read(root.join("rep2.csv")).unwrap()
    );
    // Model-mode reports carry the no-model reference aggregate.
    let kv = fs::read_to_string(root.join("rep1.kv")).unwrap();
    assert!(kv.contains("baseline_psnr_mean"), "kv: {kv}");

    let oracle = run_ok(bin()
        .args(["evaluate", "--mode", "oracle", "--config"]).arg(&cfg)
        .args(["--out"]).arg(root.join("rep_oracle")));
    assert!(String::from_utf8_lossy(&oracle.stdout).contains("PSNR inf"));

    // A split with no subjects listed is a hard error.
    fs::write(data.join("empty.txt"), "").unwrap();
    let out = bin()
        .args(["evaluate", "--mode", "baseline", "--split", "empty", "--config"]).arg(&cfg)
        .args(["--out"]).arg(root.join("rep_empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let _ = fs::remove_dir_all(&root);
}

#[test]
fn gradcheck_cli_passes_and_flags_broken_rule() {
    let ok = bin().arg("gradcheck").output().unwrap();
    assert!(ok.status.success());
    let table = String::from_utf8_lossy(&ok.stdout).into_owned();
    assert!(table.contains("checks passed"), "stdout: {table}");
    assert!(!table.contains("FAIL"));

    let broken = bin()
        .args(["gradcheck", "--include-negative-control"])
        .output()
        .unwrap();
    assert_eq!(broken.status.code(), Some(3));
    let table = String::from_utf8_lossy(&broken.stdout).into_owned();
    assert!(table.contains("negative_control_sign_flip"));
    assert!(table.contains("FAIL"));
}
