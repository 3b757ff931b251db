use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const SMALL: &str = r#"
seed = 5

[data]
train_size = 150
heldout_size = 150

[classifier]
epochs = 3
hidden = 8
depth = 1
margin = 2.0

[toy]
trials = 400

[reachability]
instances = 6

[lookahead]
budget = 24
n_explore = 4

[ablate]
n_samples = 20
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scrlab"))
}

fn scrlab(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("spawn scrlab");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn outputs_do_not_depend_on_jobs_or_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen-data", "train-classifier", "decode", "lookahead", "toy-verify", "reachability", "ablate", "report"]
    {
        let mut runs = Vec::new();
        for (i, jobs) in ["1", "4", "4"].iter().enumerate() {
            let out = tmp.path().join(format!("{cmd}-{i}"));
            let (code, err) = scrlab(&[cmd, "--config", cfg, "--jobs", jobs, "--out", out.to_str().unwrap()]);
            assert_eq!(code, 0, "{cmd}: {err}");
            runs.push(read_dir(&out));
        }
        assert!(runs[0].contains_key("manifest.json"));
        assert_eq!(runs[0], runs[1], "{cmd} differs between --jobs 1 and 4");
        assert_eq!(runs[1], runs[2], "{cmd} differs on rerun");
    }
}

#[test]
fn manifest_hashes_outputs_and_records_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("o");
    let (code, err) =
        scrlab(&["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 99);
    assert_eq!(m["config"]["seed"], 99);
    assert_eq!(m["subcommand"], "gen-data");
    assert!(m["grammar"]["vocab_size"].is_u64());
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
    for o in outputs {
        use sha2::Digest;
        let bytes = fs::read(out.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(sha2::Sha256::digest(&bytes)));
    }
}

#[test]
fn artifact_pipeline_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[generator]\nmode = \"fit\"\nsmoothing = 0.5\n"));
    let cfg = cfg.to_str().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let run = |args: Vec<String>| {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, err) = scrlab(&args);
        assert_eq!(code, 0, "{args:?}: {err}");
    };
    run(vec!["gen-data".into(), "--config".into(), cfg.into(), "--out".into(), s(d("data"))]);
    let train = s(d("data").join("train.csv"));
    run(vec![
        "fit-generator".into(),
        "--config".into(),
        cfg.into(),
        "--data".into(),
        train.clone(),
        "--out".into(),
        s(d("gen")),
    ]);
    let gen = s(d("gen").join("generator.toml"));
    run(vec![
        "train-classifier".into(),
        "--config".into(),
        cfg.into(),
        "--data".into(),
        train.clone(),
        "--generator".into(),
        gen.clone(),
        "--out".into(),
        s(d("clf")),
    ]);
    let trace = fs::read_to_string(d("clf").join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,ce,rank,total\n"));
    assert_eq!(trace.lines().count(), 4);
    let model = s(d("clf").join("model.json"));
    run(vec![
        "decode".into(),
        "--config".into(),
        cfg.into(),
        "--generator".into(),
        gen.clone(),
        "--model".into(),
        model.clone(),
        "--out".into(),
        s(d("dec")),
    ]);
    let decode = s(d("dec").join("decode.csv"));
    run(vec![
        "report".into(),
        "--config".into(),
        cfg.into(),
        "--decode".into(),
        decode.clone(),
        "--out".into(),
        s(d("rep")),
    ]);
    let metrics = fs::read_to_string(d("rep").join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,context_group,value,n\n"));
    assert!(metrics.contains("breadth,lambda=2,"));

    // The fitted-mode train-classifier run without --generator fits the same
    // table from the same data, so the model is identical.
    run(vec![
        "train-classifier".into(),
        "--config".into(),
        cfg.into(),
        "--data".into(),
        train,
        "--out".into(),
        s(d("clf2")),
    ]);
    assert_eq!(fs::read(d("clf").join("model.json")).unwrap(), fs::read(d("clf2").join("model.json")).unwrap());

    let m: serde_json::Value = serde_json::from_slice(&fs::read(d("rep").join("manifest.json")).unwrap()).unwrap();
    let inputs: Vec<&str> = m["inputs"].as_array().unwrap().iter().map(|i| i["path"].as_str().unwrap()).collect();
    assert!(inputs.contains(&decode.as_str()));
}

#[test]
fn lambda_zero_matches_unguided_sequences() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(scrlab(&["decode", "--config", cfg, "--lambda", "0", "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(scrlab(&["decode", "--config", cfg, "--unguided", "--out", b.to_str().unwrap()]).0, 0);
    let cols = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("decode.csv"))
            .unwrap()
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{}", f[0], f[1], f[3], f[7])
            })
            .collect()
    };
    assert_eq!(cols(&a), cols(&b));
    assert_eq!(fs::read(a.join("decode.csv")).unwrap(), fs::read(b.join("decode.csv")).unwrap());
}

#[test]
fn toy_verify_table_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let (code, err) =
        scrlab(&["toy-verify", "--delta", "0.1", "--eps", "0.05", "--trials", "4000", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let nmin = fs::read_to_string(out.join("nmin.csv")).unwrap();
    assert!(nmin.starts_with("eta,expected_rare_count,analytic_n_min,"));
    assert_eq!(nmin.lines().count(), 7);
    assert!(!nmin.contains('\r'));
    let thr = fs::read_to_string(out.join("thresholds.csv")).unwrap();
    assert_eq!(thr.lines().count(), 5);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(scrlab(&["--help"]).0, 0);
    assert_eq!(scrlab(&["--version"]).0, 0);
    assert_eq!(scrlab(&["frobnicate"]).0, 64);
    assert_eq!(scrlab(&["decode", "--no-such-flag"]).0, 64);
    assert_eq!(scrlab(&["decode", "--config", "/nonexistent/c.toml", "--out", out]).0, 66);
    assert_eq!(scrlab(&["report", "--decode", "/nonexistent/d.csv", "--out", out]).0, 66);

    let bad = |name: &str, text: &str| {
        let p = tmp.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    };
    let unknown_key = bad("k.toml", "sed = 1\n");
    assert_eq!(scrlab(&["decode", "--config", &unknown_key, "--out", out]).0, 2);
    let bad_value = bad("v.toml", "[decode]\nbeam_width = 0\n");
    assert_eq!(scrlab(&["decode", "--config", &bad_value, "--out", out]).0, 2);
    let both = bad("g.toml", "grammar_file = \"x.toml\"\n[grammar]\nnum_classes = 2\n");
    assert_eq!(scrlab(&["gen-data", "--config", &both, "--out", out]).0, 2);
    let garbage = bad("d.csv", "context,target\nnot,a,row\n");
    assert_eq!(scrlab(&["report", "--decode", &garbage, "--out", out]).0, 2);

    let diverge =
        bad("n.toml", "[data]\ntrain_size = 50\n[classifier]\nlearning_rate = 1e308\ndepth = 0\nepochs = 2\n");
    let (code, err) = scrlab(&["train-classifier", "--config", &diverge, "--out", out]);
    assert_eq!(code, 3, "{err}");
}
