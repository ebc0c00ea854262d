use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: [&str; 16] = [
    "--set",
    "N=1",
    "--set",
    "M=2",
    "--set",
    "d_lm=16",
    "--set",
    "d_gnn=8",
    "--set",
    "lm_ffn_hidden=32",
    "--set",
    "mlp_hidden=8",
    "--set",
    "mint_hidden=16",
    "--set",
    "max_tokens=48",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_greaselm"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn gen_data(out: &str, seed: &str, n: &str, threads: &str) {
    ok(&[
        "--threads",
        threads,
        "gen-data",
        "--seed",
        seed,
        "--n",
        n,
        "--k",
        "4",
        "--negation-rate",
        "0.5",
        "--out",
        out,
    ]);
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(TINY);
    v
}

#[test]
fn gen_data_is_byte_identical_across_reruns_and_thread_counts() {
    let d = TempDir::new().unwrap();
    let (a, b, c) = (p(&d, "a.jsonl"), p(&d, "b.jsonl"), p(&d, "c.jsonl"));
    gen_data(&a, "1", "200", "1");
    gen_data(&b, "1", "200", "1");
    gen_data(&c, "1", "200", "3");
    let fa = fs::read(&a).unwrap();
    assert_eq!(fa, fs::read(&b).unwrap());
    assert_eq!(fa, fs::read(&c).unwrap());
    assert_eq!(fa.iter().filter(|&&x| x == b'\n').count(), 200);
}

#[test]
fn gen_kg_is_reproducible() {
    let d = TempDir::new().unwrap();
    for name in ["a", "b"] {
        ok(&[
            "gen-kg",
            "--seed",
            "5",
            "--nodes",
            "60",
            "--relations",
            "3",
            "--out",
            &p(&d, name),
        ]);
    }
    for f in ["nodes.tsv", "relations.tsv", "edges.tsv"] {
        assert_eq!(
            fs::read(d.path().join("a").join(f)).unwrap(),
            fs::read(d.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn first_line_echoes_resolved_invocation() {
    let d = TempDir::new().unwrap();
    let out = ok(&["gen-data", "--seed", "7", "--n", "3", "--out", &p(&d, "x.jsonl")]);
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("# command=gen-data "), "{first}");
    assert!(first.contains("seed=7") && first.contains("n=3"));
}

#[test]
fn flags_override_config_file() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("c.cfg");
    fs::write(&cfg, "d_lm = 32\nd_gnn = 8\nseed = 3\n").unwrap();
    let cfg = cfg.display().to_string();
    let mut args = vec!["gradcheck", "--config", &cfg, "--coords", "5"];
    args.extend(TINY);
    let out = ok(&args);
    let first = out.lines().next().unwrap();
    assert!(first.contains(" d_lm=16 "), "{first}");
    assert!(first.contains(" seed=3"), "{first}");
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--bogus-flag", "--out", "x"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let d = TempDir::new().unwrap();
    let missing = run(&["train", "--train", &p(&d, "missing.jsonl"), "--out", &p(&d, "m")]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.jsonl"));
    let bad_key = run(&["gradcheck", "--set", "no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(!bad_key.stderr.is_empty());
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let out = ok(&with_tiny(&["gradcheck", "--coords", "30"]));
    let line = out.lines().find(|l| l.starts_with("max_rel_err")).unwrap();
    let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err <= 1e-3, "{line}");
}

#[test]
fn retrieve_writes_one_record_per_candidate() {
    let d = TempDir::new().unwrap();
    let data = p(&d, "d.jsonl");
    gen_data(&data, "2", "6", "1");
    let cache = p(&d, "cache.jsonl");
    ok(&["retrieve", "--data", &data, "--out", &cache]);
    let text = fs::read_to_string(&cache).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 24);
    assert_eq!(recs[0]["example_id"], "s2-0:0");
    assert_eq!(recs[3]["example_id"], "s2-0:3");
}

#[test]
fn train_eval_trace_pipeline() {
    let d = TempDir::new().unwrap();
    let (train, dev) = (p(&d, "train.jsonl"), p(&d, "dev.jsonl"));
    gen_data(&train, "1", "12", "1");
    gen_data(&dev, "2", "6", "1");
    let (m1, m2) = (p(&d, "m1"), p(&d, "m2"));
    for (m, threads) in [(&m1, "1"), (&m2, "2")] {
        let out = ok(&with_tiny(&[
            "--threads",
            threads,
            "train",
            "--train",
            &train,
            "--dev",
            &dev,
            "--epochs",
            "1",
            "--set",
            "batch_size=4",
            "--out",
            m,
        ]));
        assert!(out.starts_with("# command=train "));
    }
    for f in ["weights.bin", "manifest.json", "model.cfg", "vocab.txt"] {
        assert_eq!(
            fs::read(Path::new(&m1).join(f)).unwrap(),
            fs::read(Path::new(&m2).join(f)).unwrap(),
            "{f} differs"
        );
    }
    let metrics = fs::read_to_string(Path::new(&m1).join("metrics.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(row["epoch"], 1);

    let report = p(&d, "report.json");
    ok(&["eval", "--model", &m1, "--data", &dev, "--out", &report]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["n"], 6);
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let trace = p(&d, "trace.json");
    ok(&[
        "trace",
        "--model",
        &m1,
        "--data",
        &dev,
        "--example",
        "s2-1",
        "--candidate",
        "1",
        "--out",
        &trace,
    ]);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["example_id"], "s2-1");
    assert_eq!(t["candidate"], 1);
    assert_eq!(t["layers"].as_array().unwrap().len(), 2);
    assert_eq!(t["best_first"][0], 0);

    let missing = run(&["trace", "--model", &m1, "--data", &dev, "--example", "nope"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn ablate_reports_suite_labels() {
    let d = TempDir::new().unwrap();
    let suite = d.path().join("suite.cfg");
    fs::write(
        &suite,
        "seeds = 0, 1\n\n[No interaction]\ninteraction_schedule = none\n\n[Random]\nnode_init_mode = random_fixed\n",
    )
    .unwrap();
    let base = d.path().join("base.cfg");
    fs::write(
        &base,
        "N = 1\nM = 2\nd_lm = 16\nd_gnn = 8\nlm_ffn_hidden = 32\nmlp_hidden = 8\nmint_hidden = 16\nmax_tokens = 48\nepochs = 1\nbatch_size = 4\n",
    )
    .unwrap();
    let out = p(&d, "report.tsv");
    ok(&[
        "ablate",
        "--base",
        &base.display().to_string(),
        "--suite",
        &suite.display().to_string(),
        "--n-train",
        "8",
        "--n-dev",
        "4",
        "--out",
        &out,
    ]);
    let tsv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "variant\tmean_acc\tstd\tseeds");
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["GreaseLM", "No interaction", "Random"]);
    for l in &lines[1..] {
        assert!(l.ends_with("\t0,1"), "{l}");
    }
}

#[test]
fn shipped_configs_match_builtins() {
    use greaselm::model::ablation::{Suite, COMPONENT_SUITE};
    use greaselm::model::RunConfig;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = RunConfig::load(&root.join("desk.cfg")).unwrap();
    assert_eq!(desk.to_line(), RunConfig::desk().to_line());
    let text = fs::read_to_string(root.join("components.cfg")).unwrap();
    assert_eq!(
        Suite::parse(&text, "components.cfg").unwrap(),
        Suite::parse(COMPONENT_SUITE, "builtin").unwrap()
    );
}
