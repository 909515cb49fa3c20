// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_headprobe"));
    c.env_remove("HEADPROBE_JOBS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn headprobe")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "headprobe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(extra: &[&str]) -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let demo = root.join("demo");
        let mut args = vec!["demo", "--out", p(&demo)];
        args.extend_from_slice(extra);
        ok(&args);
        Self { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn fit(&self) -> String {
        ok(&[
            "fit",
            "--dump",
            p(&self.path("demo/fixture.aprb")),
            "--out",
            p(&self.path("fit")),
        ])
    }

    fn gen_args(&self, out: &str) -> Vec<String> {
        [
            "--model",
            p(&self.path("demo/model.aprm")),
            "--bank",
            p(&self.path("fit/bank.json")),
            "--prompts",
            p(&self.path("demo/prompts.txt")),
            "--out",
            p(&self.path(out)),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }
}

fn top_row(table: &str) -> (String, f64) {
    let line = table.lines().nth(1).expect("top table has rows");
    let open = line.find('(').unwrap();
    let close = line.find(')').unwrap();
    let score: f64 = line[close + 1..].trim().parse().unwrap();
    (line[open..=close].to_string(), score)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn demo_is_byte_identical_for_a_seed() {
    let a = Fixture::new(&["--seed", "7"]);
    let b = Fixture::new(&["--seed", "7"]);
    let c = Fixture::new(&["--seed", "8"]);
    for f in ["model.aprm", "fixture.aprb", "prompts.txt", "README.txt"] {
        let rel = format!("demo/{f}");
        assert_eq!(
            std::fs::read(a.path(&rel)).unwrap(),
            std::fs::read(b.path(&rel)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        std::fs::read(a.path("demo/fixture.aprb")).unwrap(),
        std::fs::read(c.path("demo/fixture.aprb")).unwrap()
    );
}

#[test]
fn fit_finds_the_planted_head_and_writes_a_manifest() {
    let fx = Fixture::new(&[]);
    let stdout = fx.fit();
    let (head, score) = top_row(&stdout);
    assert_eq!(head, "(3, 6)");
    assert!(score > 0.9, "{score}");
    assert_eq!(
        std::fs::read_to_string(fx.path("fit/top10.txt")).unwrap(),
        stdout
    );

    let m = manifest(&fx.path("fit"));
    assert_eq!(m["command"], "fit");
    assert_eq!(m["config"]["lambda"], 1.0);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert!(outputs.iter().any(|o| o.ends_with("bank.json")));
    assert!(outputs.iter().any(|o| o.ends_with("heatmap_spearman.csv")));

    let heat = std::fs::read_to_string(fx.path("fit/heatmap_spearman.csv")).unwrap();
    assert!(heat.starts_with("layer,head1,"));
    assert_eq!(heat.lines().count(), 5);
}

#[test]
fn zero_gain_gives_chance_level_probes() {
    let fx = Fixture::new(&["--gain", "0"]);
    let (_, score) = top_row(&fx.fit());
    assert!(score.abs() < 0.25, "best head {score}");
}

#[test]
fn lambda_sweep_and_robustness_tables() {
    let fx = Fixture::new(&["--n", "200"]);
    ok(&[
        "fit",
        "--dump",
        p(&fx.path("demo/fixture.aprb")),
        "--out",
        p(&fx.path("fit")),
        "--lambda-sweep",
        "--robustness",
    ]);
    let sweep = std::fs::read_to_string(fx.path("fit/lambda_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 7);
    let rob = std::fs::read_to_string(fx.path("fit/robustness.csv")).unwrap();
    let names: Vec<&str> = rob
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["original", "permuted", "sin10", "cubic"]);
}

#[test]
fn permuted_fit_is_flagged_as_null_baseline() {
    let fx = Fixture::new(&["--n", "200"]);
    let out = run(&[
        "fit",
        "--dump",
        p(&fx.path("demo/fixture.aprb")),
        "--out",
        p(&fx.path("null")),
        "--transform",
        "permute",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("null baseline"));
    let notes = manifest(&fx.path("null"))["notes"].to_string();
    assert!(notes.contains("null baseline"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let fx = Fixture::new(&["--n", "120"]);
    let cfg = fx.path("hp.toml");
    std::fs::write(&cfg, "lambda = 100.0\nfold_seed = 3\n").unwrap();
    let dump = fx.path("demo/fixture.aprb");
    ok(&[
        "--config",
        p(&cfg),
        "fit",
        "--dump",
        p(&dump),
        "--out",
        p(&fx.path("a")),
    ]);
    ok(&[
        "--config",
        p(&cfg),
        "fit",
        "--dump",
        p(&dump),
        "--out",
        p(&fx.path("b")),
        "--lambda",
        "0.5",
    ]);
    let a = manifest(&fx.path("a"));
    let b = manifest(&fx.path("b"));
    assert_eq!(a["config"]["lambda"], 100.0);
    assert_eq!(a["seeds"]["fold_seed"], 3);
    assert_eq!(b["config"]["lambda"], 0.5);

    std::fs::write(&cfg, "lamda = 1.0\n").unwrap();
    let out = run(&[
        "--config",
        p(&cfg),
        "fit",
        "--dump",
        p(&dump),
        "--out",
        p(&fx.path("c")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_follow_error_class() {
    let fx = Fixture::new(&["--n", "120"]);
    let missing = run(&[
        "fit",
        "--dump",
        p(&fx.path("nope.aprb")),
        "--out",
        p(&fx.path("x")),
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = fx.path("bad.aprb");
    let mut bytes = std::fs::read(fx.path("demo/fixture.aprb")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&bad, bytes).unwrap();
    let parse = run(&["fit", "--dump", p(&bad), "--out", p(&fx.path("x"))]);
    assert_eq!(parse.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&parse.stderr).contains("offset"));

    fx.fit();
    let mut args = vec!["trace".to_string(), "--head".into(), "0,1".into()];
    args.extend(fx.gen_args("t"));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&args).status.code(), Some(2));

    let mut args = vec![
        "steer".to_string(),
        "--alpha".into(),
        "1".into(),
        "--k".into(),
        "999".into(),
    ];
    args.extend(fx.gen_args("s"));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn inputs_are_not_modified() {
    let fx = Fixture::new(&["--n", "150"]);
    let dump = fx.path("demo/fixture.aprb");
    let before = std::fs::read(&dump).unwrap();
    fx.fit();
    let bank_before = std::fs::read(fx.path("fit/bank.json")).unwrap();
    ok(&[
        "transfer",
        "--bank",
        p(&fx.path("fit/bank.json")),
        "--dump",
        p(&dump),
        "--out",
        p(&fx.path("tr")),
    ]);
    assert_eq!(std::fs::read(&dump).unwrap(), before);
    assert_eq!(
        std::fs::read(fx.path("fit/bank.json")).unwrap(),
        bank_before
    );
}

#[test]
fn self_transfer_and_ensemble_outputs() {
    let fx = Fixture::new(&[]);
    fx.fit();
    let bank = fx.path("fit/bank.json");
    let dump = fx.path("demo/fixture.aprb");
    let stdout = ok(&[
        "transfer",
        "--bank",
        p(&bank),
        "--dump",
        p(&dump),
        "--out",
        p(&fx.path("tr")),
        "--k",
        "1",
    ]);
    assert!(stdout.starts_with("K = 1"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("tr/transfer.json")).unwrap())
            .unwrap();
    assert!(report["spearman"].as_f64().unwrap() > 0.99);

    ok(&[
        "ensemble",
        "--bank",
        p(&bank),
        "--dump",
        p(&dump),
        "--out",
        p(&fx.path("ens")),
        "--ks",
        "1,4",
        "--mode",
        "nested",
    ]);
    let csv = std::fs::read_to_string(fx.path("ens/ensemble.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("k,cv_spearman\n1,"));
}

#[test]
fn steering_at_zero_alpha_matches_trace() {
    let fx = Fixture::new(&[]);
    fx.fit();
    let mut t = vec![
        "trace".to_string(),
        "--format".into(),
        "csv".into(),
        "--k".into(),
        "4".into(),
    ];
    t.extend(fx.gen_args("trace"));
    let t: Vec<&str> = t.iter().map(String::as_str).collect();
    ok(&t);
    let mut s = vec![
        "steer".to_string(),
        "--alpha".into(),
        "0".into(),
        "--k".into(),
        "4".into(),
    ];
    s.extend(fx.gen_args("steer"));
    let s: Vec<&str> = s.iter().map(String::as_str).collect();
    ok(&s);
    let a = std::fs::read(fx.path("trace/traces.csv")).unwrap();
    let b = std::fs::read(fx.path("steer/traces.csv")).unwrap();
    assert_eq!(a, b);

    let mut s = vec![
        "steer".to_string(),
        "--alpha".into(),
        "20".into(),
        "--k".into(),
        "4".into(),
    ];
    s.extend(fx.gen_args("steer20"));
    let s: Vec<&str> = s.iter().map(String::as_str).collect();
    ok(&s);
    assert_ne!(a, std::fs::read(fx.path("steer20/traces.csv")).unwrap());
}

#[test]
fn trace_renders_html_for_a_single_head() {
    let fx = Fixture::new(&["--n", "200"]);
    fx.fit();
    let mut t = vec!["trace".to_string(), "--head".into(), "3,6".into()];
    t.extend(fx.gen_args("trace"));
    let t: Vec<&str> = t.iter().map(String::as_str).collect();
    ok(&t);
    let html = std::fs::read_to_string(fx.path("trace/traces.html")).unwrap();
    assert!(html.contains("<span"));
    let m = manifest(&fx.path("trace"));
    assert_eq!(m["config"]["tracked"]["head"], "(3, 6)");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("trace/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["overall"]["count"], 4 * 16);
}

#[test]
fn sweep_slant_tracks_alpha() {
    let fx = Fixture::new(&[]);
    fx.fit();
    let mut s = vec![
        "--jobs".to_string(),
        "1".into(),
        "sweep".into(),
        "--steps".into(),
        "8".into(),
    ];
    s.extend(fx.gen_args("sweep"));
    let s: Vec<&str> = s.iter().map(String::as_str).collect();
    let stdout = ok(&s);
    assert!(stdout.contains("(per-alpha means): 1.000000"), "{stdout}");
    let rows = std::fs::read_to_string(fx.path("sweep/sweep_rows.csv")).unwrap();
    // 7 alphas x 2 K values x 4 prompts x 1 seed
    assert_eq!(rows.lines().count(), 1 + 7 * 2 * 4);
    assert_eq!(manifest(&fx.path("sweep"))["jobs"], 1);
}
