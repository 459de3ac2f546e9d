use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ledmerge::analysis::{dominates, exclusive_counts, layerwise_jaccard};
use ledmerge::checkpoint::Checkpoint;
use ledmerge::led::{led_sets, MergeConfig, TaskSpec};
use ledmerge::scoring::{import_scores, snip_scores};
use ledmerge::toygrad::{eval_accuracy, Example, LocationDataset, ToyModel};
use serde_json::Value;

fn ledmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ledmerge")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ledmerge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Scenario files under `dir`: base, two specialists, location and eval sets.
fn scenario(dir: &Path) -> PathBuf {
    let d = dir.join("scenario");
    ok(&["toy-scenario", "--train", "--seed", "0", "--out-dir", s(&d)]);
    d
}

fn tiny(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = LocationDataset::new(
        "probe",
        vec![
            Example::new(vec![1.0, 0.0, -1.0], 0),
            Example::new(vec![0.5, 2.0, 0.0], 1),
            Example::new(vec![-1.0, 1.0, 0.5], 2),
            Example::new(vec![0.0, -0.5, 1.5], 1),
        ],
    )
    .unwrap();
    let dp = dir.join("probe.jsonl");
    data.save_jsonl(&dp).unwrap();
    let (bp, fp) = (dir.join("base.safetensors"), dir.join("fine.safetensors"));
    ToyModel::init(&[3, 5, 3], 1).unwrap().to_checkpoint().save(&bp).unwrap();
    ToyModel::init(&[3, 5, 3], 2).unwrap().to_checkpoint().save(&fp).unwrap();
    (bp, fp, dp)
}

#[test]
fn score_writes_loadable_non_negative_maps_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (bp, fp, dp) = tiny(dir.path());
    let run = |out: &str| {
        let o = dir.path().join(out);
        ok(&["score", "--model", s(&fp), "--base", s(&bp), "--dataset", s(&dp), "--out-dir", s(&o)]);
        o
    };
    let (a, b) = (run("a"), run("b"));
    let reference = Checkpoint::load(&fp).unwrap();
    for name in ["probe.fine.scores.safetensors", "probe.base.scores.safetensors"] {
        let map = import_scores(a.join(name), &reference).unwrap();
        assert_eq!(map.negatives_normalized(), 0);
        assert_eq!(map.examples_count(), 4);
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let direct = snip_scores(&ToyModel::from_checkpoint(&reference).unwrap(), &LocationDataset::load_jsonl(&dp).unwrap()).unwrap();
    let written = import_scores(a.join("probe.fine.scores.safetensors"), &reference).unwrap();
    for n in reference.names() {
        assert_eq!(direct.scores(n).unwrap(), written.scores(n).unwrap());
    }
}

#[test]
fn missing_inputs_exit_with_status_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fp, _) = tiny(dir.path());
    let missing = dir.path().join("nowhere.jsonl");
    let out = ledmerge(&["score", "--model", s(&fp), "--dataset", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    let out = ledmerge(&["merge", "--fine", s(&fp), "--ratio", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ledmerge(&["merge", "--base", s(&fp), "--fine", s(&fp), "--ratio", "1.5", "--dataset", s(&dir.path().join("probe.jsonl"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_full_task_led_reproduces_the_fine_model() {
    let dir = tempfile::tempdir().unwrap();
    let (bp, fp, dp) = tiny(dir.path());
    let sc = dir.path().join("scores");
    ok(&["score", "--model", s(&fp), "--dataset", s(&dp), "--out-dir", s(&sc)]);
    let map = sc.join("probe.fine.scores.safetensors");
    let out = dir.path().join("m");
    ok(&[
        "merge", "--base", s(&bp), "--fine", s(&fp), "--fine-scores", s(&map), "--base-scores", s(&map),
        "--ratio", "1", "--lambda", "1", "--out-dir", s(&out),
    ]);
    let merged = Checkpoint::load(out.join("merged.safetensors")).unwrap();
    assert!(merged.content_eq(&Checkpoint::load(&fp).unwrap()).unwrap());
    let report = json(&out.join("report.json"));
    assert_eq!(report["method"], "led");
    assert_eq!(report["tasks"][0]["totals"]["mask_density"], 1.0);
}

#[test]
fn zero_lambda_task_arithmetic_returns_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let (bp, fp, _) = tiny(dir.path());
    let out = dir.path().join("m");
    ok(&["merge", "--method", "task_arithmetic", "--baseline-lambda", "0", "--base", s(&bp), "--fine", s(&fp), "--out-dir", s(&out)]);
    let merged = Checkpoint::load(out.join("merged.safetensors")).unwrap();
    assert!(merged.content_eq(&Checkpoint::load(&bp).unwrap()).unwrap());
    assert_eq!(json(&out.join("report.json"))["method"], "task_arithmetic");
}

#[test]
fn led_report_counts_match_library_recount() {
    let dir = tempfile::tempdir().unwrap();
    let d = scenario(dir.path());
    let out = dir.path().join("m");
    let paths = ["base.safetensors", "fine_a.safetensors", "fine_b.safetensors", "task_a.jsonl", "task_b.jsonl"].map(|f| d.join(f));
    let args = [
        "merge", "--base", s(&paths[0]), "--fine", s(&paths[1]), "--fine", s(&paths[2]), "--dataset", s(&paths[3]),
        "--dataset", s(&paths[4]), "--ratio", "0.7", "--out-dir", s(&out),
    ];
    ok(&args);
    let report = json(&out.join("report.json"));

    let base = ToyModel::from_checkpoint(&Checkpoint::load(d.join("base.safetensors")).unwrap()).unwrap();
    let load = |n: &str| ToyModel::from_checkpoint(&Checkpoint::load(d.join(n)).unwrap()).unwrap();
    let data = |n: &str| LocationDataset::load_jsonl(d.join(n)).unwrap();
    let (fa, fb, ta, tb) = (load("fine_a.safetensors"), load("fine_b.safetensors"), data("task_a.jsonl"), data("task_b.jsonl"));
    let scores = vec![
        (snip_scores(&fa, &ta).unwrap(), snip_scores(&base, &ta).unwrap()),
        (snip_scores(&fb, &tb).unwrap(), snip_scores(&base, &tb).unwrap()),
    ];
    let config = MergeConfig::new(vec![TaskSpec::new("task_a", 0.7, 1.0), TaskSpec::new("task_b", 0.7, 1.0)]);
    let sets = led_sets(&config, &base.to_checkpoint(), &scores).unwrap();
    let recount = exclusive_counts(&sets.elected).unwrap();
    for (t, counts) in recount.iter().enumerate() {
        let task = &report["tasks"][t];
        assert_eq!(task["name"], config.tasks[t].name);
        for (row, (name, n)) in task["tensors"].as_array().unwrap().iter().zip(counts) {
            assert_eq!(row["tensor"], name.as_str());
            assert_eq!(row["disjoint"], *n);
        }
    }

    let again = dir.path().join("m2");
    let mut rerun = args.to_vec();
    *rerun.last_mut().unwrap() = s(&again);
    ok(&rerun);
    for f in ["merged.safetensors", "report.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn analyze_matches_the_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = scenario(dir.path());
    let sa = dir.path().join("sa");
    let sb = dir.path().join("sb");
    ok(&["score", "--model", s(&d.join("fine_a.safetensors")), "--dataset", s(&d.join("task_a.jsonl")), "--out-dir", s(&sa)]);
    ok(&["score", "--model", s(&d.join("fine_b.safetensors")), "--dataset", s(&d.join("task_b.jsonl")), "--out-dir", s(&sb)]);
    let (ma, mb) = (sa.join("task_a.fine.scores.safetensors"), sb.join("task_b.fine.scores.safetensors"));

    let same = dir.path().join("same");
    ok(&["analyze", "--map-a", s(&ma), "--map-b", s(&ma), "--out-dir", s(&same)]);
    for row in json(&same.join("jaccard.json"))["rows"].as_array().unwrap() {
        // Too few elements for any pick at the default ratio.
        let want = if row["empty"] == true { 0.0 } else { 1.0 };
        assert_eq!(row["jaccard"], want, "{row}");
    }

    let out = dir.path().join("j");
    let stdout = ok(&["analyze", "--map-a", s(&ma), "--map-b", s(&mb), "--ratio", "0.5", "--out-dir", s(&out)]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.starts_with("ratio 0.5"), "{text}");
    let reference = Checkpoint::load(&ma).unwrap();
    let direct = layerwise_jaccard(&import_scores(&ma, &reference).unwrap(), &import_scores(&mb, &reference).unwrap(), 0.5).unwrap();
    assert_eq!(std::fs::read_to_string(out.join("jaccard.json")).unwrap(), direct.to_json());
    assert_eq!(text, direct.to_text());
}

fn grid_args<'a>(d: &'a Path, out: &'a Path, ratios: &'a [&'a str], lambdas: &'a str) -> Vec<String> {
    let mut args: Vec<String> = ["grid", "--base"].iter().map(|x| x.to_string()).collect();
    args.push(s(&d.join("base.safetensors")).into());
    for f in ["fine_a", "fine_b"] {
        args.push("--fine".into());
        args.push(s(&d.join(format!("{f}.safetensors"))).into());
    }
    for t in ["task_a", "task_b"] {
        args.push("--dataset".into());
        args.push(s(&d.join(format!("{t}.jsonl"))).into());
    }
    for e in ["eval_a", "eval_b"] {
        args.push("--eval".into());
        args.push(s(&d.join(format!("{e}.jsonl"))).into());
    }
    for r in ratios {
        args.push("--ratios".into());
        args.push(r.to_string());
    }
    args.extend(["--lambdas".into(), lambdas.into(), "--out-dir".into(), s(out).into()]);
    args
}

fn run_grid(d: &Path, out: &Path, ratios: &[&str], lambdas: &str, threads: &str) -> Value {
    let args = grid_args(d, out, ratios, lambdas);
    let o = Command::new(env!("CARGO_BIN_EXE_ledmerge")).args(&args).env("LEDMERGE_THREADS", threads).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    json(&out.join("grid.json"))
}

#[test]
fn one_point_grid_equals_merge_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = scenario(dir.path());
    let g = run_grid(&d, &dir.path().join("g"), &["0.6", "0.4"], "0.8", "1");
    let rows = g["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["pareto"], true);

    let m = dir.path().join("m");
    ok(&[
        "merge", "--base", s(&d.join("base.safetensors")), "--fine", s(&d.join("fine_a.safetensors")),
        "--fine", s(&d.join("fine_b.safetensors")), "--dataset", s(&d.join("task_a.jsonl")),
        "--dataset", s(&d.join("task_b.jsonl")), "--ratio", "0.6", "--ratio", "0.4", "--lambda", "0.8",
        "--out-dir", s(&m),
    ]);
    let e = dir.path().join("e");
    ok(&[
        "toy-eval", "--model", s(&m.join("merged.safetensors")), "--dataset", s(&d.join("eval_a.jsonl")),
        "--dataset", s(&d.join("eval_b.jsonl")), "--out-dir", s(&e),
    ]);
    let acc = json(&e.join("eval.json"));
    assert_eq!(rows[0]["metrics"]["acc_task_a"], acc["accuracy"]["eval_a"]);
    assert_eq!(rows[0]["metrics"]["acc_task_b"], acc["accuracy"]["eval_b"]);
    assert_eq!(rows[0]["config"]["ratio_task_a"], 0.6);
    assert_eq!(rows[0]["config"]["lambda"], 0.8);
}

#[test]
fn grid_front_matches_dominance_oracle_and_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = scenario(dir.path());
    let one = run_grid(&d, &dir.path().join("g1"), &["0.1,0.3,0.5", "0.1,0.3,0.5"], "0.5,1.0", "1");
    let two = run_grid(&d, &dir.path().join("g2"), &["0.1,0.3,0.5", "0.1,0.3,0.5"], "0.5,1.0", "3");
    assert_eq!(
        std::fs::read(dir.path().join("g1/grid.json")).unwrap(),
        std::fs::read(dir.path().join("g2/grid.json")).unwrap()
    );
    assert_eq!(one, two);
    let rows = one["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 18);
    let metrics: Vec<BTreeMap<String, f64>> = rows.iter().map(|r| serde_json::from_value(r["metrics"].clone()).unwrap()).collect();
    for (i, r) in rows.iter().enumerate() {
        // Dominated: some other row is >= everywhere and > somewhere.
        let dominated = metrics.iter().any(|o| {
            o.iter().all(|(k, v)| *v >= metrics[i][k]) && o.iter().any(|(k, v)| *v > metrics[i][k])
        });
        assert_eq!(r["pareto"], !dominated, "row {i}");
        assert_eq!(dominated, metrics.iter().any(|o| dominates(o, &metrics[i])));
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (bp, fp, dp) = tiny(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"schema_version": 1, "seed": 3, "out_dir": "from_file",
                "merge": {{"base": "{}", "fines": ["{}"], "datasets": ["{}"], "ratios": [0.5], "lambdas": [2.0]}}}}"#,
            s(&bp), s(&fp), s(&dp)
        ),
    )
    .unwrap();
    ok(&["--config", s(&cfg), "merge"]);
    let from_file = json(&dir.path().join("from_file/report.json"));
    assert_eq!(from_file["tasks"][0]["lambda"], 2.0);
    assert_eq!(from_file["tasks"][0]["ratio"], 0.5);
    assert_eq!(from_file["tasks"][0]["name"], "probe");

    let flag_out = dir.path().join("flags");
    ok(&["merge", "--config", s(&cfg), "--lambda", "0.25", "--out-dir", s(&flag_out)]);
    let flagged = json(&flag_out.join("report.json"));
    assert_eq!(flagged["tasks"][0]["lambda"], 0.25);
    assert_eq!(flagged["tasks"][0]["ratio"], 0.5);

    std::fs::write(&cfg, r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(ledmerge(&["--config", s(&cfg), "merge"]).status.code(), Some(2));
}

#[test]
fn toy_train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = scenario(dir.path());
    let t = dir.path().join("t");
    ok(&["toy-train", "--base", s(&d.join("base.safetensors")), "--dataset", s(&d.join("task_a.jsonl")), "--out-dir", s(&t)]);
    // Same defaults as the scenario's own specialist training.
    let trained = Checkpoint::load(t.join("model.safetensors")).unwrap();
    assert!(trained.content_eq(&Checkpoint::load(d.join("fine_a.safetensors")).unwrap()).unwrap());

    let e = dir.path().join("e");
    ok(&["toy-eval", "--model", s(&t.join("model.safetensors")), "--dataset", s(&d.join("eval_a.jsonl")), "--out-dir", s(&e)]);
    let model = ToyModel::from_checkpoint(&trained).unwrap();
    let want = eval_accuracy(&model, &LocationDataset::load_jsonl(d.join("eval_a.jsonl")).unwrap()).unwrap();
    assert_eq!(json(&e.join("eval.json"))["accuracy"]["eval_a"], want);

    let fresh = dir.path().join("fresh");
    ok(&["toy-train", "--sizes", "24,8,2", "--epochs", "5", "--dataset", s(&d.join("task_a.jsonl")), "--out-dir", s(&fresh)]);
    assert!(fresh.join("model.safetensors").exists());
    assert_eq!(ledmerge(&["toy-train", "--dataset", s(&d.join("task_a.jsonl"))]).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = scenario(dir.path());
    let args = grid_args(&d, &dir.path().join("g"), &["0.5"], "1.0");
    let o = Command::new(env!("CARGO_BIN_EXE_ledmerge")).args(&args).env("LEDMERGE_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("LEDMERGE_THREADS"));
}
