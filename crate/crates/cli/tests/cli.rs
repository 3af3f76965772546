use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intentrank_cli::{cmd_eval, EvalArgs, SessionArgs};
use intentrank_core::data::{load_bundle_dir, load_queries};
use intentrank_core::metrics::{evaluate_turn_protocol, pair_dataset, EvalReport};
use intentrank_core::session::{OracleConfig, SessionConfig};
use serde_json::{json, Value};
use tempfile::TempDir;

fn intentrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intentrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = intentrank(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_jsonl(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

fn synth_with(dir: &Path, scenes: &str, seed: &str) -> PathBuf {
    let out = dir.join("ds");
    ok(&["synth", "--out", p(&out), "--scenes", scenes, "--regions", "30", "--dim", "48", "--seed", seed]);
    out
}

fn synth(dir: &Path) -> PathBuf {
    synth_with(dir, "12", "5")
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_input_exits_nonzero() {
    let out = intentrank(&["eval", "--bundles", "/does/not/exist", "--queries", "/does/not/exist.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = TempDir::new().unwrap();
    let out = intentrank(&["mine", "--gt", "/nope.jsonl", "--detections", "/nope.jsonl", "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn invalid_overrides_are_rejected_before_running() {
    let dir = TempDir::new().unwrap();
    let ds = synth(dir.path());
    for bad in [["--k", "0"], ["--alpha", "1.5"], ["--lambda", "-1"], ["--iou-threshold", "0"]] {
        let mut args = vec!["eval", "--dataset", p(&ds)];
        args.extend_from_slice(&bad);
        assert!(!intentrank(&args).status.success(), "{bad:?} accepted");
    }
    assert!(!intentrank(&["eval", "--dataset", p(&ds), "--aggregation", "median"]).status.success());
}

fn cup_fixture(dir: &Path, first: [f64; 4]) -> (PathBuf, PathBuf) {
    let gt = dir.join("gt.jsonl");
    let dets = dir.join("dets.jsonl");
    write_jsonl(&gt, &[json!({"image_id": "img", "bbox": [0.0, 0.0, 10.0, 10.0], "category": "cup"})]);
    write_jsonl(
        &dets,
        &[
            json!({"image_id": "img", "bbox": first, "confidence": 0.9, "category": "cup"}),
            json!({"image_id": "img", "bbox": [0.0, 0.0, 10.0, 10.0], "confidence": 0.8, "category": "cup"}),
        ],
    );
    (gt, dets)
}

#[test]
fn mining_fixture() {
    let dir = TempDir::new().unwrap();
    let (gt, dets) = cup_fixture(dir.path(), [20.0, 20.0, 10.0, 10.0]);
    let out = dir.path().join("amb.jsonl");
    ok(&["mine", "--gt", p(&gt), "--detections", p(&dets), "--out", p(&out)]);
    let rows: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        rows,
        vec![json!({
            "image_id": "img",
            "gt_bbox": [0.0, 0.0, 10.0, 10.0],
            "category": "cup",
            "distractor_count": 1,
            "true_target_rank": 2
        })]
    );

    let (gt, dets) = cup_fixture(dir.path(), [0.0, 0.0, 10.0, 10.0]);
    ok(&["mine", "--gt", p(&gt), "--detections", p(&dets), "--out", p(&out)]);
    assert_eq!(fs::read(&out).unwrap(), b"");
}

#[test]
fn looser_iou_low_gives_a_superset() {
    let dir = TempDir::new().unwrap();
    // 0.6 overlap with the object: a distractor only under the looser threshold
    let (gt, dets) = cup_fixture(dir.path(), [0.0, 0.0, 10.0, 6.0]);
    let strict = dir.path().join("strict.jsonl");
    let loose = dir.path().join("loose.jsonl");
    ok(&["mine", "--gt", p(&gt), "--detections", p(&dets), "--out", p(&strict)]);
    ok(&["mine", "--gt", p(&gt), "--detections", p(&dets), "--out", p(&loose), "--iou-low", "0.9"]);
    assert_eq!(fs::read_to_string(&strict).unwrap(), "");
    assert_eq!(fs::read_to_string(&loose).unwrap().lines().count(), 1);

    let ds = synth(dir.path());
    let (gt, dets) = (ds.join("gt.jsonl"), ds.join("detections.jsonl"));
    let mut previous: Vec<String> = Vec::new();
    for thr in ["0.1", "0.5", "0.9", "1.0"] {
        let out = dir.path().join(format!("m{thr}.jsonl"));
        ok(&["mine", "--gt", p(&gt), "--detections", p(&dets), "--out", p(&out), "--iou-low", thr]);
        let rows: Vec<String> = fs::read_to_string(&out).unwrap().lines().map(str::to_owned).collect();
        assert!(previous.iter().all(|r| rows.contains(r)), "not a superset at {thr}");
        previous = rows;
    }
}

#[test]
fn verify_against_gt_is_stricter() {
    let dir = TempDir::new().unwrap();
    let (gt, dets) = cup_fixture(dir.path(), [20.0, 20.0, 10.0, 10.0]);
    let out = dir.path().join("o.jsonl");
    ok(&["mine", "--gt", p(&gt), "--detections", p(&dets), "--out", p(&out), "--verify-against-gt"]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn verify_theory() {
    let out = ok(&["verify-theory", "--trials", "1000", "--dim", "512", "--seed", "3", "--json"]);
    let s: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(s["passed"], 1000);
    assert_eq!(s["failed"], 0);
    assert_eq!(out, ok(&["verify-theory", "--trials", "1000", "--dim", "512", "--seed", "3", "--json"]));

    let text = ok(&["verify-theory", "--trials", "50", "--dim", "2"]);
    assert!(text.contains("passed 50 failed 0"), "{text}");

    let zero = intentrank(&["verify-theory", "--trials", "0"]);
    assert!(!zero.status.success());
    assert!(String::from_utf8_lossy(&zero.stderr).contains("invalid configuration"));
}

fn one_bundle(ds: &Path) -> PathBuf {
    let mut manifests: Vec<_> = fs::read_dir(ds.join("bundles"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    manifests.sort();
    manifests.remove(0)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn trace_columns_follow_the_script() {
    let dir = TempDir::new().unwrap();
    let ds = synth(dir.path());
    let bundle = one_bundle(&ds);
    let queries = ds.join("queries.jsonl");

    let script = dir.path().join("script.jsonl");
    let steps: Vec<Value> = (0..5).map(|i| json!({"kind": "negative", "region_id": i})).collect();
    write_jsonl(&script, &steps);
    let csv = dir.path().join("trace.csv");
    ok(&["trace", "--bundle", p(&bundle), "--queries", p(&queries), "--script", p(&script), "--out", p(&csv)]);
    let rows = csv_rows(&csv);
    assert_eq!(rows[0], ["region_id", "step_0", "step_1", "step_2", "step_3", "step_4", "step_5"]);
    assert_eq!(rows.len(), 31);
    assert!(rows[1..].iter().all(|r| r.len() == 7));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    ok(&["trace", "--bundle", p(&bundle), "--queries", p(&queries), "--script", p(&empty), "--out", p(&csv)]);
    assert_eq!(csv_rows(&csv)[0], ["region_id", "step_0"]);

    ok(&["trace", "--bundle", p(&bundle), "--queries", p(&queries), "--auto-reject", "5", "--out", p(&csv)]);
    assert_eq!(csv_rows(&csv)[0].len(), 7);
}

#[test]
fn raw_trace_matches_turn_zero_cosines() {
    use intentrank_core::data::load_bundle;
    use intentrank_core::vecmath::cosine;

    let dir = TempDir::new().unwrap();
    let ds = synth(dir.path());
    let bundle_path = one_bundle(&ds);
    let csv = dir.path().join("raw.csv");
    let queries = ds.join("queries.jsonl");
    ok(&["trace", "--bundle", p(&bundle_path), "--queries", p(&queries), "--raw", "--out", p(&csv)]);

    let bundle = load_bundle(&bundle_path).unwrap();
    let query = load_queries(&queries)
        .unwrap()
        .into_iter()
        .find(|q| q.image_id == bundle.image_id())
        .unwrap();
    let prompt = query.text_embedding.unwrap();
    for row in &csv_rows(&csv)[1..] {
        let id: u32 = row[0].parse().unwrap();
        let region = bundle.region(id.into()).unwrap();
        let raw: f64 = row[1].parse().unwrap();
        assert!((raw - cosine(&region.embedding, &prompt).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn synth_and_eval_are_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (da, db) = (synth(a.path()), synth(b.path()));
    assert_eq!(files_under(&da), files_under(&db));

    let ra = a.path().join("report.json");
    let rb = b.path().join("report.json");
    let ta = ok(&["eval", "--dataset", p(&da), "--out", p(&ra)]);
    let tb = ok(&["eval", "--dataset", p(&db), "--out", p(&rb)]);
    assert_eq!(ta, tb);
    assert_eq!(fs::read(&ra).unwrap(), fs::read(&rb).unwrap());

    let c = TempDir::new().unwrap();
    let dc = synth_with(c.path(), "12", "6");
    assert_ne!(files_under(&da), files_under(&dc));
}

#[test]
fn synth_refuses_bad_params_and_occupied_dirs() {
    let dir = TempDir::new().unwrap();
    let out = intentrank(&["synth", "--out", p(&dir.path().join("x")), "--scenes", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenes"));

    let ds = synth(dir.path());
    assert!(!intentrank(&["synth", "--out", p(&ds), "--scenes", "1"]).status.success());
}

#[test]
fn eval_improves_over_turns_on_synthetic_scenes() {
    let dir = TempDir::new().unwrap();
    let ds = synth(dir.path());
    let out = dir.path().join("r.json");
    ok(&["eval", "--dataset", p(&ds), "--out", p(&out)]);
    let report: EvalReport = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(report.turn(0).unwrap().ap < report.turn(1).unwrap().ap);
    assert_eq!(report.queries, 12);
    assert!(!report.splits.is_empty());
}

#[test]
fn zero_lambda_without_filtering_freezes_the_ranking() {
    let dir = TempDir::new().unwrap();
    let ds = synth(dir.path());
    let out = dir.path().join("r.json");
    ok(&[
        "eval",
        "--dataset",
        p(&ds),
        "--lambda",
        "0",
        "--exclude-rejected-from-presentation",
        "false",
        "--out",
        p(&out),
    ]);
    let report: EvalReport = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report.turn(0).unwrap().ap, report.turn(1).unwrap().ap);
    assert_eq!(report.turn(1).unwrap().ap, report.turn(2).unwrap().ap);
}

#[test]
fn eval_adds_nothing_to_the_library_calls() {
    let dir = TempDir::new().unwrap();
    let ds = synth_with(dir.path(), "1", "5");
    let args = EvalArgs {
        dataset: Some(ds.clone()),
        bundles: None,
        queries: None,
        splits: None,
        out: None,
        table: None,
        iou_threshold: 0.5,
        session: SessionArgs::default(),
    };
    let via_cli = cmd_eval(&args).unwrap();

    let bundles = load_bundle_dir(ds.join("bundles")).unwrap();
    let queries = load_queries(ds.join("queries.jsonl")).unwrap();
    let splits = intentrank_core::data::read_json(ds.join("splits.json")).unwrap();
    let dataset = pair_dataset(&bundles, &queries).unwrap();
    let direct = evaluate_turn_protocol(&dataset, &SessionConfig::default(), &OracleConfig::default(), Some(&splits))
        .unwrap();
    assert_eq!(via_cli, direct);
}
