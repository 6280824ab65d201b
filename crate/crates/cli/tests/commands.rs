use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn posterpanel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posterpanel")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scripted(case: &str) -> String {
    format!("scripted:{}", fixtures().join(case).join("scripted").display())
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cafe = fixtures().join("cafe");
    let (brief, draft) = (cafe.join("brief.txt"), cafe.join("draft.json"));
    let out = tmp.path().join("run");

    assert_eq!(code(&posterpanel(&[])), 2);
    assert_eq!(code(&posterpanel(&["frobnicate"])), 2);
    assert_eq!(code(&posterpanel(&["run", s(&brief)])), 2);
    assert_eq!(code(&posterpanel(&["run", "missing.txt", s(&draft), "--out", s(&out)])), 2);
    assert_eq!(code(&posterpanel(&["run", s(&brief), s(&brief), "--out", s(&out)])), 2, "brief is not a canvas");
    assert_eq!(code(&posterpanel(&["run", s(&brief), s(&draft), "--backend", "nonsense", "--out", s(&out)])), 2);

    // an empty script directory cannot answer the first request
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let backend = format!("scripted:{}", empty.display());
    let failed = posterpanel(&["run", s(&brief), s(&draft), "--backend", &backend, "--out", s(&out)]);
    assert_eq!(code(&failed), 1, "{}", String::from_utf8_lossy(&failed.stderr));

    let ok = posterpanel(&["run", s(&brief), s(&draft), "--backend", &scripted("cafe"), "--out", s(&out)]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(code(&posterpanel(&["apply", s(&out), "p9.nothing", "--out", s(&tmp.path().join("x.json"))])), 2);
    assert_eq!(code(&posterpanel(&["apply", s(&out), "p1.THEME", "--out", s(&tmp.path().join("x.json"))])), 2);
}

#[test]
fn ingest_then_query() {
    let tmp = tempfile::tempdir().unwrap();
    let index = tmp.path().join("index.json");
    let ingest = posterpanel(&["ingest-templates", s(&fixtures().join("templates-mini")), "--out", s(&index)]);
    assert_eq!(code(&ingest), 0, "{}", String::from_utf8_lossy(&ingest.stderr));
    assert!(String::from_utf8(ingest.stdout).unwrap().starts_with("3 templates"));

    let query = |k: &str| posterpanel(&["query-themes", "--tone", "calm", "--color", "green", "-k", k, "--index", s(&index)]);
    let one = query("1");
    assert_eq!(code(&one), 0);
    assert_eq!(String::from_utf8(one.stdout).unwrap().lines().count(), 1);
    let all = String::from_utf8(query("10").stdout).unwrap();
    let ids: Vec<&str> = all.lines().collect();
    assert_eq!(ids.len(), 3);
    assert_eq!(String::from_utf8(query("1").stdout).unwrap().trim(), ids[0], "query is deterministic");
    assert_eq!(code(&query("0")), 2);
}

#[test]
fn apply_text_ref_changes_one_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cafe = fixtures().join("cafe");
    let run = cafe.join("golden");
    let out = tmp.path().join("applied.json");
    let listing = || std::fs::read_dir(run.join("assets")).unwrap().count();
    let assets_before = listing();
    let applied = posterpanel(&["apply", s(&run), "p3.title", "--backend", &scripted("cafe"), "--out", s(&out)]);
    assert_eq!(code(&applied), 0, "{}", String::from_utf8_lossy(&applied.stderr));
    let summary: Value = serde_json::from_slice(&applied.stdout).unwrap();
    assert_eq!(summary["target"], "title");

    let before: Value = serde_json::from_str(&std::fs::read_to_string(run.join("draft.json")).unwrap()).unwrap();
    let after: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let (b, a) = (before["children"].as_array().unwrap(), after["children"].as_array().unwrap());
    assert_eq!(b.len(), a.len());
    for (x, y) in b.iter().zip(a) {
        if x["id"] == "title" {
            assert_ne!(x["text"], y["text"]);
            let mut x = x.clone();
            x["text"] = y["text"].clone();
            assert_eq!(&x, y);
        } else {
            assert_eq!(x, y);
        }
    }
    assert_eq!(listing(), assets_before, "run directory untouched");
}
