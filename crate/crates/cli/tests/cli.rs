use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use axum::body::Body;
use axum::http::{header, Method, Request};
use chrono::{DateTime, Utc};
use http_body_util::BodyExt;
use tower::ServiceExt;

use pwm_core::engine::{Engine, EngineOptions};
use pwm_core::library::Library;
use pwm_core::model::{Origin, Prompt};
use pwm_service::{router, AppState};

const SEED: &str = "99";
const NOW: &str = "2025-06-01T08:00:00Z";

fn pwm(dir: &Path, args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_pwm"))
        .args(args)
        .current_dir(dir)
        .env("HOME", dir)
        .env("PWM_SEED", SEED)
        .env("PWM_NOW", NOW)
        .env("PWM_OFFLINE", "1")
        .env_remove("PWM_LIBRARY")
        .env_remove("PWM_LLM_STUB")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_library(dir: &Path, texts: &[&str]) {
    let mut lib = Library::default();
    let t0: DateTime<Utc> = "2025-01-01T00:00:00Z".parse().unwrap();
    for (i, text) in texts.iter().enumerate() {
        let p = Prompt::new(format!("p{i}"), text.to_string(), Origin::Manual, t0 + chrono::Duration::seconds(i as i64));
        lib.prompts.insert(p.id.clone(), p);
    }
    lib.save(&dir.join("pwm-library.json")).unwrap();
}

#[test]
fn kappa_on_full_agreement() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("fixture.csv"),
        "item_id,a,b,c\n1,yes,yes,yes\n2,no,no,no\n3,yes,yes,yes\n4,no,no,no\n",
    )
    .unwrap();
    let out = ok(&pwm(dir.path(), &["agreement", "kappa", "fixture.csv"], None));
    assert!(out.contains("1.0000"), "{out}");
    assert!(out.contains("AlmostPerfect"), "{out}");
}

#[test]
fn dedup_removes_one_of_an_identical_pair() {
    let dir = tempfile::tempdir().unwrap();
    write_library(dir.path(), &["Summarize this pull request", "Summarize this pull request", "Write tests for the parser"]);
    let out = ok(&pwm(dir.path(), &["library", "dedup"], None));
    assert!(out.starts_with("1 removed"), "{out}");
    let lib = Library::load(&dir.path().join("pwm-library.json")).unwrap();
    assert_eq!(lib.prompts.keys().collect::<Vec<_>>(), ["p0", "p2"]);
}

#[test]
fn interactive_optimize_accepting_everything() {
    let dir = tempfile::tempdir().unwrap();
    write_library(dir.path(), &["Please fix teh bug and email bob@example.com"]);
    ok(&pwm(dir.path(), &["prompt", "optimize", "p0"], Some("a\na\na\na\n")));
    let lib = Library::load(&dir.path().join("pwm-library.json")).unwrap();
    assert_eq!(lib.prompts["p0"].text, "Please fix the bug and email [REDACTED]");
}

#[test]
fn interactive_optimize_without_answers_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    write_library(dir.path(), &["Please fix teh bug and email bob@example.com"]);
    ok(&pwm(dir.path(), &["prompt", "optimize", "p0"], None));
    let lib = Library::load(&dir.path().join("pwm-library.json")).unwrap();
    assert_eq!(lib.prompts["p0"].text, "Please fix teh bug and email bob@example.com");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_library(dir.path(), &["Write tests for the parser"]);
    let missing = pwm(dir.path(), &["prompt", "show", "nope"], None);
    assert_eq!(missing.status.code(), Some(1));
    let usage = pwm(dir.path(), &["prompt", "frobnicate"], None);
    assert_eq!(usage.status.code(), Some(2));
}

/// The same operation on the same library state, once through the binary
/// in json mode and once through the HTTP router.
fn service_body(dir: &Path, method: Method, uri: &str, body: Option<serde_json::Value>) -> String {
    let options = EngineOptions::default().with_seed(SEED.parse().unwrap()).with_now(NOW.parse().unwrap());
    let engine = Engine::open(&dir.join("pwm-library.json"), options).unwrap();
    let app = router(AppState::new(engine));
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let resp = app.oneshot(req.body(body).unwrap()).await.unwrap();
        String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap()
    })
}

#[test]
fn json_output_matches_service_bodies() {
    let texts = [
        "Write a Python function that parses a CSV file and returns a list of dictionaries.",
        "Write a Rust function that parses a JSON file and returns a list of records.",
        "Please fix teh bug and email bob@example.com",
    ];
    let cases: Vec<(Vec<&str>, Method, &str, Option<serde_json::Value>)> = vec![
        (
            vec!["prompt", "add", "Review this diff for teh obvious bugs"],
            Method::POST,
            "/api/prompts",
            Some(serde_json::json!({"text": "Review this diff for teh obvious bugs"})),
        ),
        (vec!["prompt", "list"], Method::GET, "/api/prompts", None),
        (vec!["prompt", "show", "p2"], Method::GET, "/api/prompts/p2", None),
        (vec!["prompt", "show", "nope"], Method::GET, "/api/prompts/nope", None),
        (vec!["prompt", "similar", "p0"], Method::GET, "/api/prompts/p0/similar", None),
        (vec!["prompt", "optimize", "p2", "--list"], Method::POST, "/api/prompts/p2/optimize", None),
        (
            vec!["template", "extract", "p0"],
            Method::POST,
            "/api/templates/extract",
            Some(serde_json::json!({"prompt_id": "p0"})),
        ),
        (vec!["library", "summary"], Method::GET, "/api/library/summary", None),
        (vec!["library", "dedup"], Method::POST, "/api/library/dedup", None),
    ];
    for (args, method, uri, body) in cases {
        let dir = tempfile::tempdir().unwrap();
        write_library(dir.path(), &texts);
        let mut full = vec!["--format", "json"];
        full.extend(&args);
        let out = pwm(dir.path(), &full, None);
        let cli = String::from_utf8(out.stdout).unwrap();

        let fresh = tempfile::tempdir().unwrap();
        write_library(fresh.path(), &texts);
        let service = service_body(fresh.path(), method, uri, body);
        assert_eq!(cli.trim_end_matches('\n'), service, "pwm {}", args.join(" "));
    }
}
