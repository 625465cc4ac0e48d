use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn copland(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copland"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parse_prints_the_tree() {
    let o = copland(&["parse", path(&fixture("vc.copland"))]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "{\"k\":\"AT\",\"place\":1,\"body\":{\"k\":\"LSEQ\",\"first\":{\"k\":\"ASP\",\"asp\":0,\"args\":[],\"place\":1,\"target\":7},\"second\":{\"k\":\"SIG\"}}}\n"
    );
}

#[test]
fn annotate_accepts_canonical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("vc.json");
    let o = copland(&["parse", path(&fixture("vc.copland")), "--out", path(&tree)]);
    assert!(o.status.success());
    let from_text = copland(&["annotate", path(&fixture("vc.copland"))]);
    let from_tree = copland(&["annotate", path(&tree)]);
    assert_eq!(stdout(&from_text), stdout(&from_tree));
    assert!(stdout(&from_text).starts_with("{\"k\":\"AT\",\"lo\":0,\"hi\":4,"));
}

#[test]
fn events_lists_ordered_pairs() {
    let o = copland(&["events", path(&fixture("vc.copland"))]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("\n0: REQ 0 -> 1\n"), "{out}");
    assert!(out.ends_with("earlier: 0<1 0<2 0<3 1<2 1<3 2<3\n"), "{out}");
}

#[test]
fn parse_errors_exit_one_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.copland");
    std::fs::write(&bad, "@1 [ SIG -> ]").unwrap();
    let o = copland(&["parse", path(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("1:13: expected"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(copland(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(copland(&["check", "--count", "many"]).status.code(), Some(2));
    assert_eq!(copland(&["demo", "--provider", "quantum"]).status.code(), Some(2));
}

#[test]
fn check_suite_is_green() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = copland(&["check", "--count", "1000", "--depth", "4", "--seed", "7", "--out", path(&report)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).ends_with("PASS\n"));
    let saved = std::fs::read_to_string(&report).unwrap();
    assert!(saved.starts_with("{\"k\":\"SUITE\",\"cases\":1000,"), "{saved}");
    assert!(saved.ends_with("\"failures\":[]}\n"));
}

#[test]
fn run_then_appraise() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let vc = fixture("vc.copland");
    let o = copland(&[
        "run", path(&vc), "--nonce", "--golden", "--provider", "real", "--seed", "11", "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file = |n: &str| out.join(n).to_str().unwrap().to_string();
    let appraise = |evidence: &str, state: Option<&str>| {
        let cfg = file("config.json");
        let mut args = vec!["appraise", path(&vc), "--config", &cfg, "--evidence", evidence];
        if let Some(s) = state {
            args.extend(["--state", s]);
        }
        copland(&args)
    };
    let good = appraise(&file("evidence.json"), Some(&file("state.json")));
    assert!(good.status.success(), "{}", stdout(&good));
    assert!(stdout(&good).starts_with("verdict: PASS\n"));

    let evidence = std::fs::read_to_string(file("evidence.json")).unwrap();
    let at = evidence.find("\"bits\":\"").unwrap() + 8;
    let flipped = if &evidence[at..at + 1] == "0" { "1" } else { "0" };
    let tampered = format!("{}{}{}", &evidence[..at], flipped, &evidence[at + 1..]);
    let bad = dir.path().join("tampered.json");
    std::fs::write(&bad, tampered).unwrap();
    let o = appraise(path(&bad), Some(&file("state.json")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("fail signature         $ "), "{}", stdout(&o));

    let replay = appraise(&file("evidence.json"), None);
    assert_eq!(replay.status.code(), Some(1));
    assert!(stdout(&replay).contains("fail nonce"));
}

#[test]
fn run_uses_configured_asp_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"k":"AMCONFIG","place":0,"places":[{"k":"PLACE","id":0,"mode":"abstract","seed":0}],"asps":[{"k":"ASP","name":"vc","id":4}],"golden":[]}"#,
    )
    .unwrap();
    let o = copland(&["run", path(&fixture("vc.copland")), "--config", path(&cfg)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("\"asp\":4"), "configured ASP ids are used");
}

#[test]
fn parallel_runs_follow_the_seed() {
    let par = fixture("par.copland");
    let trace = |seed: &str| stdout(&copland(&["run", path(&par), "--seed", seed]));
    assert_eq!(trace("5"), trace("5"));
    let distinct: std::collections::BTreeSet<String> = (0..12).map(|s| trace(&s.to_string())).collect();
    assert!(distinct.len() > 1);
}

#[test]
fn demo_output_is_stable() {
    let o = copland(&["demo"]);
    assert!(o.status.success());
    let golden = std::fs::read_to_string(fixture("demo.txt")).unwrap();
    assert_eq!(stdout(&o), golden);
    let real = copland(&["demo", "--provider", "real", "--seed", "2"]);
    assert!(real.status.success());
    assert!(stdout(&real).ends_with("== result\nPASS\n"));
}
