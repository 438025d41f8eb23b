// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    sim_env(args, None)
}

fn sim_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fasco-sim"));
    cmd.args(args).env_remove("FASCO_SEED");
    if let Some(s) = seed {
        cmd.env("FASCO_SEED", s);
    }
    cmd.output().expect("spawn fasco-sim")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fasco-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn clean_run_succeeds_and_mutated_run_fails() {
    assert_eq!(sim(&["run", "echo"]).status.code(), Some(0));
    assert_eq!(
        sim(&["run", "echo", "--mutate", "skip-wipe"]).status.code(),
        Some(1)
    );
    assert_eq!(sim(&["run", "no-such-scenario"]).status.code(), Some(2));
    assert_eq!(
        sim(&["run", "echo", "--mutate", "bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn trace_files_are_identical_across_processes() {
    let a = scratch("a.trace");
    let b = scratch("b.trace");
    for p in [&a, &b] {
        let o = sim(&[
            "run",
            "files",
            "--seed",
            "42",
            "--trace",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn seed_variable_overrides_flag() {
    let base = stdout(&sim(&["run", "echo", "--seed", "5"]));
    let env = sim_env(&["run", "echo", "--seed", "5"], Some("6"));
    assert!(env.status.success());
    assert_ne!(stdout(&env), base);
    assert_eq!(stdout(&sim(&["run", "echo", "--seed", "6"])), stdout(&env));
    assert_eq!(sim_env(&["run", "echo"], Some("x")).status.code(), Some(2));
}

#[test]
fn lifecycle_bounds() {
    let ok = sim(&["lifecycle", "--containers", "4"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("containers=4"));
    assert!(stdout(&ok).contains("uniform=true"));
    for n in ["0", "17"] {
        assert!(!sim(&["lifecycle", "--containers", n]).status.success());
    }
}

#[test]
fn suite_reports_expected_failures() {
    let o = sim(&["suite", "--quick", "--mutate", "skip-wipe"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("FAIL TEMPORAL-ISOLATION"));
    assert!(out.contains("as expected"));
    assert_eq!(
        stdout(&sim(&["suite", "--quick", "--mutate", "skip-wipe"])),
        out
    );
}

#[test]
fn dump_list_and_show() {
    let d = sim(&["dump-rtt", "1"]);
    assert!(d.status.success());
    assert!(stdout(&d).contains("assigned"));
    assert!(!sim(&["dump-rtt", "99"]).status.success());
    let l = stdout(&sim(&["list"]));
    assert!(l.contains("scenario echo") && l.contains("mutation skip-seal"));
    let json = scratch("shown.json");
    std::fs::write(&json, stdout(&sim(&["show", "channels"]))).unwrap();
    assert!(sim(&["run", json.to_str().unwrap()]).status.success());
}
