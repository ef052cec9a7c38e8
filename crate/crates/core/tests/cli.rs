use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mdrl::harness::ExperimentConfig;

const BIN: &str = env!("CARGO_BIN_EXE_mdrl");

fn small_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig {
        algos: vec!["dr".into(), "emdrl".into(), "cmdsac".into()],
        seeds: vec![0, 1],
        trials: 4,
        osi_episodes: 4,
        ..Default::default()
    };
    c.train.total_steps = 1500;
    c.train.warmup = 200;
    c.osi.transitions = 200;
    let path = dir.join("small.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run(args: &[&str], config: &Path, out: &Path) -> Vec<u8> {
    let o = Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cases: Vec<(&str, Vec<&str>, bool)> = vec![
        ("solve", vec!["solve", "--algo", "umdrl2"], false),
        ("train", vec!["train", "--algo", "sirsa", "--seed", "3"], false),
        ("eval-ccs", vec!["eval-ccs"], false),
        ("eval-osi", vec!["eval-osi", "--algo", "cmdrl"], false),
        ("sigma", vec!["sigma-points", "--dim", "2", "--order", "2"], true),
        ("oracle", vec!["oracle"], false),
        ("env", vec!["env", "export"], true),
        ("config", vec!["config"], true),
    ];
    for (name, args, single_file) in cases {
        let mut snaps = Vec::new();
        for k in 0..2 {
            let out = tmp.path().join(format!("{name}{k}"));
            let target = if single_file { out.join("out.txt") } else { out.clone() };
            let stdout = run(&args, &cfg, &target);
            snaps.push((snapshot(&out), stdout));
        }
        assert!(!snaps[0].0.is_empty(), "{name} wrote nothing");
        assert_eq!(snaps[0], snaps[1], "{name}");
        for bytes in snaps[0].0.values() {
            assert!(!bytes.contains(&b'\r'), "{name}");
        }
    }
}

#[test]
fn exported_mdp_solves_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mdp = tmp.path().join("mdp.toml");
    run(&["env", "export"], &cfg, &mdp);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&["solve", "--algo", "cmdrl", "--mdp", mdp.to_str().unwrap()], &cfg, &a);
    run(&["solve", "--algo", "cmdrl"], &cfg, &b);
    assert_eq!(snapshot(&a), snapshot(&b));
    let policy = fs::read_to_string(a.join("policy.csv")).unwrap();
    assert_eq!(policy.lines().next(), Some("cell,state,action,prob"));
}

#[test]
fn bad_input_exits_with_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = Command::new(BIN)
        .args(["solve", "--algo", "nope", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seeds = [1, 1]\n").unwrap();
    let o = Command::new(BIN).args(["config", "--config"]).arg(&bad).output().unwrap();
    assert!(!o.status.success());
}
