use std::path::Path;
use std::process::{Command, Output};

fn comeir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comeir")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = "items=60\nusers=40\nclusters=3\nsub_clusters=2\nsynth_feature_dim=6\nmin_len=3\nmax_seq_len=6\n\
codebook_size=4\nhidden=16\ntoken_dim=8\naddr_dim=8\nenc_layers=1\nenc_heads=2\nffn=32\nmax_len=16\nh_max=211\n\
steps=4\nbatch=4\neval_every=2\neval_users=10\nbeam=5\n";

#[test]
fn help_on_every_subcommand_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth", "quantize", "train", "eval", "scaling-report", "latency"] {
        let o = comeir(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(code(&comeir(dir.path(), &["--help"])), 0);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&comeir(dir.path(), &["--variant", "bert", "synth"])), 2);
    assert_eq!(code(&comeir(dir.path(), &["--quantizer", "pq", "synth"])), 2);
    assert_eq!(code(&comeir(dir.path(), &["--ablate", "no-such-flag", "synth"])), 2);
    assert_eq!(code(&comeir(dir.path(), &["synth", "--bogus"])), 2);
    assert_eq!(code(&comeir(dir.path(), &["fly"])), 2);
    assert_eq!(code(&comeir(dir.path(), &[])), 2);
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = comeir(dir.path(), &["quantize", "--data", "missing"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("items.tsv"));
    std::fs::write(dir.path().join("bad.cfg"), "no_such_key=1\n").unwrap();
    assert_eq!(code(&comeir(dir.path(), &["--config", "bad.cfg", "synth"])), 1);
    assert_eq!(code(&comeir(dir.path(), &["scaling-report", "--grid", ""])), 2);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.cfg"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "tiny.cfg", "--seed", "5"];
        all.extend_from_slice(args);
        let o = comeir(p, &all);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth", "--data", "d"]);
    let items = std::fs::read_to_string(p.join("d/items.tsv")).unwrap();
    assert!(items.starts_with("#comeir-items v1"));
    run(&["synth", "--data", "d2"]);
    assert_eq!(items, std::fs::read_to_string(p.join("d2/items.tsv")).unwrap());

    run(&["quantize", "--data", "d"]);
    let sids = std::fs::read_to_string(p.join("d/sids.tsv")).unwrap();
    assert_eq!(sids.lines().filter(|l| !l.starts_with('#')).count(), 60);
    assert!(p.join("d/collisions.tsv").exists());

    run(&["--variant", "nezha", "train", "--data", "d", "--checkpoint", "m.ckpt", "--log", "log.csv"]);
    let log = std::fs::read_to_string(p.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,H@5,H@10,N@5,N@10,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("4,") && lines[2].ends_with(",5"));

    let o = run(&["eval", "--data", "d", "--checkpoint", "m.ckpt"]);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("user_id,target_item,rank\n"));
    assert_eq!(csv.lines().count(), 1 + 10 + 1);
    assert!(csv.lines().last().unwrap().starts_with("summary,"));

    let o = run(&["latency", "--data", "d", "--batch", "4", "--beam", "3", "--batches", "2", "--warmup", "0"]);
    let lat = String::from_utf8(o.stdout).unwrap();
    assert!(lat.lines().last().unwrap().starts_with("ratio,3,,,,3.000,"));

    let o = run(&["scaling-report", "--kind", "intra"]);
    let rep = String::from_utf8(o.stdout).unwrap();
    assert!(rep.starts_with("scale,kind,level,order,head,base,target,prime,buckets,params_total\n"));
    let o = run(&["scaling-report", "--kind", "inter", "--grid", "0.5,1", "--train", "--data", "d"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);
}

#[test]
fn eval_rejects_a_checkpoint_from_other_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.cfg"), TINY).unwrap();
    let ok = |args: &[&str]| assert_eq!(code(&comeir(p, args)), 0, "{args:?}");
    ok(&["--config", "tiny.cfg", "synth", "--data", "d"]);
    ok(&["--config", "tiny.cfg", "quantize", "--data", "d"]);
    ok(&["--config", "tiny.cfg", "train", "--data", "d", "--checkpoint", "m.ckpt", "--log", "l.csv"]);
    std::fs::write(p.join("wide.cfg"), TINY.replace("synth_feature_dim=6", "synth_feature_dim=5")).unwrap();
    ok(&["--config", "wide.cfg", "synth", "--data", "e"]);
    ok(&["--config", "wide.cfg", "quantize", "--data", "e"]);
    assert_eq!(code(&comeir(p, &["--config", "tiny.cfg", "eval", "--data", "e", "--checkpoint", "m.ckpt"])), 1);
}
