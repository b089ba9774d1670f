use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
config_version = 1
seed = 11
rounds = 4
eval_every = 2
phi_snapshot_every = 2

[dataset]
classes = 3
dim = 6
n = 300
spread = 0.5

[partition]
scheme = "dirichlet_label"
shards = 4
alpha = 0.5

[training]
algorithm = "fedmix"
experts = 2
hidden = [8]
beta_entropy = 1.0
gamma = 0.75
clients_per_round = 3
local_epochs = 1
batch_size = 16
lr_client = 0.05
lr_server = 0.01
side_info = "label"

[eval]
finetune_epochs = 0
"#;

fn fedmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmix")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn with(text: &str, key: &str, value: &str) -> String {
    let prefix = format!("{key} = ");
    let mut hit = false;
    let out: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with(&prefix) {
                hit = true;
                format!("{key} = {value}")
            } else {
                l.to_string()
            }
        })
        .collect();
    assert!(hit, "no key {key}");
    out.join("\n")
}

fn run_ok(config: &Path, out: &Path, jobs: &str) -> Output {
    let o = fedmix(&["run", "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap(), "--jobs", jobs]);
    assert!(o.status.success(), "run failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(files(&p));
        } else {
            v.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    v.sort();
    v
}

fn field(line: &str, name: &str) -> f64 {
    let mut it = line.split_whitespace();
    while let Some(t) = it.next() {
        if t == name {
            return it.next().unwrap().parse().unwrap();
        }
    }
    panic!("{name} missing in {line:?}");
}

#[test]
fn single_round_single_client_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = with(BASE, "rounds", "1");
    text = with(&text, "shards", "1");
    text = with(&text, "clients_per_round", "1");
    text = with(&text, "experts", "1");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    run_ok(&cfg, &out, "1");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("round,algo,K,"));
    assert!(lines[1].starts_with("1,fedmix,1,"));
    assert!(out.join("checkpoint/manifest.toml").exists());
    assert!(out.join("checkpoint/expert_0.fmx").exists());
}

#[test]
fn outputs_are_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    run_ok(&cfg, &a, "1");
    run_ok(&cfg, &b, "1");
    run_ok(&cfg, &c, "3");
    let fa = files(&a);
    assert!(fa.iter().any(|(p, _)| p.ends_with("phi_snapshots.csv")));
    assert_eq!(fa, files(&b));
    assert_eq!(fa, files(&c));
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let text: String = BASE.lines().filter(|l| !l.starts_with("rounds")).collect::<Vec<_>>().join("\n");
    let cfg = write_config(tmp.path(), &text);
    let o = fedmix(&["run", "--config", cfg.to_str().unwrap(), "--output", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rounds"));
}

#[test]
fn invalid_value_and_version_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for (key, value, name) in [("gamma", "1.5", "training.gamma"), ("config_version", "9", "config_version")] {
        let cfg = write_config(tmp.path(), &with(BASE, key, value));
        let o = fedmix(&["run", "--config", cfg.to_str().unwrap(), "--output", tmp.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains(name));
    }
}

#[test]
fn divergence_exits_3_with_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &with(&with(BASE, "lr_client", "1e300"), "spread", "1e150"));
    let o = fedmix(&["run", "--config", cfg.to_str().unwrap(), "--output", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("round 0"));
}

#[test]
fn eval_reproduces_final_metrics_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = tmp.path().join("out");
    run_ok(&cfg, &out, "1");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    let (local, global): (f64, f64) = (last[3].parse().unwrap(), last[4].parse().unwrap());
    let ck = out.join("checkpoint");
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--config", cfg.to_str().unwrap()];
    let plain = fedmix(&args);
    assert!(plain.status.success(), "{}", String::from_utf8_lossy(&plain.stderr));
    let line = String::from_utf8_lossy(&plain.stdout).lines().next().unwrap().to_string();
    assert!((field(&line, "local_acc") - local).abs() < 1e-12);
    assert!((field(&line, "global_acc") - global).abs() < 1e-12);
    assert_eq!(field(&line, "round"), 4.0);

    let mut zero = args.to_vec();
    zero.extend(["--finetune-epochs", "0"]);
    assert_eq!(fedmix(&zero).stdout, plain.stdout);

    let mut tuned = args.to_vec();
    let eval_dir = tmp.path().join("eval");
    tuned.extend(["--finetune-epochs", "2", "--new-client", "1", "--output", eval_dir.to_str().unwrap()]);
    let o = fedmix(&tuned);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    let acc = field(text.lines().nth(1).unwrap(), "new_client_acc");
    assert!((0.0..=1.0).contains(&acc));
    let csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn eval_rejects_mismatched_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = tmp.path().join("out");
    run_ok(&cfg, &out, "1");
    let other = tmp.path().join("other.toml");
    fs::write(&other, with(BASE, "hidden", "[5]")).unwrap();
    let ck = out.join("checkpoint");
    let o = fedmix(&["eval", "--checkpoint", ck.to_str().unwrap(), "--config", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn privacy_audit_writes_rows_and_single_step_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &with(BASE, "batch_size", "8"));
    let out = tmp.path().join("audit");
    let o = fedmix(&["audit-privacy", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    let single = field(stdout.lines().next().unwrap(), "mean_l1");
    let multi = field(stdout.lines().nth(1).unwrap(), "mean_l1");
    assert!(single < 1e-9);
    // Several mini-batch steps blur the reconstruction.
    assert!(multi > single);
    let csv = fs::read_to_string(out.join("privacy_audit.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "shard,class,true_p,recon_p,mode");
    // 4 shards x 3 classes x 2 modes.
    assert_eq!(csv.lines().count(), 1 + 4 * 3 * 2);
}

#[test]
fn partition_dumps_every_example() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &with(BASE, "scheme", "\"label_permutation\""));
    let out = tmp.path().join("p");
    let o = fedmix(&["partition", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let shards = fs::read_to_string(out.join("shards.csv")).unwrap();
    assert_eq!(shards.lines().count(), 1 + 300);
    let gt = fs::read_to_string(out.join("ground_truth.csv")).unwrap();
    assert_eq!(gt.lines().count(), 1 + 4);
}
