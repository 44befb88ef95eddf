use std::fs;
use std::process::{Command, Output};

fn clora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clora"))
        .args(args)
        .env_remove("CLORA_OUT")
        .output()
        .expect("spawn clora")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> String {
    stderr(o).lines().last().unwrap_or("").to_string()
}

const QUICK_TRAIN: [&str; 10] = [
    "--train-size",
    "48",
    "--epochs",
    "2",
    "--d",
    "16",
    "--L",
    "2",
    "--n",
    "4",
];

#[test]
fn count_params_vit_base() {
    let o = clora(&[
        "count-params",
        "--d",
        "768",
        "--r",
        "8",
        "--m",
        "24",
        "--p",
        "4",
        "--variant",
        "clora",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "55296");
    let lora = clora(&[
        "count-params",
        "--d",
        "768",
        "--r",
        "8",
        "--m",
        "24",
        "--p",
        "4",
        "--variant",
        "lora",
        "--c",
        "10",
    ]);
    assert_eq!(stdout(&lora).trim(), (2 * 768 * 8 * 24 + 10).to_string());
}

#[test]
fn complexity_report_prints_reduction() {
    let o = clora(&["complexity-report", "--backbone", "vit-base", "--b", "4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("51.3%"), "{}", stdout(&o));

    let csv = clora(&["complexity-report", "--format", "csv"]);
    let text = stdout(&csv);
    assert!(text.starts_with("backbone,d,n,threshold,b,reduction_percent\n"));
    assert_eq!(text.lines().count(), 1 + 18);
    assert!(text.contains("ViT-Large,1024,196,2.60,2,-"));
}

#[test]
fn verify_merge_passes() {
    let o = clora(&["verify-merge", "--seed", "7", "--d", "32", "--L", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for line in out.lines() {
        let err: f64 = line
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix("max_rel_err="))
            .unwrap()
            .parse()
            .unwrap();
        assert!(err < 1e-8, "{line}");
        assert!(line.contains("flops_equal=true"));
    }
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn failed_verification_has_its_own_exit_code() {
    let o = clora(&["verify-merge", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(error_line(&o).starts_with("error: kind=verification msg="));
}

#[test]
fn grad_check_and_rank_audit_pass() {
    let g = clora(&["grad-check"]);
    assert!(g.status.success(), "{}", stderr(&g));
    assert!(stdout(&g).starts_with("checked=80 "));

    let r = clora(&["rank-audit", "--variant", "clora", "--trials", "3"]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(stdout(&r).lines().count(), 3);
    assert!(stdout(&r).lines().all(|l| l.contains("at_bound=true")));
}

#[test]
fn usage_and_config_errors_are_machine_readable() {
    let o = clora(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error: kind=usage msg="));

    let o = clora(&[
        "count-params",
        "--d",
        "8",
        "--r",
        "8",
        "--m",
        "2",
        "--p",
        "1",
        "--variant",
        "clora",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        error_line(&o).starts_with("error: kind=config msg="),
        "{}",
        stderr(&o)
    );

    let o = clora(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        error_line(&o).starts_with("error: kind=io msg="),
        "{}",
        stderr(&o)
    );

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "alpha=1\nwhat=2\n").unwrap();
    let o = clora(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("what"));
}

#[test]
fn train_csv_is_deterministic() {
    let mut args = vec!["train", "--seed", "5"];
    args.extend(QUICK_TRAIN);
    let a = clora(&args);
    let b = clora(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    assert!(out.contains("epoch,train_loss,val_acc,rsr_sum,lr\n1,"));
    assert!(out.contains("unchanged=true"));

    args[2] = "6";
    assert_ne!(clora(&args).stdout, a.stdout);
}

#[test]
fn train_writes_artifacts_to_out_dir_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let flag_dir = dir.path().join("flag");
    let mut args = vec!["train", "--out", flag_dir.to_str().unwrap()];
    args.extend(QUICK_TRAIN);
    let o = clora(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(flag_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let env_dir = dir.path().join("env");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clora"));
    cmd.arg("train")
        .args(QUICK_TRAIN)
        .env("CLORA_OUT", &env_dir);
    let o = cmd.output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(env_dir.join("history.csv")).unwrap(),
        history.as_bytes()
    );

    let model = flag_dir.join("model.clora");
    let inspect = clora(&["checkpoint", "inspect", model.to_str().unwrap()]);
    assert!(inspect.status.success(), "{}", stderr(&inspect));
    assert!(stdout(&inspect).contains("vit/embed\t12x16"));
    assert!(stdout(&inspect).contains("adapter/attach\t1x3"));

    let rt = clora(&["checkpoint", "roundtrip", model.to_str().unwrap()]);
    assert!(stdout(&rt).contains("bit_exact=true"), "{}", stdout(&rt));
}

#[test]
fn checkpoint_roundtrip_of_random_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = clora(&[
        "checkpoint",
        "roundtrip",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("bit_exact=true"));
    assert!(dir.path().join("roundtrip.clora").exists());
}

#[test]
fn complexity_csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let a = clora(&["complexity-report", "--format", "csv", "--out", d]);
    let first = fs::read(dir.path().join("complexity.csv")).unwrap();
    let b = clora(&["complexity-report", "--format", "csv", "--out", d]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(first, fs::read(dir.path().join("complexity.csv")).unwrap());
}
