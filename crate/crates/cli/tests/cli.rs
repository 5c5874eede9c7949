use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn subln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subln"))
        .args(args)
        .env_remove("SUBLN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn gamma_encoder_only_12() {
    let o = subln(&["gamma", "--family", "encoder-only", "--n", "12"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("gamma_encoder=1.782709"), "{s}");
    assert!(s.contains("scaled=ffn-in,ffn-out,value,output"), "{s}");
    assert!(!s.contains("gamma_decoder"));
}

#[test]
fn gamma_encoder_decoder_and_bad_counts() {
    let s = stdout(&subln(&["gamma", "--family", "encoder-decoder", "--n", "18", "--m", "18"]));
    assert!(s.contains("gamma_encoder=2.182857"), "{s}");
    assert!(s.contains("gamma_decoder=1.997244"), "{s}");
    let s = stdout(&subln(&["gamma", "--family", "enc-dec", "--n", "18", "--m", "18"]));
    assert!(s.contains("gamma_encoder=2.182857"), "{s}");
    let s = stdout(&subln(&["gamma", "--family", "decoder-only", "--m", "1"]));
    assert!(s.contains("gamma_decoder=0.832554"), "{s}");
    assert_eq!(subln(&["gamma", "--family", "decoder-only", "--n", "3", "--m", "3"]).status.code(), Some(2));
    assert_eq!(subln(&["gamma", "--family", "encoder-only"]).status.code(), Some(2));
    assert_eq!(subln(&["gamma", "--family", "sideways"]).status.code(), Some(2));
}

#[test]
fn bounds_prints_csv_with_header() {
    let o = subln(&["bounds", "--L", "2", "--variant", "preln", "--gamma", "unit"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    let lines: Vec<&str> = s.lines().collect();
    assert!(lines[0].starts_with("# {"));
    assert_eq!(lines[1], "variant,L,eta,d,term1,term2,coupling,total");
    assert_eq!(lines[2], "preln,2,1,1,2,2,0,4");
}

#[test]
fn bounds_errors_and_encoder_decoder_row() {
    assert_eq!(subln(&["bounds", "--L", "1"]).status.code(), Some(2));
    assert_eq!(subln(&["bounds", "--L", "4", "--eta", "-1"]).status.code(), Some(2));
    let o = subln(&["bounds", "--family", "encoder-decoder", "--n", "1", "--m", "1", "--gamma", "unit"]);
    assert_eq!(o.status.code(), Some(0));
    let row = stdout(&o).lines().last().unwrap().to_string();
    let total: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((total - 25.0 / 3.0).abs() < 1e-12, "{row}");
}

#[test]
fn gradcheck_passes() {
    let o = subln(&["gradcheck", "--variant", "postln", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS max_rel_err="));
    let o = subln(&["gradcheck", "--family", "enc-dec", "--n", "1", "--m", "1", "--d", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS max_rel_err="));
    let o = subln(&["gradcheck", "--d", "6", "--heads", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"command": "bounds", "L": [4], "variant": "preln", "gamma": "unit", "eta": 0.5}"#).unwrap();
    let s = stdout(&subln(&["--config", cfg.to_str().unwrap(), "bounds", "--eta", "1"]));
    assert!(s.lines().any(|l| l.starts_with("preln,4,1,1,")), "{s}");
    let header = s.lines().next().unwrap();
    assert!(header.contains(r#""eta":1.0"#), "{header}");
}

#[test]
fn unknown_key_and_command_mismatch_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"L": [4], "learning_rate": 1}"#).unwrap();
    let o = subln(&["--config", cfg.to_str().unwrap(), "bounds"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    fs::write(&cfg, r#"{"command": "gamma"}"#).unwrap();
    assert_eq!(subln(&["--config", cfg.to_str().unwrap(), "bounds", "--L", "4"]).status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_subln"));
        c.args(["bounds", "--L", "4"]).args(extra).env_remove("SUBLN_SEED");
        if let Some(v) = env {
            c.env("SUBLN_SEED", v);
        }
        stdout(&c.output().unwrap()).lines().next().unwrap().to_string()
    };
    assert!(run(Some("77"), &[]).contains(r#""seed":77"#));
    assert!(run(Some("77"), &["--seed", "3"]).contains(r#""seed":3"#));
    assert!(!run(None, &[]).contains("seed"));
}

fn sweep_depth_into(dir: &Path, jobs: &str) -> Output {
    subln(&[
        "sweep-depth", "--L", "2,4", "--d", "8", "--n-seeds", "3", "--out", dir.to_str().unwrap(), "--jobs", jobs,
    ])
}

#[test]
fn sweep_depth_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(sweep_depth_into(a.path(), "1").status.code(), Some(0));
    assert_eq!(sweep_depth_into(b.path(), "2").status.code(), Some(0));
    for f in ["depth_sweep.csv", "depth_sweep.svg"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert!(!x.is_empty());
    }
    let csv = fs::read_to_string(a.path().join("depth_sweep.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("variant,init,L,eta,d,seed,delta_f,diverged,bound"));
    assert_eq!(csv.lines().count(), 2 + 2 * 2 * 3);
}

#[test]
fn train_toy_writes_checkpoint_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["train-toy", "--steps", "5", "--d", "8", "--layers", "1", "--out", out];
    assert_eq!(subln(&args).status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("train_loss.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("variant,init,task,eta,step,loss,diverged"));
    assert_eq!(csv.lines().count(), 2 + 5);
    let ckpt = fs::read(dir.path().join("model.ckpt")).unwrap();
    let model = subln_core::TransformerModel::from_checkpoint_bytes(&ckpt).unwrap();
    assert_eq!(model.config().d, 8);

    assert_eq!(subln(&args).status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn help_lists_commands() {
    let o = subln(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    for c in ["gamma", "bounds", "sweep-depth", "sweep-lr", "gradcheck", "train-toy"] {
        assert!(s.contains(c), "{c} missing from help");
    }
    assert_eq!(subln(&["frobnicate"]).status.code(), Some(2));
}
