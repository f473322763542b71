use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.num_train=48",
    "data.num_eval=24",
    "schedule.sample_steps=4",
    "denoiser.base_channels=8",
    "denoiser.steps=20",
    "denoiser.batch_size=8",
    "adapter.steps=10",
    "adapter.batch_size=8",
    "translator.filters=4",
    "translator.disc_filters=4",
    "translator.res_blocks=1",
    "translator.epochs=1",
    "translator.batch_size=8",
    "probe.width=4",
    "probe.blocks=1",
    "probe.max_epochs=2",
    "eval.kid_subset=12",
    "eval.kid_subsets=4",
];

fn sts(ws: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sts"));
    cmd.args(args).env_remove("STS_WORKSPACE");
    cmd.arg("--set").arg(format!("run.workspace={}", ws.display()));
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn find(dir: &Path, name: &str) -> std::path::PathBuf {
    for entry in std::fs::read_dir(dir.join("runs")).unwrap() {
        let p = entry.unwrap().path().join(name);
        if p.exists() {
            return p;
        }
    }
    panic!("{name} not found");
}

#[test]
fn full_workflow_writes_tables_outputs_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path();
    ok(&sts(ws, &["all"]));

    let ablation = find(ws, "ablation.csv");
    let text = std::fs::read_to_string(&ablation).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run_id,config_name,omega,KID,MMD,SSIM,probe_acc");
    assert_eq!(lines.len(), 5);
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(names, ["controlnet", "controlnet+inv", "controlnet+st", "sts"]);
    let sweep = std::fs::read_to_string(find(ws, "cfg_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert!(ws.join("probe.csv").exists());

    // a second ablation run is byte-identical
    let outputs = ablation.parent().unwrap().join("outputs").join("sts_w5.bin");
    let first = (text.clone(), std::fs::read(&outputs).unwrap());
    ok(&sts(ws, &["ablate"]));
    assert_eq!(std::fs::read_to_string(&ablation).unwrap(), first.0);
    assert_eq!(std::fs::read(&outputs).unwrap(), first.1);

    let out_dir = ws.join("translated");
    let input = ws.join("data").join("eval_a_s0.bin");
    let stdout = ok(&sts(
        ws,
        &["translate", "--in", input.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--direction", "a2b"],
    ));
    assert!(stdout.contains("output.bin"));
    for name in ["output", "z_source", "z_target", "edges"] {
        assert!(out_dir.join(format!("{name}.bin")).exists());
        assert!(out_dir.join(format!("{name}.hdr")).exists());
    }

    let rep = ws.join("report");
    ok(&sts(ws, &["report", "--csv", ablation.to_str().unwrap(), "--out", rep.to_str().unwrap()]));
    for metric in ["KID", "MMD", "SSIM", "probe_acc"] {
        assert!(rep.join(format!("ablation_{metric}.png")).exists());
    }
    assert!(rep.join("grid_sts_w5.png").exists());
}

fn assert_json_error(out: &Output, kind: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], kind, "{err}");
}

#[test]
fn failures_are_single_line_json() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = sts(tmp.path(), &["train-denoiser"]);
    assert_json_error(&missing, "io");
    let v: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(v["stage"], "train-denoiser");

    assert_json_error(&sts(tmp.path(), &["gen-data", "--set", "nosection"]), "config");
    assert_json_error(&sts(tmp.path(), &["no-such-command"]), "usage");
    assert_json_error(
        &sts(tmp.path(), &["translate", "--in", "x.bin", "--direction", "sideways"]),
        "invalid_argument",
    );
}
