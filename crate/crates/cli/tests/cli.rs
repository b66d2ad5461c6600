use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn micro() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.toml")
}

fn bevtrack(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevtrack"))
        .arg("--config")
        .arg(micro())
        .arg("--out")
        .arg(out)
        .args([
            "--quiet",
            "--set",
            "data.sequences=1",
            "--set",
            "data.val_sequences=1",
            "--set",
            "sim.frames=8",
        ])
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevtrack(dir.path(), &["--set", "model.bogus=1", "generate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown field `bogus`"), "{}", stderr(&o));
}

#[test]
fn invalid_value_names_its_section() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevtrack(dir.path(), &["--set", "sim.dt=0", "generate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[sim]"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevtrack(dir.path(), &["train", "--data", "/no/such/data.ndjson"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/data.ndjson does not exist"));

    let o = bevtrack(dir.path(), &["eval"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no evaluation dataset given"), "{}", stderr(&o));
}

#[test]
fn checkpoint_from_another_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(bevtrack(d, &["generate"]).status.success());
    let data = d.join("dataset.ndjson");
    assert!(bevtrack(
        d,
        &["--set", "train.iterations=1", "train", "--data", data.to_str().unwrap()]
    )
    .status
    .success());
    let ckpt = d.join("model.ckpt");
    let o = bevtrack(
        d,
        &[
            "--set",
            "model.fusion=\"early\"",
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("does not match the configured model"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn track_then_render_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(bevtrack(d, &["generate"]).status.success());
    let data = d.join("dataset.ndjson");
    let data = data.to_str().unwrap();
    assert!(bevtrack(d, &["--set", "train.iterations=2", "train", "--data", data])
        .status
        .success());
    let ckpt = d.join("model.ckpt");
    let track = bevtrack(d, &["track", "--data", data, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(track.status.success(), "{}", stderr(&track));
    let dump = d.join("tracklets.tsv");
    assert!(std::fs::read_to_string(&dump).unwrap().starts_with("seq\tframe\tid\t"));

    let mut frames = Vec::new();
    for name in ["r1", "r2"] {
        let out = d.join(name);
        let o = bevtrack(
            &out,
            &[
                "--set",
                "render.svg=true",
                "render",
                "--data",
                data,
                "--tracklets",
                dump.to_str().unwrap(),
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        frames.push((
            std::fs::read(out.join("frame_0007.ppm")).unwrap(),
            std::fs::read(out.join("frame_0007.svg")).unwrap(),
        ));
    }
    assert!(frames[0].0.starts_with(b"P6\n"));
    assert_eq!(frames[0], frames[1]);
}

#[test]
fn version_is_recorded_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bevtrack(dir.path(), &["generate"]).status.success());
    let v = std::fs::read_to_string(dir.path().join("VERSION")).unwrap();
    assert!(v.starts_with("bevtrack "));
    let cfg = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(cfg.contains("lane_jitter"));
}
