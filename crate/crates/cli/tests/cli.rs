use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[net]
num_branches = 3
image_size = 32
base_width = 4
disc_width = 4
mapping_width = 32

[train]
batch_size = 4
log_every = 5
checkpoint_every = 25
eval_every = 25
sample_every = 25
"#;

fn branchgan(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_branchgan"))
        .current_dir(cwd)
        .env_remove("BRANCHGAN_RUN_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn gen_small(cwd: &Path) {
    ok(&branchgan(
        cwd,
        &["gen-data", "--root", "data", "--n-train", "6", "--n-test", "3", "--image-size", "32"],
    ));
}

#[test]
fn full_pipeline_from_data_to_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    gen_small(cwd);
    assert!(cwd.join("data/manifest.toml").exists());
    assert!(cwd.join("data/train/1").is_dir());

    fs::write(cwd.join("small.toml"), CONFIG).unwrap();
    let stdout = ok(&branchgan(
        cwd,
        &["train", "--config", "small.toml", "--data", "data", "--iters", "50", "--name", "r1"],
    ));
    assert!(stdout.contains("test psnr"), "{stdout}");
    let run = cwd.join("run/r1");
    for f in ["ckpt_000000.bin", "ckpt_000025.bin", "ckpt_000050.bin", "metrics.csv", "config.resolved"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert_eq!(
        header,
        "iteration,rec,grad_rec,dis_rec,sqr,bal,sparse,adv,total,d_adv,r1,test_psnr"
    );
    assert_eq!(metrics.lines().count(), 11);

    let stdout = ok(&branchgan(cwd, &["eval", "--ckpt", "run/r1/ckpt_000050.bin", "--data", "data", "--panels-dir", "panels", "--panels", "2"]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "ckpt,N,params,images,psnr_mean,psnr_std,iou_mean,auroc_mean");
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols[1], "3");
    assert_eq!(cols[3], "6");
    let psnr: f64 = cols[4].parse().unwrap();
    assert!(psnr.is_finite() && psnr > 0.0);
    assert!(cwd.join("panels/panel_0001.png").exists());

    ok(&branchgan(cwd, &["eval", "--ckpt", "run/r1/ckpt_000050.bin", "--data", "data", "--csv", "e.csv"]));
    ok(&branchgan(cwd, &["eval", "--ckpt", "run/r1/ckpt_000025.bin", "--data", "data", "--csv", "e.csv"]));
    assert_eq!(fs::read_to_string(cwd.join("e.csv")).unwrap().lines().count(), 3);

    let img = fs::read_dir(cwd.join("data/test/1")).unwrap().next().unwrap().unwrap().path();
    let stem = img.file_stem().unwrap().to_str().unwrap().to_string();
    ok(&branchgan(
        cwd,
        &["infer", "--ckpt", "run/r1/ckpt_000050.bin", "--image", img.to_str().unwrap(), "--class", "1", "--out", "inf"],
    ));
    let pngs = fs::read_dir(cwd.join("inf"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png")
        .count();
    // three branches, the composition and the distinction map
    assert_eq!(pngs, 3 + 2);
    let raw = fs::read(cwd.join(format!("inf/{stem}_distinction.f32"))).unwrap();
    assert_eq!(raw.len(), 8 + 4 * 32 * 32);

    // directory input decomposes every PNG
    ok(&branchgan(
        cwd,
        &["infer", "--ckpt", "run/r1/ckpt_000050.bin", "--image", "data/test/0", "--class", "0", "--out", "inf0"],
    ));
    assert_eq!(fs::read_dir(cwd.join("inf0")).unwrap().count(), 3 * 6);

    // resume without a path continues from the newest checkpoint
    let out = branchgan(
        cwd,
        &["train", "--config", "small.toml", "--data", "data", "--iters", "50", "--name", "r1", "--resume"],
    );
    ok(&out);
}

#[test]
fn run_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    gen_small(cwd);
    fs::write(cwd.join("small.toml"), CONFIG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_branchgan"))
        .current_dir(cwd)
        .env("BRANCHGAN_RUN_ROOT", cwd.join("elsewhere"))
        .args(["train", "--config", "small.toml", "--data", "data", "--iters", "2"])
        .output()
        .unwrap();
    ok(&out);
    let runs: Vec<_> = fs::read_dir(cwd.join("elsewhere")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name();
    assert_eq!(name.len(), 12, "run named by config hash");
    assert!(!cwd.join("run").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = branchgan(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = branchgan(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = branchgan(dir.path(), &["gen-data", "--root", "d", "--set", "3"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[train]\nbatch_sise = 2\n").unwrap();
    let out = branchgan(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
    let out = branchgan(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn io_errors_exit_with_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = branchgan(dir.path(), &["eval", "--ckpt", "missing.bin", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));

    gen_small(dir.path());
    let out = branchgan(dir.path(), &["gen-data", "--root", "data", "--n-train", "2"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("junk.bin"), b"not a checkpoint").unwrap();
    let out = branchgan(dir.path(), &["eval", "--ckpt", "junk.bin", "--data", "data"]);
    assert_eq!(out.status.code(), Some(2));
}
