use std::path::Path;
use std::process::{Command, Output};

use mtrans::io::mtt::{read_tensor, write_tensor};
use mtrans::{Image, Tensor};

const SMALL: &str = "height = 16\nwidth = 16\nchannels = 2\npatch = 4\nencoders = 1\nheads = 2\n\
                     steps = 2\nbatch = 2\ntrain_size = 2\neval_size = 2\nseed = 1\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtrans")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn mask_is_seeded_and_budgeted() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mtt"), dir.path().join("b.mtt"));
    for p in [&a, &b] {
        let o = run(&["mask", "--kind", "random", "--accel", "4", "--width", "64", "--seed", "3", "--out", s(p)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = read_tensor::<f32>(&a).unwrap();
    assert_eq!(m.shape(), &[64]);
    assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 16);
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));

    let o = run(&["mask", "--kind", "random", "--accel", "5", "--width", "64", "--out", s(&a)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn degrade_identities() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(16, 16, |y, x| ((y * 16 + x) as f64 * 0.37).sin().abs());
    let input = dir.path().join("img.mtt");
    let flat = Tensor::new(vec![16, 16], img.data().to_vec()).unwrap();
    write_tensor(&input, &flat).unwrap();
    let mask = dir.path().join("full.mtt");
    write_tensor(&mask, &Tensor::<f32>::ones(&[16])).unwrap();
    let out = dir.path().join("out.mtt");

    let o = run(&["degrade", "--task", "recon", "--in", s(&input), "--mask", s(&mask), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_tensor::<f64>(&out).unwrap().max_abs_diff(&flat) < 1e-12);

    let o = run(&["degrade", "--task", "sr", "--in", s(&input), "--scale", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_tensor::<f64>(&out).unwrap().shape(), &[16, 16]);
    assert!(read_tensor::<f64>(&out).unwrap().max_abs_diff(&flat) < 1e-12);

    let o = run(&["degrade", "--task", "sr", "--in", s(&input), "--scale", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_tensor::<f64>(&out).unwrap().shape(), &[4, 4]);

    let o = run(&["degrade", "--task", "recon", "--in", s(&input), "--scale", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_with_zero_steps_then_eval_and_attn() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("steps = 2", "steps = 0"));
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 0);
    assert_eq!(report["initial_loss"], report["final_loss"]);

    let ckpt = run_dir.join("model.ckpt");
    let eval_dir = dir.path().join("eval");
    let o = run(&["eval", "--ckpt", s(&ckpt), "--config", s(&cfg), "--out", s(&eval_dir), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_tensor::<f64>(&eval_dir.join("predictions.mtt")).unwrap().shape(), &[2, 16, 16]);

    let pgm = dir.path().join("a.pgm");
    let o = run(&["attn", "--ckpt", s(&ckpt), "--config", s(&cfg), "--stage", "0", "--head", "5", "--out", s(&pgm)]);
    assert_eq!(code(&o), 1);
    let o = run(&["attn", "--ckpt", s(&ckpt), "--config", s(&cfg), "--stage", "0", "--head", "1", "--out", s(&pgm)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn gradcheck_passes_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let json = dir.path().join("gc.json");
    let o = run(&["gradcheck", "--config", s(&cfg), "--coords", "16", "--out", s(&json)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json.exists());
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let o = run(&["train", "--config", "/nonexistent/x.cfg", "--out", "/tmp/never"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("ablation") {
            let m = mtrans::train::AblationMatrix::from_file(&p).unwrap();
            assert!(m.cells.len() >= 3, "{name}");
        } else {
            mtrans::train::TrainConfig::from_file(&p).unwrap();
        }
        n += 1;
    }
    assert_eq!(n, 5);
}
