use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use isfuse::data::{load_gray, save_gray_png};
use isfuse::synthetic::{synthetic_dataset, write_dataset_dir, SceneParams};
use isfuse::Tensor;

fn isfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_dir(dir: &Path, n: usize, side: usize, seed: u64) {
    let p = SceneParams {
        height: side,
        width: side,
        ..SceneParams::default()
    };
    let ds = synthetic_dataset("toy", n, seed, &p).unwrap();
    let pairs: Vec<_> = ds.iter().cloned().collect();
    write_dataset_dir(dir, &pairs).unwrap();
}

const TINY: &[&str] = &[
    "--patch", "16", "--channels", "4,4,8", "--pool-r", "2", "--block-size", "4",
];

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

/// A 4-pair toy set and a checkpoint trained on it for one short epoch.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        toy_dir(&data, 4, 24, 11);
        let out = root.path().join("run");
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch",
            "2",
        ];
        args.extend_from_slice(TINY);
        let o = isfuse(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture {
            data,
            ckpt: out.join("best.ckpt"),
            _root: root,
        }
    })
}

#[test]
fn train_smoke_writes_checkpoints_and_logs() {
    let f = fixture();
    let run = f.ckpt.parent().unwrap();
    for name in ["best.ckpt", "last.ckpt", "epoch_0001.ckpt", "loss.log", "val_metrics.csv", "config.txt", "run_config.txt"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
    let log = std::fs::read_to_string(run.join("loss.log")).unwrap();
    // ceil(4 pairs / batch 2) steps plus the header.
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn missing_data_dir_names_the_path() {
    let o = isfuse(&["train", "--data", "/nonexistent/toy-set"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/toy-set"), "{}", stderr(&o));
}

#[test]
fn print_config_shows_published_defaults() {
    let o = isfuse(&["train", "--print-config"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for line in ["alpha = 0.1", "beta = 0.05", "epochs = 50", "batch_size = 16", "learning_rate = 0.0001"] {
        assert!(s.lines().any(|l| l == line), "{line} not in\n{s}");
    }
}

#[test]
fn flags_override_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# three-way\nalpha = 0.3\nbeta = 0.2\n").unwrap();
    let o = isfuse(&["train", "--config", cfg.to_str().unwrap(), "--alpha", "0.7", "--print-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.lines().any(|l| l == "alpha = 0.7"), "flag lost:\n{s}");
    assert!(s.lines().any(|l| l == "beta = 0.2"), "file lost:\n{s}");
    assert!(s.lines().any(|l| l == "eta = 0.3"), "default lost:\n{s}");
}

#[test]
fn every_subcommand_takes_the_common_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "block_size = 8\n").unwrap();
    for sub in ["train", "fuse", "eval", "ate", "masks-demo"] {
        let o = isfuse(&[sub, "--seed", "9", "--config", cfg.to_str().unwrap(), "--print-config"]);
        assert!(o.status.success(), "{sub}: {}", stderr(&o));
        let s = stdout(&o);
        assert!(s.lines().any(|l| l == "seed = 9"), "{sub}");
        assert!(s.lines().any(|l| l == "block_size = 8"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(isfuse(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(isfuse(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "alpah = 0.1\n").unwrap();
    let o = isfuse(&["train", "--config", cfg.to_str().unwrap(), "--print-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpah"));
    assert_eq!(isfuse(&["train", "--epochs", "many", "--print-config"]).status.code(), Some(1));
}

#[test]
fn fuse_writes_gray_and_color_outputs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let vi = f.data.join("vi/toy_000.png");
    let ir = f.data.join("ir/toy_000.png");
    let gray = dir.path().join("fused.png");
    let o = isfuse(&[
        "fuse", "--checkpoint", f.ckpt.to_str().unwrap(), "--vi", vi.to_str().unwrap(),
        "--ir", ir.to_str().unwrap(), "--out", gray.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(&gray).unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));
    assert_eq!(img.color(), image::ColorType::L8);

    let color = dir.path().join("fused_rgb.png");
    let o = isfuse(&[
        "fuse", "--checkpoint", f.ckpt.to_str().unwrap(), "--vi", vi.to_str().unwrap(),
        "--ir", ir.to_str().unwrap(), "--out", color.to_str().unwrap(), "--color",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(&color).unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));
    assert_eq!(img.color(), image::ColorType::Rgb8);
}

#[test]
fn fuse_rejects_mismatched_sizes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.png");
    save_gray_png(&small, &Tensor::full(vec![1, 20, 24], 0.5f32)).unwrap();
    let vi = f.data.join("vi/toy_000.png");
    let o = isfuse(&[
        "fuse", "--checkpoint", f.ckpt.to_str().unwrap(), "--vi", vi.to_str().unwrap(),
        "--ir", small.to_str().unwrap(), "--out", dir.path().join("x.png").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_one_row_per_pair_plus_mean() {
    let f = fixture();
    let o = isfuse(&["eval", "--checkpoint", f.ckpt.to_str().unwrap(), "--data", f.data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "id,AG,SF,PSNR,CC,Qabf");
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("mean,"));

    let o = isfuse(&["eval", "--checkpoint", f.ckpt.to_str().unwrap(), "--data", f.data.to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).expect("valid JSON");
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_scores_a_directory_of_fused_images() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for id in ["toy_000", "toy_001", "toy_002", "toy_003"] {
        let ir = load_gray(&f.data.join(format!("ir/{id}.png"))).unwrap();
        save_gray_png(&dir.path().join(format!("{id}.png")), &ir).unwrap();
    }
    let o = isfuse(&["eval", "--fused-dir", dir.path().to_str().unwrap(), "--data", f.data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 6);
}

#[test]
fn eval_on_empty_dir_fails() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("vi")).unwrap();
    std::fs::create_dir_all(dir.path().join("ir")).unwrap();
    let o = isfuse(&["eval", "--checkpoint", f.ckpt.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ate_emits_four_by_two_rows_and_zero_sanity() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let chart = dir.path().join("ate.png");
    let args = [
        "ate", "--checkpoint", f.ckpt.to_str().unwrap(), "--data", f.data.to_str().unwrap(),
        "--seeds", "1,2", "--block-size", "4",
    ];
    // Mask geometry is not an ate flag; it comes from the config file.
    let o = isfuse(&args);
    assert_eq!(o.status.code(), Some(1));

    let cfg = dir.path().join("ate.cfg");
    std::fs::write(&cfg, "block_size = 4\n").unwrap();
    let run = || {
        isfuse(&[
            "ate", "--checkpoint", f.ckpt.to_str().unwrap(), "--data", f.data.to_str().unwrap(),
            "--seeds", "1,2", "--config", cfg.to_str().unwrap(), "--chart", chart.to_str().unwrap(),
        ])
    };
    let o = run();
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "t,intervention,metric,ate,std,n");
    let sanity: Vec<&&str> = lines.iter().filter(|l| l.starts_with("0,")).collect();
    assert_eq!(sanity.len(), 2);
    for l in sanity {
        assert_eq!(l.split(',').nth(3), Some("0"));
    }
    assert_eq!(lines.len() - 1 - 2, 8);
    assert!(chart.is_file());
    assert_eq!(stdout(&run()), s, "fixed seeds must reproduce");
}

#[test]
fn masks_demo_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        isfuse(&[
            "masks-demo", "--out", out.to_str().unwrap(), "--samples", "5", "--height", "64",
            "--width", "80", "--seed", "3",
        ])
    };
    let a = run(&dir.path().join("a"));
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&dir.path().join("b"));
    assert_eq!(stdout(&a), stdout(&b));
    let v: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    let samples = v["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 5);
    for s in samples {
        assert_eq!(s["complementary_disjoint"], true);
        for k in ["comp_vi_blocks", "comp_ir_blocks", "random_blocks"] {
            let n = s[k].as_u64().unwrap();
            assert!((1..=6).contains(&n), "{k} = {n}");
        }
    }
    for i in 0..5 {
        let vi = load_gray(&dir.path().join(format!("a/sample_{i:03}_comp_vi.png"))).unwrap();
        let ir = load_gray(&dir.path().join(format!("a/sample_{i:03}_comp_ir.png"))).unwrap();
        assert_eq!(vi.shape(), &[1, 64, 80]);
        let overlap = vi.data().iter().zip(ir.data()).filter(|(a, b)| **a < 0.5 && **b < 0.5).count();
        assert_eq!(overlap, 0);
    }
}
