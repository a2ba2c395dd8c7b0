use std::path::Path;
use std::process::{Command, Output};

fn sclm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sclm"))
        .args(args)
        .env("SCLM_THREADS", "1")
        .output()
        .expect("spawn sclm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_fuse_enhance_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let branch = dir.path().join("branch.json");
    let fused = dir.path().join("fused.json");
    let log = dir.path().join("loss.csv");
    let out = dir.path().join("out");

    let o = sclm(&[
        "train",
        "--synth",
        "6",
        "--synth-size",
        "24",
        "--crop",
        "16",
        "--batch",
        "2",
        "--steps",
        "5",
        "--log",
        s(&log),
        "--out",
        s(&branch),
    ]);
    ok(&o);
    let lines: Vec<String> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines[0], "step,lr,loss");
    assert_eq!(lines.len(), 6);

    ok(&sclm(&[
        "fuse",
        "--model",
        s(&branch),
        "--out",
        s(&fused),
        "--probes",
        "2",
        "--probe-size",
        "12",
    ]));

    // Enhancing one synthetic image with both files gives the same picture up to rounding.
    let input = dir.path().join("in.png");
    let img = sclm::io::synth_image(20, 18, 3);
    sclm::io::save_image(&input, &img).unwrap();
    ok(&sclm(&[
        "enhance",
        "--model",
        s(&fused),
        s(&input),
        "--out",
        s(&out.join("f")),
    ]));
    ok(&sclm(&[
        "enhance",
        "--model",
        s(&branch),
        s(&input),
        "--out",
        s(&out.join("b")),
    ]));
    let a = sclm::io::load_image(&out.join("f").join("in.png")).unwrap();
    let b = sclm::io::load_image(&out.join("b").join("in.png")).unwrap();
    assert_eq!(a.shape(), img.shape());
    assert!(a.max_abs_diff(&b).unwrap() <= 1.0 / 255.0 + 1e-6);

    // A deployed file cannot be collapsed again.
    let o = sclm(&[
        "fuse",
        "--model",
        s(&fused),
        "--out",
        s(&dir.path().join("again.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_model_is_an_error() {
    let o = sclm(&[
        "enhance",
        "--model",
        "/nonexistent/model.json",
        "x.png",
        "--out",
        "/tmp",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/model.json"));
}

#[test]
fn stats_reports_each_directory() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, v) in [("dark", 0.2f32), ("bright", 0.8)] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
        let t = sclm::tensor::Tensor::full(sclm::tensor::Shape::new(1, 3, 4, 4), v);
        sclm::io::save_image(&dir.path().join(sub).join("a.png"), &t).unwrap();
    }
    let o = sclm(&["stats", s(dir.path())]);
    ok(&o);
    let text = stdout(&o);
    assert!(text.starts_with("directory,images,mean_y"));
    assert!(
        text.lines().any(|l| l.ends_with("bright,1,204.00")),
        "{text}"
    );
    assert!(text.lines().any(|l| l.ends_with("dark,1,51.00")), "{text}");
}

#[test]
fn bench_prints_accounting_and_rows() {
    let o = sclm(&[
        "bench",
        "--height",
        "24",
        "--width",
        "32",
        "--repeats",
        "2",
        "--warmup",
        "0",
    ]);
    ok(&o);
    let text = stdout(&o);
    assert!(text.contains("params: 87 (conv 84 + curve 3)"), "{text}");
    assert!(text.contains("variant,threads,height,width,runs,median_ms,p95_ms,min_ms"));
    assert!(text.contains("fused-logits,1,24,32,2,"), "{text}");
}

#[test]
fn verify_passes_small_checks() {
    let o = sclm(&["verify", "--points", "2", "--probes", "3"]);
    ok(&o);
    assert!(!stdout(&o).contains("FAIL"));
}
