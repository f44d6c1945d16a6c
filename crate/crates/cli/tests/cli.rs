use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentwm::features::wire::respond;
use latentwm::features::ConvnetExtractor;
use latentwm::harness::{load_image, save_png};
use latentwm::percept::quantize;
use latentwm::synth::synthetic_image;

const SMALL: &str = "extractor_dim = 32\n\
                     psnr_w = 36\n\
                     pfa = 0.001\n\
                     embed_iterations = 60\n\
                     attack_iterations = 20\n\
                     eot = false\n";

fn latentwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentwm"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in\n{text}"))
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("small.cfg"), SMALL).unwrap();
        for (i, name) in ["a.png", "b.png"].iter().enumerate() {
            save_png(&synthetic_image(40 + i as u64, 32), &ws.path(name)).unwrap();
        }
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    /// Runs with the small configuration.
    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.arg("small.cfg");
        let mut all = vec!["--config", cfg.as_str()];
        all.extend_from_slice(args);
        latentwm(&all)
    }
}

#[test]
fn embed_then_detect_and_wrong_key() {
    let ws = Workspace::new();
    let (a, wm) = (ws.arg("a.png"), ws.arg("wm.png"));
    let o = ws.run(&["embed", &a, "--key", "7", "--out", &wm]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = std::fs::read_to_string(ws.path("wm.png.meta")).unwrap();
    assert_eq!(value(&meta, "scheme"), "zero-bit");
    assert_eq!(value(&meta, "verified"), "true");
    let achieved: f64 = value(&meta, "achieved_psnr_w").parse().unwrap();
    assert!((achieved - 36.0).abs() <= 0.1, "{achieved}");

    let o = ws.run(&["detect", &wm, "--key", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(value(&out, "detected"), "true");
    assert_eq!(value(&out, "pfa_target"), "0.001");
    value(&out, "cos_angle").parse::<f64>().unwrap();

    let o = ws.run(&["detect", &wm, "--key", "8"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert_eq!(value(&stdout(&o), "detected"), "false");
}

#[test]
fn multibit_decode_reports_zero_ber() {
    let ws = Workspace::new();
    let (a, wm) = (ws.arg("a.png"), ws.arg("wm.png"));
    let o = ws.run(&[
        "embed",
        &a,
        "--key",
        "7",
        "--scheme",
        "multi-bit",
        "--message",
        "1011001110",
        "--out",
        &wm,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = ws.run(&["decode", &wm, "--key", "7", "--truth", "1011001110"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(value(&out, "bits"), "1011001110");
    assert_eq!(value(&out, "ber"), "0");
    let side = ws.arg("wm.png.meta");
    let o = ws.run(&["decode", &wm, "--key", "7", "--truth-sidecar", &side]);
    assert_eq!(value(&stdout(&o), "ber"), "0");
}

#[test]
fn zero_strength_copy_returns_the_target() {
    let ws = Workspace::new();
    let (a, b, out) = (ws.arg("a.png"), ws.arg("b.png"), ws.arg("copy.png"));
    std::fs::write(ws.path("zero.cfg"), format!("{SMALL}attack_lambda = 0\n")).unwrap();
    let cfg = ws.arg("zero.cfg");
    let o = latentwm(&[
        "--config", &cfg, "attack", "--kind", "copy", &a, "--target", &b, "--out", &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let xt = load_image(Path::new(&b)).unwrap();
    assert_eq!(load_image(Path::new(&out)).unwrap(), quantize(&xt));
    let meta = std::fs::read_to_string(ws.path("copy.png.meta")).unwrap();
    assert_eq!(value(&meta, "achieved_psnr_a"), "inf");
    assert_eq!(value(&meta, "lambda"), "0");
}

#[test]
fn removal_respects_the_budget() {
    let ws = Workspace::new();
    let (a, out) = (ws.arg("a.png"), ws.arg("rm.png"));
    let o = ws.run(&[
        "attack",
        "--kind",
        "removal_untargeted",
        &a,
        "--budget",
        "35",
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = std::fs::read_to_string(ws.path("rm.png.meta")).unwrap();
    let achieved: f64 = value(&meta, "achieved_psnr_a").parse().unwrap();
    assert!(achieved >= 35.0, "{achieved}");
    assert_eq!(value(&meta, "iterations"), "20");
}

#[test]
fn usage_errors_exit_2() {
    let ws = Workspace::new();
    let (a, out) = (ws.arg("a.png"), ws.arg("x.png"));
    let o = ws.run(&["attack", "--kind", "copy", &a, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--target"), "{}", stderr(&o));
    assert!(!ws.path("x.png").exists());

    std::fs::write(ws.path("bad.cfg"), "embed_lambda = 5\nlamda = 3\n").unwrap();
    let bad = ws.arg("bad.cfg");
    let o = latentwm(&["--config", &bad, "detect", &a, "--key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));

    std::fs::write(ws.path("bad.plan"), "image_count = 2\npayload_bits = 10\n").unwrap();
    let plan = ws.arg("bad.plan");
    let o = latentwm(&["run-plan", &plan, "--out", &ws.arg("res")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("payload_bits"), "{}", stderr(&o));

    assert_eq!(latentwm(&["detect"]).status.code(), Some(2));
    assert_eq!(latentwm(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_errors_exit_3() {
    let ws = Workspace::new();
    let o = ws.run(&["detect", &ws.arg("missing.png"), "--key", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn show_config_prints_defaults() {
    let ws = Workspace::new();
    let o = latentwm(&["--show-config", "detect", &ws.arg("a.png"), "--key", "1"]);
    let out = stdout(&o);
    for (k, v) in [
        ("extractor", "convnet"),
        ("extractor_dim", "128"),
        ("psnr_w", "42"),
        ("embed_iterations", "100"),
        ("embed_lambda", "100"),
        ("attack_learning_rate", "3"),
        ("pfa", "0.0001"),
        ("psnr_a", "35"),
        ("seed", "0"),
    ] {
        assert_eq!(value(&out, k), v);
    }
}

fn serve(seed: u64, dim: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let f = ConvnetExtractor::new(seed, dim).unwrap();
        for stream in listener.incoming() {
            let mut s = stream.unwrap();
            let mut r = s.try_clone().unwrap();
            let _ = respond(&f, &mut r, &mut s);
        }
    });
    addr
}

#[test]
fn serve_check_against_loopback_servers() {
    let ws = Workspace::new();
    let good = serve(0, 32);
    let o = ws.run(&[
        "--extractor",
        "remote",
        "--endpoint",
        &good,
        "serve-check",
        "--size",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(value(&out, "forward_rel_delta").parse::<f64>().unwrap() <= 1e-4);
    assert!(value(&out, "vjp_rel_delta").parse::<f64>().unwrap() <= 1e-4);

    // A server with other weights disagrees numerically.
    let other = serve(1, 32);
    let o = ws.run(&["--endpoint", &other, "serve-check", "--size", "32"]);
    assert_eq!(o.status.code(), Some(4), "{}", stdout(&o));

    // Wrong latent dimension is a protocol-level failure.
    let wide = serve(0, 16);
    let o = ws.run(&["--endpoint", &wide, "serve-check", "--size", "32"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn run_plan_writes_reports() {
    let ws = Workspace::new();
    std::fs::write(
        ws.path("tiny.plan"),
        "experiment_id = tiny\nimage_count = 2\nimage_size = 32\nextractor_dim = 32\n\
         key_seeds = 1\nschemes = zero-bit\npfa_targets = 0.01\npsnr_w = 36\n\
         psnr_a_targets = 40\nattacks = removal_untargeted\nembed_iterations = 40\n\
         attack_iterations = 10\n",
    )
    .unwrap();
    let plan = ws.arg("tiny.plan");
    let res = ws.arg("res");
    let o = latentwm(&["run-plan", &plan, "--out", &res]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(ws.path("res/report.csv")).unwrap();
    assert_eq!(
        report.lines().count(),
        1 + value(&stdout(&o), "rows").parse::<usize>().unwrap()
    );
    for f in ["embeds.csv", "aggregate.csv", "fig3_removal_unt_pm.csv"] {
        assert!(ws.path("res").join(f).exists(), "{f}");
    }
    let again = ws.arg("again");
    latentwm(&["run-plan", &plan, "--out", &again]);
    assert_eq!(
        report,
        std::fs::read_to_string(ws.path("again/report.csv")).unwrap()
    );
}
