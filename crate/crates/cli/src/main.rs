mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentwm::attacks::{
    copy_attack, removal_targeted, removal_untargeted, select_target, TargetStrategy,
};
use latentwm::embed::{embed_multibit, embed_zero_bit};
use latentwm::features::{ExtractorSpec, RemoteExtractor};
use latentwm::gradsuite::{run_suite, SUITE_TOLERANCE};
use latentwm::harness::kv::KeyValues;
use latentwm::harness::report::REPORT_COLUMNS;
use latentwm::harness::{
    ingest_corpus, load_image, run_plan_with, save_png, write_outputs, CsvSink, ExperimentPlan,
    Scheme,
};
use latentwm::percept::psnr;
use latentwm::rng;
use latentwm::synth::synthetic_image;
use latentwm::wmcodec::{
    bit_error_rate, decode_multibit, detect_zero_bit, generate_carriers, ConeDetector, Message,
    SecretKey,
};
use latentwm::{Error, FeatureExtractor, ImagePlane, LatentVector, Result};
use rand_distr::{Distribution, StandardNormal};

use config::CliConfig;

/// Largest relative forward/VJP discrepancy `serve-check` accepts; the wire
/// carries f32.
const SERVE_TOLERANCE: f64 = 1e-4;
/// Stream tag for randomly drawn messages.
const MESSAGE_STREAM: u64 = 2;

#[derive(Parser)]
#[command(
    name = "latentwm",
    version,
    about = "Latent-space image watermarking lab"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// linear, convnet or remote.
    #[arg(long, global = true)]
    extractor: Option<String>,
    /// Feature server: HOST:PORT, tcp://HOST:PORT or `stdio:COMMAND`.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Watermark an image.
    Embed {
        input: PathBuf,
        #[arg(long)]
        key: u64,
        /// zero-bit or multi-bit.
        #[arg(long, default_value = "zero-bit")]
        scheme: String,
        /// Multi-bit message as a 0/1 string; drawn from the seed when absent.
        #[arg(long)]
        message: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-bit detection; exits 1 when the mark is absent.
    Detect {
        input: PathBuf,
        #[arg(long)]
        key: u64,
    },
    /// Multi-bit decoding, with the BER when the true message is known.
    Decode {
        input: PathBuf,
        #[arg(long)]
        key: u64,
        /// True message as a 0/1 string.
        #[arg(long, conflicts_with = "truth_sidecar")]
        truth: Option<String>,
        /// Read the true message from an embed sidecar.
        #[arg(long)]
        truth_sidecar: Option<PathBuf>,
    },
    /// Copy or removal attack; uses no key material.
    Attack {
        /// copy, removal_untargeted or removal_targeted.
        #[arg(long)]
        kind: String,
        /// The watermarked image.
        input: PathBuf,
        /// Unmarked image to copy onto (copy only).
        #[arg(long)]
        target: Option<PathBuf>,
        /// other_image, wiener_denoised or random_carrier (removal_targeted only).
        #[arg(long, default_value = "wiener_denoised")]
        strategy: String,
        /// Image directory for the other_image strategy.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// PSNR budget in dB; defaults to `psnr_a`.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment plan and write report, aggregate and figure CSVs.
    RunPlan {
        plan: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable path.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        kernel_trials: usize,
        #[arg(long, default_value_t = 3)]
        pixel_trials: usize,
    },
    /// Handshake with a feature server and compare it against the local
    /// reference extractor.
    ServeCheck {
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

/// Outcome of a successful command.
enum Verdict {
    Ok,
    NotDetected,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) => 2,
        Error::Io(_) | Error::Image(_) => 3,
        Error::Numeric(_) | Error::UndefinedDirection(_) => 4,
        Error::Remote(_) => 5,
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn resolve_config(common: &Common) -> Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = &common.extractor {
        cfg.apply("extractor", e)?;
    }
    if let Some(e) = &common.endpoint {
        cfg.apply("endpoint", e)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_extractor(cfg: &CliConfig, x: &ImagePlane) -> Result<Box<dyn FeatureExtractor>> {
    cfg.extractor.spec(x.height(), x.width())?.build()
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_sidecar(out: &Path, meta: &KeyValues) -> Result<()> {
    std::fs::write(sidecar_path(out), meta.render())?;
    Ok(())
}

fn embed(
    cfg: &CliConfig,
    input: &Path,
    key: u64,
    scheme: &str,
    message: Option<&str>,
    out: &Path,
) -> Result<Verdict> {
    let scheme = Scheme::parse(scheme)?;
    if message.is_some() && scheme == Scheme::ZeroBit {
        return usage("--message applies only to the multi-bit scheme");
    }
    let x0 = load_image(input)?;
    let f = build_extractor(cfg, &x0)?;
    let key = SecretKey::new(key);
    let mut embed_cfg = cfg.embed.clone();
    embed_cfg.seed = cfg.seed;
    let mut meta = KeyValues::default();
    meta.set("scheme", scheme);
    let (xw, verified) = match scheme {
        Scheme::ZeroBit => {
            let xw = embed_zero_bit(&x0, key, cfg.pfa, f.as_ref(), &embed_cfg)?;
            let det = ConeDetector::from_key(key, f.latent_dim(), cfg.pfa)?;
            let ok = detect_zero_bit(&f.forward(&xw)?, &det)?;
            meta.set("pfa_target", cfg.pfa);
            (xw, ok)
        }
        Scheme::MultiBit => {
            let m = match message {
                Some(s) => Message::parse(s)?,
                None => Message::random(
                    cfg.payload,
                    &mut rng::stream(rng::derive_seed(&[cfg.seed, MESSAGE_STREAM])),
                )?,
            };
            let xw = embed_multibit(&x0, key, &m, f.as_ref(), &embed_cfg)?;
            let carriers = generate_carriers(key, m.len(), f.latent_dim())?;
            let ber = bit_error_rate(&m, &decode_multibit(&f.forward(&xw)?, &carriers)?)?;
            meta.set("payload", m.len());
            meta.set("message", &m);
            meta.set("ber", ber);
            (xw, ber == 0.0)
        }
    };
    let achieved = psnr(&x0, &xw)?;
    meta.set("achieved_psnr_w", achieved);
    meta.set("verified", verified);
    meta.set("iterations", embed_cfg.plan.iterations);
    meta.set("lambda", embed_cfg.plan.lambda);
    meta.set("eta", embed_cfg.plan.learning_rate);
    meta.set("extractor", &cfg.extractor.kind);
    save_png(&xw, out)?;
    write_sidecar(out, &meta)?;
    print!("{}", meta.render());
    if !verified {
        log::warn!("the watermark does not verify on the written image");
    }
    Ok(Verdict::Ok)
}

fn detect(cfg: &CliConfig, input: &Path, key: u64) -> Result<Verdict> {
    let x = load_image(input)?;
    let f = build_extractor(cfg, &x)?;
    let det = ConeDetector::from_key(SecretKey::new(key), f.latent_dim(), cfg.pfa)?;
    let z = f.forward(&x)?;
    let detected = detect_zero_bit(&z, &det)?;
    let mut out = KeyValues::default();
    out.set("detected", detected);
    out.set("pfa_target", cfg.pfa);
    out.set("cos_angle", det.cos_angle());
    out.set("score", det.score(&z)?);
    print!("{}", out.render());
    Ok(if detected {
        Verdict::Ok
    } else {
        Verdict::NotDetected
    })
}

fn decode(
    cfg: &CliConfig,
    input: &Path,
    key: u64,
    truth: Option<&str>,
    truth_sidecar: Option<&Path>,
) -> Result<Verdict> {
    let truth = match (truth, truth_sidecar) {
        (Some(t), _) => Some(Message::parse(t)?),
        (None, Some(p)) => {
            let meta = KeyValues::parse(&std::fs::read_to_string(p)?)?;
            match meta.get("message") {
                Some(m) => Some(Message::parse(m)?),
                None => return usage(format!("{} has no message entry", p.display())),
            }
        }
        (None, None) => None,
    };
    let payload = truth.as_ref().map_or(cfg.payload, Message::len);
    let x = load_image(input)?;
    let f = build_extractor(cfg, &x)?;
    let carriers = generate_carriers(SecretKey::new(key), payload, f.latent_dim())?;
    let bits = decode_multibit(&f.forward(&x)?, &carriers)?;
    let mut out = KeyValues::default();
    out.set("bits", &bits);
    if let Some(t) = &truth {
        out.set("ber", bit_error_rate(t, &bits)?);
    }
    print!("{}", out.render());
    Ok(Verdict::Ok)
}

#[allow(clippy::too_many_arguments)]
fn attack(
    cfg: &CliConfig,
    kind: &str,
    input: &Path,
    target: Option<&Path>,
    strategy: &str,
    corpus: Option<&Path>,
    budget: Option<f64>,
    out: &Path,
) -> Result<Verdict> {
    let mut cfg = cfg.clone();
    if let Some(b) = budget {
        cfg.psnr_a = b;
    }
    let attack_cfg = cfg.attack_config()?;
    // Validate the arguments before any expensive work.
    let strategy = match kind {
        "copy" => {
            if target.is_none() {
                return usage("copy needs --target");
            }
            None
        }
        "removal_untargeted" => None,
        "removal_targeted" => Some(match TargetStrategy::parse(strategy)? {
            TargetStrategy::WienerDenoised { .. } => TargetStrategy::WienerDenoised {
                window: cfg.wiener_window,
            },
            TargetStrategy::OtherImage if corpus.is_none() => {
                return usage("the other_image strategy needs --corpus")
            }
            s => s,
        }),
        k => {
            return usage(format!(
                "unknown attack kind {k:?} (expected copy, removal_untargeted or removal_targeted)"
            ))
        }
    };
    let xw = load_image(input)?;
    let f = build_extractor(&cfg, &xw)?;
    let (xa, reference) = match (kind, strategy) {
        ("copy", _) => {
            let xt = load_image(target.expect("checked above"))?;
            (copy_attack(&xw, &xt, f.as_ref(), &attack_cfg)?, xt)
        }
        (_, None) => (
            removal_untargeted(&xw, f.as_ref(), &attack_cfg)?,
            xw.clone(),
        ),
        (_, Some(s)) => {
            let pool = match (s, corpus) {
                (TargetStrategy::OtherImage, Some(dir)) => {
                    ingest_corpus(dir, usize::MAX, xw.height() as u32)?
                        .into_iter()
                        .map(|(_, x)| x)
                        .collect()
                }
                _ => Vec::new(),
            };
            let t = select_target(s, &xw, &pool, f.as_ref(), &mut rng::stream(cfg.seed))?;
            (
                removal_targeted(&xw, &t, f.as_ref(), &attack_cfg)?,
                xw.clone(),
            )
        }
    };
    let mut meta = KeyValues::default();
    meta.set("attack_kind", kind);
    meta.set("target_strategy", strategy.map_or("", |s| s.name()));
    meta.set("target_psnr_a", cfg.psnr_a);
    meta.set("achieved_psnr_a", psnr(&reference, &xa)?);
    meta.set("iterations", attack_cfg.plan.iterations);
    meta.set("lambda", attack_cfg.plan.lambda);
    meta.set("eta", attack_cfg.plan.learning_rate);
    meta.set("extractor", &cfg.extractor.kind);
    save_png(&xa, out)?;
    write_sidecar(out, &meta)?;
    print!("{}", meta.render());
    Ok(Verdict::Ok)
}

fn run_plan_cmd(common: &Common, plan_path: &Path, out: &Path) -> Result<Verdict> {
    if common.config.is_some() {
        return usage("run-plan reads its settings from the plan file, not --config");
    }
    let mut plan = ExperimentPlan::parse(&std::fs::read_to_string(plan_path)?)?;
    if let Some(s) = common.seed {
        plan.apply("master_seed", &s.to_string())?;
    }
    if let Some(e) = &common.extractor {
        plan.apply("extractor", e)?;
    }
    if let Some(e) = &common.endpoint {
        plan.apply("endpoint", e)?;
    }
    plan.validate()?;
    if common.show_config {
        print!("{}", plan.render());
    }
    std::fs::create_dir_all(out)?;
    let f = plan
        .extractor
        .spec(plan.image_size, plan.image_size)?
        .build()?;
    let file = BufWriter::new(File::create(out.join("report.csv"))?);
    let mut sink = CsvSink::new(file, &REPORT_COLUMNS)?;
    let outcome = run_plan_with(&plan, f.as_ref(), &mut |r| sink.write(&r.fields()))?;
    write_outputs(out, &outcome.marks, &outcome.rows)?;
    println!(
        "marks = {}\ngate_failures = {}\nrows = {}\nout = {}",
        outcome.marks.len(),
        outcome.gate_failures(),
        outcome.rows.len(),
        out.display()
    );
    Ok(Verdict::Ok)
}

fn grad_check(cfg: &CliConfig, kernel_trials: usize, pixel_trials: usize) -> Result<Verdict> {
    let results = run_suite(cfg.seed, kernel_trials, pixel_trials)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!(
            "{:<40} trials={:<3} worst={:.3e} {}",
            r.name,
            r.trials,
            r.worst,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.worst);
    }
    println!("worst = {worst:.3e} (tolerance {SUITE_TOLERANCE:e})");
    if results.iter().all(|r| r.passed()) {
        Ok(Verdict::Ok)
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {worst:.3e}"
        )))
    }
}

/// Largest |a - b| relative to the largest |b|.
fn relative_delta(a: &[f64], b: &[f64]) -> (f64, f64) {
    let abs = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (abs, abs / scale.max(f64::MIN_POSITIVE))
}

fn serve_check(cfg: &CliConfig, size: usize) -> Result<Verdict> {
    let dim = cfg.extractor.dim;
    // A remote extractor setting still needs a local reference: the convnet.
    let (local_kind, spec) = match cfg.extractor.kind.as_str() {
        "remote" => (
            "convnet",
            ExtractorSpec::Convnet {
                seed: cfg.extractor.seed,
                dim,
            },
        ),
        k => (k, cfg.extractor.spec(size, size)?),
    };
    let local = spec.build()?;
    let remote = RemoteExtractor::connect(&cfg.extractor.endpoint, dim)?;
    println!("endpoint = {}\nlatent_dim = {dim}", cfg.extractor.endpoint);
    let x = synthetic_image(cfg.seed, size);
    let mut r = rng::stream(cfg.seed);
    let g = LatentVector::new((0..dim).map(|_| StandardNormal.sample(&mut r)).collect())?;
    let (fa, fr) = relative_delta(remote.forward(&x)?.values(), local.forward(&x)?.values());
    let (va, vr) = relative_delta(
        remote.input_vjp(&x, &g)?.data(),
        local.input_vjp(&x, &g)?.data(),
    );
    println!("forward_max_abs_delta = {fa:e}\nforward_rel_delta = {fr:e}");
    println!("vjp_max_abs_delta = {va:e}\nvjp_rel_delta = {vr:e}");
    if fr <= SERVE_TOLERANCE && vr <= SERVE_TOLERANCE {
        println!("match = true");
        Ok(Verdict::Ok)
    } else {
        println!("match = false");
        Err(Error::Numeric(format!(
            "server disagrees with the local {} extractor beyond {SERVE_TOLERANCE:e}",
            local_kind
        )))
    }
}

fn run(cli: Cli) -> Result<Verdict> {
    if let Command::RunPlan { plan, out } = &cli.command {
        return run_plan_cmd(&cli.common, plan, out);
    }
    let cfg = resolve_config(&cli.common)?;
    if cli.common.show_config {
        print!("{}", cfg.render());
    }
    match &cli.command {
        Command::Embed {
            input,
            key,
            scheme,
            message,
            out,
        } => embed(&cfg, input, *key, scheme, message.as_deref(), out),
        Command::Detect { input, key } => detect(&cfg, input, *key),
        Command::Decode {
            input,
            key,
            truth,
            truth_sidecar,
        } => decode(
            &cfg,
            input,
            *key,
            truth.as_deref(),
            truth_sidecar.as_deref(),
        ),
        Command::Attack {
            kind,
            input,
            target,
            strategy,
            corpus,
            budget,
            out,
        } => attack(
            &cfg,
            kind,
            input,
            target.as_deref(),
            strategy,
            corpus.as_deref(),
            *budget,
            out,
        ),
        Command::GradCheck {
            kernel_trials,
            pixel_trials,
        } => grad_check(&cfg, *kernel_trials, *pixel_trials),
        Command::ServeCheck { size } => serve_check(&cfg, *size),
        Command::RunPlan { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Verdict::Ok) => ExitCode::SUCCESS,
        Ok(Verdict::NotDetected) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
