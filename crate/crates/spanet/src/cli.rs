//! Command-line interface: reproducible, file-emitting commands.
//!
//! Four subcommands:
//!
//! * `profile` — randomized frequency-response campaign, exported as trial
//!   and aggregate CSVs.
//! * `verify` — named oracle suites (convolution equivalence, attention
//!   reformulation, spectral-filter invariants, gradient checks) with a JSON
//!   report on stdout and disk.
//! * `model` — build / forward / gradient-check / count-params over a JSON
//!   architecture config.
//! * `rla` — ring-averaged relative log amplitude of a stored feature map.
//!
//! Every command writes a `<command>_manifest.json` next to its outputs
//! listing their SHA-256 digests. Identical flags and seed produce identical
//! digests. Exit codes: 0 success, 1 assertion failure, 2 usage/config
//! error, 3 I/O or malformed-container error.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::attention::{attention_as_support, attention_direct, AttentionParams};
use crate::backbone::{build_model, coordinate_gradcheck, count_params, Model, StageConfig};
use crate::container::TensorContainer;
use crate::conv_support::{direct_conv, ConvSupport, KernelSpec};
use crate::gradcheck::{check_tensor, finite_diff, relative_error, FD_STEP, FD_TOL};
use crate::profiler::{
    export_aggregate, export_profile, export_rla, relative_log_amplitude, simulate_campaign,
    simulate_campaign_serial, CampaignKind, CAMPAIGN_PATCH, CAMPAIGN_TRIALS,
};
use crate::rng::SeedStream;
use crate::spam::{spam_backward, spam_forward, srf, SpamParams, SrfMask, SrfMode};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "spanet", version, about = "Graph-spectral mixer analysis and SPANetV2 reference models")]
struct Cli {
    /// Output directory for result files and manifests
    /// (default: $SPANET_OUT_DIR, then the working directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a randomized frequency-response campaign and export CSVs.
    Profile(ProfileArgs),
    /// Run an oracle suite; exit 0 only if every assertion passes.
    Verify(VerifyArgs),
    /// Build, run, or gradient-check a backbone from a JSON config.
    Model(ModelArgs),
    /// Ring-averaged relative log amplitude of a stored feature map.
    Rla(RlaArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphChoice {
    /// Window-connectivity patch graph profiled with convolution supports.
    Grid,
    /// Complete patch graph profiled with attention supports.
    Complete,
}

#[derive(Args)]
struct ProfileArgs {
    /// Patch graph family.
    #[arg(long, value_enum)]
    graph: GraphChoice,
    /// Odd convolution window size; required for grid, rejected otherwise.
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, default_value_t = CAMPAIGN_TRIALS)]
    trials: usize,
    /// Patch side length (patches are square).
    #[arg(long, default_value_t = CAMPAIGN_PATCH)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run trials on one thread instead of the parallel scheduler.
    #[arg(long)]
    serial: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteChoice {
    Conv,
    Attention,
    Srf,
    Grad,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: SuiteChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelAction {
    /// Initialize parameters; write them and a structure report.
    Build,
    /// Run the forward pass (on --image, or a zero image).
    Forward,
    /// Finite-difference check 5 sampled parameters of the built model.
    Gradcheck,
    /// Report the parameter count without materializing tensors.
    CountParams,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON architecture config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    action: ModelAction,
    /// Optional input: a tensor container holding a rank-3 "image" tensor.
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args)]
struct RlaArgs {
    /// Tensor container holding a rank-3 "feature_map" tensor.
    #[arg(long)]
    input: PathBuf,
}

/// Parse the process arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let out_dir = match resolve_out_dir(cli.out) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let result = match cli.command {
        Command::Profile(a) => cmd_profile(&out_dir, a),
        Command::Verify(a) => cmd_verify(&out_dir, a),
        Command::Model(a) => cmd_model(&out_dir, a),
        Command::Rla(a) => cmd_rla(&out_dir, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::MalformedContainer(_) => 3,
        _ => 2,
    }
}

fn resolve_out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| std::env::var_os("SPANET_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct OutputDigest {
    path: String,
    sha256: String,
}

/// Provenance record written next to every command's outputs. `flags` holds
/// the semantic flags only — the output directory is excluded so reruns in
/// different sandboxes produce byte-identical manifests.
#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    flags: serde_json::Value,
    seed: u64,
    version: String,
    outputs: Vec<OutputDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    flags: serde_json::Value,
    seed: u64,
    files: &[PathBuf],
) -> Result<PathBuf> {
    let mut outputs = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(f)?;
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        outputs.push(OutputDigest {
            path: name,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        command: command.to_string(),
        flags,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
    };
    let path = out_dir.join(format!("{command}_manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_profile(out_dir: &Path, args: ProfileArgs) -> Result<i32> {
    if args.trials == 0 {
        return Err(Error::InvalidConfig("--trials must be at least 1".into()));
    }
    if args.patch < 2 {
        return Err(Error::InvalidConfig(
            "--patch must be at least 2 (a 1x1 grid has no edges)".into(),
        ));
    }
    let kind = match args.graph {
        GraphChoice::Grid => {
            let m = args.kernel.ok_or_else(|| {
                Error::InvalidConfig("--kernel is required for --graph grid".into())
            })?;
            if m == 0 || m % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "--kernel must be odd and positive, got {m}"
                )));
            }
            CampaignKind::Conv { m }
        }
        GraphChoice::Complete => {
            if args.kernel.is_some() {
                return Err(Error::InvalidConfig(
                    "--kernel does not apply to --graph complete".into(),
                ));
            }
            CampaignKind::Attention
        }
    };
    let profile = if args.serial {
        simulate_campaign_serial(kind, args.trials, (args.patch, args.patch), args.seed)?
    } else {
        simulate_campaign(kind, args.trials, (args.patch, args.patch), args.seed)?
    };
    let profile_path = out_dir.join("profile.csv");
    let aggregate_path = out_dir.join("aggregate.csv");
    export_profile(&profile, &profile_path)?;
    export_aggregate(&profile, &aggregate_path)?;
    let flags = json!({
        "graph": match args.graph { GraphChoice::Grid => "grid", GraphChoice::Complete => "complete" },
        "kernel": args.kernel,
        "trials": args.trials,
        "patch": args.patch,
        "seed": args.seed,
        "serial": args.serial,
    });
    let manifest = write_manifest(
        out_dir,
        "profile",
        flags,
        args.seed,
        &[profile_path.clone(), aggregate_path.clone()],
    )?;
    println!(
        "wrote {} ({} trial rows), {}, {}",
        profile_path.display(),
        profile.trials.len(),
        aggregate_path.display(),
        manifest.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct CaseReport {
    index: usize,
    descriptor: String,
    error: f64,
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct SuiteReport {
    suite: String,
    instances: usize,
    max_error: f64,
    passed: bool,
    first_failure: Option<CaseReport>,
    cases: Vec<CaseReport>,
}

impl SuiteReport {
    fn from_cases(suite: &str, cases: Vec<CaseReport>) -> Self {
        let max_error = cases.iter().map(|c| c.error).fold(0.0, f64::max);
        let passed = cases.iter().all(|c| c.passed);
        let first_failure = cases.iter().find(|c| !c.passed).map(|c| CaseReport {
            index: c.index,
            descriptor: c.descriptor.clone(),
            error: c.error,
            tolerance: c.tolerance,
            passed: c.passed,
        });
        Self {
            suite: suite.to_string(),
            instances: cases.len(),
            max_error,
            passed,
            first_failure,
            cases,
        }
    }
}

#[derive(Serialize)]
struct VerifyReport {
    seed: u64,
    passed: bool,
    suites: Vec<SuiteReport>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Sparse conv-support route vs direct sliding-window route, randomized.
fn conv_suite(seed: u64) -> Result<SuiteReport> {
    let root = SeedStream::new(seed);
    let tol = 1e-12;
    let mut cases = Vec::with_capacity(100);
    for i in 0..100 {
        let mut s = root.split(&format!("conv/{i}"));
        let m = *s.choose(&[1usize, 3, 5, 7, 9]);
        let h = 2 + s.below(15);
        let w = 2 + s.below(15);
        let kernel = KernelSpec::new(m, s.normal_vec(m * m))?;
        let x = s.normal_vec(h * w);
        let support = ConvSupport::build(kernel.clone(), h, w)?;
        let sparse = support.apply(&x)?;
        let direct = direct_conv(&x, h, w, &kernel)?;
        let error = max_abs_diff(&sparse, &direct);
        cases.push(CaseReport {
            index: i,
            descriptor: format!("m={m} h={h} w={w}"),
            error,
            tolerance: tol,
            passed: error <= tol,
        });
    }
    Ok(SuiteReport::from_cases("conv", cases))
}

/// Attention-as-support route vs direct attention, randomized.
fn attention_suite(seed: u64) -> Result<SuiteReport> {
    let root = SeedStream::new(seed);
    let tol = 1e-10;
    let mut cases = Vec::with_capacity(50);
    for i in 0..50 {
        let mut s = root.split(&format!("attention/{i}"));
        let d = 1 + s.below(16);
        let h = 1 + s.below(8);
        let w = 1 + s.below(8);
        let dh = 1 + s.below(8);
        let wq = ndarray::Array2::from_shape_vec((d, dh), s.normal_vec(d * dh)).expect("sized");
        let wk = ndarray::Array2::from_shape_vec((d, dh), s.normal_vec(d * dh)).expect("sized");
        let wv = ndarray::Array2::from_shape_vec((d, d), s.normal_vec(d * d)).expect("sized");
        let params = AttentionParams::new(wq, wk, wv)?;
        let x = ndarray::Array2::from_shape_vec((d, h * w), s.normal_vec(d * h * w)).expect("sized");
        let via_support = attention_as_support(&x, &params)?;
        let direct = attention_direct(&x, &params)?;
        let error = max_abs_diff(
            via_support.as_slice().expect("row-major"),
            direct.as_slice().expect("row-major"),
        );
        cases.push(CaseReport {
            index: i,
            descriptor: format!("d={d} hw={} dh={dh}", h * w),
            error,
            tolerance: tol,
            passed: error <= tol,
        });
    }
    Ok(SuiteReport::from_cases("attention", cases))
}

/// Spectral-filter invariants: uniform-mask scaling, saturated pass-through,
/// and DC-removal; 20 randomized instances each.
fn srf_suite(seed: u64) -> Result<SuiteReport> {
    let root = SeedStream::new(seed);
    let mut cases = Vec::new();
    let mut index = 0;
    for i in 0..20 {
        let mut s = root.split(&format!("srf/uniform/{i}"));
        let d = 1 + s.below(4);
        let h = 2 + s.below(7);
        let w = 2 + s.below(7);
        let c = s.uniform_in(0.05, 0.95);
        let x = FeatureMap::new(d, h, w, s.normal_vec(d * h * w))?;
        let mut mask = SrfMask::zeros(SrfMode::Single, d, h, w);
        mask.logits.data_mut().fill((c / (1.0 - c)).ln());
        let out = srf(&x, &mask)?;
        let scaled: Vec<f64> = x.data().iter().map(|v| c * v).collect();
        let error = max_abs_diff(out.output.data(), &scaled);
        let tol = 1e-10;
        cases.push(CaseReport {
            index,
            descriptor: format!("uniform c={c:.4} d={d} h={h} w={w}"),
            error,
            tolerance: tol,
            passed: error <= tol,
        });
        index += 1;
    }
    for i in 0..20 {
        let mut s = root.split(&format!("srf/passthrough/{i}"));
        let d = 1 + s.below(4);
        let h = 2 + s.below(7);
        let w = 2 + s.below(7);
        let x = FeatureMap::new(d, h, w, s.normal_vec(d * h * w))?;
        let mut mask = SrfMask::zeros(SrfMode::Depthwise, d, h, w);
        mask.logits.data_mut().fill(20.0);
        let out = srf(&x, &mask)?;
        let error = max_abs_diff(out.output.data(), x.data());
        let tol = 1e-6;
        cases.push(CaseReport {
            index,
            descriptor: format!("passthrough d={d} h={h} w={w}"),
            error,
            tolerance: tol,
            passed: error <= tol,
        });
        index += 1;
    }
    for i in 0..20 {
        let mut s = root.split(&format!("srf/dc-zero/{i}"));
        let d = 1 + s.below(4);
        let h = 2 + s.below(7);
        let w = 2 + s.below(7);
        let x = FeatureMap::new(d, h, w, s.normal_vec(d * h * w))?;
        let mut mask = SrfMask::zeros(SrfMode::Depthwise, d, h, w);
        mask.logits.data_mut().fill(40.0);
        for c in 0..d {
            mask.logits.channel_mut(c)[0] = -40.0;
        }
        let out = srf(&x, &mask)?;
        let error = (0..d)
            .map(|c| {
                out.output.channel(c).iter().sum::<f64>().abs() / (h * w) as f64
            })
            .fold(0.0, f64::max);
        let tol = 1e-10;
        cases.push(CaseReport {
            index,
            descriptor: format!("dc-zero d={d} h={h} w={w}"),
            error,
            tolerance: tol,
            passed: error <= tol,
        });
        index += 1;
    }
    Ok(SuiteReport::from_cases("srf", cases))
}

/// Maximum finite-difference relative error over every SPAM parameter tensor
/// and the input, with the worst tensor's name.
fn spam_fd_max_rel(x: &FeatureMap, p: &SpamParams, r: &FeatureMap) -> Result<(f64, String)> {
    let (d, h, w) = x.dims();
    let analytic = spam_backward(x, p, r)?;
    let loss = |xx: &FeatureMap, pp: &SpamParams| -> Result<f64> {
        let out = spam_forward(xx, pp)?;
        Ok(out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let mut names = Vec::new();
    p.visit(&mut |name, _| names.push(name.to_string()));
    let mut worst = (0.0f64, String::from("input"));
    for name in &names {
        let mut current = Vec::new();
        p.visit(&mut |n, s| {
            if n == name {
                current = s.to_vec();
            }
        });
        let mut grad = Vec::new();
        analytic.params.visit(&mut |n, s| {
            if n == name {
                grad = s.to_vec();
            }
        });
        let entry = check_tensor(name, &current, &grad, FD_STEP, |vals| {
            let mut pp = p.clone();
            pp.visit_mut(&mut |n, s| {
                if n == name {
                    s.copy_from_slice(vals);
                }
            });
            loss(x, &pp)
        })?;
        if entry.rel_error > worst.0 {
            worst = (entry.rel_error, name.clone());
        }
    }
    let fd_input = finite_diff(
        |vals| {
            let xx = FeatureMap::new(d, h, w, vals.to_vec())?;
            loss(&xx, p)
        },
        x.data(),
        FD_STEP,
    )?;
    let rel = relative_error(analytic.input.data(), &fd_input);
    if rel > worst.0 {
        worst = (rel, "input".to_string());
    }
    Ok(worst)
}

/// Randomized SPAM instances, every tensor checked against finite
/// differences.
fn grad_suite(seed: u64) -> Result<SuiteReport> {
    let root = SeedStream::new(seed);
    let mut cases = Vec::with_capacity(10);
    for i in 0..10 {
        let s = root.split(&format!("grad/{i}"));
        let mode = if i % 2 == 0 {
            SrfMode::Depthwise
        } else {
            SrfMode::Single
        };
        let biases = i % 3 == 0;
        let (d, h, w) = (4, 4, 4);
        let mut p = SpamParams::random(d, h, w, mode, biases, &s.split("params"))?;
        let mut ms = s.split("mask-logits");
        for head in &mut p.heads {
            for v in head.mask.logits.data_mut() {
                *v = ms.uniform_in(-3.0, 3.0);
            }
        }
        let mut xs = s.split("input");
        let x = FeatureMap::new(d, h, w, xs.normal_vec(d * h * w))?;
        let mut rs = s.split("upstream");
        let r = FeatureMap::new(d, h, w, rs.normal_vec(d * h * w))?;
        let (error, worst) = spam_fd_max_rel(&x, &p, &r)?;
        cases.push(CaseReport {
            index: i,
            descriptor: format!(
                "mode={} biases={biases} worst={worst}",
                match mode {
                    SrfMode::Depthwise => "depthwise",
                    SrfMode::Single => "single",
                }
            ),
            error,
            tolerance: FD_TOL,
            passed: error <= FD_TOL,
        });
    }
    Ok(SuiteReport::from_cases("grad", cases))
}

fn cmd_verify(out_dir: &Path, args: VerifyArgs) -> Result<i32> {
    let suites = match args.suite {
        SuiteChoice::Conv => vec![conv_suite(args.seed)?],
        SuiteChoice::Attention => vec![attention_suite(args.seed)?],
        SuiteChoice::Srf => vec![srf_suite(args.seed)?],
        SuiteChoice::Grad => vec![grad_suite(args.seed)?],
        SuiteChoice::All => vec![
            conv_suite(args.seed)?,
            attention_suite(args.seed)?,
            srf_suite(args.seed)?,
            grad_suite(args.seed)?,
        ],
    };
    let report = VerifyReport {
        seed: args.seed,
        passed: suites.iter().all(|s| s.passed),
        suites,
    };
    let path = out_dir.join("verify_report.json");
    write_json(&path, &report)?;
    let flags = json!({
        "suite": match args.suite {
            SuiteChoice::Conv => "conv",
            SuiteChoice::Attention => "attention",
            SuiteChoice::Srf => "srf",
            SuiteChoice::Grad => "grad",
            SuiteChoice::All => "all",
        },
        "seed": args.seed,
    });
    write_manifest(out_dir, "verify", flags, args.seed, &[path])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.passed { 0 } else { 1 })
}

fn load_config(path: &Path) -> Result<StageConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: StageConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn load_image(path: &Path, expect_side: usize) -> Result<FeatureMap> {
    let container = TensorContainer::read_file(path)?;
    let t = container.get("image").ok_or_else(|| {
        Error::MalformedContainer(format!("{} has no \"image\" tensor", path.display()))
    })?;
    if t.shape.len() != 3 {
        return Err(Error::MalformedContainer(format!(
            "\"image\" tensor must be rank 3, has shape {:?}",
            t.shape
        )));
    }
    let (d, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    if (d, h, w) != (3, expect_side, expect_side) {
        return Err(Error::ShapeError(format!(
            "image is {d}x{h}x{w}, model expects 3x{expect_side}x{expect_side}"
        )));
    }
    FeatureMap::new(d, h, w, t.data.clone())
}

fn pack_model(model: &Model) -> TensorContainer {
    let mut c = TensorContainer::new();
    model.visit(&mut |name, slice| {
        c.insert(name, vec![slice.len()], slice.to_vec())
            .expect("model slot names are unique");
    });
    c
}

fn cmd_model(out_dir: &Path, args: ModelArgs) -> Result<i32> {
    let config = load_config(&args.config)?;
    let action_name = match args.action {
        ModelAction::Build => "build",
        ModelAction::Forward => "forward",
        ModelAction::Gradcheck => "gradcheck",
        ModelAction::CountParams => "count-params",
    };
    let flags = json!({
        "config": args.config.display().to_string(),
        "action": action_name,
        "image": args.image.as_ref().map(|p| p.display().to_string()),
    });
    let report_path = out_dir.join("model_report.json");
    let mut outputs = vec![report_path.clone()];
    let mut exit = 0;
    match args.action {
        ModelAction::CountParams => {
            let count = count_params(&config)?;
            write_json(
                &report_path,
                &json!({
                    "action": "count-params",
                    "param_count": count,
                    "accounting": "classifier head (norm gain + linear) included",
                    "config": config,
                }),
            )?;
        }
        ModelAction::Build => {
            let model = build_model(&config)?;
            let mut total = 0usize;
            let mut scopes = serde_json::Map::new();
            model.visit(&mut |name, slice| {
                total += slice.len();
                let scope = name.split('.').next().unwrap_or("other").to_string();
                let e = scopes.entry(scope).or_insert(json!(0));
                *e = json!(e.as_u64().unwrap_or(0) + slice.len() as u64);
            });
            let params_path = out_dir.join("params.spnt");
            pack_model(&model).write_file(&params_path)?;
            outputs.push(params_path);
            write_json(
                &report_path,
                &json!({
                    "action": "build",
                    "param_count": total,
                    "params_by_scope": scopes,
                    "accounting": "classifier head (norm gain + linear) included",
                    "config": config,
                }),
            )?;
        }
        ModelAction::Forward => {
            let model = build_model(&config)?;
            let image = match &args.image {
                Some(p) => load_image(p, config.input_size)?,
                None => FeatureMap::zeros(3, config.input_size, config.input_size),
            };
            let out = model.forward(&image)?;
            let shapes: Vec<[usize; 3]> = out
                .stage_features
                .iter()
                .map(|f| {
                    let (d, h, w) = f.dims();
                    [d, h, w]
                })
                .collect();
            write_json(
                &report_path,
                &json!({
                    "action": "forward",
                    "stage_shapes": shapes,
                    "pooled": out.pooled,
                    "logits": out.logits,
                    "config": config,
                }),
            )?;
        }
        ModelAction::Gradcheck => {
            let mut model = build_model(&config)?;
            // The classifier is zero-initialized; give it seeded nonzero
            // weights so gradients reach every layer during the check.
            let mut fc_stream = SeedStream::new(config.seed).split("gradcheck/fc");
            model.visit_mut(&mut |name, slice| {
                if name == "head.fc.weight" {
                    for v in slice {
                        *v = 0.3 * fc_stream.normal();
                    }
                }
            });
            let image = match &args.image {
                Some(p) => load_image(p, config.input_size)?,
                None => {
                    let mut s = SeedStream::new(config.seed).split("gradcheck/image");
                    FeatureMap::new(
                        3,
                        config.input_size,
                        config.input_size,
                        s.normal_vec(3 * config.input_size * config.input_size),
                    )?
                }
            };
            let mut us = SeedStream::new(config.seed).split("gradcheck/upstream");
            let upstream = us.normal_vec(config.num_classes);
            let report = coordinate_gradcheck(&model, &image, &upstream, 5, config.seed)?;
            exit = if report.passed { 0 } else { 1 };
            write_json(
                &report_path,
                &json!({
                    "action": "gradcheck",
                    "report": report,
                    "config": config,
                }),
            )?;
        }
    }
    write_manifest(out_dir, "model", flags, config.seed, &outputs)?;
    println!("{}", std::fs::read_to_string(&report_path)?);
    Ok(exit)
}

fn cmd_rla(out_dir: &Path, args: RlaArgs) -> Result<i32> {
    let container = TensorContainer::read_file(&args.input)?;
    let t = container.get("feature_map").ok_or_else(|| {
        Error::MalformedContainer(format!(
            "{} has no \"feature_map\" tensor",
            args.input.display()
        ))
    })?;
    if t.shape.len() != 3 {
        return Err(Error::MalformedContainer(format!(
            "\"feature_map\" tensor must be rank 3, has shape {:?}",
            t.shape
        )));
    }
    let x = FeatureMap::new(t.shape[0], t.shape[1], t.shape[2], t.data.clone())?;
    let curve = relative_log_amplitude(&x)?;
    let csv_path = out_dir.join("rla.csv");
    export_rla(&curve, &csv_path)?;
    let meta_path = out_dir.join("rla_meta.json");
    write_json(
        &meta_path,
        &json!({
            "channel_count": curve.channel_count,
            "rings": curve.radii.len(),
            "degenerate": curve.degenerate,
        }),
    )?;
    let flags = json!({ "input": args.input.display().to_string() });
    let manifest = write_manifest(out_dir, "rla", flags, 0, &[csv_path.clone(), meta_path])?;
    println!(
        "wrote {} ({} rings, degenerate={}), {}",
        csv_path.display(),
        curve.radii.len(),
        curve.degenerate,
        manifest.display()
    );
    Ok(0)
}
