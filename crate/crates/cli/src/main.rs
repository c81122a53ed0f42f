//! `r2d` — one binary exposing every pipeline stage for scripting:
//! quality maps, region refinement, distillation losses with gradient
//! checking, the incremental-learning simulator, and scenario splits.
//!
//! Output is machine-readable JSON by default (`--format csv` for CSV,
//! `--pretty` for human tables). Exit codes: 0 ok, 1 check failure,
//! 2 parse error, 3 misaligned inputs, 4 training divergence,
//! 5 scenario/spec error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use r2d_core::distill::{gradcheck, total_distill_loss, DistillMode, LossWeights};
use r2d_core::error::Error;
use r2d_core::region::{export_region_raster, refine_regions, RegionConfig};
use r2d_core::response::{classification_quality, regression_quality, ResponseBundle, Role};
use r2d_core::scenario::{load_annotations, split_by_steps, validate_split, ScenarioSpec};
use r2d_core::sim::{
    run_protocol, Protocol, ProtocolConfig, SimMetrics, SyntheticWorld, WorldConfig,
};

const DEFAULT_SEED: u64 = 18;
const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "r2d", version, about = "Refined response distillation toolkit")]
struct Cli {
    /// RNG seed; falls back to $R2D_SEED, then 17
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write output to this file instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Human-readable table output
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Refined,
    Candidates,
    All,
}

impl From<ModeArg> for DistillMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Refined => DistillMode::Refined,
            ModeArg::Candidates => DistillMode::Candidates,
            ModeArg::All => DistillMode::All,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Joint,
    Finetune,
    R2d,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Joint => Protocol::Joint,
            ProtocolArg::Finetune => Protocol::Finetune,
            ProtocolArg::R2d => Protocol::R2d,
        }
    }
}

#[derive(clap::Args)]
struct RegionFlags {
    /// Candidate threshold on classification quality
    #[arg(long, default_value_t = 0.05)]
    theta: f64,
    /// IoU threshold for NMS over decoded candidate boxes
    #[arg(long, default_value_t = 0.6)]
    nms_iou: f64,
}

impl RegionFlags {
    fn to_config(&self) -> RegionConfig {
        RegionConfig { theta: self.theta, nms_iou: self.nms_iou, ..RegionConfig::default() }
    }
}

#[derive(clap::Args)]
struct WeightFlags {
    /// Weight of the classification distillation term
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    /// Weight of the localization distillation term
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    /// Weight of the argmax-class KL inside high-value regions
    #[arg(long, default_value_t = 1.0)]
    lambda3: f64,
    /// Weight of the non-argmax KL inside high-value regions
    #[arg(long, default_value_t = 1.0)]
    lambda4: f64,
    /// Weight of the high-value localization KL
    #[arg(long, default_value_t = 1.0)]
    lambda5: f64,
    /// Weight of the low-value localization KL
    #[arg(long, default_value_t = 1.0)]
    lambda6: f64,
    /// Softening temperature for high-value localization distillation
    #[arg(long, default_value_t = 10.0)]
    t1: f64,
    /// Softening temperature for low-value localization distillation
    #[arg(long, default_value_t = 5.0)]
    t2: f64,
}

impl WeightFlags {
    fn to_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
            lambda6: self.lambda6,
            t1: self.t1,
            t2: self.t2,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Per-node distillation quality for both heads of a response bundle
    Quality {
        /// Response bundle JSON
        bundle: PathBuf,
    },
    /// Candidate selection, high/low split and NMS selections
    Regions {
        /// Response bundle JSON (treated as the teacher)
        bundle: PathBuf,
        #[command(flatten)]
        region: RegionFlags,
        /// Directory for per-level CSV rasters of both head partitions
        #[arg(long)]
        raster: Option<PathBuf>,
    },
    /// Distillation loss report between a teacher and a student bundle
    Loss {
        teacher: PathBuf,
        student: PathBuf,
        #[command(flatten)]
        region: RegionFlags,
        #[command(flatten)]
        weights: WeightFlags,
        /// Also compare analytic gradients against finite differences
        #[arg(long)]
        gradcheck: bool,
    },
    /// Incremental-learning simulation on the synthetic world
    Simulate {
        #[arg(long, value_enum, default_value_t = ProtocolArg::R2d)]
        protocol: ProtocolArg,
        /// Run all three protocols and emit a combined table
        #[arg(long)]
        compare: bool,
        /// Which nodes are distilled (ablation axis)
        #[arg(long, value_enum, default_value_t = ModeArg::Refined)]
        distill_mode: ModeArg,
        /// Comma-separated class counts per incremental step, e.g. "6,6"
        #[arg(long, default_value = "6,6")]
        steps: String,
        #[arg(long, default_value_t = 12)]
        num_classes: usize,
        #[arg(long, default_value_t = 150)]
        epochs: usize,
        #[arg(long, default_value_t = 4.0)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 32)]
        scenes_per_epoch: usize,
        /// Feature noise level of the synthetic world
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Shared-direction fraction of class prototypes
        #[arg(long, default_value_t = 0.6)]
        homogeneity: f64,
        /// Worker threads for --compare (independent runs only)
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        region: RegionFlags,
        #[command(flatten)]
        weights: WeightFlags,
    },
    /// Split a COCO-style annotation file into incremental steps
    Split {
        /// Scenario spec JSON: {name, steps:[[class_id,..],..], source, test_filter?}
        spec: PathBuf,
        /// Output directory for step files and the manifest
        #[arg(long, default_value = "splits")]
        out_dir: PathBuf,
    },
    /// Verify that built-in defaults match the standard settings
    Selftest,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Json(_) | Error::Io(_) | Error::InvalidBundle(_) | Error::InvalidProbVector(_) => 2,
            Error::MisalignedDetectors(_) | Error::LengthMismatch { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::SpecError(_)
            | Error::DanglingReference { .. }
            | Error::DuplicateId { .. }
            | Error::InvalidProtocol(_)
            | Error::InvalidWorld(_) => 5,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

/// Reads and parses JSON, reporting the byte offset of syntax errors.
fn parse_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        Failure::new(
            2,
            format!("{}: parse error at byte offset {offset}: {e}", path.display()),
        )
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

fn load_bundle(path: &Path, role: Role) -> Result<ResponseBundle, Failure> {
    let mut bundle: ResponseBundle = parse_json_file(path)?;
    bundle.role = role;
    bundle.validate().map_err(Failure::from)?;
    Ok(bundle)
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| Failure::new(2, format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn seed_of(cli: &Cli) -> u64 {
    cli.seed
        .or_else(|| std::env::var("R2D_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(DEFAULT_SEED)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Quality { bundle } => cmd_quality(&cli, bundle),
        Command::Regions { bundle, region, raster } => cmd_regions(&cli, bundle, region, raster),
        Command::Loss { teacher, student, region, weights, gradcheck } => {
            cmd_loss(&cli, teacher, student, region, weights, *gradcheck)
        }
        Command::Simulate { .. } => cmd_simulate(&cli),
        Command::Split { spec, out_dir } => cmd_split(&cli, spec, out_dir),
        Command::Selftest => cmd_selftest(),
    }
}

fn cmd_quality(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let bundle = load_bundle(path, Role::Teacher)?;
    let q_cls = classification_quality(&bundle.cls).map_err(Failure::from)?;
    let q_reg = regression_quality(&q_cls, &bundle.reg).map_err(Failure::from)?;
    let content = if cli.pretty {
        let mut s = format!("{:>6}  {:>12}  {:>12}\n", "node", "q_cls", "q_reg");
        for (i, (c, r)) in q_cls.values.iter().zip(&q_reg.values).enumerate() {
            s.push_str(&format!("{i:>6}  {c:>12.6}  {r:>12.6}\n"));
        }
        s
    } else {
        match cli.format {
            Format::Json => {
                let v = json!({"q_cls": q_cls.values, "q_reg": q_reg.values});
                format!("{}\n", serde_json::to_string_pretty(&v).unwrap())
            }
            Format::Csv => {
                let mut s = String::from("node,q_cls,q_reg\n");
                for (i, (c, r)) in q_cls.values.iter().zip(&q_reg.values).enumerate() {
                    s.push_str(&format!("{i},{c},{r}\n"));
                }
                s
            }
        }
    };
    emit(&cli.out, &content)
}

fn cmd_regions(
    cli: &Cli,
    path: &Path,
    flags: &RegionFlags,
    raster: &Option<PathBuf>,
) -> Result<(), Failure> {
    let bundle = load_bundle(path, Role::Teacher)?;
    let cfg = flags.to_config();
    let regions = refine_regions(&bundle, &cfg).map_err(Failure::from)?;

    if let Some(dir) = raster {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(2, format!("{}: {e}", dir.display())))?;
        for level in 0..bundle.grid.levels.len() {
            export_region_raster(
                &regions.cls,
                &bundle.grid,
                level,
                &dir.join(format!("cls_level{level}.csv")),
            )
            .map_err(Failure::from)?;
            export_region_raster(
                &regions.reg,
                &bundle.grid,
                level,
                &dir.join(format!("reg_level{level}.csv")),
            )
            .map_err(Failure::from)?;
        }
    }

    let content = if cli.pretty {
        format!(
            "candidates: {}\ncls high/low: {}/{}\nreg high/low: {}/{}\nreg kept high/low: {}/{}\n",
            regions.cls.candidates.len(),
            regions.cls.high.len(),
            regions.cls.low.len(),
            regions.reg.high.len(),
            regions.reg.low.len(),
            regions.reg_high_kept.kept.len(),
            regions.reg_low_kept.kept.len(),
        )
    } else {
        match cli.format {
            Format::Json => format!("{}\n", serde_json::to_string_pretty(&regions).unwrap()),
            Format::Csv => {
                // per-node membership table: 0 outside, 1 low, 2 high
                let mark = |high: &[usize], low: &[usize], i: usize| {
                    if high.contains(&i) {
                        2
                    } else if low.contains(&i) {
                        1
                    } else {
                        0
                    }
                };
                let mut s = String::from("node,cls,reg,kept\n");
                for i in 0..bundle.node_count() {
                    s.push_str(&format!(
                        "{i},{},{},{}\n",
                        mark(&regions.cls.high, &regions.cls.low, i),
                        mark(&regions.reg.high, &regions.reg.low, i),
                        mark(&regions.reg_high_kept.kept, &regions.reg_low_kept.kept, i),
                    ));
                }
                s
            }
        }
    };
    emit(&cli.out, &content)
}

fn cmd_loss(
    cli: &Cli,
    teacher: &Path,
    student: &Path,
    region: &RegionFlags,
    weights: &WeightFlags,
    run_gradcheck: bool,
) -> Result<(), Failure> {
    let teacher = load_bundle(teacher, Role::Teacher)?;
    let student = load_bundle(student, Role::Student)?;
    let cfg = region.to_config();
    let w = weights.to_weights();
    let report = total_distill_loss(&teacher, &student, &cfg, &w).map_err(Failure::from)?;

    let check = if run_gradcheck {
        Some(gradcheck(&teacher, &student, &cfg, &w, 1e-5).map_err(Failure::from)?)
    } else {
        None
    };

    let content = if cli.pretty {
        let mut s = String::new();
        for (name, value) in report.fields() {
            s.push_str(&format!("{name:<20} = {value:.9}\n"));
        }
        if let Some(err) = check {
            s.push_str(&format!("{:<20} = {err:.3e}\n", "gradcheck_max_rel_err"));
        }
        s
    } else {
        match cli.format {
            Format::Json => {
                let mut v = serde_json::to_value(&report).unwrap();
                if let Some(err) = check {
                    v["gradcheck_max_rel_err"] = json!(err);
                }
                format!("{}\n", serde_json::to_string_pretty(&v).unwrap())
            }
            Format::Csv => {
                let fields = report.fields();
                let mut header: Vec<String> = fields.iter().map(|(n, _)| n.to_string()).collect();
                let mut row: Vec<String> = fields.iter().map(|(_, v)| v.to_string()).collect();
                if let Some(err) = check {
                    header.push("gradcheck_max_rel_err".into());
                    row.push(err.to_string());
                }
                format!("{}\n{}\n", header.join(","), row.join(","))
            }
        }
    };
    emit(&cli.out, &content)?;

    if let Some(err) = check {
        if err >= GRADCHECK_TOL {
            return Err(Failure::new(
                1,
                format!("gradient check failed: max relative error {err:.3e} >= {GRADCHECK_TOL:e}"),
            ));
        }
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli) -> Result<(), Failure> {
    let Command::Simulate {
        protocol,
        compare,
        distill_mode,
        steps,
        num_classes,
        epochs,
        lr,
        batch_size,
        scenes_per_epoch,
        noise,
        homogeneity,
        jobs,
        region,
        weights,
    } = &cli.command
    else {
        unreachable!()
    };
    let seed = seed_of(cli);

    let counts: Vec<usize> = steps
        .split([',', '+'])
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::new(5, format!("bad --steps value {steps:?}")))?;
    let total: usize = counts.iter().sum();
    if total > *num_classes || counts.contains(&0) {
        return Err(Failure::new(
            5,
            format!("--steps {steps:?} needs {total} classes but --num-classes is {num_classes}"),
        ));
    }
    let mut class_steps = Vec::new();
    let mut next = 0;
    for c in counts {
        class_steps.push((next..next + c).collect::<Vec<_>>());
        next += c;
    }

    let world = SyntheticWorld::generate(WorldConfig {
        num_classes: *num_classes,
        noise_scale: *noise,
        homogeneity: *homogeneity,
        seed,
        ..WorldConfig::default()
    })
    .map_err(Failure::from)?;
    let make_cfg = |p: Protocol| ProtocolConfig {
        protocol: p,
        steps: class_steps.clone(),
        epochs: *epochs,
        learning_rate: *lr,
        batch_size: *batch_size,
        scenes_per_epoch: *scenes_per_epoch,
        weights: weights.to_weights(),
        region: region.to_config(),
        distill_mode: (*distill_mode).into(),
        seed,
    };

    let mut metrics = SimMetrics::default();
    if *compare {
        let protocols = [Protocol::Joint, Protocol::Finetune, Protocol::R2d];
        if *jobs > 1 {
            let handles: Vec<_> = protocols
                .iter()
                .map(|&p| {
                    let cfg = make_cfg(p);
                    let world = world.clone();
                    std::thread::spawn(move || run_protocol(&cfg, &world))
                })
                .collect();
            for h in handles {
                metrics.extend(h.join().expect("simulation thread panicked").map_err(Failure::from)?);
            }
        } else {
            for p in protocols {
                metrics.extend(run_protocol(&make_cfg(p), &world).map_err(Failure::from)?);
            }
        }
    } else {
        metrics = run_protocol(&make_cfg((*protocol).into()), &world).map_err(Failure::from)?;
    }

    let content = if cli.pretty {
        let mut s = format!(
            "{:<9} {:>4} {:>5} {:>8} {:>10}\n",
            "protocol", "step", "group", "score", "forgetting"
        );
        for r in &metrics.rows {
            s.push_str(&format!(
                "{:<9} {:>4} {:>5} {:>8.4} {:>10.4}\n",
                r.protocol.to_string(),
                r.step,
                r.group,
                r.score,
                r.forgetting
            ));
        }
        s
    } else {
        match cli.format {
            Format::Json => format!("{}\n", serde_json::to_string_pretty(&metrics).unwrap()),
            Format::Csv => metrics.to_csv(),
        }
    };
    emit(&cli.out, &content)
}

fn cmd_split(cli: &Cli, spec_path: &Path, out_dir: &Path) -> Result<(), Failure> {
    let mut spec: ScenarioSpec = parse_json_file(spec_path)?;
    spec.validate().map_err(Failure::from)?;
    // resolve a relative source against the spec file's directory
    if spec.source.is_relative() {
        if let Some(dir) = spec_path.parent() {
            spec.source = dir.join(&spec.source);
        }
    }
    let source = load_annotations(&spec.source).map_err(Failure::from)?;
    let manifest = split_by_steps(&source, &spec, out_dir).map_err(Failure::from)?;
    let report = validate_split(&manifest, &source).map_err(Failure::from)?;

    let content = if cli.pretty {
        let mut s = String::new();
        for step in &manifest.steps {
            s.push_str(&format!(
                "step {}: {} classes, {} images, {} annotations -> {}\n",
                step.step,
                step.class_ids.len(),
                step.image_count,
                step.annotation_count,
                step.path.display()
            ));
        }
        for c in &report.checks {
            s.push_str(&format!("[{}] {}: {}\n", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail));
        }
        s
    } else {
        format!(
            "{}\n",
            serde_json::to_string_pretty(&json!({"manifest": manifest, "validation": report}))
                .unwrap()
        )
    };
    emit(&cli.out, &content)?;

    if !report.passed {
        let problems: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.detail.as_str())
            .collect();
        return Err(Failure::new(5, format!("split validation failed: {}", problems.join("; "))));
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), Failure> {
    let region = RegionConfig::default();
    let weights = LossWeights::default();
    let checks = [
        ("theta", region.theta, 0.05),
        ("nms_iou", region.nms_iou, 0.6),
        ("t1", weights.t1, 10.0),
        ("t2", weights.t2, 5.0),
        ("lambda1", weights.lambda1, 1.0),
        ("lambda2", weights.lambda2, 1.0),
        ("lambda3", weights.lambda3, 1.0),
        ("lambda4", weights.lambda4, 1.0),
        ("lambda5", weights.lambda5, 1.0),
        ("lambda6", weights.lambda6, 1.0),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Err(Failure::new(1, format!("default {name} = {got}, expected {want}")));
        }
        println!("{name} = {got}");
    }
    println!("all defaults match");
    Ok(())
}
