//! Command-line front end.
//!
//! Exit codes: 0 on success (including `--help`/`--version`), 1 on a usage
//! error (unknown flags or subcommands, malformed values), 2 on a runtime
//! error (missing files, invalid configuration, failed checks).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::model::{load_checkpoint, model_gradcheck, NetSpec};
use crate::spectral::{hsda_transfer, make_fda_mask, make_hsg_mask};
use crate::trainer::{
    eval_cases, evaluate, run_experiment, write_report_csv, EmaRole, EvalReport, MaskType, Mode,
    TrainConfig,
};
use crate::volume::{
    generate_phantom, mip_project, vol_read, vol_write, write_atomic, Axis, Dims, ModalityStyle,
    PhantomSpec,
};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "transwarp",
    version,
    about = "Volumetric domain adaptation: spectral amplitude transfer, contrastive \
             student-teacher training, synthetic vessel phantoms"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic vessel phantom (volume and labels in one file)
    Gen(GenArgs),
    /// Re-render a source volume with blended-in target Fourier amplitudes
    Transfer(TransferArgs),
    /// Export spectral-mask weights as a volume (centered layout)
    Mask(MaskArgs),
    /// Export a maximum-intensity projection as an 8-bit PGM image
    Mip(MipArgs),
    /// Check analytic gradients against finite differences, layer by layer
    Gradcheck(GradcheckArgs),
    /// Run a training experiment and evaluate it on held-out phantoms
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the configured held-out set
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    /// Bright tubes on a dark background, light noise
    A,
    /// Brighter window, weak tube contrast, heavy bias field and noise
    B,
}

impl From<ModalityArg> for ModalityStyle {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::A => ModalityStyle::A,
            ModalityArg::B => ModalityStyle::B,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
    Z,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

/// Mask families that actually transfer amplitudes.
#[derive(Clone, Copy, ValueEnum)]
enum TransferMaskArg {
    /// Homocentric-square Gaussian weights
    Hsg,
    /// Binary low-frequency box
    Fda,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskTypeArg {
    Hsg,
    Fda,
    None,
}

impl From<MaskTypeArg> for MaskType {
    fn from(m: MaskTypeArg) -> Self {
        match m {
            MaskTypeArg::Hsg => MaskType::Hsg,
            MaskTypeArg::Fda => MaskType::Fda,
            MaskTypeArg::None => MaskType::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    SourceOnly,
    FullMethod,
    TargetOracle,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SourceOnly => Mode::SourceOnly,
            ModeArg::FullMethod => Mode::FullMethod,
            ModeArg::TargetOracle => Mode::TargetOracle,
        }
    }
}

/// Cumulative ablation stages, each adding one ingredient.
#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    /// Supervised loss only, no input transfer
    Fully,
    /// Adds the consistency loss, still no input transfer
    Semi,
    /// Adds the contrastive loss, still no input transfer
    Transwarp,
    /// Adds the spectral input transfer (the complete method)
    Hsda,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum EmaRoleArg {
    AsPrinted,
    TeacherIsEma,
}

impl From<EmaRoleArg> for EmaRole {
    fn from(r: EmaRoleArg) -> Self {
        match r {
            EmaRoleArg::AsPrinted => EmaRole::AsPrinted,
            EmaRoleArg::TeacherIsEma => EmaRole::TeacherIsEma,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Cubic edge length in voxels
    #[arg(long, default_value_t = 32)]
    dims: usize,
    /// Imaging style of the phantom
    #[arg(long, value_enum, ignore_case = true, default_value = "a")]
    modality: ModalityArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of tubes threaded through the volume
    #[arg(long, default_value_t = 3)]
    tubes: usize,
    /// Smallest tube radius in voxels
    #[arg(long, default_value_t = 1.5)]
    radius_min: f64,
    /// Largest tube radius in voxels (at most dims/4)
    #[arg(long, default_value_t = 3.0)]
    radius_max: f64,
    /// Output directory; phantom.vol1 is written inside
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Volume contributing content (phase and residual amplitude)
    #[arg(long)]
    src: PathBuf,
    /// Volume contributing the blended-in amplitudes
    #[arg(long)]
    tgt: PathBuf,
    /// Gaussian width of the hsg mask
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, value_enum, default_value = "hsg")]
    mask_type: TransferMaskArg,
    /// Half-width fraction of the fda box, in (0, 0.5]
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    /// Output volume path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    /// Cubic edge length in voxels
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, value_enum, default_value = "hsg")]
    mask_type: TransferMaskArg,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    /// Output volume path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MipArgs {
    /// Input volume
    #[arg(long)]
    input: PathBuf,
    /// Projection axis
    #[arg(long, value_enum, ignore_case = true, default_value = "z")]
    axis: AxisArg,
    /// Output PGM path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Cubic edge length of the probe input
    #[arg(long, default_value_t = 16)]
    dims: usize,
    /// Encoder channel widths
    #[arg(long, default_value_t = 8)]
    c1: usize,
    #[arg(long, default_value_t = 16)]
    c2: usize,
    #[arg(long, default_value_t = 32)]
    c3: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters probed per layer
    #[arg(long, default_value_t = 4)]
    probes: usize,
    /// Output CSV path
    #[arg(long, default_value = "gradcheck.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// What to train on
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Cumulative ablation stage (full_method only)
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// JSON configuration file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    mask_type: Option<MaskTypeArg>,
    #[arg(long, value_enum)]
    ema_role: Option<EmaRoleArg>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON configuration file describing the held-out set
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to write report.csv into (otherwise print only)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses arguments, dispatches, and maps the outcome to an exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version render on stdout and succeed; everything
            // else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Prefixes I/O errors with the file they concern.
fn with_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => other,
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Mask(a) => cmd_mask(a),
        Cmd::Mip(a) => cmd_mip(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let dims = Dims::new(a.dims, a.dims, a.dims)?;
    let spec = PhantomSpec {
        dims,
        n_tubes: a.tubes,
        radius_range: (a.radius_min, a.radius_max),
        style: a.modality.into(),
        seed: a.seed,
    };
    let (vol, mask) = generate_phantom(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("phantom.vol1");
    vol_write(&path, &vol, Some(&mask))?;
    let (lo, hi) = vol.min_max();
    println!(
        "wrote {} ({}x{}x{}, foreground fraction {:.4}, intensity range [{:.4}, {:.4}])",
        path.display(),
        dims.nx,
        dims.ny,
        dims.nz,
        mask.foreground_fraction(),
        lo,
        hi
    );
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let (src, _) = with_path(vol_read(&a.src), &a.src)?;
    let (tgt, _) = with_path(vol_read(&a.tgt), &a.tgt)?;
    let mask = match a.mask_type {
        TransferMaskArg::Hsg => make_hsg_mask(src.dims, a.sigma)?,
        TransferMaskArg::Fda => make_fda_mask(src.dims, a.beta)?,
    };
    let (out, residue) = hsda_transfer(&src, &tgt, &mask)?;
    vol_write(&a.out, &out, None)?;
    let (lo, hi) = out.min_max();
    println!(
        "wrote {} (max imaginary residue {:.3e}, intensity range [{:.6}, {:.6}])",
        a.out.display(),
        residue,
        lo,
        hi
    );
    Ok(())
}

fn cmd_mask(a: MaskArgs) -> Result<()> {
    let dims = Dims::new(a.dims, a.dims, a.dims)?;
    let mask = match a.mask_type {
        TransferMaskArg::Hsg => make_hsg_mask(dims, a.sigma)?,
        TransferMaskArg::Fda => make_fda_mask(dims, a.beta)?,
    };
    let vol = mask.to_volume();
    vol_write(&a.out, &vol, None)?;
    let (lo, hi) = vol.min_max();
    let sum: f64 = vol.data.iter().sum();
    println!(
        "wrote {} (weight range [{:.6}, {:.6}], total weight {:.3})",
        a.out.display(),
        lo,
        hi,
        sum
    );
    Ok(())
}

fn cmd_mip(a: MipArgs) -> Result<()> {
    let (vol, _) = with_path(vol_read(&a.input), &a.input)?;
    let img = mip_project(&vol, a.axis.into());
    let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().map(|&x| ((x - lo) * scale).round().clamp(0.0, 255.0) as u8));
    write_atomic(&a.out, &bytes)?;
    println!(
        "wrote {} ({}x{} pgm, projected range [{:.6}, {:.6}])",
        a.out.display(),
        img.width,
        img.height,
        lo,
        hi
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let dims = Dims::new(a.dims, a.dims, a.dims)?;
    let spec = NetSpec::new(dims, (a.c1, a.c2, a.c3))?;
    let rows = model_gradcheck(&spec, a.seed, a.probes)?;
    let mut csv = String::from("layer,probes,max_rel_err\n");
    let mut worst = 0.0f64;
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.layer, r.probes, r.max_rel_err));
        println!("{:<8} probes {:>3}  max rel err {:.3e}", r.layer, r.probes, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    write_atomic(&a.out, csv.as_bytes())?;
    if worst >= 1e-3 {
        return Err(Error::invalid(
            "gradient check",
            format!("max relative error {worst:.3e} is not below 1e-3"),
        ));
    }
    println!("all layers below 1e-3 (worst {worst:.3e}); wrote {}", a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let bytes = with_path(std::fs::read(p).map_err(Error::from), p)?;
            Ok(serde_json::from_slice(&bytes)?)
        }
    }
}

fn apply_ablation(cfg: &mut TrainConfig, ablation: AblationArg) {
    match ablation {
        AblationArg::Fully => {
            cfg.lambdas.lambda2 = 0.0;
            cfg.lambdas.lambda3 = 0.0;
            cfg.mask_type = MaskType::None;
        }
        AblationArg::Semi => {
            cfg.lambdas.lambda3 = 0.0;
            cfg.mask_type = MaskType::None;
        }
        AblationArg::Transwarp => {
            cfg.mask_type = MaskType::None;
        }
        AblationArg::Hsda => {}
    }
}

fn print_report_summary(report: &EvalReport) {
    println!("cases: {}", report.cases.len());
    let (m, s) = (&report.mean, &report.std);
    println!(
        "mean  dsc {:7.3}  sen {:7.3}  jac {:7.3}  vs {:7.3}",
        m.dsc, m.sen, m.jac, m.vs
    );
    println!(
        "std   dsc {:7.3}  sen {:7.3}  jac {:7.3}  vs {:7.3}",
        s.dsc, s.sen, s.jac, s.vs
    );
    let flagged = report.cases.iter().filter(|c| c.flagged).count();
    if flagged > 0 {
        println!(
            "note: {flagged} case(s) had empty prediction and ground truth; \
             their metrics are defined as 100"
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.out {
        cfg.out_dir = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.mask_type {
        cfg.mask_type = v.into();
    }
    if let Some(v) = a.ema_role {
        cfg.ema_role = v.into();
    }
    let mode: Mode = a.mode.into();
    if let Some(ablation) = a.ablation {
        if mode != Mode::FullMethod {
            return Err(Error::invalid("--ablation", "only applies to --mode full_method"));
        }
        apply_ablation(&mut cfg, ablation);
    }
    cfg.validate()?;
    let out = run_experiment(&cfg, mode)?;
    print_report_summary(&out.report);
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let (spec, params) = with_path(load_checkpoint(&a.ckpt), &a.ckpt)?;
    let want = cfg.net_spec()?;
    if spec != want {
        return Err(Error::invalid(
            "--ckpt",
            format!("checkpoint shape {spec:?} does not match the configuration's {want:?}"),
        ));
    }
    let cases = eval_cases(&cfg)?;
    let report = evaluate(&spec, &params, &cases, 0.5)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("report.csv");
        write_report_csv(&path, &report)?;
        println!("wrote {}", path.display());
    }
    print_report_summary(&report);
    Ok(())
}
