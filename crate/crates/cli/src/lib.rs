//! `dcnalign` command-line tool: equivalence and gradient self-checks,
//! warping, offset analysis and the offset-fitting experiment.

mod parse;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dcnalign::alignment::image_align;
use dcnalign::analysis::analyze;
use dcnalign::harness::{fit_offsets, synth_pair, FitOptions, FlowKind, Init, SceneSpec, Texture};
use dcnalign::io::{
    format_g, heatmap_pgm, read_flo, read_tensor, stats_csv, write_tensor, CsvTable,
};
use dcnalign::losses::FidelityConfig;
use dcnalign::suites::{equivalence_suite, gradient_suite, EquivConfig, GradConfig};
use dcnalign::{Error, FeatureMap, FlowField, MaskField, OffsetField};

use parse::Occlusion;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dcnalign", version, about = "Deformable alignment toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check deformable convolution against its warp + 1x1 decomposition.
    EquivCheck(EquivArgs),
    /// Check every backward pass against central finite differences.
    GradCheck(GradArgs),
    /// Warp a (C,H,W) feature tensor by a flow field.
    Warp(WarpArgs),
    /// Offset statistics as CSV plus a diversity heatmap.
    Analyze(AnalyzeArgs),
    /// Fit offsets on a synthetic pair by gradient descent.
    Fit(FitArgs),
}

#[derive(Args, Debug)]
struct EquivArgs {
    /// Random instances per configuration.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    channels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    groups: Vec<usize>,
    /// Odd kernel sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    kernel: Vec<usize>,
    /// Square spatial sizes.
    #[arg(long, value_delimiter = ',', default_value = "6,12")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Per-configuration CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Per-check CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// TNSR feature of dims (C,H,W).
    #[arg(long)]
    feature: PathBuf,
    /// `.flo` file, or TNSR of dims (2,H,W).
    #[arg(long)]
    flow: PathBuf,
    /// Output TNSR path; keeps the feature's dtype.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// TNSR offsets of dims (G,N,2,H,W).
    #[arg(long)]
    offsets: PathBuf,
    /// `.flo` file, or TNSR of dims (2,H,W).
    #[arg(long)]
    flow: PathBuf,
    /// TNSR masks of dims (G,N,H,W).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Receives stats.csv and diversity.pgm.
    #[arg(long)]
    out_dir: PathBuf,
    /// Ascending positive L1 distances for the flow-distance CDF.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    thresholds: Vec<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// `DX,DY`, `affine:DX,DY,A11,A12,A21,A22` or
    /// `piecewise:SPLIT,DX1,DY1,DX2,DY2`.
    #[arg(long, default_value = "3,0", value_parser = parse::flow_kind)]
    flow: FlowKind,
    /// `none`, `HxW` (centred) or `TOP,LEFT,H,W`.
    #[arg(long, default_value = "6x6", value_parser = parse::occlusion)]
    occlusion: Occlusion,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Offsets per group.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Offset groups.
    #[arg(long, default_value_t = 1)]
    g: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    t: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// `zeros`, `flow`, `adversarial:D` or `spread:R`.
    #[arg(long, default_value = "adversarial:10", value_parser = parse::init)]
    init: Init,
    /// Per-step CSV trace.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::EquivCheck(a) => equiv_check(a, out),
        Command::GradCheck(a) => grad_check(a, out),
        Command::Warp(a) => warp_cmd(a, out),
        Command::Analyze(a) => analyze_cmd(a, out),
        Command::Fit(a) => fit_cmd(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Bad input files or arguments map to the usage code; anything raised
/// while computing is a failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::Format(_)
        | Error::Input(_)
        | Error::Shape(_)
        | Error::Size(_) => EXIT_USAGE,
        Error::Degenerate(_) | Error::Evaluation(_) | Error::Divergence { .. } => EXIT_FAILURE,
    }
}

fn verdict(pass: bool) -> (&'static str, i32) {
    if pass {
        ("PASS", EXIT_OK)
    } else {
        ("FAIL", EXIT_FAILURE)
    }
}

fn equiv_check(a: EquivArgs, out: &mut dyn Write) -> dcnalign::Result<i32> {
    let cfg = EquivConfig {
        cases: a.cases,
        channels: a.channels,
        groups: a.groups,
        kernels: a.kernel,
        sizes: a.sizes,
        seed: a.seed,
        ..EquivConfig::default()
    };
    let rows = equivalence_suite(&cfg)?;
    if rows.is_empty() {
        return Err(Error::Input(
            "no configuration has groups dividing channels".into(),
        ));
    }
    let worst = rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    if let Some(path) = &a.report {
        let mut t = CsvTable::new([
            "channels",
            "groups",
            "kernel",
            "size",
            "cases",
            "max_abs_diff",
        ]);
        for r in &rows {
            t.push([
                r.channels.to_string(),
                r.groups.to_string(),
                r.kernel.to_string(),
                r.size.to_string(),
                r.cases.to_string(),
                format_g(r.max_abs_diff),
            ]);
        }
        t.write(path)?;
    }
    let (word, code) = verdict(worst <= a.tol);
    let _ = writeln!(
        out,
        "equiv-check: {} configurations x {} cases, max_abs_diff {} (tol {}) {word}",
        rows.len(),
        cfg.cases,
        format_g(worst),
        format_g(a.tol)
    );
    Ok(code)
}

fn grad_check(a: GradArgs, out: &mut dyn Write) -> dcnalign::Result<i32> {
    let cfg = GradConfig {
        cases: a.cases,
        h: a.h,
        tol: a.tol,
        seed: a.seed,
    };
    let rows = gradient_suite(&cfg)?;
    if let Some(path) = &a.report {
        let mut t = CsvTable::new([
            "case",
            "operator",
            "argument",
            "parameters",
            "max_rel_err",
            "pass",
        ]);
        for r in &rows {
            t.push([
                r.case.to_string(),
                r.operator.to_string(),
                r.argument.to_string(),
                r.parameters.to_string(),
                format_g(r.max_rel_err),
                r.pass.to_string(),
            ]);
        }
        t.write(path)?;
    }
    for op in ["warp", "conv", "dcn", "fidelity"] {
        let worst = rows
            .iter()
            .filter(|r| r.operator == op)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        let _ = writeln!(out, "grad-check {op}: max_rel_err {}", format_g(worst));
    }
    let failures = rows.iter().filter(|r| !r.pass).count();
    let (word, code) = verdict(failures == 0);
    let _ = writeln!(
        out,
        "grad-check: {} checks over {} cases, {failures} above tol {} {word}",
        rows.len(),
        cfg.cases,
        format_g(cfg.tol)
    );
    Ok(code)
}

fn read_flow(path: &Path) -> dcnalign::Result<FlowField> {
    let is_flo = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("flo"));
    if is_flo {
        read_flo(path)
    } else {
        FlowField::new(read_tensor(path)?)
    }
}

fn warp_cmd(a: WarpArgs, out: &mut dyn Write) -> dcnalign::Result<i32> {
    let t = read_tensor(&a.feature)?;
    let dtype = t.dtype();
    let feature = FeatureMap::new(t)?;
    let flow = read_flow(&a.flow)?;
    let warped = image_align(&feature, &flow)?;
    write_tensor(&warped.into_tensor().with_dtype(dtype), &a.out)?;
    let _ = writeln!(out, "warp: wrote {}", a.out.display());
    Ok(EXIT_OK)
}

fn analyze_cmd(a: AnalyzeArgs, out: &mut dyn Write) -> dcnalign::Result<i32> {
    let offsets = OffsetField::new(read_tensor(&a.offsets)?)?;
    let flow = read_flow(&a.flow)?;
    let masks = a
        .masks
        .as_ref()
        .map(|p| read_tensor(p).and_then(MaskField::new))
        .transpose()?;
    let (report, diversity) = analyze(&offsets, &flow, masks.as_ref(), &a.thresholds)?;
    fs::create_dir_all(&a.out_dir).map_err(|source| Error::Io {
        path: a.out_dir.display().to_string(),
        source,
    })?;
    let csv = a.out_dir.join("stats.csv");
    let pgm = a.out_dir.join("diversity.pgm");
    stats_csv(&report).write(&csv)?;
    heatmap_pgm(&diversity, &pgm)?;
    let _ = writeln!(
        out,
        "analyze: diversity mean {} max {}; wrote {} and {}",
        format_g(diversity.mean()),
        format_g(diversity.max()),
        csv.display(),
        pgm.display()
    );
    Ok(EXIT_OK)
}

fn fit_cmd(a: FitArgs, out: &mut dyn Write) -> dcnalign::Result<i32> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        channels: a.channels,
        flow: a.flow,
        occlusion: a.occlusion.resolve(a.height, a.width),
        texture: Texture::default(),
        seed: a.seed,
    };
    let opts = FitOptions {
        per_group: a.n,
        groups: a.g,
        fidelity: FidelityConfig::new(a.lambda, a.t)?,
        steps: a.steps,
        lr: a.lr,
        init: a.init,
    };
    let (f_ref, f_nbr, flow) = synth_pair(&spec)?;
    let r = fit_offsets(&f_ref, &f_nbr, &flow, &opts)?;
    if let Some(path) = &a.report {
        let mut t = CsvTable::new([
            "step",
            "data_loss",
            "fidelity_loss",
            "max_deviation",
            "mean_diversity",
        ]);
        for i in 0..r.data_loss.len() {
            t.push([
                i.to_string(),
                format_g(r.data_loss[i]),
                format_g(r.fidelity_loss[i]),
                format_g(r.max_deviation[i]),
                format_g(r.mean_diversity[i]),
            ]);
        }
        t.push([
            "final".to_string(),
            format_g(r.final_data_loss),
            format_g(r.final_fidelity_loss),
            format_g(r.final_max_deviation),
            format_g(r.final_diversity),
        ]);
        t.write(path)?;
    }
    let _ = writeln!(
        out,
        "fit: {} steps, data loss {} -> {}, max deviation {} -> {}, diversity {}, converged {}",
        opts.steps,
        format_g(r.data_loss[0]),
        format_g(r.final_data_loss),
        format_g(r.max_deviation[0]),
        format_g(r.final_max_deviation),
        format_g(r.final_diversity),
        r.converged
    );
    Ok(EXIT_OK)
}
