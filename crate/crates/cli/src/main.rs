//! Command-line front end: mesh generation, dispersion sweeps, macro runs
//! and the invariant report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dispersion_lab::cell::{solve_cell_auto, write_bulk_correctors, write_cell_system, write_surface_correctors};
use dispersion_lab::mesh::{measure, write_mesh};
use dispersion_lab::study::{
    parse_config, run_macro, run_sweep_on, verify, CellConfig, Fault, MacroConfig, MeshStats, RunManifest,
    Spacing, SweepParameter, SweepSpec, VerifyOptions,
};
use dispersion_lab::velocity::{write_velocity_csv, VelocityKind};

#[derive(Parser)]
#[command(name = "dispersion-lab", version, about = "Effective dispersion of reactive transport in periodic porous cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or read) a cell mesh and print its statistics.
    Mesh(MeshArgs),
    /// Dispersion tensor against the background state u0.
    SweepU0(SweepArgs),
    /// Dispersion tensor against the surface diffusion coefficient.
    SweepDs(SweepArgs),
    /// Dispersion tensor against the adsorption rate kappa.
    SweepKappa(SweepArgs),
    /// Run the homogenized equation from a JSON configuration.
    Macro(MacroArgs),
    /// Check the invariant suite on the default configuration.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VelocityArg {
    Zero,
    Symmetric,
    Nonsymmetric,
}

impl From<VelocityArg> for VelocityKind {
    fn from(v: VelocityArg) -> Self {
        match v {
            VelocityArg::Zero => VelocityKind::Zero,
            VelocityArg::Symmetric => VelocityKind::Symmetric,
            VelocityArg::Nonsymmetric => VelocityKind::NonSymmetric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SpacingArg {
    Linear,
    Log,
}

/// Mesh size as a decimal or a fraction such as `1/32`.
fn parse_h(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("mesh size must be positive, got {s}"))
    }
}

#[derive(Args)]
struct CellArgs {
    /// JSON cell configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_h)]
    h: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    mesh_in: Option<PathBuf>,
    #[arg(long, value_enum)]
    velocity: Option<VelocityArg>,
    #[arg(long)]
    surface_speed: Option<f64>,
    #[arg(long)]
    ds: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Background state for the Ds and kappa sweeps.
    #[arg(long)]
    u0: Option<f64>,
}

impl CellArgs {
    fn resolve(&self) -> Result<CellConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config::<CellConfig>("cell config", &text)?
            }
            None => CellConfig::default(),
        };
        macro_rules! set {
            ($field:ident, $value:expr) => {
                if let Some(v) = $value {
                    c.$field = v;
                }
            };
        }
        set!(h, self.h);
        set!(radius, self.radius);
        set!(surface_speed, self.surface_speed);
        set!(surface_diffusion, self.ds);
        set!(kappa, self.kappa);
        set!(alpha, self.alpha);
        set!(beta, self.beta);
        set!(u0, self.u0);
        set!(velocity, self.velocity.map(VelocityKind::from));
        if self.mesh_in.is_some() {
            c.mesh_in = self.mesh_in.clone();
        }
        Ok(c)
    }
}

#[derive(Args)]
struct MeshArgs {
    #[command(flatten)]
    cell: CellArgs,
    #[arg(long)]
    mesh_out: Option<PathBuf>,
    /// Per-triangle velocity CSV.
    #[arg(long)]
    velocity_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cell: CellArgs,
    #[arg(long)]
    min: Option<f64>,
    #[arg(long)]
    max: Option<f64>,
    #[arg(long, default_value_t = 21)]
    points: usize,
    #[arg(long, value_enum)]
    spacing: Option<SpacingArg>,
    #[arg(long)]
    out: PathBuf,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Worker count.
    #[arg(long, env = "DISPERSION_LAB_JOBS")]
    jobs: Option<usize>,
    /// Coupled system at the reference u0 in `row col value` form.
    #[arg(long)]
    dump_system: Option<PathBuf>,
    /// Prefix for corrector CSVs at the reference u0.
    #[arg(long)]
    dump_correctors: Option<PathBuf>,
}

#[derive(Args)]
struct MacroArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Final profile CSV.
    #[arg(long)]
    profile_out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, env = "DISPERSION_LAB_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = parse_h, default_value = "1/32")]
    h: f64,
    /// Also report the formula-equivalence gap at this mesh size.
    #[arg(long, value_parser = parse_h)]
    compare_h: Option<f64>,
    /// Corrupt A12 of every computed tensor by this amount.
    #[arg(long)]
    inject_skew: Option<f64>,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn manifest_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

fn cmd_mesh(args: &MeshArgs) -> Result<ExitCode> {
    let cfg = args.cell.resolve()?;
    let (ctx, coeffs) = cfg.build()?;
    let (area, length) = measure(&ctx.mesh);
    let stats = MeshStats::of(&ctx);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    println!("measured fluid area {area}, obstacle perimeter {length}");
    if let Some(p) = &args.mesh_out {
        let mut w = create(p)?;
        write_mesh(&ctx.mesh, &mut w)?;
        w.flush()?;
    }
    if let Some(p) = &args.velocity_out {
        let mut w = create(p)?;
        write_velocity_csv(&ctx.mesh, &coeffs.velocity, &mut w)?;
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(parameter: SweepParameter, args: &SweepArgs) -> Result<ExitCode> {
    let (def_min, def_max, def_spacing) = match parameter {
        SweepParameter::U0 => (0.0, 100.0, SpacingArg::Linear),
        SweepParameter::Ds => (0.01, 1000.0, SpacingArg::Log),
        SweepParameter::Kappa => (0.01, 1e4, SpacingArg::Log),
    };
    let spec = SweepSpec {
        parameter,
        min: args.min.unwrap_or(def_min),
        max: args.max.unwrap_or(def_max),
        count: args.points,
        spacing: match args.spacing.unwrap_or(def_spacing) {
            SpacingArg::Linear => Spacing::Linear,
            SpacingArg::Log => Spacing::Log,
        },
        cell: args.cell.resolve()?,
    };
    spec.validate()?;
    let (ctx, coeffs) = spec.cell.build()?;
    let result = run_sweep_on(&ctx, &coeffs, &spec, args.jobs)?;
    let mut manifest = RunManifest::for_sweep(&result)?;

    let mut w = create(&args.out)?;
    result.write_csv(&mut w)?;
    w.flush()?;
    manifest.outputs.push(args.out.clone());

    if let Some(p) = &args.dump_system {
        let mut w = create(p)?;
        write_cell_system(&ctx, &coeffs, spec.cell.u0, &mut w)?;
        w.flush()?;
        manifest.outputs.push(p.clone());
    }
    if let Some(prefix) = &args.dump_correctors {
        let cells = solve_cell_auto(&ctx, &coeffs, spec.cell.u0)?;
        let with_suffix = |s: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(s);
            PathBuf::from(p)
        };
        let (bulk, surface) = (with_suffix("_bulk.csv"), with_suffix("_surface.csv"));
        let mut w = create(&bulk)?;
        write_bulk_correctors(&ctx, &cells, &mut w)?;
        w.flush()?;
        let mut w = create(&surface)?;
        write_surface_correctors(&ctx, &cells, &mut w)?;
        w.flush()?;
        manifest.outputs.extend([bulk, surface]);
    }
    manifest.write(&manifest_path(&args.out, &args.manifest))?;

    for p in result.points.iter().chain([&result.limit]) {
        if let Err(e) = &p.outcome {
            let label = p.value.map_or_else(|| "limit".to_string(), |v| v.to_string());
            eprintln!("point {}={label} failed: {e}", parameter.name());
        }
    }
    let failures = result.failures();
    println!(
        "{} points, {failures} failed, written to {}",
        result.points.len() + 1,
        args.out.display()
    );
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_macro(args: &MacroArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config: MacroConfig = match parse_config("macro config", &text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let run = run_macro(&config, args.jobs)?;
    let mut manifest = run.manifest(&config)?;
    let mut w = create(&args.out)?;
    run.write_csv(&mut w)?;
    w.flush()?;
    manifest.outputs.push(args.out.clone());
    if let Some(p) = &args.profile_out {
        let mut w = create(p)?;
        run.write_profile(&mut w)?;
        w.flush()?;
        manifest.outputs.push(p.clone());
    }
    manifest.write(&manifest_path(&args.out, &args.manifest))?;
    let (first, last) = (&run.records[0], &run.records[run.records.len() - 1]);
    println!(
        "{} steps of dt = {:.4e}; mass {:.12e} -> {:.12e}; max u {:.6} -> {:.6}",
        run.records.len() - 1,
        run.dt,
        first.mass,
        last.mass,
        first.max_u,
        last.max_u
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let opts = VerifyOptions {
        h: args.h,
        compare_h: args.compare_h,
        fault: args.inject_skew.map(Fault::SkewA12),
    };
    let report = verify(&opts);
    for c in &report {
        println!(
            "{:<4} {:<30} measured {:>11.4e}  tolerance {:>9.2e}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance,
            c.detail
        );
    }
    if let Some(p) = &args.out {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
        w.flush()?;
    }
    let failed = report.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", report.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Mesh(a) => cmd_mesh(a),
        Command::SweepU0(a) => cmd_sweep(SweepParameter::U0, a),
        Command::SweepDs(a) => cmd_sweep(SweepParameter::Ds, a),
        Command::SweepKappa(a) => cmd_sweep(SweepParameter::Kappa, a),
        Command::Macro(a) => cmd_macro(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::SweepU0(a) | Command::SweepDs(a) | Command::SweepKappa(a) = &cli.command {
        if a.points < 2 {
            eprintln!("error: --points must be at least 2");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_size_accepts_fractions() {
        assert_eq!(parse_h("1/32"), Ok(1.0 / 32.0));
        assert_eq!(parse_h("0.0625"), Ok(0.0625));
        assert!(parse_h("0").is_err());
        assert!(parse_h("1/x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let args = CellArgs {
            config: None,
            h: Some(0.0625),
            radius: None,
            mesh_in: None,
            velocity: Some(VelocityArg::Nonsymmetric),
            surface_speed: None,
            ds: Some(3.0),
            kappa: None,
            alpha: None,
            beta: None,
            u0: None,
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.h, 0.0625);
        assert_eq!(c.velocity, VelocityKind::NonSymmetric);
        assert_eq!(c.surface_diffusion, 3.0);
        assert_eq!(c.kappa, 1.0);
    }
}
