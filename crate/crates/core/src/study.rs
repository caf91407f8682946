//! Parameter studies, macro runs and the invariant report, with
//! reproducible CSV output and JSON run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{
    constant_pair_defect, solve_cell, solve_cell_auto, solve_limit_ds_inf, solve_limit_kappa_inf, solve_limit_u0_inf,
    CellContext, CellSolutionSet, CoefficientSet,
};
use crate::dispersion::{
    assemble_dispersion, assemble_dispersion_alt, coercivity_report, relative_gap, DispersionTable, DispersionTensor,
};
use crate::error::{Error, Result};
use crate::isotherm::Isotherm;
use crate::macro_solver::{step, InitialData, MacroGrid, MacroModel, MacroRecord, MacroState};
use crate::mesh::{build_cell_mesh, read_mesh, CellGeometry, CellMesh};
use crate::velocity::{boundary_normal_flux, build_velocity, compute_drift, VelocityKind, VelocityRecipe};

/// Everything needed to set up one cell: geometry, mesh size, velocity and
/// coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    pub radius: f64,
    pub center: [f64; 2],
    pub h: f64,
    /// Read the mesh from this file instead of generating it.
    pub mesh_in: Option<PathBuf>,
    pub velocity: VelocityKind,
    pub surface_speed: f64,
    pub diffusion: [[f64; 2]; 2],
    pub surface_diffusion: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Background state for the `Ds` and `kappa` sweeps.
    pub u0: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            radius: 0.2,
            center: [0.5, 0.5],
            h: 1.0 / 32.0,
            mesh_in: None,
            velocity: VelocityKind::Symmetric,
            surface_speed: 0.0,
            diffusion: [[1.0, 0.0], [0.0, 1.0]],
            surface_diffusion: 1.0,
            kappa: 1.0,
            alpha: 1.0,
            beta: 1.0,
            u0: 2.5,
        }
    }
}

impl CellConfig {
    pub fn mesh(&self) -> Result<CellMesh> {
        match &self.mesh_in {
            Some(path) => {
                let file = std::fs::File::open(path)?;
                read_mesh(std::io::BufReader::new(file))
            }
            None => build_cell_mesh(&CellGeometry::disk(self.center, self.radius)?, self.h),
        }
    }

    pub fn build(&self) -> Result<(CellContext, CoefficientSet)> {
        let ctx = CellContext::new(self.mesh()?)?;
        let recipe = VelocityRecipe::new(self.velocity).with_surface_speed(self.surface_speed);
        let velocity = build_velocity(&ctx.mesh, &ctx.surface, &recipe)?;
        let d = self.diffusion;
        let coeffs = CoefficientSet {
            diffusion: Matrix2::new(d[0][0], d[0][1], d[1][0], d[1][1]),
            surface_diffusion: self.surface_diffusion,
            kappa: self.kappa,
            isotherm: Isotherm::new(self.alpha, self.beta)?,
            velocity,
        };
        coeffs.validate(&ctx)?;
        Ok((ctx, coeffs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    #[serde(rename = "u0")]
    U0,
    #[serde(rename = "Ds")]
    Ds,
    #[serde(rename = "kappa")]
    Kappa,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::U0 => "u0",
            Self::Ds => "Ds",
            Self::Kappa => "kappa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub spacing: Spacing,
    pub cell: CellConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Input(format!("sweep range needs min < max, got [{}, {}]", self.min, self.max)));
        }
        if self.count < 2 {
            return Err(Error::Input(format!("sweep needs at least 2 points, got {}", self.count)));
        }
        if self.spacing == Spacing::Log && !(self.min > 0.0) {
            return Err(Error::Input(format!("log spacing needs min > 0, got {}", self.min)));
        }
        if self.min < 0.0 {
            return Err(Error::Input(format!("{} must be non-negative, got {}", self.parameter.name(), self.min)));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.count - 1;
        let mut v: Vec<f64> = match self.spacing {
            Spacing::Linear => (0..=n).map(|k| self.min + (self.max - self.min) * k as f64 / n as f64).collect(),
            Spacing::Log => {
                let (a, b) = (self.min.ln(), self.max.ln());
                (0..=n).map(|k| (a + (b - a) * k as f64 / n as f64).exp()).collect()
            }
        };
        v[0] = self.min;
        v[n] = self.max;
        v
    }
}

/// One evaluated sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Parameter value, `None` for the limit row.
    pub value: Option<f64>,
    pub outcome: std::result::Result<PointData, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointData {
    pub tensor: DispersionTensor,
    pub lambda_min: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl PointData {
    fn new(tensor: DispersionTensor, cells: &CellSolutionSet) -> Self {
        let e = SymmetricEigen::new(tensor.a_sym).eigenvalues;
        Self {
            tensor,
            lambda_min: e[0].min(e[1]),
            residual: cells.diagnostics.residual,
            iterations: cells.diagnostics.iterations,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub mesh: MeshStats,
    pub points: Vec<SweepPoint>,
    pub limit: SweepPoint,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.points.iter().chain([&self.limit]).filter(|p| p.outcome.is_err()).count()
    }

    /// Successful `(value, data)` pairs in parameter order.
    pub fn series(&self) -> Vec<(f64, PointData)> {
        self.points
            .iter()
            .filter_map(|p| Some((p.value?, *p.outcome.as_ref().ok()?)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},A11,A12,A21,A22,A11_sym,A22_sym,lambda_min", self.spec.parameter.name())?;
        for p in self.points.iter().chain([&self.limit]) {
            let label = p.value.map_or_else(|| "limit".to_string(), |v| v.to_string());
            match &p.outcome {
                Ok(d) => {
                    let (a, s) = (d.tensor.a, d.tensor.a_sym);
                    writeln!(
                        w,
                        "{label},{},{},{},{},{},{},{}",
                        a[(0, 0)],
                        a[(0, 1)],
                        a[(1, 0)],
                        a[(1, 1)],
                        s[(0, 0)],
                        s[(1, 1)],
                        d.lambda_min
                    )?;
                }
                Err(_) => writeln!(w, "{label},NaN,NaN,NaN,NaN,NaN,NaN,NaN")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeshStats {
    pub h: f64,
    pub nodes: usize,
    pub triangles: usize,
    pub surface_nodes: usize,
    pub fluid_area: f64,
    pub surface_length: f64,
}

impl MeshStats {
    pub fn of(ctx: &CellContext) -> Self {
        Self {
            h: ctx.mesh.h,
            nodes: ctx.mesh.n_nodes(),
            triangles: ctx.mesh.triangles.len(),
            surface_nodes: ctx.n_surface(),
            fluid_area: ctx.fluid_area(),
            surface_length: ctx.surface_length(),
        }
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Input(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn sweep_point(ctx: &CellContext, base: &CoefficientSet, spec: &SweepSpec, value: f64) -> Result<PointData> {
    let u0 = spec.cell.u0;
    let (cells, coeffs) = match spec.parameter {
        SweepParameter::U0 => (solve_cell_auto(ctx, base, value)?, None),
        SweepParameter::Ds => {
            let mut c = base.clone();
            c.surface_diffusion = value;
            (solve_cell(ctx, &c, u0)?, Some(c))
        }
        SweepParameter::Kappa => {
            let mut c = base.clone();
            c.kappa = value;
            (solve_cell(ctx, &c, u0)?, Some(c))
        }
    };
    let tensor = assemble_dispersion(ctx, &cells, coeffs.as_ref().unwrap_or(base))?;
    Ok(PointData::new(tensor, &cells))
}

fn limit_point(ctx: &CellContext, coeffs: &CoefficientSet, spec: &SweepSpec) -> Result<PointData> {
    let cells = match spec.parameter {
        SweepParameter::U0 => solve_limit_u0_inf(ctx, coeffs)?,
        SweepParameter::Ds => solve_limit_ds_inf(ctx, coeffs, spec.cell.u0)?,
        SweepParameter::Kappa => solve_limit_kappa_inf(ctx, coeffs, spec.cell.u0)?,
    };
    Ok(PointData::new(assemble_dispersion(ctx, &cells, coeffs)?, &cells))
}

/// Evaluate every sweep point and the limit row; a failing point is
/// recorded and does not stop the others.
pub fn run_sweep(spec: &SweepSpec, jobs: Option<usize>) -> Result<SweepResult> {
    spec.validate()?;
    let (ctx, coeffs) = spec.cell.build()?;
    run_sweep_on(&ctx, &coeffs, spec, jobs)
}

pub fn run_sweep_on(ctx: &CellContext, coeffs: &CoefficientSet, spec: &SweepSpec, jobs: Option<usize>) -> Result<SweepResult> {
    spec.validate()?;
    let values = spec.values();
    let (points, limit) = with_pool(jobs, || {
        let points: Vec<SweepPoint> = values
            .par_iter()
            .map(|&v| SweepPoint {
                value: Some(v),
                outcome: sweep_point(ctx, coeffs, spec, v).map_err(|e| e.to_string()),
            })
            .collect();
        let limit = SweepPoint {
            value: None,
            outcome: limit_point(ctx, coeffs, spec).map_err(|e| e.to_string()),
        };
        (points, limit)
    })?;
    Ok(SweepResult {
        spec: spec.clone(),
        mesh: MeshStats::of(ctx),
        points,
        limit,
    })
}

/// Per-point record in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointRecord {
    pub label: String,
    pub residual: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

/// Description of one run: what was computed, with which code, and where
/// the outputs went.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub config: serde_json::Value,
    pub mesh: Option<MeshStats>,
    pub points: Vec<PointRecord>,
    pub failures: usize,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialEcho>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash(&config)?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            mesh: None,
            points: Vec::new(),
            failures: 0,
            outputs: Vec::new(),
            initial: None,
        })
    }

    pub fn for_sweep(result: &SweepResult) -> Result<Self> {
        let mut m = Self::new(&format!("sweep-{}", result.spec.parameter.name().to_lowercase()), &result.spec)?;
        m.mesh = Some(result.mesh);
        m.points = result
            .points
            .iter()
            .chain([&result.limit])
            .map(|p| {
                let label = p.value.map_or_else(|| "limit".to_string(), |v| v.to_string());
                match &p.outcome {
                    Ok(d) => PointRecord {
                        label,
                        residual: Some(d.residual),
                        iterations: Some(d.iterations),
                        error: None,
                    },
                    Err(e) => PointRecord {
                        label,
                        residual: None,
                        iterations: None,
                        error: Some(e.clone()),
                    },
                }
            })
            .collect();
        m.failures = result.failures();
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Hex SHA-256 of the compact JSON form of a configuration.
pub fn config_hash(config: &serde_json::Value) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Parse a JSON configuration, reporting the path of a failing field.
pub fn parse_config<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        what: what.to_string(),
        detail: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

/// Rule for the initial surface concentration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceInit {
    /// `v_in` solving the well-preparedness equation.
    #[default]
    WellPrepared,
    /// `v_in = f(u_in)`.
    Equilibrium,
    /// `v_in = 0`.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// `background + amplitude·exp(−|x − center|² / (2 width²))`.
    Bump {
        amplitude: f64,
        width: f64,
        #[serde(default)]
        center: Option<[f64; 2]>,
        #[serde(default)]
        background: f64,
        #[serde(default)]
        surface: SurfaceInit,
    },
    Constant {
        value: f64,
        #[serde(default)]
        surface: SurfaceInit,
    },
    Values {
        u_in: Vec<f64>,
        v_in: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub u0_max: f64,
    pub points: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self { u0_max: 100.0, points: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    #[serde(default)]
    pub cell: CellConfig,
    #[serde(default)]
    pub table: TableConfig,
    /// Use this tensor instead of tabulating the cell problem.
    #[serde(default)]
    pub constant_tensor: Option<[[f64; 2]; 2]>,
    pub grid: MacroGrid,
    /// Time step; the stability-scaled heuristic when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    pub steps: usize,
    pub initial: InitialConfig,
}

/// Initial data recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialEcho {
    pub u_in: Vec<f64>,
    pub v_in: Vec<f64>,
    pub u0_init: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MacroRun {
    pub records: Vec<MacroRecord>,
    pub initial: InitialData,
    pub dt: f64,
    pub state: MacroState,
    pub mesh: Option<MeshStats>,
    pub newton_iterations: Vec<usize>,
}

impl MacroRun {
    /// `t,mass,stored_energy,min_u,max_u` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,mass,stored_energy,min_u,max_u")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.t, r.mass, r.stored_energy, r.min_u, r.max_u)?;
        }
        Ok(())
    }

    /// Final profile as `x,y,u,z` rows.
    pub fn write_profile<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,u,z")?;
        for (k, (u, z)) in self.state.u.iter().zip(&self.state.z).enumerate() {
            let c = self.state.grid.center(k);
            writeln!(w, "{},{},{u},{z}", c[0], c[1])?;
        }
        Ok(())
    }

    pub fn manifest(&self, config: &MacroConfig) -> Result<RunManifest> {
        let mut m = RunManifest::new("macro", config)?;
        m.mesh = self.mesh;
        m.points = self
            .newton_iterations
            .iter()
            .enumerate()
            .map(|(k, &it)| PointRecord {
                label: format!("step {}", k + 1),
                residual: None,
                iterations: Some(it),
                error: None,
            })
            .collect();
        m.initial = Some(InitialEcho {
            u_in: self.initial.u_in.clone(),
            v_in: self.initial.v_in.clone(),
            u0_init: self.initial.u0_init.clone(),
        });
        Ok(m)
    }
}

fn initial_u(config: &MacroConfig, grid: &MacroGrid) -> Result<(Vec<f64>, Option<SurfaceInit>)> {
    match &config.initial {
        InitialConfig::Bump {
            amplitude,
            width,
            center,
            background,
            surface,
        } => {
            if !(*width > 0.0) {
                return Err(Error::Input(format!("bump width must be positive, got {width}")));
            }
            let c = center.unwrap_or([0.5 * grid.length[0], 0.5 * grid.length[1]]);
            let u = (0..grid.len())
                .map(|k| {
                    let x = grid.center(k);
                    let mut r2 = (x[0] - c[0]).powi(2);
                    if grid.is_2d() {
                        r2 += (x[1] - c[1]).powi(2);
                    }
                    background + amplitude * (-r2 / (2.0 * width * width)).exp()
                })
                .collect();
            Ok((u, Some(*surface)))
        }
        InitialConfig::Constant { value, surface } => Ok((vec![*value; grid.len()], Some(*surface))),
        InitialConfig::Values { u_in, .. } => Ok((u_in.clone(), None)),
    }
}

/// Build the homogenized model from the configuration.
pub fn macro_model(config: &MacroConfig) -> Result<(MacroModel, Option<MeshStats>)> {
    let isotherm = Isotherm::new(config.cell.alpha, config.cell.beta)?;
    match config.constant_tensor {
        Some(a) => {
            let g = CellGeometry::disk(config.cell.center, config.cell.radius)?;
            let model = MacroModel {
                isotherm,
                fluid_area: g.fluid_area,
                surface_length: g.surface_length,
                table: DispersionTable::constant(Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1])),
            };
            Ok((model, None))
        }
        None => {
            let (ctx, coeffs) = config.cell.build()?;
            let table = DispersionTable::tabulate(&ctx, &coeffs, config.table.u0_max, config.table.points)?;
            let model = MacroModel {
                isotherm,
                fluid_area: ctx.fluid_area(),
                surface_length: ctx.surface_length(),
                table,
            };
            Ok((model, Some(MeshStats::of(&ctx))))
        }
    }
}

pub fn run_macro(config: &MacroConfig, jobs: Option<usize>) -> Result<MacroRun> {
    let grid = MacroGrid::new(config.grid.n, config.grid.length)?;
    with_pool(jobs, || {
        let (model, mesh) = macro_model(config)?;
        let (u_in, rule) = initial_u(config, &grid)?;
        let initial = match (&config.initial, rule) {
            (InitialConfig::Values { v_in, .. }, _) => InitialData::new(&model, u_in, v_in.clone())?,
            (_, Some(SurfaceInit::WellPrepared)) => InitialData::well_prepared(&model, u_in)?,
            (_, Some(SurfaceInit::Equilibrium)) => {
                let v = u_in.iter().map(|&u| model.isotherm.f(u)).collect();
                InitialData::new(&model, u_in, v)?
            }
            (_, _) => {
                let v = vec![0.0; u_in.len()];
                InitialData::new(&model, u_in, v)?
            }
        };
        let mut state = MacroState::new(&model, grid, initial.u0_init.clone())?;
        let dt = config.dt.unwrap_or_else(|| model.default_dt(&grid));
        let mut records = vec![MacroRecord::of(&model, &state)];
        let mut newton_iterations = Vec::with_capacity(config.steps);
        for _ in 0..config.steps {
            newton_iterations.push(step(&model, &mut state, dt)?.newton_iterations);
            records.push(MacroRecord::of(&model, &state));
        }
        Ok(MacroRun {
            records,
            initial,
            dt,
            state,
            mesh,
            newton_iterations,
        })
    })?
}

/// Deliberate corruption of computed tensors, used to exercise the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Add the given amount to `A*₁₂`.
    SkewA12(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub h: f64,
    /// Second mesh size for the formula-equivalence refinement column.
    pub compare_h: Option<f64>,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            h: 1.0 / 32.0,
            compare_h: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail,
        }
    }

    fn error(name: &str, e: &Error) -> Self {
        Self {
            name: name.to_string(),
            measured: f64::NAN,
            tolerance: f64::NAN,
            passed: false,
            detail: e.to_string(),
        }
    }
}

fn corrupt(mut t: DispersionTensor, fault: Option<Fault>) -> DispersionTensor {
    if let Some(Fault::SkewA12(d)) = fault {
        t.a[(0, 1)] += d;
    }
    t
}

fn cell_setup(h: f64, kind: VelocityKind, beta: f64) -> Result<(CellContext, CoefficientSet)> {
    CellConfig {
        h,
        velocity: kind,
        beta,
        ..CellConfig::default()
    }
    .build()
}

fn formula_gap(h: f64, fault: Option<Fault>) -> Result<f64> {
    let (ctx, coeffs) = cell_setup(h, VelocityKind::Symmetric, 1.0)?;
    let cells = solve_cell(&ctx, &coeffs, 2.5)?.with_auxiliaries(&ctx, &coeffs.velocity)?;
    let primary = corrupt(assemble_dispersion(&ctx, &cells, &coeffs)?, fault);
    let alt = assemble_dispersion_alt(&ctx, &cells, &coeffs)?;
    Ok(relative_gap(&primary.a, &alt.a))
}

/// Run the invariant suite on the default configuration.
pub fn verify(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let h = opts.h;
    let velocities = [VelocityKind::Symmetric, VelocityKind::NonSymmetric];

    for kind in velocities {
        let name = format!("drift ({})", kind_name(kind));
        let r = cell_setup(h, kind, 1.0).and_then(|(ctx, coeffs)| {
            let d = compute_drift(&ctx.mesh, &ctx.surface, &coeffs.velocity)?;
            let flux = boundary_normal_flux(&ctx.mesh, &ctx.surface, &coeffs.velocity)?;
            let fmax = flux.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bulk = d.bulk[0].abs().max(d.bulk[1].abs());
            let surf = d.surface[0].abs().max(d.surface[1].abs());
            Ok((bulk.max(surf).max(fmax), format!("bulk {bulk:.3e}, surface {surf:.3e}, normal flux {fmax:.3e}")))
        });
        out.push(match r {
            Ok((m, detail)) => CheckResult::at_most(&name, m, 1e-10, detail),
            Err(e) => CheckResult::error(&name, &e),
        });
    }

    for kind in velocities {
        let name = format!("compatibility ({})", kind_name(kind));
        let r = cell_setup(h, kind, 1.0).and_then(|(ctx, coeffs)| {
            let mut worst = 0.0f64;
            for u0 in [0.0, 0.1, 2.5, 100.0] {
                let d = constant_pair_defect(&ctx, &coeffs, u0)?;
                worst = worst.max(d[0].abs()).max(d[1].abs());
            }
            Ok(worst)
        });
        out.push(match r {
            Ok(m) => CheckResult::at_most(&name, m, 1e-10, "rhs tested against the constant pair".into()),
            Err(e) => CheckResult::error(&name, &e),
        });
    }

    let tol = if h <= 1.0 / 64.0 { 5e-3 } else { 2e-2 };
    let name = "formula equivalence";
    out.push(match formula_gap(h, opts.fault) {
        Ok(g) => {
            let mut detail = format!("relative Frobenius gap at h = {h}");
            let mut passed = g <= tol;
            if let Some(h2) = opts.compare_h {
                match formula_gap(h2, opts.fault) {
                    Ok(g2) => detail.push_str(&format!("; {g2:.3e} at h = {h2}")),
                    Err(e) => {
                        detail.push_str(&format!("; h = {h2} failed: {e}"));
                        passed = false;
                    }
                }
            }
            CheckResult {
                name: name.into(),
                measured: g,
                tolerance: tol,
                passed,
                detail,
            }
        }
        Err(e) => CheckResult::error(name, &e),
    });

    let name = "symmetry (b = 0)";
    let r = cell_setup(h, VelocityKind::Zero, 1.0).and_then(|(ctx, coeffs)| {
        let cells = solve_cell(&ctx, &coeffs, 2.5)?;
        let t = corrupt(assemble_dispersion(&ctx, &cells, &coeffs)?, opts.fault);
        let a = t.a;
        Ok((a[(0, 0)] - a[(1, 1)]).abs().max(a[(0, 1)].abs()).max(a[(1, 0)].abs()))
    });
    out.push(match r {
        Ok(m) => CheckResult::at_most(name, m, 1e-6, "max of |A11 - A22|, |A12|, |A21|".into()),
        Err(e) => CheckResult::error(name, &e),
    });

    let name = "coercivity";
    let r = cell_setup(h, VelocityKind::Symmetric, 1.0).and_then(|(ctx, coeffs)| {
        let mut worst: Option<(f64, f64, f64)> = None;
        for u0 in [0.0, 0.1, 1.0, 2.5, 10.0, 100.0] {
            let cells = solve_cell_auto(&ctx, &coeffs, u0)?;
            let t = corrupt(assemble_dispersion(&ctx, &cells, &coeffs)?, opts.fault);
            let rep = coercivity_report(&ctx, &t, &coeffs)?;
            let margin = rep.bound - rep.lambda_min;
            if worst.is_none_or(|w| margin > w.0) {
                worst = Some((margin, rep.lambda_min, rep.bound));
            }
        }
        Ok(worst.expect("non-empty grid"))
    });
    out.push(match r {
        Ok((margin, lmin, bound)) => CheckResult::at_most(
            name,
            margin,
            crate::dispersion::COERCIVITY_TOL,
            format!("worst lambda_min(A_sym) = {lmin:.6} against |Y0| lambda_min(D) = {bound:.6}"),
        ),
        Err(e) => CheckResult::error(name, &e),
    });

    let name = "linear-isotherm invariance";
    let r = cell_setup(h, VelocityKind::Symmetric, 0.0).and_then(|(ctx, coeffs)| {
        let tensors = [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&u0| assemble_dispersion(&ctx, &solve_cell(&ctx, &coeffs, u0)?, &coeffs).map(|t| t.a))
            .collect::<Result<Vec<_>>>()?;
        Ok(tensors.iter().map(|a| relative_gap(&tensors[0], a)).fold(0.0, f64::max))
    });
    out.push(match r {
        Ok(m) => CheckResult::at_most(name, m, 1e-10, "max relative change over u0 in {0.1, 1, 10, 100}".into()),
        Err(e) => CheckResult::error(name, &e),
    });

    let name = "well-prepared root";
    let r = (|| -> Result<f64> {
        let g = CellGeometry::centered_disk();
        let iso = Isotherm::default();
        let mut worst = 0.0f64;
        for u in [0.0, 0.5, 3.0, 50.0] {
            worst = worst.max((iso.well_prepared_vin(&g, u)? - iso.f(u)).abs());
        }
        Ok(worst)
    })();
    out.push(match r {
        Ok(m) => CheckResult::at_most(name, m, 1e-10, "|v_in - f(u_in)| for u_in in {0, 0.5, 3, 50}".into()),
        Err(e) => CheckResult::error(name, &e),
    });
    out
}

fn kind_name(kind: VelocityKind) -> &'static str {
    match kind {
        VelocityKind::Zero => "zero",
        VelocityKind::Symmetric => "symmetric",
        VelocityKind::NonSymmetric => "nonsymmetric",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(parameter: SweepParameter, min: f64, max: f64, spacing: Spacing) -> SweepSpec {
        SweepSpec {
            parameter,
            min,
            max,
            count: 4,
            spacing,
            cell: CellConfig {
                h: 1.0 / 16.0,
                ..CellConfig::default()
            },
        }
    }

    #[test]
    fn sweep_values_hit_the_endpoints() {
        let s = spec(SweepParameter::Ds, 0.01, 100.0, Spacing::Log);
        let v = s.values();
        assert_eq!(v.len(), 4);
        assert_eq!((v[0], v[3]), (0.01, 100.0));
        assert!((v[1] - 0.1 * 10f64.powf(1.0 / 3.0)).abs() < 1e-12);
        let lin = spec(SweepParameter::U0, 0.0, 3.0, Spacing::Linear).values();
        assert_eq!(lin, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(spec(SweepParameter::U0, 1.0, 1.0, Spacing::Linear).validate().is_err());
        assert!(spec(SweepParameter::U0, 0.0, 1.0, Spacing::Log).validate().is_err());
        let mut s = spec(SweepParameter::U0, 0.0, 1.0, Spacing::Linear);
        s.count = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sweep_csv_has_fixed_header_and_limit_row() {
        let s = spec(SweepParameter::Kappa, 0.1, 10.0, Spacing::Log);
        let r = run_sweep(&s, Some(2)).unwrap();
        assert_eq!(r.failures(), 0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kappa,A11,A12,A21,A22,A11_sym,A22_sym,lambda_min");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("limit,"));
        let m = RunManifest::for_sweep(&r).unwrap();
        assert_eq!(m.points.len(), 5);
        assert_eq!(m.config_hash.len(), 64);
    }

    #[test]
    fn failing_point_does_not_abort_the_sweep() {
        // f'(u0) falls below the coupling threshold for kappa sweeps at huge u0
        let mut s = spec(SweepParameter::Kappa, 0.1, 10.0, Spacing::Log);
        s.cell.u0 = 1e9;
        let r = run_sweep(&s, Some(1)).unwrap();
        assert_eq!(r.failures(), 4);
        assert!(r.limit.outcome.is_ok());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().ends_with("NaN"));
    }

    #[test]
    fn config_errors_carry_the_field_path() {
        let bad = r#"{"grid": {"n": [10, 1], "length": [1.0, 1.0]}, "steps": 2,
                      "initial": {"bump": {"amplitude": "big", "width": 1.0}}}"#;
        let e = parse_config::<MacroConfig>("macro config", bad).unwrap_err().to_string();
        assert!(e.contains("initial.bump.amplitude"), "{e}");
    }

    #[test]
    fn constant_macro_run_is_stationary() {
        let cfg = MacroConfig {
            cell: CellConfig::default(),
            table: TableConfig::default(),
            constant_tensor: Some([[0.8, 0.0], [0.0, 0.8]]),
            grid: MacroGrid::line(16, 2.0).unwrap(),
            dt: Some(0.1),
            steps: 5,
            initial: InitialConfig::Constant {
                value: 0.4,
                surface: SurfaceInit::Equilibrium,
            },
        };
        let run = run_macro(&cfg, None).unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn fault_injection_is_flagged() {
        let opts = VerifyOptions {
            h: 1.0 / 16.0,
            compare_h: None,
            fault: Some(Fault::SkewA12(1e-3)),
        };
        let report = verify(&opts);
        let get = |n: &str| report.iter().find(|c| c.name == n).unwrap().clone();
        assert!(!get("symmetry (b = 0)").passed);
        assert!(!get("coercivity").passed);
        assert!(get("coercivity").detail.contains("symmetric groups"));
    }
}
