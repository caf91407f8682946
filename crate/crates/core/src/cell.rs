//! Coupled bulk–surface cell problems for the correctors `(χᵢ, ωᵢ)`, the
//! auxiliary Poisson problems `(ξᵢ, Ξᵢ)` and the three limit regimes.
//!
//! The coupled system is assembled with the surface rows divided by `f'(u₀)`.
//! This leaves the discrete solution unchanged and keeps the matrix well
//! conditioned when `f'(u₀)` is small; residuals and compatibility are also
//! available for the unscaled form.

use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    assemble_bulk, assemble_coupling, assemble_surface, bulk_gradient_load, bulk_load, bulk_lumped_mass, check_spd,
    surface_gradient_load, surface_load, surface_lumped_mass, surface_mass, AffineConstraint, ConstrainedOperator,
    FieldOnCell, P1Triangle, Solution, SolverKind, SparseMatrix, SparseSystem,
};
use crate::isotherm::Isotherm;
use crate::mesh::{extract_surface_mesh, CellMesh, DofMap, SurfaceMesh};
use crate::velocity::VelocityField;

/// Below this value of `f'(u₀)` the coupled solver refuses to run.
pub const FPRIME_THRESHOLD: f64 = 1e-12;

/// Mesh-dependent data shared by every cell solve.
#[derive(Debug, Clone)]
pub struct CellContext {
    pub mesh: CellMesh,
    pub dofs: DofMap,
    pub surface: SurfaceMesh,
    /// Bulk dof of each loop vertex.
    pub trace: Vec<usize>,
    pub bulk_lumped: Vec<f64>,
    pub surface_lumped: Vec<f64>,
    pub elements: Vec<P1Triangle>,
}

impl CellContext {
    pub fn new(mesh: CellMesh) -> Result<Self> {
        let dofs = DofMap::periodic(&mesh);
        let surface = extract_surface_mesh(&mesh)?;
        let trace = surface.loop_nodes.iter().map(|&i| dofs.node_dof[i]).collect();
        let bulk_lumped = bulk_lumped_mass(&mesh, &dofs);
        let surface_lumped = surface_lumped_mass(&surface);
        let elements = (0..mesh.triangles.len()).map(|t| P1Triangle::of(&mesh, t)).collect();
        Ok(Self {
            mesh,
            dofs,
            surface,
            trace,
            bulk_lumped,
            surface_lumped,
            elements,
        })
    }

    pub fn n_bulk(&self) -> usize {
        self.dofs.n_dofs
    }

    pub fn n_surface(&self) -> usize {
        self.surface.len()
    }

    /// Discrete `|Y⁰|`.
    pub fn fluid_area(&self) -> f64 {
        self.bulk_lumped.iter().sum()
    }

    /// Discrete `|∂Σ⁰|`.
    pub fn surface_length(&self) -> f64 {
        self.surface_lumped.iter().sum()
    }

    /// Node values of a bulk dof vector.
    pub fn bulk_field(&self, dof_values: &[f64]) -> FieldOnCell {
        FieldOnCell::bulk_from_dofs(&self.dofs, dof_values)
    }

    /// Dof values of a bulk node field.
    pub fn bulk_dofs(&self, field: &FieldOnCell) -> Vec<f64> {
        let mut out = vec![0.0; self.dofs.n_dofs];
        for (node, &d) in self.dofs.node_dof.iter().enumerate() {
            out[d] = field.values[node];
        }
        out
    }

    /// Bulk field restricted to the loop vertices.
    pub fn trace_of(&self, field: &FieldOnCell) -> Vec<f64> {
        self.surface.loop_nodes.iter().map(|&i| field.values[i]).collect()
    }
}

/// Every input of the cell problem except the evaluation point `u₀`.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub diffusion: Matrix2<f64>,
    pub surface_diffusion: f64,
    pub kappa: f64,
    pub isotherm: Isotherm,
    pub velocity: VelocityField,
}

impl CoefficientSet {
    /// Unit diffusions, `κ = α = β = 1`, and the given velocity.
    pub fn defaults(velocity: VelocityField) -> Self {
        Self {
            diffusion: Matrix2::identity(),
            surface_diffusion: 1.0,
            kappa: 1.0,
            isotherm: Isotherm::default(),
            velocity,
        }
    }

    pub fn fprime(&self, u0: f64) -> f64 {
        self.isotherm.fprime(u0)
    }

    pub fn validate(&self, ctx: &CellContext) -> Result<()> {
        check_spd(&self.diffusion)?;
        if !(self.surface_diffusion > 0.0) || !self.surface_diffusion.is_finite() {
            return Err(Error::Coefficient(format!(
                "surface diffusion must be positive, got {}",
                self.surface_diffusion
            )));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::Coefficient(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        Isotherm::new(self.isotherm.alpha, self.isotherm.beta)?;
        if self.velocity.bulk.len() != ctx.mesh.triangles.len() || self.velocity.surface_speed.len() != ctx.n_surface() {
            return Err(Error::Input("velocity field does not match the mesh".into()));
        }
        crate::velocity::compute_drift(&ctx.mesh, &ctx.surface, &self.velocity)?;
        Ok(())
    }

    fn require_positive_kappa(&self) -> Result<()> {
        if self.kappa > 0.0 {
            Ok(())
        } else {
            Err(Error::Coefficient("kappa must be positive for this cell problem".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Coupled,
    U0Limit,
    DsLimit,
    KappaLimit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveDiagnostics {
    /// Largest relative residual over the two directions.
    pub residual: f64,
    pub iterations: usize,
}

impl SolveDiagnostics {
    fn absorb(&mut self, s: &Solution) {
        self.residual = self.residual.max(s.residual);
        self.iterations += s.iterations;
    }
}

#[derive(Debug, Clone)]
pub struct CellSolutionSet {
    pub u0: f64,
    pub fprime: f64,
    pub regime: Regime,
    pub chi: [FieldOnCell; 2],
    pub omega: [FieldOnCell; 2],
    /// Bulk auxiliaries `ξᵢ`, when solved.
    pub xi: Option<[FieldOnCell; 2]>,
    /// Surface auxiliaries `Ξᵢ`, when solved.
    pub xi_surface: Option<[FieldOnCell; 2]>,
    /// First-order surface flux potential of the infinite surface diffusion
    /// limit, `ω = c − y + W/Dˢ + …`.
    pub surface_flux: Option<[Vec<f64>; 2]>,
    pub diagnostics: SolveDiagnostics,
}

impl CellSolutionSet {
    /// `∫ χᵢ + ∫ ωᵢ`.
    pub fn normalization(&self, ctx: &CellContext, i: usize) -> f64 {
        dot(&ctx.bulk_lumped, &ctx.bulk_dofs(&self.chi[i])) + dot(&ctx.surface_lumped, &self.omega[i].values)
    }

    /// Attach the auxiliary fields.
    pub fn with_auxiliaries(mut self, ctx: &CellContext, velocity: &VelocityField) -> Result<Self> {
        let (xi, xs) = solve_aux(ctx, velocity)?;
        self.xi = Some(xi);
        self.xi_surface = Some(xs);
        Ok(self)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How the constant-pair kernel of the coupled problem is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `∫χ + ∫ω = 0` through a Lagrange multiplier.
    #[default]
    ZeroMean,
    /// Pin the bulk dof to zero, then shift to zero mean.
    PinBulkDof(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSolveOptions {
    pub normalization: Normalization,
    /// Divide the surface rows by `f'(u₀)` before solving.
    pub equilibrate: bool,
    pub solver: SolverKind,
}

impl Default for CellSolveOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::ZeroMean,
            equilibrate: true,
            solver: SolverKind::Auto,
        }
    }
}

fn unit(i: usize) -> Vector2<f64> {
    if i == 0 {
        Vector2::x()
    } else {
        Vector2::y()
    }
}

/// `∫ (b* − b)·eᵢ φ − ∫ D eᵢ·∇φ` on bulk dofs.
pub fn bulk_rhs(ctx: &CellContext, coeffs: &CoefficientSet, i: usize) -> Vec<f64> {
    let bstar = coeffs.velocity.drift[i];
    let mut f = bulk_load(&ctx.mesh, &ctx.dofs, &|t| bstar - coeffs.velocity.bulk[t][i]);
    let flux = coeffs.diffusion * unit(i);
    let g = bulk_gradient_load(&ctx.mesh, &ctx.dofs, &|_| flux);
    f.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
    f
}

/// `∫ (b* − bˢ)·eᵢ ψ − ds ∫ tᵢ ∂ₛψ` on loop vertices, without the `f'` factor.
pub fn surface_rhs(ctx: &CellContext, coeffs: &CoefficientSet, i: usize, ds: f64) -> Vec<f64> {
    let s = &ctx.surface;
    let bstar = coeffs.velocity.drift[i];
    let mut f = surface_load(s, &|k| bstar - coeffs.velocity.surface_vector(s, k)[i]);
    let g = surface_gradient_load(s, &|k| ds * s.tangents[k][i]);
    f.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
    f
}

fn bulk_operator(ctx: &CellContext, coeffs: &CoefficientSet) -> Result<SparseMatrix> {
    let d = coeffs.diffusion;
    assemble_bulk(&ctx.mesh, &ctx.dofs, &|_| d, Some(&coeffs.velocity.bulk), 0.0)
}

fn surface_operator(ctx: &CellContext, coeffs: &CoefficientSet, ds: f64, reaction: f64) -> Result<SparseMatrix> {
    assemble_surface(&ctx.surface, ds, Some(&coeffs.velocity.surface_speed), reaction)
}

/// Coupled operator on `[bulk dofs; loop vertices]` with the surface rows
/// multiplied by `surface_row_scale` relative to the equilibrated form.
fn coupled_operator(ctx: &CellContext, coeffs: &CoefficientSet, fprime: f64, surface_row_scale: f64) -> Result<SparseMatrix> {
    let nb = ctx.n_bulk();
    let mut m = SparseMatrix::new(nb + ctx.n_surface());
    m.add_block(&bulk_operator(ctx, coeffs)?, 0, 0, 1.0);
    let c = assemble_coupling(&ctx.surface, &ctx.trace, nb, coeffs.kappa)?;
    m.add_block(&c.bulk_bulk, 0, 0, fprime);
    m.add_block(&c.bulk_surface, 0, nb, fprime);
    m.add_block(&c.surface_bulk, nb, 0, surface_row_scale);
    m.add_block(&c.surface_surface, nb, nb, surface_row_scale);
    m.add_block(&surface_operator(ctx, coeffs, coeffs.surface_diffusion, 0.0)?, nb, nb, surface_row_scale);
    Ok(m)
}

fn coupled_rhs(ctx: &CellContext, coeffs: &CoefficientSet, i: usize, surface_row_scale: f64) -> Vec<f64> {
    let mut f = bulk_rhs(ctx, coeffs, i);
    f.extend(surface_rhs(ctx, coeffs, i, coeffs.surface_diffusion).into_iter().map(|v| surface_row_scale * v));
    f
}

/// The verbatim variational form: operator and right-hand sides with all
/// surface rows carrying the `f'(u₀)` weight.
pub fn verbatim_system(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64) -> Result<(SparseMatrix, [Vec<f64>; 2])> {
    let fp = coeffs.fprime(u0);
    Ok((
        coupled_operator(ctx, coeffs, fp, fp)?,
        [coupled_rhs(ctx, coeffs, 0, fp), coupled_rhs(ctx, coeffs, 1, fp)],
    ))
}

/// Right-hand side of the verbatim form tested against the constant pair
/// `(1, 1)`, per direction.
pub fn constant_pair_defect(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64) -> Result<[f64; 2]> {
    let (_, rhs) = verbatim_system(ctx, coeffs, u0)?;
    Ok([rhs[0].iter().sum(), rhs[1].iter().sum()])
}

/// Relative residual of the verbatim form at a solution, per direction.
pub fn verbatim_residual(ctx: &CellContext, coeffs: &CoefficientSet, sol: &CellSolutionSet) -> Result<[f64; 2]> {
    let (a, rhs) = verbatim_system(ctx, coeffs, sol.u0)?;
    let mut out = [0.0; 2];
    for i in 0..2 {
        let mut x = ctx.bulk_dofs(&sol.chi[i]);
        x.extend_from_slice(&sol.omega[i].values);
        let ax = a.matvec(&x);
        let r: f64 = ax.iter().zip(&rhs[i]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let n: f64 = rhs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        out[i] = if n > 0.0 { r / n } else { r };
    }
    Ok(out)
}

/// Solve the coupled cell problem at `u₀`.
pub fn solve_cell(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64) -> Result<CellSolutionSet> {
    solve_cell_with(ctx, coeffs, u0, CellSolveOptions::default())
}

/// Coupled solve, or the `u₀ → ∞` limit when `f'(u₀)` is degenerate.
pub fn solve_cell_auto(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64) -> Result<CellSolutionSet> {
    match solve_cell(ctx, coeffs, u0) {
        Err(Error::DegenerateCoupling { .. }) => {
            let mut sol = solve_limit_u0_inf(ctx, coeffs)?;
            sol.u0 = u0;
            Ok(sol)
        }
        other => other,
    }
}

pub fn solve_cell_with(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64, opts: CellSolveOptions) -> Result<CellSolutionSet> {
    if !(u0 >= 0.0) || !u0.is_finite() {
        return Err(Error::Domain(format!("u0 must be finite and non-negative, got {u0}")));
    }
    coeffs.validate(ctx)?;
    coeffs.require_positive_kappa()?;
    let fp = coeffs.fprime(u0);
    if fp < FPRIME_THRESHOLD {
        return Err(Error::DegenerateCoupling { fprime: fp });
    }
    let scale = if opts.equilibrate { 1.0 } else { fp };
    let matrix = coupled_operator(ctx, coeffs, fp, scale)?;
    let nb = ctx.n_bulk();
    let constraint = match opts.normalization {
        Normalization::ZeroMean => {
            let mut c = ctx.bulk_lumped.clone();
            c.extend_from_slice(&ctx.surface_lumped);
            AffineConstraint::from_dense(&c, 0.0)
        }
        Normalization::PinBulkDof(d) => {
            if d >= nb {
                return Err(Error::Input(format!("pinned dof {d} is not a bulk dof")));
            }
            AffineConstraint {
                coeffs: vec![(d, 1.0)],
                value: 0.0,
            }
        }
    };
    let factor = ConstrainedOperator::new(&matrix, std::slice::from_ref(&constraint)).factor(opts.solver)?;
    let mut diagnostics = SolveDiagnostics::default();
    let mut chi = Vec::with_capacity(2);
    let mut omega = Vec::with_capacity(2);
    for i in 0..2 {
        let rhs = coupled_rhs(ctx, coeffs, i, scale);
        let sol = factor.solve(&rhs, &[0.0]).map_err(internal_compatibility)?;
        diagnostics.absorb(&sol);
        let (mut x, mut w) = (sol.values[..nb].to_vec(), sol.values[nb..].to_vec());
        normalize_pair(ctx, &mut x, &mut w);
        chi.push(ctx.bulk_field(&x));
        omega.push(FieldOnCell::surface(w));
    }
    Ok(CellSolutionSet {
        u0,
        fprime: fp,
        regime: Regime::Coupled,
        chi: to_pair(chi),
        omega: to_pair(omega),
        xi: None,
        xi_surface: None,
        surface_flux: None,
        diagnostics,
    })
}

/// The drift condition makes every cell right-hand side compatible, so a
/// failure here is a bug rather than bad input.
fn internal_compatibility(e: Error) -> Error {
    match e {
        Error::Compatibility { defect } => {
            Error::Consistency(format!("cell right-hand side not orthogonal to the kernel (defect {defect:.3e})"))
        }
        other => other,
    }
}

fn to_pair<T>(v: Vec<T>) -> [T; 2] {
    v.try_into().unwrap_or_else(|_| unreachable!("two directions"))
}

/// Shift `(χ, ω)` by a common constant so that `∫χ + ∫ω = 0`.
fn normalize_pair(ctx: &CellContext, chi: &mut [f64], omega: &mut [f64]) {
    let total = ctx.fluid_area() + ctx.surface_length();
    let k = -(dot(&ctx.bulk_lumped, chi) + dot(&ctx.surface_lumped, omega)) / total;
    chi.iter_mut().for_each(|v| *v += k);
    omega.iter_mut().for_each(|v| *v += k);
}

fn zero_mean(weights: &[f64]) -> AffineConstraint {
    AffineConstraint::from_dense(weights, 0.0)
}

/// `ξᵢ` with `−Δξᵢ = b*ᵢ − bᵢ` (periodic, no flux on the obstacle) and `Ξᵢ`
/// with `−Δₛ Ξᵢ = b*ᵢ − bˢᵢ` on the loop, both with zero mean.
pub fn solve_aux(ctx: &CellContext, velocity: &VelocityField) -> Result<([FieldOnCell; 2], [FieldOnCell; 2])> {
    let to_drift_error = |e: Error| match e {
        Error::Compatibility { defect } => Error::DriftMismatch {
            bulk: velocity.drift,
            surface: velocity.drift,
            gap: defect,
        },
        other => other,
    };
    let lap = assemble_bulk(&ctx.mesh, &ctx.dofs, &|_| Matrix2::identity(), None, 0.0)?;
    let bulk_factor = ConstrainedOperator::new(&lap, &[zero_mean(&ctx.bulk_lumped)]).factor(SolverKind::Auto)?;
    let mut xi = Vec::new();
    let mut xs = Vec::new();
    let surface_factor = if ctx.n_surface() > 0 {
        let lb = assemble_surface(&ctx.surface, 1.0, None, 0.0)?;
        Some(ConstrainedOperator::new(&lb, &[zero_mean(&ctx.surface_lumped)]).factor(SolverKind::Auto)?)
    } else {
        None
    };
    for i in 0..2 {
        let bstar = velocity.drift[i];
        let f = bulk_load(&ctx.mesh, &ctx.dofs, &|t| bstar - velocity.bulk[t][i]);
        let sol = bulk_factor.solve(&f, &[0.0]).map_err(to_drift_error)?;
        xi.push(ctx.bulk_field(&sol.values));
        let values = match &surface_factor {
            Some(factor) => {
                let g = surface_load(&ctx.surface, &|k| bstar - velocity.surface_vector(&ctx.surface, k)[i]);
                factor.solve(&g, &[0.0]).map_err(to_drift_error)?.values
            }
            None => Vec::new(),
        };
        xs.push(FieldOnCell::surface(values));
    }
    Ok((to_pair(xi), to_pair(xs)))
}

/// `u₀ → ∞`: pure no-flux bulk corrector, then the surface corrector driven
/// by its trace.
pub fn solve_limit_u0_inf(ctx: &CellContext, coeffs: &CoefficientSet) -> Result<CellSolutionSet> {
    coeffs.validate(ctx)?;
    coeffs.require_positive_kappa()?;
    let nb = ctx.n_bulk();
    let bulk = bulk_operator(ctx, coeffs)?;
    let bulk_factor = ConstrainedOperator::new(&bulk, &[zero_mean(&ctx.bulk_lumped)]).factor(SolverKind::Auto)?;
    let surf = surface_operator(ctx, coeffs, coeffs.surface_diffusion, coeffs.kappa)?;
    let surface_factor = ConstrainedOperator::new(&surf, &[]).factor(SolverKind::Auto)?;
    let mass = surface_mass(&ctx.surface);
    let mut diagnostics = SolveDiagnostics::default();
    let (mut chi, mut omega) = (Vec::new(), Vec::new());
    for i in 0..2 {
        let sol = bulk_factor.solve(&bulk_rhs(ctx, coeffs, i), &[0.0]).map_err(internal_compatibility)?;
        diagnostics.absorb(&sol);
        let mut x = sol.values;
        debug_assert_eq!(x.len(), nb);
        let mut w = if ctx.n_surface() > 0 {
            let trace: Vec<f64> = ctx.trace.iter().map(|&d| x[d]).collect();
            let mut g = mass.matvec(&trace);
            g.iter_mut().for_each(|v| *v *= coeffs.kappa);
            let r = surface_rhs(ctx, coeffs, i, coeffs.surface_diffusion);
            g.iter_mut().zip(r).for_each(|(a, b)| *a += b);
            let s = surface_factor.solve(&g, &[])?;
            diagnostics.absorb(&s);
            s.values
        } else {
            Vec::new()
        };
        normalize_pair(ctx, &mut x, &mut w);
        chi.push(ctx.bulk_field(&x));
        omega.push(FieldOnCell::surface(w));
    }
    Ok(CellSolutionSet {
        u0: f64::INFINITY,
        fprime: 0.0,
        regime: Regime::U0Limit,
        chi: to_pair(chi),
        omega: to_pair(omega),
        xi: None,
        xi_surface: None,
        surface_flux: None,
        diagnostics,
    })
}

/// `Dˢ → ∞`: `ωᵢ + yᵢ` is constant on the loop and the bulk corrector sees
/// the nonlocal Robin condition
/// `−D(∇χᵢ + eᵢ)·n = κf'(u₀)(χᵢ + yᵢ − mean(χᵢ + yᵢ)) − f'(u₀) b*ᵢ`.
pub fn solve_limit_ds_inf(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64) -> Result<CellSolutionSet> {
    coeffs.validate(ctx)?;
    if !(u0 >= 0.0) || !u0.is_finite() {
        return Err(Error::Domain(format!("u0 must be finite and non-negative, got {u0}")));
    }
    let fp = coeffs.fprime(u0);
    let w = coeffs.kappa * fp;
    let nb = ctx.n_bulk();
    let s = &ctx.surface;
    let len = ctx.surface_length();
    let mass = surface_mass(s);

    // bulk operator plus w ∫ (χ − mean χ) φ over the loop, the mean part as a
    // rank-one outer product
    let mut matrix = bulk_operator(ctx, coeffs)?;
    if ctx.n_surface() > 0 && w > 0.0 {
        for &(r, c, v) in &mass.entries {
            matrix.push(ctx.trace[r], ctx.trace[c], w * v);
        }
        for (a, &la) in ctx.surface_lumped.iter().enumerate() {
            for (b, &lb) in ctx.surface_lumped.iter().enumerate() {
                matrix.push(ctx.trace[a], ctx.trace[b], -w * la * lb / len);
            }
        }
    }
    let factor = ConstrainedOperator::new(&matrix, &[zero_mean(&ctx.bulk_lumped)]).factor(SolverKind::Auto)?;

    let stiffness = assemble_surface(s, 1.0, None, 0.0)?;
    let flux_factor = if ctx.n_surface() > 0 {
        Some(ConstrainedOperator::new(&stiffness, &[zero_mean(&ctx.surface_lumped)]).factor(SolverKind::Auto)?)
    } else {
        None
    };

    let mut diagnostics = SolveDiagnostics::default();
    let (mut chi, mut omega, mut flux) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..2 {
        let bstar = coeffs.velocity.drift[i];
        let y: Vec<f64> = s.positions.iter().map(|p| p[i]).collect();
        let mean_y = dot(&ctx.surface_lumped, &y) / len.max(f64::MIN_POSITIVE);
        let mut rhs = bulk_rhs(ctx, coeffs, i);
        if ctx.n_surface() > 0 {
            let centered: Vec<f64> = y.iter().map(|v| v - mean_y).collect();
            let my = mass.matvec(&centered);
            for (k, &d) in ctx.trace.iter().enumerate() {
                rhs[d] += -w * my[k] + fp * bstar * ctx.surface_lumped[k];
            }
        }
        let sol = factor.solve(&rhs, &[0.0]).map_err(internal_compatibility)?;
        diagnostics.absorb(&sol);
        let mut x = sol.values;
        debug_assert_eq!(x.len(), nb);
        let (mut om, wf) = match &flux_factor {
            Some(ff) => {
                let trace: Vec<f64> = ctx.trace.iter().map(|&d| x[d]).collect();
                let shift = if coeffs.kappa > 0.0 { bstar / coeffs.kappa } else { 0.0 };
                let c = dot(&ctx.surface_lumped, &trace) / len + mean_y + shift;
                let om: Vec<f64> = y.iter().map(|yk| c - yk).collect();
                // −∂ₛ²W = κ(χ + y − c) + b*ᵢ
                let gap: Vec<f64> = trace.iter().zip(&om).map(|(t, o)| coeffs.kappa * (t - o)).collect();
                let mut g = mass.matvec(&gap);
                g.iter_mut().zip(&ctx.surface_lumped).for_each(|(v, l)| *v += bstar * l);
                let ws = ff.solve(&g, &[0.0]).map_err(internal_compatibility)?;
                diagnostics.absorb(&ws);
                (om, ws.values)
            }
            None => (Vec::new(), Vec::new()),
        };
        normalize_pair(ctx, &mut x, &mut om);
        chi.push(ctx.bulk_field(&x));
        omega.push(FieldOnCell::surface(om));
        flux.push(wf);
    }
    Ok(CellSolutionSet {
        u0,
        fprime: fp,
        regime: Regime::DsLimit,
        chi: to_pair(chi),
        omega: to_pair(omega),
        xi: None,
        xi_surface: None,
        surface_flux: Some(to_pair(flux)),
        diagnostics,
    })
}

/// `κ → ∞`: `χᵢ = ωᵢ` on the loop; the bulk problem carries the surface
/// operator, weighted by `f'(u₀)`, as a boundary condition on the trace.
pub fn solve_limit_kappa_inf(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64) -> Result<CellSolutionSet> {
    coeffs.validate(ctx)?;
    if !(u0 >= 0.0) || !u0.is_finite() {
        return Err(Error::Domain(format!("u0 must be finite and non-negative, got {u0}")));
    }
    let fp = coeffs.fprime(u0);
    let mut matrix = bulk_operator(ctx, coeffs)?;
    let surf = surface_operator(ctx, coeffs, coeffs.surface_diffusion, 0.0)?;
    for &(r, c, v) in &surf.entries {
        matrix.push(ctx.trace[r], ctx.trace[c], fp * v);
    }
    let mut weights = ctx.bulk_lumped.clone();
    for (k, &d) in ctx.trace.iter().enumerate() {
        weights[d] += ctx.surface_lumped[k];
    }
    let factor = ConstrainedOperator::new(&matrix, &[zero_mean(&weights)]).factor(SolverKind::Auto)?;
    let mut diagnostics = SolveDiagnostics::default();
    let (mut chi, mut omega) = (Vec::new(), Vec::new());
    for i in 0..2 {
        let mut rhs = bulk_rhs(ctx, coeffs, i);
        for (k, v) in surface_rhs(ctx, coeffs, i, coeffs.surface_diffusion).into_iter().enumerate() {
            rhs[ctx.trace[k]] += fp * v;
        }
        let sol = factor.solve(&rhs, &[0.0]).map_err(internal_compatibility)?;
        diagnostics.absorb(&sol);
        let field = ctx.bulk_field(&sol.values);
        omega.push(FieldOnCell::surface(ctx.trace_of(&field)));
        chi.push(field);
    }
    Ok(CellSolutionSet {
        u0,
        fprime: fp,
        regime: Regime::KappaLimit,
        chi: to_pair(chi),
        omega: to_pair(omega),
        xi: None,
        xi_surface: None,
        surface_flux: None,
        diagnostics,
    })
}

/// Solve the coupled problem as one assembled system without block reuse.
/// Used to cross-check the factored path.
pub fn solve_cell_direction(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let fp = coeffs.fprime(u0);
    let matrix = coupled_operator(ctx, coeffs, fp, 1.0)?;
    let mut c = ctx.bulk_lumped.clone();
    c.extend_from_slice(&ctx.surface_lumped);
    let sol = SparseSystem::new(matrix, coupled_rhs(ctx, coeffs, i, 1.0))
        .with_constraint(AffineConstraint::from_dense(&c, 0.0))
        .solve()?;
    let nb = ctx.n_bulk();
    Ok((ctx.dofs.expand(&sol.values[..nb]), sol.values[nb..].to_vec()))
}

/// Augmented coupled system at `u₀` for direction 1, in coordinate form.
pub fn write_cell_system<W: Write>(ctx: &CellContext, coeffs: &CoefficientSet, u0: f64, w: W) -> Result<()> {
    let fp = coeffs.fprime(u0);
    let matrix = coupled_operator(ctx, coeffs, fp.max(FPRIME_THRESHOLD), 1.0)?;
    let mut c = ctx.bulk_lumped.clone();
    c.extend_from_slice(&ctx.surface_lumped);
    SparseSystem::new(matrix, coupled_rhs(ctx, coeffs, 0, 1.0))
        .with_constraint(AffineConstraint::from_dense(&c, 0.0))
        .write_coordinate(w)
}

/// `node_index,y1,y2,chi1,chi2` rows.
pub fn write_bulk_correctors<W: Write>(ctx: &CellContext, sol: &CellSolutionSet, mut w: W) -> Result<()> {
    writeln!(w, "node_index,y1,y2,chi1,chi2")?;
    for (n, p) in ctx.mesh.nodes.iter().enumerate() {
        writeln!(w, "{n},{},{},{},{}", p[0], p[1], sol.chi[0].values[n], sol.chi[1].values[n])?;
    }
    Ok(())
}

/// `loop_index,node_index,y1,y2,omega1,omega2` rows.
pub fn write_surface_correctors<W: Write>(ctx: &CellContext, sol: &CellSolutionSet, mut w: W) -> Result<()> {
    writeln!(w, "loop_index,node_index,y1,y2,omega1,omega2")?;
    for (k, (&n, p)) in ctx.surface.loop_nodes.iter().zip(&ctx.surface.positions).enumerate() {
        writeln!(w, "{k},{n},{},{},{},{}", p[0], p[1], sol.omega[0].values[k], sol.omega[1].values[k])?;
    }
    Ok(())
}
