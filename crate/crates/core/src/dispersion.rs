//! Effective dispersion tensor `A*(u₀)` from the cell correctors, by the
//! direct group formula and by the auxiliary-problem formula, plus its
//! tabulation over `u₀`.
//!
//! All integrals reuse the quadrature of the assembled systems, so the two
//! formulas agree to solver precision on every mesh.

use nalgebra::{Matrix2, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{solve_cell_auto, CellContext, CellSolutionSet, CoefficientSet, Regime};
use crate::error::{Error, Result};
use crate::fem::{surface_derivative, surface_mass};

/// Slack on the coercivity bound.
pub const COERCIVITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    Primary,
    Alternative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionTensor {
    pub u0: f64,
    pub a: Matrix2<f64>,
    /// Symmetric part assembled from its three quadratic groups.
    pub a_sym: Matrix2<f64>,
    pub formula: Formula,
    pub regime: Regime,
}

impl DispersionTensor {
    /// `(A + Aᵀ)/2` of the full tensor.
    pub fn symmetrized(&self) -> Matrix2<f64> {
        (self.a + self.a.transpose()) * 0.5
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> [f64; 2] {
        let e = SymmetricEigen::new(self.a_sym).eigenvalues;
        [e[0].min(e[1]), e[0].max(e[1])]
    }
}

/// Per-direction geometric derivatives shared by both formulas.
struct Fields<'a> {
    ctx: &'a CellContext,
    sol: &'a CellSolutionSet,
    /// `∇χᵢ` per triangle.
    grad: [Vec<nalgebra::Vector2<f64>>; 2],
    /// `∂ₛωᵢ` per loop segment.
    dw: [Vec<f64>; 2],
}

impl<'a> Fields<'a> {
    fn new(ctx: &'a CellContext, sol: &'a CellSolutionSet) -> Result<Self> {
        let nn = ctx.mesh.n_nodes();
        let ns = ctx.n_surface();
        for i in 0..2 {
            if sol.chi[i].values.len() != nn || sol.omega[i].values.len() != ns {
                return Err(Error::Input("cell solution does not match the mesh".into()));
            }
        }
        let grad = [0, 1].map(|i| {
            ctx.elements
                .iter()
                .zip(&ctx.mesh.triangles)
                .map(|(el, tri)| el.gradient(tri.map(|n| sol.chi[i].values[n])))
                .collect()
        });
        let dw = [0, 1].map(|i| (0..ns).map(|k| surface_derivative(&ctx.surface, &sol.omega[i].values, k)).collect());
        Ok(Self { ctx, sol, grad, dw })
    }

    fn tangent(&self, k: usize, i: usize) -> f64 {
        self.ctx.surface.tangents[k][i]
    }

    fn len(&self, k: usize) -> f64 {
        self.ctx.surface.segment_lengths[k]
    }
}

fn e(i: usize) -> nalgebra::Vector2<f64> {
    if i == 0 {
        nalgebra::Vector2::x()
    } else {
        nalgebra::Vector2::y()
    }
}

/// The three quadratic groups: bulk energy, exchange and surface energy.
fn symmetric_groups(f: &Fields, coeffs: &CoefficientSet) -> Matrix2<f64> {
    let ctx = f.ctx;
    let d = coeffs.diffusion;
    let fp = f.sol.fprime;
    let mut a = Matrix2::zeros();
    for (t, el) in ctx.elements.iter().enumerate() {
        let gi = [f.grad[0][t] + e(0), f.grad[1][t] + e(1)];
        for i in 0..2 {
            for j in 0..2 {
                a[(i, j)] += el.area * gi[i].dot(&(d * gi[j]));
            }
        }
    }
    if ctx.n_surface() == 0 || fp == 0.0 {
        return a;
    }
    let mass = surface_mass(&ctx.surface);
    let gap = [0, 1].map(|i| -> Vec<f64> {
        ctx.trace_of(&f.sol.chi[i]).iter().zip(&f.sol.omega[i].values).map(|(c, w)| c - w).collect()
    });
    for i in 0..2 {
        for j in 0..2 {
            a[(i, j)] += coeffs.kappa * fp * mass.bilinear(&gap[i], &gap[j]);
        }
    }
    if f.sol.regime != Regime::DsLimit {
        let ds = coeffs.surface_diffusion;
        for k in 0..ctx.n_surface() {
            for i in 0..2 {
                for j in 0..2 {
                    a[(i, j)] +=
                        fp * ds * f.len(k) * (f.dw[i][k] + f.tangent(k, i)) * (f.dw[j][k] + f.tangent(k, j));
                }
            }
        }
    }
    a
}

/// Symmetric part from the three quadratic groups alone.
pub fn assemble_symmetric_part(ctx: &CellContext, cells: &CellSolutionSet, coeffs: &CoefficientSet) -> Result<Matrix2<f64>> {
    Ok(symmetric_groups(&Fields::new(ctx, cells)?, coeffs))
}

/// Direct formula: quadratic groups, the two antisymmetric diffusion
/// groups and the two convection groups.
pub fn assemble_dispersion(ctx: &CellContext, cells: &CellSolutionSet, coeffs: &CoefficientSet) -> Result<DispersionTensor> {
    let f = Fields::new(ctx, cells)?;
    let a_sym = symmetric_groups(&f, coeffs);
    let d = coeffs.diffusion;
    let fp = cells.fprime;
    let mut a = a_sym;
    for (t, el) in ctx.elements.iter().enumerate() {
        let tri = ctx.mesh.triangles[t];
        let b = coeffs.velocity.bulk[t];
        for i in 0..2 {
            for j in 0..2 {
                a[(i, j)] += el.area * ((d * f.grad[j][t]).dot(&e(i)) - (d * f.grad[i][t]).dot(&e(j)));
                let mean_j = tri.iter().map(|&n| cells.chi[j].values[n]).sum::<f64>() / 3.0;
                a[(i, j)] += el.area * b.dot(&f.grad[i][t]) * mean_j;
            }
        }
    }
    if ctx.n_surface() > 0 && fp != 0.0 {
        let ds = coeffs.surface_diffusion;
        for k in 0..ctx.n_surface() {
            let (p, q) = ctx.surface.segment(k);
            let len = f.len(k);
            let c = coeffs.velocity.surface_speed[k];
            for i in 0..2 {
                for j in 0..2 {
                    let anti = match (&cells.surface_flux, cells.regime) {
                        (Some(w), Regime::DsLimit) => {
                            let wi = surface_derivative(&ctx.surface, &w[i], k);
                            let wj = surface_derivative(&ctx.surface, &w[j], k);
                            fp * len * (wj * f.tangent(k, i) - wi * f.tangent(k, j))
                        }
                        _ => fp * ds * len * (f.dw[j][k] * f.tangent(k, i) - f.dw[i][k] * f.tangent(k, j)),
                    };
                    let om = &cells.omega[j].values;
                    let conv = fp * c * f.dw[i][k] * len * 0.5 * (om[p] + om[q]);
                    a[(i, j)] += anti + conv;
                }
            }
        }
    }
    Ok(DispersionTensor {
        u0: cells.u0,
        a,
        a_sym,
        formula: Formula::Primary,
        regime: cells.regime,
    })
}

/// Auxiliary-problem formula:
/// `∫Deᵢ·eⱼ + ∫D∇χⱼ·eᵢ + f'∫Dˢeᵢ·eⱼ + f'∫Dˢ∇ₛωⱼ·eᵢ + ∫∇ξᵢ·∇χⱼ + f'∫∇ₛΞᵢ·∇ₛωⱼ`.
pub fn assemble_dispersion_alt(ctx: &CellContext, cells: &CellSolutionSet, coeffs: &CoefficientSet) -> Result<DispersionTensor> {
    let (xi, xs) = match (&cells.xi, &cells.xi_surface) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Input("auxiliary fields are required for the alternative formula".into())),
    };
    if cells.regime == Regime::DsLimit {
        return Err(Error::Input(
            "the alternative formula is not defined in the infinite surface diffusion limit".into(),
        ));
    }
    let f = Fields::new(ctx, cells)?;
    let d = coeffs.diffusion;
    let fp = cells.fprime;
    let mut a = Matrix2::zeros();
    for (t, el) in ctx.elements.iter().enumerate() {
        let tri = ctx.mesh.triangles[t];
        let gxi = [0, 1].map(|i| el.gradient(tri.map(|n| xi[i].values[n])));
        for i in 0..2 {
            for j in 0..2 {
                a[(i, j)] += el.area * ((d * e(i)).dot(&e(j)) + (d * f.grad[j][t]).dot(&e(i)) + gxi[i].dot(&f.grad[j][t]));
            }
        }
    }
    if ctx.n_surface() > 0 && fp != 0.0 {
        let ds = coeffs.surface_diffusion;
        for k in 0..ctx.n_surface() {
            let len = f.len(k);
            for i in 0..2 {
                let dxi = surface_derivative(&ctx.surface, &xs[i].values, k);
                for j in 0..2 {
                    a[(i, j)] += fp
                        * len
                        * (ds * f.tangent(k, i) * f.tangent(k, j) + ds * f.dw[j][k] * f.tangent(k, i) + dxi * f.dw[j][k]);
                }
            }
        }
    }
    Ok(DispersionTensor {
        u0: cells.u0,
        a,
        a_sym: symmetric_groups(&f, coeffs),
        formula: Formula::Alternative,
        regime: cells.regime,
    })
}

/// Relative Frobenius distance `‖A − B‖ / ‖A‖`.
pub fn relative_gap(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    (a - b).norm() / a.norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `|Y⁰| λ_min(D)`.
    pub bound: f64,
    pub holds: bool,
}

/// Eigenvalues of the symmetric part against the lower bound
/// `|Y⁰| λ_min(D)`; also checks finiteness and consistency of the stored
/// symmetric part with `(A + Aᵀ)/2`.
pub fn coercivity_report(ctx: &CellContext, tensor: &DispersionTensor, coeffs: &CoefficientSet) -> Result<CoercivityReport> {
    if !tensor.a.iter().chain(tensor.a_sym.iter()).all(|v| v.is_finite()) {
        return Err(Error::Consistency("dispersion tensor has non-finite entries".into()));
    }
    let sym_gap = (tensor.symmetrized() - tensor.a_sym).norm();
    if sym_gap > 1e-8 * tensor.a.norm().max(1.0) {
        return Err(Error::Consistency(format!(
            "symmetric groups differ from (A + A^T)/2 by {sym_gap:.3e}"
        )));
    }
    let [lambda_min, lambda_max] = tensor.sym_eigenvalues();
    let d = SymmetricEigen::new(coeffs.diffusion).eigenvalues;
    let bound = ctx.fluid_area() * d[0].min(d[1]);
    Ok(CoercivityReport {
        lambda_min,
        lambda_max,
        bound,
        holds: lambda_min >= bound - COERCIVITY_TOL,
    })
}

/// As [`coercivity_report`], turning a violated bound into an error.
pub fn coercivity_check(ctx: &CellContext, tensor: &DispersionTensor, coeffs: &CoefficientSet) -> Result<CoercivityReport> {
    let report = coercivity_report(ctx, tensor, coeffs)?;
    if !report.holds {
        return Err(Error::Coercivity {
            lambda_min: report.lambda_min,
            bound: report.bound,
        });
    }
    Ok(report)
}

/// `A*` tabulated over `u₀`, interpolated linearly between nodes.
#[derive(Debug, Clone)]
pub struct DispersionTable {
    pub u0_grid: Vec<f64>,
    pub tensors: Vec<DispersionTensor>,
}

/// Grid on `[0, u0_max]`: uniform on `[0, 1]`, logarithmic above.
pub fn table_grid(u0_max: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(u0_max > 0.0) || !u0_max.is_finite() {
        return Err(Error::Input(format!("u0_max must be positive, got {u0_max}")));
    }
    if n_points < 16 {
        return Err(Error::Input(format!("at least 16 table points are required, got {n_points}")));
    }
    if u0_max <= 1.0 {
        return Ok((0..n_points).map(|k| u0_max * k as f64 / (n_points - 1) as f64).collect());
    }
    let n_lin = (n_points / 4).max(2);
    let n_log = n_points - n_lin;
    let mut grid: Vec<f64> = (0..n_lin).map(|k| k as f64 / (n_lin - 1) as f64).collect();
    let top = u0_max.ln();
    grid.extend((1..=n_log).map(|k| (top * k as f64 / n_log as f64).exp()));
    *grid.last_mut().unwrap() = u0_max;
    Ok(grid)
}

impl DispersionTable {
    /// Solve the cell problem at every grid node, in parallel.
    pub fn tabulate(ctx: &CellContext, coeffs: &CoefficientSet, u0_max: f64, n_points: usize) -> Result<Self> {
        let grid = table_grid(u0_max, n_points)?;
        let tensors = grid
            .par_iter()
            .map(|&u| {
                solve_cell_auto(ctx, coeffs, u)
                    .and_then(|cells| assemble_dispersion(ctx, &cells, coeffs))
                    .map_err(|e| Error::Tabulation { u0: u, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { u0_grid: grid, tensors })
    }

    /// Single-tensor table, constant in `u₀`.
    pub fn constant(a: Matrix2<f64>) -> Self {
        let t = |u0| DispersionTensor {
            u0,
            a,
            a_sym: (a + a.transpose()) * 0.5,
            formula: Formula::Primary,
            regime: Regime::Coupled,
        };
        Self {
            u0_grid: vec![0.0, 1.0],
            tensors: vec![t(0.0), t(1.0)],
        }
    }

    /// Interpolated `A*(u)`, clamped to the table range.
    pub fn at(&self, u: f64) -> Matrix2<f64> {
        let g = &self.u0_grid;
        if !(u > g[0]) {
            return self.tensors[0].a;
        }
        if u >= g[g.len() - 1] {
            return self.tensors[g.len() - 1].a;
        }
        let k = g.partition_point(|&x| x <= u) - 1;
        let s = (u - g[k]) / (g[k + 1] - g[k]);
        self.tensors[k].a * (1.0 - s) + self.tensors[k + 1].a * s
    }

    /// Smallest symmetric-part eigenvalue at the midpoints between nodes.
    pub fn midpoint_lambda_min(&self) -> f64 {
        self.u0_grid
            .windows(2)
            .map(|w| {
                let a = self.at(0.5 * (w[0] + w[1]));
                let e = SymmetricEigen::new((a + a.transpose()) * 0.5).eigenvalues;
                e[0].min(e[1])
            })
            .fold(f64::INFINITY, f64::min)
    }
}
