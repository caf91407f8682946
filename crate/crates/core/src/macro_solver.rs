//! Implicit conservative solver for the homogenized equation
//! `∂ₜ[|Y⁰|u + |∂Σ⁰|f(u)] = div(A*(u)∇u)` on a periodic box.
//!
//! Two-point fluxes on a uniform grid; in 2D the off-diagonal tensor
//! entries act on centered transverse differences averaged to the face.
//! The tensor is frozen at the previous time level.

use faer::prelude::*;
use nalgebra::{Matrix2, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispersion::DispersionTable;
use crate::error::{Error, Result};
use crate::fem::{sparse_lu, SparseMatrix};
use crate::isotherm::Isotherm;

/// Nonlinear residual target of each implicit step.
pub const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;

/// Uniform periodic grid; a 1D grid has `n[1] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroGrid {
    pub n: [usize; 2],
    pub length: [f64; 2],
}

impl MacroGrid {
    pub fn line(n: usize, length: f64) -> Result<Self> {
        Self::new([n, 1], [length, 1.0])
    }

    pub fn new(n: [usize; 2], length: [f64; 2]) -> Result<Self> {
        if n[0] < 3 || !(n[1] == 1 || n[1] >= 3) {
            return Err(Error::Input(format!("grid needs at least 3 cells per active axis, got {n:?}")));
        }
        if !(length[0] > 0.0 && length[1] > 0.0) {
            return Err(Error::Input(format!("grid lengths must be positive, got {length:?}")));
        }
        Ok(Self { n, length })
    }

    pub fn is_2d(&self) -> bool {
        self.n[1] > 1
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> [f64; 2] {
        [self.length[0] / self.n[0] as f64, self.length[1] / self.n[1] as f64]
    }

    /// Volume of one grid cell (length in 1D).
    pub fn cell_volume(&self) -> f64 {
        let dx = self.dx();
        if self.is_2d() {
            dx[0] * dx[1]
        } else {
            dx[0]
        }
    }

    pub fn index(&self, i: isize, j: isize) -> usize {
        let (nx, ny) = (self.n[0] as isize, self.n[1] as isize);
        (i.rem_euclid(nx) + nx * j.rem_euclid(ny)) as usize
    }

    /// Cell-center coordinates.
    pub fn center(&self, k: usize) -> [f64; 2] {
        let dx = self.dx();
        let (i, j) = (k % self.n[0], k / self.n[0]);
        [(i as f64 + 0.5) * dx[0], (j as f64 + 0.5) * dx[1]]
    }
}

/// Material data of the homogenized equation.
#[derive(Debug, Clone)]
pub struct MacroModel {
    pub isotherm: Isotherm,
    pub fluid_area: f64,
    pub surface_length: f64,
    pub table: DispersionTable,
}

impl MacroModel {
    pub fn density(&self, u: f64) -> f64 {
        self.fluid_area * u + self.surface_length * self.isotherm.f(u)
    }

    pub fn capacity(&self, u: f64) -> f64 {
        self.fluid_area + self.surface_length * self.isotherm.fprime(u)
    }

    fn geometry(&self) -> crate::mesh::CellGeometry {
        crate::mesh::CellGeometry {
            obstacle_center: [0.5, 0.5],
            obstacle_radius: 0.0,
            fluid_area: self.fluid_area,
            surface_length: self.surface_length,
            eta: if self.fluid_area > 0.0 { self.surface_length / self.fluid_area } else { 0.0 },
        }
    }

    pub fn invert_density(&self, z: f64) -> Result<f64> {
        self.isotherm.invert_density(&self.geometry(), z)
    }

    /// Stored energy density `|Y⁰|F(u) + ½|∂Σ⁰|f(u)²`.
    pub fn energy_density(&self, u: f64) -> f64 {
        let f = self.isotherm.f(u);
        self.fluid_area * self.isotherm.primitive(u) + 0.5 * self.surface_length * f * f
    }

    /// `dt = Δx²(|Y⁰| + α|∂Σ⁰|) / (4 λ_max(A*_sym(0)))`.
    pub fn default_dt(&self, grid: &MacroGrid) -> f64 {
        let a = self.table.at(0.0);
        let e = SymmetricEigen::new((a + a.transpose()) * 0.5).eigenvalues;
        let dx = grid.dx();
        let h = if grid.is_2d() { dx[0].min(dx[1]) } else { dx[0] };
        h * h * (self.fluid_area + self.isotherm.alpha * self.surface_length) / (4.0 * e[0].max(e[1]))
    }
}

/// Homogenized initial datum from the two-field initial data.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub u_in: Vec<f64>,
    pub v_in: Vec<f64>,
    pub u0_init: Vec<f64>,
}

impl InitialData {
    pub fn new(model: &MacroModel, u_in: Vec<f64>, v_in: Vec<f64>) -> Result<Self> {
        if u_in.len() != v_in.len() {
            return Err(Error::Input(format!("u_in has {} values but v_in has {}", u_in.len(), v_in.len())));
        }
        if let Some(bad) = u_in.iter().chain(&v_in).find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("initial data must be non-negative, found {bad}")));
        }
        let u0_init = u_in
            .par_iter()
            .zip(&v_in)
            .map(|(&u, &v)| model.invert_density(model.fluid_area * u + model.surface_length * v))
            .collect::<Result<_>>()?;
        Ok(Self { u_in, v_in, u0_init })
    }

    /// `v_in` chosen so that the data are well prepared.
    pub fn well_prepared(model: &MacroModel, u_in: Vec<f64>) -> Result<Self> {
        let g = model.geometry();
        let v_in = u_in.par_iter().map(|&u| model.isotherm.well_prepared_vin(&g, u)).collect::<Result<_>>()?;
        Self::new(model, u_in, v_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub grid: MacroGrid,
    pub u: Vec<f64>,
    /// Conserved density `|Y⁰|u + |∂Σ⁰|f(u)`.
    pub z: Vec<f64>,
    pub t: f64,
    /// Energy dissipated so far.
    pub dissipated: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub newton_iterations: usize,
    pub residual: f64,
}

impl MacroState {
    pub fn new(model: &MacroModel, grid: MacroGrid, u: Vec<f64>) -> Result<Self> {
        if u.len() != grid.len() {
            return Err(Error::Input(format!("{} values for a grid of {} cells", u.len(), grid.len())));
        }
        let z = u.iter().map(|&v| model.density(v)).collect();
        Ok(Self {
            grid,
            u,
            z,
            t: 0.0,
            dissipated: 0.0,
        })
    }

    pub fn mass(&self) -> f64 {
        self.z.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min_u(&self) -> f64 {
        self.u.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_u(&self) -> f64 {
        self.u.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Discrete `div(A∇·)` with face tensors taken from `u_frozen`.
pub fn flux_operator(grid: &MacroGrid, table: &DispersionTable, u_frozen: &[f64]) -> SparseMatrix {
    let mut l = SparseMatrix::new(grid.len());
    let dx = grid.dx();
    let face_tensor = |a: usize, b: usize| -> Matrix2<f64> { table.at(0.5 * (u_frozen[a] + u_frozen[b])) };
    let (nx, ny) = (grid.n[0] as isize, grid.n[1] as isize);
    for j in 0..ny {
        for i in 0..nx {
            let p = grid.index(i, j);
            // face between (i, j) and (i+1, j)
            let e = grid.index(i + 1, j);
            let a = face_tensor(p, e);
            let mut x_face = vec![(e, a[(0, 0)] / dx[0]), (p, -a[(0, 0)] / dx[0])];
            if grid.is_2d() {
                let c = a[(0, 1)] / (4.0 * dx[1]);
                for (ii, w) in [(i, c), (i + 1, c)] {
                    x_face.push((grid.index(ii, j + 1), w));
                    x_face.push((grid.index(ii, j - 1), -w));
                }
            }
            for &(col, w) in &x_face {
                l.push(p, col, w / dx[0]);
                l.push(e, col, -w / dx[0]);
            }
            if grid.is_2d() {
                let n = grid.index(i, j + 1);
                let a = face_tensor(p, n);
                let mut y_face = vec![(n, a[(1, 1)] / dx[1]), (p, -a[(1, 1)] / dx[1])];
                let c = a[(1, 0)] / (4.0 * dx[0]);
                for (jj, w) in [(j, c), (j + 1, c)] {
                    y_face.push((grid.index(i + 1, jj), w));
                    y_face.push((grid.index(i - 1, jj), -w));
                }
                for &(col, w) in &y_face {
                    l.push(p, col, w / dx[1]);
                    l.push(n, col, -w / dx[1]);
                }
            }
        }
    }
    l
}

fn solve_sparse(matrix: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let lu = sparse_lu(matrix)?;
    let x = lu.solve(&Col::<f64>::from_fn(matrix.dim, |i| rhs[i]));
    Ok((0..matrix.dim).map(|i| x[i]).collect())
}

/// One implicit Euler step of size `dt`.
pub fn step(model: &MacroModel, state: &mut MacroState, dt: f64) -> Result<StepReport> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Input(format!("time step must be positive, got {dt}")));
    }
    let n = state.grid.len();
    let l = flux_operator(&state.grid, &model.table, &state.u);
    let z_old = state.z.clone();
    let scale = z_old.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut u = state.u.clone();
    let residual = |u: &[f64]| -> Vec<f64> {
        let lu = l.matvec(u);
        (0..n).map(|k| model.density(u[k]) - z_old[k] - dt * lu[k]).collect()
    };
    let mut r = residual(&u);
    let mut rnorm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut iterations = 0;
    while rnorm > NEWTON_TOL * scale {
        if iterations == NEWTON_MAX_ITER || !rnorm.is_finite() {
            return Err(Error::Newton {
                iterations,
                residual: rnorm,
            });
        }
        let mut jac = SparseMatrix::new(n);
        jac.add_block(&l, 0, 0, -dt);
        for (k, &uk) in u.iter().enumerate() {
            jac.push(k, k, model.capacity(uk));
        }
        let delta = solve_sparse(&jac, &r)?;
        u.iter_mut().zip(delta).for_each(|(a, d)| *a -= d);
        r = residual(&u);
        rnorm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        iterations += 1;
    }
    // conservative update of z, then u from the exact inverse
    let lu = l.matvec(&u);
    let z_new: Vec<f64> = (0..n).map(|k| z_old[k] + dt * lu[k]).collect();
    let u_new = z_new
        .par_iter()
        .zip(&u)
        .map(|(&z, &guess)| refine_inverse(model, guess, z))
        .collect::<Result<Vec<f64>>>()?;
    let lu_new = l.matvec(&u_new);
    let dissipation: f64 = -(0..n).map(|k| model.isotherm.f(u_new[k]) * lu_new[k]).sum::<f64>();
    state.dissipated += dt * dissipation * state.grid.cell_volume();
    state.u = u_new;
    state.z = z_new;
    state.t += dt;
    Ok(StepReport {
        newton_iterations: iterations,
        residual: rnorm,
    })
}

/// `u` with `|Y⁰|u + |∂Σ⁰|f(u) = z`, polishing `guess` by scalar Newton
/// and falling back to the bracketed inverse.
fn refine_inverse(model: &MacroModel, guess: f64, z: f64) -> Result<f64> {
    let mut u = guess;
    for _ in 0..4 {
        let delta = (model.density(u) - z) / model.capacity(u);
        u -= delta;
        if delta.abs() <= 4.0 * f64::EPSILON * u.abs().max(1e-300) {
            return Ok(u);
        }
    }
    if z >= 0.0 {
        model.invert_density(z)
    } else {
        Ok(u)
    }
}

/// Non-conservative capacity form `[|Y⁰| + |∂Σ⁰|f'(uⁿ)](u − uⁿ) = dt div(A*(uⁿ)∇u)`.
pub fn capacity_step(model: &MacroModel, state: &MacroState, dt: f64) -> Result<Vec<f64>> {
    let n = state.grid.len();
    let l = flux_operator(&state.grid, &model.table, &state.u);
    let mut m = SparseMatrix::new(n);
    m.add_block(&l, 0, 0, -dt);
    let mut rhs = vec![0.0; n];
    for k in 0..n {
        let c = model.capacity(state.u[k]);
        m.push(k, k, c);
        rhs[k] = c * state.u[k];
    }
    solve_sparse(&m, &rhs)
}

/// `(stored, dissipated)` energies.
pub fn energy(model: &MacroModel, state: &MacroState) -> (f64, f64) {
    let stored = state.u.iter().map(|&u| model.energy_density(u)).sum::<f64>() * state.grid.cell_volume();
    (stored, state.dissipated)
}

/// One row of the time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MacroRecord {
    pub t: f64,
    pub mass: f64,
    pub stored_energy: f64,
    pub dissipated: f64,
    pub min_u: f64,
    pub max_u: f64,
}

impl MacroRecord {
    pub fn of(model: &MacroModel, state: &MacroState) -> Self {
        let (stored, dissipated) = energy(model, state);
        Self {
            t: state.t,
            mass: state.mass(),
            stored_energy: stored,
            dissipated,
            min_u: state.min_u(),
            max_u: state.max_u(),
        }
    }
}

/// Advance `steps` times, recording the state before the first and after
/// every step.
pub fn run(model: &MacroModel, state: &mut MacroState, dt: f64, steps: usize) -> Result<Vec<MacroRecord>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(MacroRecord::of(model, state));
    for _ in 0..steps {
        step(model, state, dt)?;
        out.push(MacroRecord::of(model, state));
    }
    Ok(out)
}
