//! P1 finite elements on the bulk triangulation and on the obstacle loop,
//! plus the constrained sparse solver shared by every cell problem.
//!
//! Bilinear forms are assembled with the test function on the row and the
//! trial function on the column. Diffusion and mass terms use exact
//! quadrature for products of P1 functions; convection uses the centroid
//! rule, which is exact for piecewise-constant velocities.

use std::io::Write;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::mesh::{CellMesh, DofMap, SurfaceMesh};

/// Relative residual required from every linear solve.
pub const SOLVER_RTOL: f64 = 1e-10;
/// Size of the rhs component outside the operator range, relative to
/// `max(‖rhs‖, ‖c‖)`, that is still accepted as round-off.
pub const COMPATIBILITY_TOL: f64 = 1e-8;
/// Above this many unknowns the iterative solver is used.
pub const DIRECT_SOLVER_LIMIT: usize = 200_000;

/// Gradients of the barycentric coordinates and area of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct P1Triangle {
    pub area: f64,
    pub grads: [Vector2<f64>; 3],
}

impl P1Triangle {
    pub fn new(p: [[f64; 2]; 3]) -> Self {
        let twice = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let g = |a: usize, b: usize| Vector2::new(p[a][1] - p[b][1], p[b][0] - p[a][0]) / twice;
        Self {
            area: 0.5 * twice,
            grads: [g(1, 2), g(2, 0), g(0, 1)],
        }
    }

    pub fn of(mesh: &CellMesh, t: usize) -> Self {
        Self::new(mesh.triangles[t].map(|i| mesh.nodes[i]))
    }

    /// Gradient of the P1 interpolant of nodal `values`.
    pub fn gradient(&self, values: [f64; 3]) -> Vector2<f64> {
        self.grads[0] * values[0] + self.grads[1] * values[1] + self.grads[2] * values[2]
    }
}

/// Coordinate-format sparse matrix; duplicate entries are summed.
#[derive(Debug, Clone, Default)]
pub struct SparseMatrix {
    pub dim: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Add `scale · other` with `other` placed at (`row_offset`, `col_offset`).
    pub fn add_block(&mut self, other: &SparseMatrix, row_offset: usize, col_offset: usize, scale: f64) {
        for &(r, c, v) in &other.entries {
            self.push(r + row_offset, c + col_offset, scale * v);
        }
    }

    pub fn to_csr(&self) -> Csr {
        Csr::from_triplets(self.dim, &self.entries)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.entries.iter().map(|&(r, c, v)| x[r] * v * y[c]).sum()
    }

    pub fn transpose(&self) -> SparseMatrix {
        SparseMatrix {
            dim: self.dim,
            entries: self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect(),
        }
    }

    /// Dense copy, for small diagnostic problems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// `row col value` lines, one per merged nonzero.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> Result<()> {
        let csr = self.to_csr();
        for r in 0..csr.dim {
            for k in csr.row_ptr[r]..csr.row_ptr[r + 1] {
                writeln!(w, "{} {} {}", r, csr.col_idx[k], csr.values[k])?;
            }
        }
        Ok(())
    }
}

/// Compressed sparse rows with merged duplicates.
#[derive(Debug, Clone)]
pub struct Csr {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(dim: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut sorted = entries.to_vec();
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; dim + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.values[k] * x[self.col_idx[k]]).sum())
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .find(|&k| self.col_idx[k] == r)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }
}

/// Sparse linear functional `Σ coeffs[k].1 · x[coeffs[k].0]`.
#[derive(Debug, Clone, Default)]
pub struct AffineConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub value: f64,
}

impl AffineConstraint {
    pub fn from_dense(dense: &[f64], value: f64) -> Self {
        Self {
            coeffs: dense.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)).collect(),
            value,
        }
    }

    pub fn apply(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum()
    }

    fn norm(&self) -> f64 {
        self.coeffs.iter().map(|&(_, c)| c * c).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Direct below [`DIRECT_SOLVER_LIMIT`] unknowns, iterative above.
    #[default]
    Auto,
    Direct,
    Iterative,
}

/// Square system `A x = b` with optional affine constraints enforced by
/// Lagrange multipliers: `[A Cᵀ; C 0] [x; λ] = [b; g]`.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub constraints: Vec<AffineConstraint>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// Relative residual of the augmented system.
    pub residual: f64,
    pub iterations: usize,
}

impl SparseSystem {
    pub fn new(matrix: SparseMatrix, rhs: Vec<f64>) -> Self {
        Self {
            matrix,
            rhs,
            constraints: Vec::new(),
        }
    }

    pub fn with_constraint(mut self, c: AffineConstraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn solve(&self) -> Result<Solution> {
        self.solve_with(SolverKind::Auto)
    }

    pub fn solve_with(&self, kind: SolverKind) -> Result<Solution> {
        let op = ConstrainedOperator::new(&self.matrix, &self.constraints);
        let values: Vec<f64> = self.constraints.iter().map(|c| c.value).collect();
        op.factor(kind)?.solve(&self.rhs, &values)
    }

    /// Dump the augmented operator in coordinate form.
    pub fn write_coordinate<W: Write>(&self, w: W) -> Result<()> {
        ConstrainedOperator::new(&self.matrix, &self.constraints).augmented.write_coordinate(w)
    }
}

/// Sparse LU of `matrix`. Dense kernels run sequentially so results do not
/// depend on the worker count; concurrency lives at the sweep level.
pub fn sparse_lu(matrix: &SparseMatrix) -> Result<faer::sparse::linalg::solvers::Lu<usize, f64>> {
    static SEQUENTIAL: std::sync::Once = std::sync::Once::new();
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
    let n = matrix.dim;
    let triplets: Vec<Triplet<usize, usize, f64>> = matrix.entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    mat.sp_lu().map_err(|e| Error::Factorization(format!("{e:?}")))
}

/// Augmented operator, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct ConstrainedOperator {
    dim: usize,
    augmented: SparseMatrix,
    constraint_norms: Vec<f64>,
}

impl ConstrainedOperator {
    pub fn new(matrix: &SparseMatrix, constraints: &[AffineConstraint]) -> Self {
        let dim = matrix.dim;
        let mut augmented = SparseMatrix::new(dim + constraints.len());
        augmented.add_block(matrix, 0, 0, 1.0);
        for (k, c) in constraints.iter().enumerate() {
            for &(i, v) in &c.coeffs {
                augmented.push(dim + k, i, v);
                augmented.push(i, dim + k, v);
            }
        }
        Self {
            dim,
            augmented,
            constraint_norms: constraints.iter().map(AffineConstraint::norm).collect(),
        }
    }

    pub fn factor(&self, kind: SolverKind) -> Result<Factorized> {
        let n = self.augmented.dim;
        let use_direct = match kind {
            SolverKind::Auto => n < DIRECT_SOLVER_LIMIT,
            SolverKind::Direct => true,
            SolverKind::Iterative => false,
        };
        let csr = self.augmented.to_csr();
        let backend = if use_direct {
            Backend::Direct(Box::new(sparse_lu(&self.augmented)?))
        } else {
            Backend::Iterative
        };
        Ok(Factorized {
            dim: self.dim,
            csr,
            backend,
            constraint_norms: self.constraint_norms.clone(),
        })
    }
}

enum Backend {
    Direct(Box<faer::sparse::linalg::solvers::Lu<usize, f64>>),
    Iterative,
}

pub struct Factorized {
    dim: usize,
    csr: Csr,
    backend: Backend,
    constraint_norms: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Factorized {
    /// Solve for one right-hand side and constraint values.
    pub fn solve(&self, rhs: &[f64], constraint_values: &[f64]) -> Result<Solution> {
        assert_eq!(rhs.len(), self.dim);
        assert_eq!(constraint_values.len(), self.constraint_norms.len());
        let b: Vec<f64> = rhs.iter().chain(constraint_values).copied().collect();
        let b_norm = norm(&b);
        if b_norm == 0.0 {
            return Ok(Solution {
                values: vec![0.0; self.dim],
                multipliers: vec![0.0; self.constraint_norms.len()],
                residual: 0.0,
                iterations: 0,
            });
        }
        let (x, iterations) = match &self.backend {
            Backend::Direct(lu) => {
                let mut x = self.lu_solve(lu, &b);
                // one step of iterative refinement
                let r: Vec<f64> = self.csr.matvec(&x).iter().zip(&b).map(|(ax, bi)| bi - ax).collect();
                if norm(&r) > SOLVER_RTOL * 1e-2 * b_norm {
                    let dx = self.lu_solve(lu, &r);
                    x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
                }
                (x, 1)
            }
            Backend::Iterative => bicgstab(&self.csr, &b, SOLVER_RTOL * 0.1, 20 * self.csr.dim.max(100))?,
        };
        let ax = self.csr.matvec(&x);
        let residual = norm(&ax.iter().zip(&b).map(|(a, b)| a - b).collect::<Vec<_>>()) / b_norm;
        if !residual.is_finite() || residual > SOLVER_RTOL {
            return Err(Error::SolverDivergence { iterations, residual });
        }
        let multipliers = x[self.dim..].to_vec();
        // measured against unit forcing when the data itself is round-off
        let rhs_norm = norm(rhs);
        for (lambda, cn) in multipliers.iter().zip(&self.constraint_norms) {
            let defect = lambda.abs() * cn / rhs_norm.max(*cn);
            if defect > COMPATIBILITY_TOL {
                return Err(Error::Compatibility { defect });
            }
        }
        let mut values = x;
        values.truncate(self.dim);
        Ok(Solution {
            values,
            multipliers,
            residual,
            iterations,
        })
    }

    fn lu_solve(&self, lu: &faer::sparse::linalg::solvers::Lu<usize, f64>, b: &[f64]) -> Vec<f64> {
        let col = Col::<f64>::from_fn(b.len(), |i| b[i]);
        let x = lu.solve(&col);
        (0..b.len()).map(|i| x[i]).collect()
    }
}

/// Jacobi-preconditioned BiCGSTAB. Zero diagonal entries (multiplier rows)
/// are left unscaled.
fn bicgstab(a: &Csr, b: &[f64], rtol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let n = a.dim;
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 }).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(Error::SolverDivergence {
                iterations: it,
                residual: norm(&r) / b_norm,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        v = a.matvec(&p_hat);
        alpha = rho / dot(&r_hat, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) <= rtol * b_norm {
            x.iter_mut().zip(&p_hat).for_each(|(xi, pi)| *xi += alpha * pi);
            return Ok((x, it));
        }
        let s_hat = precond(&s);
        let t = a.matvec(&s_hat);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= rtol * b_norm {
            return Ok((x, it));
        }
    }
    Err(Error::SolverDivergence {
        iterations: max_iter,
        residual: norm(&r) / b_norm,
    })
}

/// Discrete field on the cell: one value per mesh node (bulk) or per loop
/// vertex (surface).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOnCell {
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Bulk,
    Surface,
}

impl FieldOnCell {
    pub fn bulk_from_dofs(dofs: &DofMap, dof_values: &[f64]) -> Self {
        Self {
            kind: FieldKind::Bulk,
            values: dofs.expand(dof_values),
        }
    }

    pub fn surface(values: Vec<f64>) -> Self {
        Self {
            kind: FieldKind::Surface,
            values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Symmetric positive definite check for a 2×2 tensor.
pub fn check_spd(d: &Matrix2<f64>) -> Result<()> {
    let sym = (d[(0, 1)] - d[(1, 0)]).abs() <= 1e-14 * d.norm();
    if !sym || !(d[(0, 0)] > 0.0) || !(d.determinant() > 0.0) {
        return Err(Error::Coefficient(format!(
            "diffusion tensor [[{}, {}], [{}, {}]] is not symmetric positive definite",
            d[(0, 0)],
            d[(0, 1)],
            d[(1, 0)],
            d[(1, 1)]
        )));
    }
    Ok(())
}

/// `∫ D∇u·∇v + ∫ (b·∇u) v + r ∫ u v` over the fluid cell, on periodic dofs.
///
/// `diffusion` is evaluated per triangle; `velocity`, when given, holds one
/// constant vector per triangle.
pub fn assemble_bulk(
    mesh: &CellMesh,
    dofs: &DofMap,
    diffusion: &dyn Fn(usize) -> Matrix2<f64>,
    velocity: Option<&[Vector2<f64>]>,
    reaction: f64,
) -> Result<SparseMatrix> {
    let mut m = SparseMatrix::new(dofs.n_dofs);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let el = P1Triangle::of(mesh, t);
        let d = diffusion(t);
        check_spd(&d)?;
        let ids = tri.map(|i| dofs.node_dof[i]);
        let b = velocity.map(|v| v[t]);
        for a in 0..3 {
            for c in 0..3 {
                let mut v = el.area * el.grads[a].dot(&(d * el.grads[c]));
                if let Some(b) = b {
                    v += el.area / 3.0 * b.dot(&el.grads[c]);
                }
                if reaction != 0.0 {
                    v += reaction * el.area / 12.0 * if a == c { 2.0 } else { 1.0 };
                }
                m.push(ids[a], ids[c], v);
            }
        }
    }
    Ok(m)
}

/// Laplace–Beltrami stiffness, tangential convection and mass on the loop:
/// `Ds ∫ ∂ₛu ∂ₛv + ∫ c ∂ₛu v + r ∫ u v`, with `speed[k]` the tangential
/// velocity on segment `k`.
pub fn assemble_surface(surface: &SurfaceMesh, ds: f64, speed: Option<&[f64]>, reaction: f64) -> Result<SparseMatrix> {
    let n = surface.len();
    let mut m = SparseMatrix::new(n);
    for k in 0..n {
        let len = surface.segment_lengths[k];
        if !(len > 0.0) {
            return Err(Error::Mesh(format!("surface segment {k} has zero length")));
        }
        let (i, j) = surface.segment(k);
        let ids = [i, j];
        let dphi = [-1.0 / len, 1.0 / len];
        let c = speed.map_or(0.0, |s| s[k]);
        for a in 0..2 {
            for b in 0..2 {
                let mass = len / 6.0 * if a == b { 2.0 } else { 1.0 };
                let v = ds * len * dphi[a] * dphi[b] + c * dphi[b] * len / 2.0 + reaction * mass;
                m.push(ids[a], ids[b], v);
            }
        }
    }
    Ok(m)
}

/// Loop mass matrix.
pub fn surface_mass(surface: &SurfaceMesh) -> SparseMatrix {
    assemble_surface(surface, 0.0, None, 1.0).expect("extracted loops have positive segment lengths")
}

/// Blocks of `∫ (u − w)(v − z) dσ` with `u, v` bulk traces and `w, z`
/// surface fields. `trace[k]` is the bulk dof of loop vertex `k`.
#[derive(Debug, Clone)]
pub struct CouplingBlocks {
    /// Bulk rows, bulk columns: `+M`.
    pub bulk_bulk: SparseMatrix,
    /// Bulk rows, surface columns: `−M`.
    pub bulk_surface: SparseMatrix,
    /// Surface rows, bulk columns: `−M`.
    pub surface_bulk: SparseMatrix,
    /// Surface rows, surface columns: `+M`.
    pub surface_surface: SparseMatrix,
}

/// Exchange term `weight ∫ (u − w)(v − z) dσ`, split into its four blocks.
pub fn assemble_coupling(surface: &SurfaceMesh, trace: &[usize], n_bulk: usize, weight: f64) -> Result<CouplingBlocks> {
    if trace.len() != surface.len() {
        return Err(Error::Topology(format!(
            "{} trace dofs for {} loop vertices",
            trace.len(),
            surface.len()
        )));
    }
    if let Some(&bad) = trace.iter().find(|&&d| d >= n_bulk) {
        return Err(Error::Topology(format!("trace dof {bad} is not a bulk dof")));
    }
    let n_s = surface.len();
    let mut blocks = CouplingBlocks {
        bulk_bulk: SparseMatrix::new(n_bulk),
        bulk_surface: SparseMatrix::new(n_bulk.max(n_s)),
        surface_bulk: SparseMatrix::new(n_bulk.max(n_s)),
        surface_surface: SparseMatrix::new(n_s),
    };
    let mass = surface_mass(surface);
    for &(r, c, v) in &mass.entries {
        let w = weight * v;
        blocks.bulk_bulk.push(trace[r], trace[c], w);
        blocks.bulk_surface.push(trace[r], c, -w);
        blocks.surface_bulk.push(r, trace[c], -w);
        blocks.surface_surface.push(r, c, w);
    }
    Ok(blocks)
}

impl CouplingBlocks {
    /// `weight ∫ (u − w)²` for bulk dof vector `u` and surface vector `w`.
    pub fn energy(&self, u: &[f64], w: &[f64]) -> f64 {
        self.bulk_bulk.bilinear(u, u)
            + self.bulk_surface.entries.iter().map(|&(r, c, v)| u[r] * v * w[c]).sum::<f64>()
            + self.surface_bulk.entries.iter().map(|&(r, c, v)| w[r] * v * u[c]).sum::<f64>()
            + self.surface_surface.bilinear(w, w)
    }
}

/// `∫ φ_a` over the fluid cell for every bulk dof.
pub fn bulk_lumped_mass(mesh: &CellMesh, dofs: &DofMap) -> Vec<f64> {
    bulk_load(mesh, dofs, &|_| 1.0)
}

/// `∫ ψ_k` over the loop for every loop vertex.
pub fn surface_lumped_mass(surface: &SurfaceMesh) -> Vec<f64> {
    surface_load(surface, &|_| 1.0)
}

/// `∫ g φ_a` for piecewise-constant `g` (one value per triangle).
pub fn bulk_load(mesh: &CellMesh, dofs: &DofMap, g: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let mut f = vec![0.0; dofs.n_dofs];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let share = mesh.area(t) / 3.0 * g(t);
        for &i in tri {
            f[dofs.node_dof[i]] += share;
        }
    }
    f
}

/// `∫ q·∇φ_a` for piecewise-constant vector `q`.
pub fn bulk_gradient_load(mesh: &CellMesh, dofs: &DofMap, q: &dyn Fn(usize) -> Vector2<f64>) -> Vec<f64> {
    let mut f = vec![0.0; dofs.n_dofs];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let el = P1Triangle::of(mesh, t);
        let qt = q(t);
        for a in 0..3 {
            f[dofs.node_dof[tri[a]]] += el.area * qt.dot(&el.grads[a]);
        }
    }
    f
}

/// `∫ g ψ_k` for piecewise-constant `g` (one value per segment).
pub fn surface_load(surface: &SurfaceMesh, g: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let mut f = vec![0.0; surface.len()];
    for k in 0..surface.len() {
        let (i, j) = surface.segment(k);
        let share = 0.5 * surface.segment_lengths[k] * g(k);
        f[i] += share;
        f[j] += share;
    }
    f
}

/// `∫ q ∂ₛψ_k` for a piecewise-constant tangential component `q`.
pub fn surface_gradient_load(surface: &SurfaceMesh, q: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let mut f = vec![0.0; surface.len()];
    for k in 0..surface.len() {
        let (i, j) = surface.segment(k);
        f[i] -= q(k);
        f[j] += q(k);
    }
    f
}

/// Arc-length derivative of a loop field on segment `k`.
pub fn surface_derivative(surface: &SurfaceMesh, values: &[f64], k: usize) -> f64 {
    let (i, j) = surface.segment(k);
    (values[j] - values[i]) / surface.segment_lengths[k]
}

/// Integral of a P1 bulk field given per dof.
pub fn bulk_integral(lumped: &[f64], values: &[f64]) -> f64 {
    lumped.iter().zip(values).map(|(m, v)| m * v).sum()
}
