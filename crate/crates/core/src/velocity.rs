//! Admissible cell velocities: a divergence-free bulk field obtained as the
//! curl of a P1 stream function, and a tangential surface field of constant
//! speed along the obstacle loop.

use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_bulk, bulk_lumped_mass, AffineConstraint, FieldOnCell, P1Triangle, SparseSystem};
use crate::mesh::{CellMesh, DofMap, SurfaceMesh};

/// Tolerance on the gap between bulk and surface drifts.
pub const DRIFT_TOL: f64 = 1e-8;

/// Diagonal of the stream-function tensor at a point.
pub type DiagonalTensor = fn([f64; 2]) -> [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityKind {
    /// `b = 0`.
    Zero,
    /// Stream-function tensor equal to the identity.
    Symmetric,
    /// Layered tensor, `M₁₁` piecewise affine in `y₁` and `M₂₂ = cos y₁`.
    NonSymmetric,
}

#[derive(Debug, Clone, Copy)]
pub enum StreamTensor {
    Kind(VelocityKind),
    CustomDiagonal(DiagonalTensor),
}

#[derive(Debug, Clone, Copy)]
pub struct VelocityRecipe {
    pub tensor: StreamTensor,
    /// Tangential speed `c` of `bˢ = c·t`.
    pub surface_speed: f64,
}

impl VelocityRecipe {
    pub fn new(kind: VelocityKind) -> Self {
        Self {
            tensor: StreamTensor::Kind(kind),
            surface_speed: 0.0,
        }
    }

    pub fn with_surface_speed(mut self, c: f64) -> Self {
        self.surface_speed = c;
        self
    }

    /// Diagonal of `M` at `y`, or `None` for the zero field.
    pub fn diagonal(&self, y: [f64; 2]) -> Option<[f64; 2]> {
        match self.tensor {
            StreamTensor::Kind(VelocityKind::Zero) => None,
            StreamTensor::Kind(VelocityKind::Symmetric) => Some([1.0, 1.0]),
            StreamTensor::Kind(VelocityKind::NonSymmetric) => Some(layered_tensor(y)),
            StreamTensor::CustomDiagonal(m) => Some(m(y)),
        }
    }
}

fn layered_tensor(y: [f64; 2]) -> [f64; 2] {
    let m11 = if y[0] < 0.5 { 0.01 + 0.5 * y[0] } else { 0.26 + (y[0] - 0.5) };
    [m11, y[0].cos()]
}

/// Bulk velocity per triangle, surface speed per loop segment and the drift.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub bulk: Vec<Vector2<f64>>,
    pub surface_speed: Vec<f64>,
    pub drift: [f64; 2],
}

impl VelocityField {
    pub fn zero(mesh: &CellMesh, surface: &SurfaceMesh) -> Self {
        Self {
            bulk: vec![Vector2::zeros(); mesh.triangles.len()],
            surface_speed: vec![0.0; surface.len()],
            drift: [0.0; 2],
        }
    }

    /// Tangential surface velocity on segment `k`.
    pub fn surface_vector(&self, surface: &SurfaceMesh, k: usize) -> Vector2<f64> {
        let t = surface.tangents[k];
        Vector2::new(t[0], t[1]) * self.surface_speed[k]
    }

    pub fn is_zero(&self) -> bool {
        self.bulk.iter().all(|b| b.x == 0.0 && b.y == 0.0) && self.surface_speed.iter().all(|&c| c == 0.0)
    }
}

/// Solve `−div(M∇ψ) = 1` in the fluid, `ψ = 0` on the obstacle, periodic.
pub fn solve_stream_function(mesh: &CellMesh, surface: &SurfaceMesh, recipe: &VelocityRecipe) -> Result<FieldOnCell> {
    let centroid_diag: Vec<[f64; 2]> = (0..mesh.triangles.len())
        .map(|t| {
            recipe
                .diagonal(mesh.centroid(t))
                .ok_or_else(|| Error::Input("the zero velocity recipe has no stream function".into()))
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = centroid_diag.iter().find(|m| !(m[0] > 0.0 && m[1] > 0.0)) {
        return Err(Error::Coefficient(format!("stream-function tensor diagonal {bad:?} is not positive")));
    }
    let dofs = DofMap::periodic(mesh);
    let tensor = |t: usize| Matrix2::new(centroid_diag[t][0], 0.0, 0.0, centroid_diag[t][1]);
    let mut matrix = assemble_bulk(mesh, &dofs, &tensor, None, 0.0)?;
    let mut rhs = bulk_lumped_mass(mesh, &dofs);
    if surface.is_empty() {
        // pure periodic problem: only solvable for zero-mean data
        let c = AffineConstraint::from_dense(&rhs, 0.0);
        let sol = SparseSystem::new(matrix, rhs).with_constraint(c).solve()?;
        return Ok(FieldOnCell::bulk_from_dofs(&dofs, &sol.values));
    }
    let mut pinned = vec![false; dofs.n_dofs];
    for &node in &surface.loop_nodes {
        pinned[dofs.node_dof[node]] = true;
    }
    matrix.entries.retain(|&(r, _, _)| !pinned[r]);
    for (d, &p) in pinned.iter().enumerate() {
        if p {
            matrix.push(d, d, 1.0);
            rhs[d] = 0.0;
        }
    }
    let sol = SparseSystem::new(matrix, rhs).solve()?;
    Ok(FieldOnCell::bulk_from_dofs(&dofs, &sol.values))
}

/// Per-triangle `b̃ = (−∂₂ψ, ∂₁ψ)` scaled to unit `L²(Y⁰)` norm.
pub fn curl_normalize(mesh: &CellMesh, psi: &FieldOnCell) -> Result<Vec<Vector2<f64>>> {
    let mut b: Vec<Vector2<f64>> = (0..mesh.triangles.len())
        .map(|t| {
            let el = P1Triangle::of(mesh, t);
            let g = el.gradient(mesh.triangles[t].map(|i| psi.values[i]));
            Vector2::new(-g.y, g.x)
        })
        .collect();
    let norm = (0..b.len()).map(|t| mesh.area(t) * b[t].norm_squared()).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateVelocity);
    }
    b.iter_mut().for_each(|v| *v /= norm);
    Ok(b)
}

/// Build the full velocity field for a recipe and check the drift condition.
pub fn build_velocity(mesh: &CellMesh, surface: &SurfaceMesh, recipe: &VelocityRecipe) -> Result<VelocityField> {
    let bulk = match recipe.tensor {
        StreamTensor::Kind(VelocityKind::Zero) => vec![Vector2::zeros(); mesh.triangles.len()],
        _ => curl_normalize(mesh, &solve_stream_function(mesh, surface, recipe)?)?,
    };
    let mut field = VelocityField {
        bulk,
        surface_speed: vec![recipe.surface_speed; surface.len()],
        drift: [0.0; 2],
    };
    field.drift = compute_drift(mesh, surface, &field)?.bulk;
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub bulk: [f64; 2],
    pub surface: [f64; 2],
    pub gap: f64,
}

/// Mean bulk and surface velocities; errors when they disagree.
pub fn compute_drift(mesh: &CellMesh, surface: &SurfaceMesh, field: &VelocityField) -> Result<Drift> {
    let area: f64 = (0..mesh.triangles.len()).map(|t| mesh.area(t)).sum();
    let mut bulk = [0.0; 2];
    for (t, b) in field.bulk.iter().enumerate() {
        let a = mesh.area(t);
        bulk[0] += a * b.x / area;
        bulk[1] += a * b.y / area;
    }
    let mut surf = [0.0; 2];
    if !surface.is_empty() {
        let len = surface.length();
        for k in 0..surface.len() {
            let v = field.surface_vector(surface, k) * surface.segment_lengths[k];
            surf[0] += v.x / len;
            surf[1] += v.y / len;
        }
    } else {
        surf = bulk;
    }
    let gap = (bulk[0] - surf[0]).hypot(bulk[1] - surf[1]);
    if !(gap <= DRIFT_TOL) {
        return Err(Error::DriftMismatch {
            bulk,
            surface: surf,
            gap,
        });
    }
    Ok(Drift {
        bulk,
        surface: surf,
        gap,
    })
}

/// `|b·n|` on each loop segment, taken from the fluid triangle owning it.
pub fn boundary_normal_flux(mesh: &CellMesh, surface: &SurfaceMesh, field: &VelocityField) -> Result<Vec<f64>> {
    let mut owner = std::collections::HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            owner.insert((a.min(b), a.max(b)), t);
        }
    }
    (0..surface.len())
        .map(|k| {
            let (i, j) = surface.segment(k);
            let (a, b) = (surface.loop_nodes[i], surface.loop_nodes[j]);
            let t = owner
                .get(&(a.min(b), a.max(b)))
                .ok_or_else(|| Error::Topology(format!("loop segment {k} has no adjacent triangle")))?;
            let n = surface.outward_normals[k];
            Ok((field.bulk[*t].x * n[0] + field.bulk[*t].y * n[1]).abs())
        })
        .collect()
}

/// `triangle,y1,y2,b1,b2` rows at triangle centroids.
pub fn write_velocity_csv<W: Write>(mesh: &CellMesh, field: &VelocityField, mut w: W) -> Result<()> {
    writeln!(w, "triangle,y1,y2,b1,b2")?;
    for (t, b) in field.bulk.iter().enumerate() {
        let c = mesh.centroid(t);
        writeln!(w, "{t},{},{},{},{}", c[0], c[1], b.x, b.y)?;
    }
    Ok(())
}
