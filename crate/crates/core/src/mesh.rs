//! Unit-cell geometry and its triangulation.
//!
//! The fluid part of the periodicity cell `[0,1]²` minus a disk is covered by
//! an O-grid: `4n` rays join nodes placed uniformly in angle on the obstacle
//! circle to nodes placed uniformly on the four outer edges, and each ray is
//! split into `m` layers. Outer-edge nodes therefore sit at identical
//! tangential coordinates on opposite edges, and for a centered disk the whole
//! triangulation is invariant under the symmetry group of the square.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coincidence tolerance for geometric identities.
pub const GEOM_TOL: f64 = 1e-12;

/// Periodicity cell with a disk obstacle and the measures of its fluid part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub obstacle_center: [f64; 2],
    pub obstacle_radius: f64,
    /// |Y⁰|
    pub fluid_area: f64,
    /// |∂Σ⁰|
    pub surface_length: f64,
    /// |∂Σ⁰| / |Y⁰|
    pub eta: f64,
}

impl CellGeometry {
    /// Disk obstacle with analytic measures. A zero radius gives the
    /// unperforated cell.
    pub fn disk(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::Geometry(format!(
                "radius {radius} and center {center:?} must be finite and non-negative"
            )));
        }
        let offset = (center[0] - 0.5).abs().max((center[1] - 0.5).abs());
        if radius > 0.0 && radius + offset >= 0.5 {
            return Err(Error::Geometry(format!(
                "obstacle of radius {radius} at {center:?} touches the cell boundary"
            )));
        }
        let fluid_area = 1.0 - PI * radius * radius;
        let surface_length = 2.0 * PI * radius;
        Ok(Self {
            obstacle_center: center,
            obstacle_radius: radius,
            fluid_area,
            surface_length,
            eta: surface_length / fluid_area,
        })
    }

    /// Disk of radius 0.2 centered in the cell.
    pub fn centered_disk() -> Self {
        Self::disk([0.5, 0.5], 0.2).expect("centered disk is feasible")
    }

    pub fn unperforated() -> Self {
        Self::disk([0.5, 0.5], 0.0).expect("empty obstacle is feasible")
    }

    pub fn has_obstacle(&self) -> bool {
        self.obstacle_radius > 0.0
    }

    /// Distance between the obstacle and the nearest cell edge.
    pub fn clearance(&self) -> f64 {
        let c = self.obstacle_center;
        let offset = (c[0] - 0.5).abs().max((c[1] - 0.5).abs());
        0.5 - offset - self.obstacle_radius
    }

    fn with_measures(mut self, fluid_area: f64, surface_length: f64) -> Self {
        self.fluid_area = fluid_area;
        self.surface_length = surface_length;
        self.eta = surface_length / fluid_area;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Left edge (x = 0) identified with right edge (x = 1).
    X,
    /// Bottom edge (y = 0) identified with top edge (y = 1).
    Y,
}

/// Identification of a node on the left/bottom edge with its image on the
/// right/top edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicPair {
    pub axis: Axis,
    pub lo: usize,
    pub hi: usize,
}

/// Triangulated fluid cell.
#[derive(Debug, Clone)]
pub struct CellMesh {
    /// Geometry carrying the discrete (measured) area and boundary length.
    pub geometry: CellGeometry,
    pub h: f64,
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// Closed polyline tracing the obstacle boundary, counterclockwise.
    pub boundary_segments: Vec<[usize; 2]>,
    pub periodic_pairs: Vec<PeriodicPair>,
}

/// Discretized obstacle boundary as a closed loop.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    /// Mesh node index of every loop vertex; segment `k` joins vertex `k` and `k+1 (mod n)`.
    pub loop_nodes: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub segment_lengths: Vec<f64>,
    /// Unit exterior normal to the fluid domain, pointing into the obstacle.
    pub outward_normals: Vec<[f64; 2]>,
    pub tangents: Vec<[f64; 2]>,
}

impl SurfaceMesh {
    pub fn len(&self) -> usize {
        self.loop_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loop_nodes.is_empty()
    }

    pub fn segment(&self, k: usize) -> (usize, usize) {
        (k, (k + 1) % self.loop_nodes.len())
    }

    pub fn length(&self) -> f64 {
        self.segment_lengths.iter().sum()
    }

    /// Tangential projector `G = Id − n⊗n` on segment `k`.
    pub fn projector(&self, k: usize) -> [[f64; 2]; 2] {
        let n = self.outward_normals[k];
        [
            [1.0 - n[0] * n[0], -n[0] * n[1]],
            [-n[1] * n[0], 1.0 - n[1] * n[1]],
        ]
    }
}

/// Periodic degree-of-freedom numbering: every node maps to the dof of its
/// master (the smallest node index in its periodic class).
#[derive(Debug, Clone)]
pub struct DofMap {
    pub node_dof: Vec<usize>,
    pub n_dofs: usize,
}

impl DofMap {
    pub fn periodic(mesh: &CellMesh) -> Self {
        let n = mesh.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for pair in &mesh.periodic_pairs {
            let a = find(&mut parent, pair.lo);
            let b = find(&mut parent, pair.hi);
            if a != b {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                parent[hi] = lo;
            }
        }
        let mut dof_of_root = vec![usize::MAX; n];
        let mut node_dof = vec![0; n];
        let mut n_dofs = 0;
        for i in 0..n {
            let r = find(&mut parent, i);
            if dof_of_root[r] == usize::MAX {
                dof_of_root[r] = n_dofs;
                n_dofs += 1;
            }
            node_dof[i] = dof_of_root[r];
        }
        Self { node_dof, n_dofs }
    }

    /// Identity numbering without periodic identification.
    pub fn identity(n_nodes: usize) -> Self {
        Self {
            node_dof: (0..n_nodes).collect(),
            n_dofs: n_nodes,
        }
    }

    /// Expand a dof vector to one value per node.
    pub fn expand(&self, dof_values: &[f64]) -> Vec<f64> {
        self.node_dof.iter().map(|&d| dof_values[d]).collect()
    }
}

/// Signed area of a triangle.
pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Triangulate the fluid part of the cell with target edge length `h`.
pub fn build_cell_mesh(geometry: &CellGeometry, h: f64) -> Result<CellMesh> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Geometry(format!("target edge length {h} must be positive")));
    }
    if !geometry.has_obstacle() {
        return build_unperforated(h);
    }
    let r = geometry.obstacle_radius;
    if h > r / 2.0 {
        return Err(Error::Geometry(format!(
            "target edge length {h} exceeds half the obstacle radius {r}"
        )));
    }
    if geometry.clearance() < h {
        return Err(Error::Geometry(format!(
            "obstacle clearance {:.4} to the cell boundary is below one element ({h})",
            geometry.clearance()
        )));
    }
    OGrid::new(geometry, h).build()
}

struct OGrid {
    geometry: CellGeometry,
    h: f64,
    /// Nodes per outer edge (even).
    n: usize,
    /// Number of rays (= loop length).
    rays: usize,
    /// Radial layers.
    layers: usize,
    /// Radial stretching parameter in (0, 2): s(ξ) = aξ + (1−a)ξ².
    grading: f64,
    centered: bool,
}

impl OGrid {
    fn new(geometry: &CellGeometry, h: f64) -> Self {
        let mut n = (1.0 / h - 1e-9).ceil().max(4.0) as usize;
        if n % 2 == 1 {
            n += 1;
        }
        let rays = 4 * n;
        let r = geometry.obstacle_radius;
        let mut probe = Self {
            geometry: *geometry,
            h,
            n,
            rays,
            layers: 1,
            grading: 1.0,
            centered: geometry.obstacle_center == [0.5, 0.5],
        };
        let mean_gap: f64 =
            (0..rays).map(|k| dist(probe.circle_point(k), probe.square_point(k))).sum::<f64>() / rays as f64;
        probe.layers = ((mean_gap / h).ceil() as usize).max(2);
        // first layer roughly as thick as the circle spacing
        let ratio = (2.0 * PI * r / rays as f64 / (1.0 / n as f64)).clamp(0.4, 1.0);
        probe.grading = 2.0 * ratio / (1.0 + ratio);
        probe
    }

    fn circle_point(&self, k: usize) -> [f64; 2] {
        let theta = 2.0 * PI * (k % self.rays) as f64 / self.rays as f64;
        let c = self.geometry.obstacle_center;
        let r = self.geometry.obstacle_radius;
        [c[0] + r * theta.cos(), c[1] + r * theta.sin()]
    }

    fn square_point(&self, k: usize) -> [f64; 2] {
        let n = self.n;
        let half = n / 2;
        // shift so that index 0 is the bottom-right corner
        let q = (k % self.rays + half) % self.rays;
        let side = q / n;
        let t = q % n;
        let frac = |i: usize| i as f64 / n as f64;
        match side {
            0 => [1.0, frac(t)],
            1 => [frac(n - t), 1.0],
            2 => [0.0, frac(n - t)],
            _ => [frac(t), 0.0],
        }
    }

    fn stretch(&self, j: usize) -> f64 {
        if j == self.layers {
            return 1.0;
        }
        let xi = j as f64 / self.layers as f64;
        self.grading * xi + (1.0 - self.grading) * xi * xi
    }

    fn node(&self, k: usize, j: usize) -> usize {
        j * self.rays + (k % self.rays)
    }

    fn position(&self, k: usize, j: usize) -> [f64; 2] {
        if j == 0 {
            return self.circle_point(k);
        }
        if j == self.layers {
            return self.square_point(k);
        }
        let c = self.circle_point(k);
        let p = self.square_point(k);
        let s = self.stretch(j);
        [c[0] + s * (p[0] - c[0]), c[1] + s * (p[1] - c[1])]
    }

    /// True when the quad of sector `k`, layer `j` is split along a–c
    /// (a = (k,j), c = (k+1,j+1)); otherwise along b–d.
    fn split_along_ac(&self, k: usize, j: usize) -> bool {
        let (sector, reflected) = if self.centered {
            let s1 = k % self.n;
            if s1 < self.n / 2 {
                (s1, false)
            } else {
                (self.n - 1 - s1, true)
            }
        } else {
            (k, false)
        };
        let a = self.position(sector, j);
        let b = self.position(sector + 1, j);
        let c = self.position(sector + 1, j + 1);
        let d = self.position(sector, j + 1);
        let angle = |p: [f64; 2], q: [f64; 2], s: [f64; 2]| {
            let u = [p[0] - q[0], p[1] - q[1]];
            let v = [s[0] - q[0], s[1] - q[1]];
            (u[0] * v[1] - u[1] * v[0]).abs().atan2(u[0] * v[0] + u[1] * v[1])
        };
        let opposite_ac = angle(a, b, c) + angle(c, d, a);
        let opposite_bd = angle(b, a, d) + angle(d, c, b);
        let ac = opposite_ac <= opposite_bd;
        ac != reflected
    }

    fn build(&self) -> Result<CellMesh> {
        let rays = self.rays;
        let mut nodes = Vec::with_capacity(rays * (self.layers + 1));
        for j in 0..=self.layers {
            for k in 0..rays {
                nodes.push(self.position(k, j));
            }
        }
        let mut triangles = Vec::with_capacity(2 * rays * self.layers);
        for j in 0..self.layers {
            for k in 0..rays {
                let a = self.node(k, j);
                let b = self.node(k + 1, j);
                let c = self.node(k + 1, j + 1);
                let d = self.node(k, j + 1);
                let pair = if self.split_along_ac(k, j) {
                    [[a, b, c], [a, c, d]]
                } else {
                    [[a, b, d], [b, c, d]]
                };
                for mut t in pair {
                    if signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) < 0.0 {
                        t.swap(1, 2);
                    }
                    triangles.push(t);
                }
            }
        }
        let boundary_segments = (0..rays).map(|k| [self.node(k, 0), self.node(k + 1, 0)]).collect();
        let outer: Vec<usize> = (0..rays).map(|k| self.node(k, self.layers)).collect();
        let periodic_pairs = pair_outer_nodes(&nodes, &outer)?;
        finish_mesh(self.geometry, self.h, nodes, triangles, boundary_segments, periodic_pairs)
    }
}

fn build_unperforated(h: f64) -> Result<CellMesh> {
    let n = (1.0 / h - 1e-9).ceil().max(2.0) as usize;
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let outer: Vec<usize> = (0..nodes.len())
        .filter(|&p| {
            let [x, y] = nodes[p];
            x == 0.0 || x == 1.0 || y == 0.0 || y == 1.0
        })
        .collect();
    let periodic_pairs = pair_outer_nodes(&nodes, &outer)?;
    finish_mesh(CellGeometry::unperforated(), h, nodes, triangles, Vec::new(), periodic_pairs)
}

/// Match outer-edge nodes across opposite edges by their tangential coordinate.
fn pair_outer_nodes(nodes: &[[f64; 2]], outer: &[usize]) -> Result<Vec<PeriodicPair>> {
    let mut pairs = Vec::new();
    for (axis, normal, tangential) in [(Axis::X, 0, 1), (Axis::Y, 1, 0)] {
        let side = |value: f64| {
            let mut v: Vec<usize> = outer.iter().copied().filter(|&p| nodes[p][normal] == value).collect();
            v.sort_by(|&a, &b| nodes[a][tangential].total_cmp(&nodes[b][tangential]));
            v
        };
        let lo = side(0.0);
        let hi = side(1.0);
        if lo.len() != hi.len() {
            return Err(Error::Topology(format!(
                "opposite edges carry {} and {} nodes",
                lo.len(),
                hi.len()
            )));
        }
        for (&a, &b) in lo.iter().zip(&hi) {
            if (nodes[a][tangential] - nodes[b][tangential]).abs() > GEOM_TOL {
                return Err(Error::Topology(format!("nodes {a} and {b} do not match across the cell")));
            }
            pairs.push(PeriodicPair { axis, lo: a, hi: b });
        }
    }
    Ok(pairs)
}

fn finish_mesh(
    geometry: CellGeometry,
    h: f64,
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_segments: Vec<[usize; 2]>,
    periodic_pairs: Vec<PeriodicPair>,
) -> Result<CellMesh> {
    let mut mesh = CellMesh {
        geometry,
        h,
        nodes,
        triangles,
        boundary_segments,
        periodic_pairs,
    };
    let (area, length) = measure(&mesh);
    mesh.geometry = geometry.with_measures(area, length);
    mesh.validate()?;
    Ok(mesh)
}

/// Discrete fluid area and obstacle perimeter.
pub fn measure(mesh: &CellMesh) -> (f64, f64) {
    let area = mesh
        .triangles
        .iter()
        .map(|t| signed_area(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]))
        .sum();
    let length = mesh
        .boundary_segments
        .iter()
        .map(|s| dist(mesh.nodes[s[0]], mesh.nodes[s[1]]))
        .sum();
    (area, length)
}

impl CellMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        signed_area(a, b, c)
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// Check the structural invariants of the triangulation.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("triangle {i} references a missing node")));
            }
            if self.area(i) <= 0.0 {
                return Err(Error::Mesh(format!("triangle {i} has non-positive area")));
            }
        }
        let g = &self.geometry;
        if g.has_obstacle() {
            let c = g.obstacle_center;
            for (i, p) in self.nodes.iter().enumerate() {
                if dist(*p, c) < g.obstacle_radius - GEOM_TOL {
                    return Err(Error::Mesh(format!("node {i} lies inside the obstacle")));
                }
            }
            let tol = 0.5 * self.h * self.h;
            for s in &self.boundary_segments {
                for &v in s {
                    if (dist(self.nodes[v], c) - g.obstacle_radius).abs() > tol {
                        return Err(Error::Mesh(format!("boundary node {v} is off the obstacle circle")));
                    }
                }
            }
        }
        for p in &self.periodic_pairs {
            let (normal, tangential) = match p.axis {
                Axis::X => (0, 1),
                Axis::Y => (1, 0),
            };
            let (a, b) = (self.nodes[p.lo], self.nodes[p.hi]);
            if (a[tangential] - b[tangential]).abs() > GEOM_TOL || b[normal] - a[normal] != 1.0 {
                return Err(Error::Mesh(format!("periodic pair {} / {} is not an exact translate", p.lo, p.hi)));
            }
        }
        Ok(())
    }
}

/// Trace the obstacle boundary into a counterclockwise loop with per-segment frames.
pub fn extract_surface_mesh(mesh: &CellMesh) -> Result<SurfaceMesh> {
    let segs = &mesh.boundary_segments;
    if segs.is_empty() {
        return Ok(SurfaceMesh {
            loop_nodes: Vec::new(),
            positions: Vec::new(),
            segment_lengths: Vec::new(),
            outward_normals: Vec::new(),
            tangents: Vec::new(),
        });
    }
    let mut next = std::collections::HashMap::with_capacity(segs.len());
    for s in segs {
        if next.insert(s[0], s[1]).is_some() {
            return Err(Error::Topology(format!("node {} starts two boundary segments", s[0])));
        }
    }
    let start = segs[0][0];
    let mut loop_nodes = vec![start];
    let mut cur = start;
    loop {
        cur = *next
            .get(&cur)
            .ok_or_else(|| Error::Topology(format!("boundary loop is open at node {cur}")))?;
        if cur == start {
            break;
        }
        if loop_nodes.len() > segs.len() {
            return Err(Error::Topology("boundary loop does not close".into()));
        }
        loop_nodes.push(cur);
    }
    if loop_nodes.len() != segs.len() {
        return Err(Error::Topology(format!(
            "boundary is not a single loop ({} of {} segments reached)",
            loop_nodes.len(),
            segs.len()
        )));
    }
    let mut positions: Vec<[f64; 2]> = loop_nodes.iter().map(|&i| mesh.nodes[i]).collect();
    let m = positions.len();
    let twice_area: f64 = (0..m)
        .map(|k| {
            let (p, q) = (positions[k], positions[(k + 1) % m]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    if twice_area < 0.0 {
        loop_nodes.reverse();
        positions.reverse();
    }
    let mut segment_lengths = Vec::with_capacity(m);
    let mut tangents = Vec::with_capacity(m);
    let mut outward_normals = Vec::with_capacity(m);
    for k in 0..m {
        let (p, q) = (positions[k], positions[(k + 1) % m]);
        let len = dist(p, q);
        if !(len > 0.0) {
            return Err(Error::Mesh(format!("boundary segment {k} has zero length")));
        }
        let t = [(q[0] - p[0]) / len, (q[1] - p[1]) / len];
        segment_lengths.push(len);
        tangents.push(t);
        // left of a counterclockwise traversal: into the obstacle
        outward_normals.push([-t[1], t[0]]);
    }
    Ok(SurfaceMesh {
        loop_nodes,
        positions,
        segment_lengths,
        outward_normals,
        tangents,
    })
}

const MESH_MAGIC: &str = "dispersion-lab-mesh 1";

/// Write the mesh as plain text: header, node, triangle, boundary loop and
/// periodic pair tables. Floats use shortest round-trip formatting.
pub fn write_mesh<W: Write>(mesh: &CellMesh, mut w: W) -> Result<()> {
    let g = &mesh.geometry;
    writeln!(w, "{MESH_MAGIC}")?;
    writeln!(w, "center {} {}", g.obstacle_center[0], g.obstacle_center[1])?;
    writeln!(w, "radius {}", g.obstacle_radius)?;
    writeln!(w, "h {}", mesh.h)?;
    writeln!(w, "nodes {}", mesh.nodes.len())?;
    for (i, p) in mesh.nodes.iter().enumerate() {
        writeln!(w, "{i} {} {}", p[0], p[1])?;
    }
    writeln!(w, "triangles {}", mesh.triangles.len())?;
    for (i, t) in mesh.triangles.iter().enumerate() {
        writeln!(w, "{i} {} {} {}", t[0], t[1], t[2])?;
    }
    writeln!(w, "boundary {}", mesh.boundary_segments.len())?;
    for (i, s) in mesh.boundary_segments.iter().enumerate() {
        writeln!(w, "{i} {} {}", s[0], s[1])?;
    }
    writeln!(w, "periodic {}", mesh.periodic_pairs.len())?;
    for (i, p) in mesh.periodic_pairs.iter().enumerate() {
        let axis = match p.axis {
            Axis::X => "x",
            Axis::Y => "y",
        };
        writeln!(w, "{i} {axis} {} {}", p.lo, p.hi)?;
    }
    Ok(())
}

/// Read a mesh written by [`write_mesh`] and re-validate it.
pub fn read_mesh<R: BufRead>(r: R) -> Result<CellMesh> {
    let parse_err = |detail: String| Error::Parse {
        what: "mesh file".into(),
        detail,
    };
    let mut lines = r.lines();
    let mut next_line = || -> Result<Vec<String>> {
        loop {
            let line = lines.next().ok_or_else(|| parse_err("unexpected end of file".into()))??;
            let line = line.trim();
            if !line.is_empty() {
                return Ok(line.split_whitespace().map(str::to_owned).collect());
            }
        }
    };
    let header = next_line()?.join(" ");
    if header != MESH_MAGIC {
        return Err(parse_err(format!("unknown header '{header}'")));
    }
    fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
        s.parse().map_err(|_| Error::Parse {
            what: "mesh file".into(),
            detail: format!("bad number '{s}'"),
        })
    }
    let keyed = |f: Vec<String>, key: &str, arity: usize| -> Result<Vec<String>> {
        if f.first().map(String::as_str) != Some(key) || f.len() != arity + 1 {
            return Err(parse_err(format!("expected '{key}' line, found '{}'", f.join(" "))));
        }
        Ok(f[1..].to_vec())
    };
    let c = keyed(next_line()?, "center", 2)?;
    let center = [num(&c[0])?, num(&c[1])?];
    let radius: f64 = num(&keyed(next_line()?, "radius", 1)?[0])?;
    let h: f64 = num(&keyed(next_line()?, "h", 1)?[0])?;
    let geometry = CellGeometry::disk(center, radius)?;

    let count: usize = num(&keyed(next_line()?, "nodes", 1)?[0])?;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let f = next_line()?;
        if f.len() != 3 {
            return Err(parse_err(format!("bad node row '{}'", f.join(" "))));
        }
        nodes.push([num(&f[1])?, num(&f[2])?]);
    }
    let count: usize = num(&keyed(next_line()?, "triangles", 1)?[0])?;
    let mut triangles = Vec::with_capacity(count);
    for _ in 0..count {
        let f = next_line()?;
        if f.len() != 4 {
            return Err(parse_err(format!("bad triangle row '{}'", f.join(" "))));
        }
        triangles.push([num(&f[1])?, num(&f[2])?, num(&f[3])?]);
    }
    let count: usize = num(&keyed(next_line()?, "boundary", 1)?[0])?;
    let mut boundary_segments = Vec::with_capacity(count);
    for _ in 0..count {
        let f = next_line()?;
        if f.len() != 3 {
            return Err(parse_err(format!("bad boundary row '{}'", f.join(" "))));
        }
        boundary_segments.push([num(&f[1])?, num(&f[2])?]);
    }
    let count: usize = num(&keyed(next_line()?, "periodic", 1)?[0])?;
    let mut periodic_pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let f = next_line()?;
        if f.len() != 4 {
            return Err(parse_err(format!("bad periodic row '{}'", f.join(" "))));
        }
        let axis = match f[1].as_str() {
            "x" => Axis::X,
            "y" => Axis::Y,
            other => return Err(parse_err(format!("unknown axis '{other}'"))),
        };
        periodic_pairs.push(PeriodicPair {
            axis,
            lo: num(&f[2])?,
            hi: num(&f[3])?,
        });
    }
    finish_mesh(geometry, h, nodes, triangles, boundary_segments, periodic_pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_mesh(h: f64) -> CellMesh {
        build_cell_mesh(&CellGeometry::centered_disk(), h).unwrap()
    }

    #[test]
    fn area_and_length_at_fine_resolution() {
        let mesh = default_mesh(1.0 / 64.0);
        let (area, length) = measure(&mesh);
        assert!((area - (1.0 - 0.04 * PI)).abs() < 1e-3);
        assert!((length - 0.4 * PI).abs() < 1e-3);
        assert_eq!(mesh.geometry.eta, length / area);
    }

    #[test]
    fn area_close_at_coarse_resolution() {
        let mesh = default_mesh(1.0 / 32.0);
        assert!((mesh.geometry.fluid_area - 0.874336).abs() < 2e-3);
    }

    #[test]
    fn radius_near_half_is_rejected() {
        let g = CellGeometry::disk([0.5, 0.5], 0.49).unwrap();
        assert!(matches!(build_cell_mesh(&g, 1.0 / 32.0), Err(Error::Geometry(_))));
        assert!(CellGeometry::disk([0.5, 0.5], 0.5).is_err());
        assert!(CellGeometry::disk([0.6, 0.5], 0.45).is_err());
    }

    #[test]
    fn too_coarse_h_is_rejected() {
        assert!(build_cell_mesh(&CellGeometry::centered_disk(), 0.2).is_err());
    }

    #[test]
    fn unperforated_cell_measures_exactly() {
        let mesh = build_cell_mesh(&CellGeometry::unperforated(), 1.0 / 8.0).unwrap();
        let (area, length) = measure(&mesh);
        assert!((area - 1.0).abs() < 1e-14);
        assert_eq!(length, 0.0);
        assert!(extract_surface_mesh(&mesh).unwrap().is_empty());
    }

    #[test]
    fn annulus_euler_characteristic_vanishes() {
        let mesh = default_mesh(1.0 / 16.0);
        let v = mesh.n_nodes() as i64;
        let e = mesh.edge_count() as i64;
        let f = mesh.triangles.len() as i64;
        assert_eq!(v - e + f, 0);
    }

    #[test]
    fn periodic_pairs_are_exact_translates() {
        let mesh = default_mesh(1.0 / 32.0);
        let x = mesh.periodic_pairs.iter().filter(|p| p.axis == Axis::X).count();
        let y = mesh.periodic_pairs.len() - x;
        assert_eq!(x, 33);
        assert_eq!(y, 33);
        for p in &mesh.periodic_pairs {
            let (a, b) = (mesh.nodes[p.lo], mesh.nodes[p.hi]);
            match p.axis {
                Axis::X => assert_eq!((b[0] - a[0], a[1]), (1.0, b[1])),
                Axis::Y => assert_eq!((b[1] - a[1], a[0]), (1.0, b[0])),
            }
        }
        // the four corners collapse onto a single dof
        let dofs = DofMap::periodic(&mesh);
        let corners: Vec<usize> = mesh
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, p)| (p[0] == 0.0 || p[0] == 1.0) && (p[1] == 0.0 || p[1] == 1.0))
            .map(|(i, _)| dofs.node_dof[i])
            .collect();
        assert_eq!(corners.len(), 4);
        assert!(corners.iter().all(|&d| d == corners[0]));
        assert_eq!(dofs.n_dofs, mesh.n_nodes() - 33 - 32);
    }

    #[test]
    fn surface_frames_are_orthonormal_and_point_into_obstacle() {
        let mesh = default_mesh(1.0 / 32.0);
        let s = extract_surface_mesh(&mesh).unwrap();
        assert_eq!(s.len(), mesh.boundary_segments.len());
        for k in 0..s.len() {
            let (t, n) = (s.tangents[k], s.outward_normals[k]);
            assert!((t[0] * n[0] + t[1] * n[1]).abs() < 1e-12);
            assert!((t[0].hypot(t[1]) - 1.0).abs() < 1e-12);
            assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-12);
            let g = s.projector(k);
            let gt = [g[0][0] * t[0] + g[0][1] * t[1], g[1][0] * t[0] + g[1][1] * t[1]];
            assert!((gt[0] - t[0]).abs() < 1e-12 && (gt[1] - t[1]).abs() < 1e-12);
            let (a, b) = s.segment(k);
            let m = [
                0.5 * (s.positions[a][0] + s.positions[b][0]),
                0.5 * (s.positions[a][1] + s.positions[b][1]),
            ];
            let to_center = [0.5 - m[0], 0.5 - m[1]];
            let norm = to_center[0].hypot(to_center[1]);
            let gap = (n[0] - to_center[0] / norm).hypot(n[1] - to_center[1] / norm);
            assert!(gap < mesh.h);
        }
    }

    #[test]
    fn open_or_split_boundary_is_a_topology_error() {
        let mut mesh = default_mesh(1.0 / 16.0);
        mesh.boundary_segments.pop();
        assert!(matches!(extract_surface_mesh(&mesh), Err(Error::Topology(_))));

        let mut mesh = default_mesh(1.0 / 16.0);
        let n = mesh.boundary_segments.len();
        // two loops: close the first half on itself, then the second half
        let first = mesh.boundary_segments[0][0];
        let mid = mesh.boundary_segments[n / 2][0];
        mesh.boundary_segments[n / 2 - 1][1] = first;
        mesh.boundary_segments[n - 1][1] = mid;
        assert!(matches!(extract_surface_mesh(&mesh), Err(Error::Topology(_))));
    }

    #[test]
    fn centered_mesh_is_mirror_symmetric() {
        let mesh = default_mesh(1.0 / 16.0);
        let key = |p: [f64; 2]| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64);
        let set: std::collections::HashSet<_> = mesh.nodes.iter().map(|&p| key(p)).collect();
        for &p in &mesh.nodes {
            assert!(set.contains(&key([1.0 - p[0], p[1]])));
            assert!(set.contains(&key([p[1], p[0]])));
        }
        let tri_key = |t: &[usize; 3], map: &dyn Fn([f64; 2]) -> [f64; 2]| {
            let mut v: Vec<_> = t.iter().map(|&i| key(map(mesh.nodes[i]))).collect();
            v.sort();
            v
        };
        let tris: std::collections::HashSet<_> = mesh.triangles.iter().map(|t| tri_key(t, &|p| p)).collect();
        for t in &mesh.triangles {
            assert!(tris.contains(&tri_key(t, &|p| [1.0 - p[0], p[1]])));
            assert!(tris.contains(&tri_key(t, &|p| [p[1], p[0]])));
        }
    }

    #[test]
    fn text_format_round_trips() {
        let mesh = default_mesh(1.0 / 16.0);
        let mut buf = Vec::new();
        write_mesh(&mesh, &mut buf).unwrap();
        let back = read_mesh(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.nodes, mesh.nodes);
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.boundary_segments, mesh.boundary_segments);
        assert_eq!(back.periodic_pairs, mesh.periodic_pairs);
        assert_eq!(back.geometry, mesh.geometry);
    }

    #[test]
    fn corrupt_mesh_file_is_rejected() {
        assert!(read_mesh(std::io::Cursor::new("not a mesh\n")).is_err());
        let mesh = default_mesh(1.0 / 16.0);
        let mut buf = Vec::new();
        write_mesh(&mesh, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(40).collect::<Vec<_>>().join("\n");
        assert!(read_mesh(std::io::Cursor::new(truncated)).is_err());
    }
}
