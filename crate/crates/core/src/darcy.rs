//! Steady-state groundwater forward model on the unit square: linear FE
//! assembly of `-div(T grad h) = 0`, conjugate-gradient solve, and sensor
//! extraction on the 9 x 9 grid.
//!
//! Boundary conditions are fixed by the problem: unit head on the left edge,
//! zero head on the right edge, zero flux on top and bottom.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Uniform triangulation of `[0,1]^2`: `n x n` nodes, each square cell split
/// along the same diagonal into two positively oriented triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMesh {
    pub n: usize,
    pub coordinates: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

impl StructuredMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Contract(format!("mesh needs n >= 2, got {n}")));
        }
        let h = 1.0 / (n - 1) as f64;
        let mut coordinates = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                coordinates.push([ix as f64 * h, iy as f64 * h]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
        for iy in 0..n - 1 {
            for ix in 0..n - 1 {
                let v00 = iy * n + ix;
                let v10 = v00 + 1;
                let v01 = v00 + n;
                let v11 = v01 + 1;
                // fixed diagonal v00 -- v11 keeps stiffness matrices reproducible
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        Ok(StructuredMesh { n, coordinates, triangles })
    }

    pub fn n_nodes(&self) -> usize {
        self.n * self.n
    }

    pub fn element_size(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    fn signed_area(&self, tri: &[usize; 3]) -> f64 {
        let [a, b, c] = *tri;
        let pa = self.coordinates[a];
        let pb = self.coordinates[b];
        let pc = self.coordinates[c];
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    fn from_adjacency(rows: Vec<Vec<(usize, f64)>>) -> Csr {
        let n = rows.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Csr { rows: n, row_offsets, col_indices, values }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            out[r] = acc;
        }
    }
}

/// The reduced SPD system after Dirichlet elimination, plus everything needed
/// to reinsert the boundary values.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: Csr,
    pub rhs: Vec<f64>,
    /// free-equation index -> mesh node id
    pub free_nodes: Vec<usize>,
    /// (node id, prescribed head) for every Dirichlet node
    pub dirichlet: Vec<(usize, f64)>,
    pub n_nodes: usize,
}

/// Nodal hydraulic heads over the full mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSolution {
    pub heads: Vec<f64>,
}

fn accumulate(row: &mut Vec<(usize, f64)>, col: usize, val: f64) {
    for entry in row.iter_mut() {
        if entry.0 == col {
            entry.1 += val;
            return;
        }
    }
    row.push((col, val));
}

/// Full (unconstrained) stiffness matrix for `-div(T grad h)` with nodal
/// transmissivity `t`; element transmissivity is the arithmetic mean of the
/// three nodal values.
pub fn assemble_full_stiffness(mesh: &StructuredMesh, t: &[f64]) -> Result<Csr> {
    let n_nodes = mesh.n_nodes();
    if t.len() != n_nodes {
        return Err(Error::Shape(format!(
            "assemble: t has {} entries for {} nodes",
            t.len(),
            n_nodes
        )));
    }
    if t.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Contract("assemble: transmissivity must be positive".into()));
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(9); n_nodes];
    for tri in &mesh.triangles {
        let [a, b, c] = *tri;
        let area = mesh.signed_area(tri);
        let te = (t[a] + t[b] + t[c]) / 3.0;
        let pa = mesh.coordinates[a];
        let pb = mesh.coordinates[b];
        let pc = mesh.coordinates[c];
        let bvec = [pb[1] - pc[1], pc[1] - pa[1], pa[1] - pb[1]];
        let cvec = [pc[0] - pb[0], pa[0] - pc[0], pb[0] - pa[0]];
        let scale = te / (4.0 * area);
        let ids = [a, b, c];
        for i in 0..3 {
            for j in 0..3 {
                let k = scale * (bvec[i] * bvec[j] + cvec[i] * cvec[j]);
                accumulate(&mut rows[ids[i]], ids[j], k);
            }
        }
    }
    Ok(Csr::from_adjacency(rows))
}

fn dirichlet_nodes(mesh: &StructuredMesh) -> Vec<(usize, f64)> {
    let n = mesh.n;
    let mut out = Vec::with_capacity(2 * n);
    for iy in 0..n {
        out.push((iy * n, 1.0)); // x1 = 0: unit head
        out.push((iy * n + n - 1, 0.0)); // x1 = 1: zero head
    }
    out
}

/// Assembles the reduced system with Dirichlet rows eliminated. The zero-flux
/// Neumann condition on top and bottom contributes nothing to the weak form.
pub fn assemble_system(mesh: &StructuredMesh, t: &[f64]) -> Result<SparseSystem> {
    let full = assemble_full_stiffness(mesh, t)?;
    let n_nodes = mesh.n_nodes();
    let dirichlet = dirichlet_nodes(mesh);
    let mut bc = vec![f64::NAN; n_nodes];
    for &(node, value) in &dirichlet {
        bc[node] = value;
    }
    let mut free_index = vec![usize::MAX; n_nodes];
    let mut free_nodes = Vec::with_capacity(n_nodes);
    for node in 0..n_nodes {
        if bc[node].is_nan() {
            free_index[node] = free_nodes.len();
            free_nodes.push(node);
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(9); free_nodes.len()];
    let mut rhs = vec![0.0; free_nodes.len()];
    for (fi, &node) in free_nodes.iter().enumerate() {
        for k in full.row_offsets[node]..full.row_offsets[node + 1] {
            let col = full.col_indices[k];
            let val = full.values[k];
            if bc[col].is_nan() {
                rows[fi].push((free_index[col], val));
            } else {
                rhs[fi] -= val * bc[col];
            }
        }
    }
    Ok(SparseSystem {
        matrix: Csr::from_adjacency(rows),
        rhs,
        free_nodes,
        dirichlet,
        n_nodes,
    })
}

/// Conjugate gradients to relative residual `tol`; iteration cap `10 * n_nodes`.
pub fn solve_system(system: &SparseSystem, tol: f64) -> Result<HeadSolution> {
    let n = system.matrix.rows;
    let mut x = vec![0.0; n];
    let mut r = system.rhs.clone();
    let b_norm = math::sqrt(r.iter().map(|v| v * v).sum());
    if b_norm > 0.0 {
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rs_old: f64 = r.iter().map(|v| v * v).sum();
        let cap = 10 * system.n_nodes;
        let mut converged = false;
        for _ in 0..cap {
            system.matrix.matvec(&p, &mut ap);
            let p_ap: f64 = p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
            let alpha = rs_old / p_ap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            if math::sqrt(rs_new) <= tol * b_norm {
                converged = true;
                break;
            }
            let beta = rs_new / rs_old;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rs_old = rs_new;
        }
        if !converged {
            return Err(Error::Convergence(format!(
                "CG did not reach relative residual {tol} within {cap} iterations"
            )));
        }
    }
    let mut heads = vec![0.0; system.n_nodes];
    for (fi, &node) in system.free_nodes.iter().enumerate() {
        heads[node] = x[fi];
    }
    for &(node, value) in &system.dirichlet {
        heads[node] = value;
    }
    Ok(HeadSolution { heads })
}

pub const DEFAULT_CG_TOL: f64 = 1e-10;

/// Assemble-and-solve convenience used by dataset generation.
pub fn solve_darcy(mesh: &StructuredMesh, t: &[f64], tol: f64) -> Result<HeadSolution> {
    let system = assemble_system(mesh, t)?;
    solve_system(&system, tol)
}

pub const SENSOR_GRID: usize = 9;
pub const N_SENSORS: usize = SENSOR_GRID * SENSOR_GRID;

/// Node ids of the 9 x 9 sensor grid at `{0.1,...,0.9}^2`, raster-ordered
/// row-major from bottom to top. The mesh must make the sensors nodal.
pub fn sensor_nodes(mesh: &StructuredMesh) -> Result<Vec<usize>> {
    let n = mesh.n;
    if (n - 1) % 10 != 0 {
        return Err(Error::Contract(format!(
            "sensor grid not nodal: mesh n={n} needs (n-1) divisible by 10"
        )));
    }
    let stride = (n - 1) / 10;
    let mut nodes = Vec::with_capacity(N_SENSORS);
    for sy in 1..=SENSOR_GRID {
        for sx in 1..=SENSOR_GRID {
            nodes.push(sy * stride * n + sx * stride);
        }
    }
    Ok(nodes)
}

/// Extracts the 81 sensor heads from a solution.
pub fn observe(solution: &HeadSolution, mesh: &StructuredMesh) -> Result<Vec<f64>> {
    let nodes = sensor_nodes(mesh)?;
    Ok(nodes.iter().map(|&id| solution.heads[id]).collect())
}

/// Discrete boundary fluxes from the reaction forces `R = A_full h`:
/// `(inflow at x1 = 0, outflow at x1 = 1)`.
pub fn boundary_flux(
    mesh: &StructuredMesh,
    t: &[f64],
    solution: &HeadSolution,
) -> Result<(f64, f64)> {
    let full = assemble_full_stiffness(mesh, t)?;
    let mut reaction = vec![0.0; mesh.n_nodes()];
    full.matvec(&solution.heads, &mut reaction);
    let n = mesh.n;
    let mut inflow = 0.0;
    let mut outflow = 0.0;
    for iy in 0..n {
        inflow -= reaction[iy * n];
        outflow += reaction[iy * n + n - 1];
    }
    Ok((inflow, outflow))
}
