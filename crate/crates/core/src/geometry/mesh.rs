use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a mesh vertex lives in the unknown numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dof {
    Interior(usize),
    Boundary(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Facet {
    pub nodes: Vec<usize>,
    pub normal: [f64; 3],
    pub measure: f64,
}

/// Uniform tensor-product mesh of the unit square or cube with Q1 cells.
///
/// Interior unknowns are numbered lexicographically (x fastest), which keeps
/// the stiffness matrix banded. In 2D the boundary unknowns run
/// counterclockwise from the origin so that arclength is monotone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mesh {
    pub dim: usize,
    pub resolution: usize,
    pub vertices: Vec<[f64; 3]>,
    /// Cell connectivity, `2^dim` vertex ids per cell in tensor order.
    pub cells: Vec<Vec<usize>>,
    pub boundary_facets: Vec<Facet>,
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    pub dof_of: Vec<Dof>,
}

impl Mesh {
    pub fn h(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    pub fn vertex_index(&self, ijk: [usize; 3]) -> usize {
        let p = self.resolution + 1;
        ijk[0] + p * (ijk[1] + p * ijk[2])
    }

    pub fn coords(&self, v: usize) -> &[f64] {
        &self.vertices[v][..self.dim]
    }

    /// Lumped surface measure per boundary unknown (plain dS).
    pub fn boundary_measure_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_boundary()];
        for f in &self.boundary_facets {
            let share = f.measure / f.nodes.len() as f64;
            for &v in &f.nodes {
                if let Dof::Boundary(b) = self.dof_of[v] {
                    w[b] += share;
                }
            }
        }
        w
    }

    pub fn total_boundary_measure(&self) -> f64 {
        self.boundary_facets.iter().map(|f| f.measure).sum()
    }

    /// Arclength coordinate of each boundary unknown (2D only), in `[0, 4)`.
    pub fn boundary_arclength(&self) -> Option<Vec<f64>> {
        if self.dim != 2 {
            return None;
        }
        Some(
            self.boundary
                .iter()
                .map(|&v| {
                    let [x, y, _] = self.vertices[v];
                    if y == 0.0 && x < 1.0 {
                        x
                    } else if x == 1.0 && y < 1.0 {
                        1.0 + y
                    } else if y == 1.0 && x > 0.0 {
                        3.0 - x
                    } else {
                        4.0 - y
                    }
                })
                .collect(),
        )
    }

    /// Same geometry and numbering (meshes are fully determined by these two numbers).
    pub fn same_as(&self, other: &Mesh) -> bool {
        self.dim == other.dim && self.resolution == other.resolution
    }
}

pub fn build_box_mesh(n: usize, resolution: usize) -> Result<Mesh> {
    if n != 2 && n != 3 {
        return Err(Error::Mesh(format!("dimension {n} not supported (use 2 or 3)")));
    }
    if resolution < 2 {
        return Err(Error::Mesh(format!("resolution {resolution} < 2")));
    }
    let r = resolution;
    let p = r + 1;
    let h = 1.0 / r as f64;
    let nz = if n == 3 { p } else { 1 };
    let mut vertices = Vec::with_capacity(p * p * nz);
    for k in 0..nz {
        for j in 0..p {
            for i in 0..p {
                // i * h (not a running sum) keeps boundary coordinates exact.
                let z = if n == 3 { k as f64 * h } else { 0.0 };
                let x = if i == r { 1.0 } else { i as f64 * h };
                let y = if j == r { 1.0 } else { j as f64 * h };
                let z = if n == 3 && k == r { 1.0 } else { z };
                vertices.push([x, y, z]);
            }
        }
    }
    let id = |i: usize, j: usize, k: usize| i + p * (j + p * k);
    let on_boundary = |i: usize, j: usize, k: usize| {
        i == 0 || j == 0 || i == r || j == r || (n == 3 && (k == 0 || k == r))
    };

    let mut cells = Vec::new();
    if n == 2 {
        for j in 0..r {
            for i in 0..r {
                cells.push(vec![id(i, j, 0), id(i + 1, j, 0), id(i, j + 1, 0), id(i + 1, j + 1, 0)]);
            }
        }
    } else {
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let mut c = Vec::with_capacity(8);
                    for dk in 0..2 {
                        for dj in 0..2 {
                            for di in 0..2 {
                                c.push(id(i + di, j + dj, k + dk));
                            }
                        }
                    }
                    cells.push(c);
                }
            }
        }
    }

    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    let mut dof_of = vec![Dof::Interior(0); vertices.len()];
    for k in 0..nz {
        for j in 0..p {
            for i in 0..p {
                if !on_boundary(i, j, k) {
                    dof_of[id(i, j, k)] = Dof::Interior(interior.len());
                    interior.push(id(i, j, k));
                }
            }
        }
    }
    if n == 2 {
        let mut ring = Vec::with_capacity(4 * r);
        for i in 0..r {
            ring.push(id(i, 0, 0));
        }
        for j in 0..r {
            ring.push(id(r, j, 0));
        }
        for i in (1..=r).rev() {
            ring.push(id(i, r, 0));
        }
        for j in (1..=r).rev() {
            ring.push(id(0, j, 0));
        }
        boundary = ring;
    } else {
        for k in 0..nz {
            for j in 0..p {
                for i in 0..p {
                    if on_boundary(i, j, k) {
                        boundary.push(id(i, j, k));
                    }
                }
            }
        }
    }
    for (b, &v) in boundary.iter().enumerate() {
        dof_of[v] = Dof::Boundary(b);
    }

    let mut facets = Vec::new();
    if n == 2 {
        for i in 0..r {
            facets.push(Facet { nodes: vec![id(i, 0, 0), id(i + 1, 0, 0)], normal: [0.0, -1.0, 0.0], measure: h });
            facets.push(Facet { nodes: vec![id(i, r, 0), id(i + 1, r, 0)], normal: [0.0, 1.0, 0.0], measure: h });
        }
        for j in 0..r {
            facets.push(Facet { nodes: vec![id(0, j, 0), id(0, j + 1, 0)], normal: [-1.0, 0.0, 0.0], measure: h });
            facets.push(Facet { nodes: vec![id(r, j, 0), id(r, j + 1, 0)], normal: [1.0, 0.0, 0.0], measure: h });
        }
    } else {
        let a = h * h;
        for s in 0..r {
            for t in 0..r {
                let quad = |f: &dyn Fn(usize, usize) -> usize| vec![f(s, t), f(s + 1, t), f(s, t + 1), f(s + 1, t + 1)];
                facets.push(Facet { nodes: quad(&|a, b| id(0, a, b)), normal: [-1.0, 0.0, 0.0], measure: a });
                facets.push(Facet { nodes: quad(&|a, b| id(r, a, b)), normal: [1.0, 0.0, 0.0], measure: a });
                facets.push(Facet { nodes: quad(&|a, b| id(a, 0, b)), normal: [0.0, -1.0, 0.0], measure: a });
                facets.push(Facet { nodes: quad(&|a, b| id(a, r, b)), normal: [0.0, 1.0, 0.0], measure: a });
                facets.push(Facet { nodes: quad(&|a, b| id(a, b, 0)), normal: [0.0, 0.0, -1.0], measure: a });
                facets.push(Facet { nodes: quad(&|a, b| id(a, b, r)), normal: [0.0, 0.0, 1.0], measure: a });
            }
        }
    }

    Ok(Mesh {
        dim: n,
        resolution,
        vertices,
        cells,
        boundary_facets: facets,
        interior,
        boundary,
        dof_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_square_counts() {
        let m = build_box_mesh(2, 2).unwrap();
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.boundary_facets.len(), 8);
        assert!(m.boundary_facets.iter().all(|f| f.measure == 0.5));
        assert_eq!(m.n_interior(), 1);
        assert_eq!(m.n_boundary(), 8);
    }

    #[test]
    fn surface_measure_is_exact() {
        let m = build_box_mesh(2, 64).unwrap();
        assert!((m.total_boundary_measure() - 4.0).abs() < 1e-12);
        let w: f64 = m.boundary_measure_weights().iter().sum();
        assert!((w - 4.0).abs() < 1e-12);
        let c = build_box_mesh(3, 8).unwrap();
        assert!((c.total_boundary_measure() - 6.0).abs() < 1e-12);
        let w: f64 = c.boundary_measure_weights().iter().sum();
        assert!((w - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(build_box_mesh(1, 4).is_err());
        assert!(build_box_mesh(4, 4).is_err());
        assert!(build_box_mesh(2, 1).is_err());
    }

    #[test]
    fn boundary_count_doubles_under_refinement() {
        for r in [2, 3, 8, 17] {
            let a = build_box_mesh(2, r).unwrap();
            let b = build_box_mesh(2, 2 * r).unwrap();
            // Each of the 4r perimeter edges splits in two; the 4 corners are shared.
            assert_eq!(b.n_boundary(), 2 * a.n_boundary());
            assert_eq!(b.n_boundary(), 2 * (a.n_boundary() - 4) + 8);
        }
        for r in [2, 4] {
            let m = build_box_mesh(3, r).unwrap();
            assert_eq!(m.n_boundary(), (r + 1).pow(3) - (r - 1).pow(3));
        }
    }

    #[test]
    fn index_sets_partition_vertices() {
        for (n, r) in [(2, 5), (3, 4)] {
            let m = build_box_mesh(n, r).unwrap();
            let mut seen = vec![0u8; m.n_vertices()];
            for &v in m.interior.iter().chain(&m.boundary) {
                seen[v] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
            for f in &m.boundary_facets {
                let len: f64 = f.normal.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert_eq!(len, 1.0);
            }
        }
    }

    #[test]
    fn arclength_is_monotone() {
        let m = build_box_mesh(2, 6).unwrap();
        let s = m.boundary_arclength().unwrap();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s[0], 0.0);
        assert!(*s.last().unwrap() < 4.0);
    }
}
