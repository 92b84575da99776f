//! Triangle mesh topology and per-vertex helpers.

use std::collections::HashMap;

use crate::error::{Result, RigError};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    num_vertices: usize,
    triangles: Vec<[usize; 3]>,
}

impl MeshTopology {
    pub fn new(num_vertices: usize, triangles: Vec<[usize; 3]>) -> Result<Self> {
        for (k, t) in triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= num_vertices) {
                return Err(RigError::invalid(
                    format!("triangles[{k}]"),
                    format!("index in {t:?} out of range for {num_vertices} vertices"),
                ));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(RigError::invalid(format!("triangles[{k}]"), format!("degenerate triangle {t:?}")));
            }
        }
        let topo = Self { num_vertices, triangles };
        let bad = topo.non_manifold_edges();
        if !bad.is_empty() {
            log::warn!("mesh has {} non-manifold edges (first: {:?})", bad.len(), bad[0]);
        }
        Ok(topo)
    }

    /// Fan-triangulates polygons: `(a, b, c, d)` becomes `(a, b, c)` and `(a, c, d)`.
    pub fn from_polygons(num_vertices: usize, polygons: &[Vec<usize>]) -> Result<Self> {
        let mut tris = Vec::with_capacity(polygons.len());
        for (k, p) in polygons.iter().enumerate() {
            if p.len() < 3 {
                return Err(RigError::invalid(format!("faces[{k}]"), "polygon with fewer than 3 vertices"));
            }
            for i in 1..p.len() - 1 {
                tris.push([p[0], p[i], p[i + 1]]);
            }
        }
        Self::new(num_vertices, tris)
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Unique undirected edges `(a, b)` with `a < b`, in first-seen order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = (a.min(b), a.max(b));
                if seen.insert(e, ()).is_none() {
                    out.push(e);
                }
            }
        }
        out
    }

    /// Edges shared by more than two triangles.
    pub fn non_manifold_edges(&self) -> Vec<(usize, usize)> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut bad: Vec<_> = count.into_iter().filter(|&(_, c)| c > 2).map(|(e, _)| e).collect();
        bad.sort_unstable();
        bad
    }

    /// Sorted one-ring neighbours of every vertex.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_vertices];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for n in &mut adj {
            n.sort_unstable();
        }
        adj
    }
}

/// Uniform graph Laplacian `(L x)_i = x_i - mean_{j ∈ N(i)} x_j`, applied to
/// a per-vertex field of dimension `dim` (isolated vertices map to zero).
#[derive(Debug, Clone)]
pub struct UniformLaplacian {
    adjacency: Vec<Vec<usize>>,
}

impl UniformLaplacian {
    pub fn new(topo: &MeshTopology) -> Self {
        Self {
            adjacency: topo.adjacency(),
        }
    }

    pub fn apply(&self, field: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; field.len()];
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / nbrs.len() as f64;
            for d in 0..dim {
                let mean: f64 = nbrs.iter().map(|&j| field[dim * j + d]).sum::<f64>() * w;
                out[dim * i + d] = field[dim * i + d] - mean;
            }
        }
        out
    }

    /// `Lᵀ y`.
    pub fn apply_transpose(&self, y: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / nbrs.len() as f64;
            for d in 0..dim {
                let yi = y[dim * i + d];
                out[dim * i + d] += yi;
                for &j in nbrs {
                    out[dim * j + d] -= w * yi;
                }
            }
        }
        out
    }

    /// One explicit smoothing step `x ← x - L x` (replace by neighbour mean).
    pub fn smooth(&self, field: &[f64], dim: usize) -> Vec<f64> {
        let lap = self.apply(field, dim);
        field.iter().zip(&lap).map(|(x, l)| x - l).collect()
    }
}

pub fn vertex(verts: &[f64], i: usize) -> Vec3 {
    Vec3::new(verts[3 * i], verts[3 * i + 1], verts[3 * i + 2])
}

pub fn set_vertex(verts: &mut [f64], i: usize, v: &Vec3) {
    verts[3 * i] = v.x;
    verts[3 * i + 1] = v.y;
    verts[3 * i + 2] = v.z;
}
