//! Axis-aligned bounding-box tree over triangles for exact closest-point
//! queries.

use crate::error::{Result, RigError};
use crate::math::Vec3;
use crate::mesh::vertex;

const LEAF_SIZE: usize = 4;

/// Closest point on a triangle mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub triangle: usize,
    /// Barycentric coordinates of `point` with respect to the triangle's vertices.
    pub bary: [f64; 3],
    pub point: Vec3,
    pub dist_sq: f64,
}

/// Closest point on triangle `abc` to `p` with its barycentric coordinates.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + v * ab, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + w * ac, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + w * (c - b), [0.0, 1.0 - w, w]);
    }
    let denom = va + vb + vc;
    if !(denom.abs() > 0.0) || !denom.is_finite() {
        return closest_on_degenerate(p, a, b, c);
    }
    let v = vb / denom;
    let w = vc / denom;
    (a + v * ab + w * ac, [1.0 - v - w, v, w])
}

/// Zero-area triangles: best of the three edge segments.
fn closest_on_degenerate(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let seg = |u: &Vec3, v: &Vec3| {
        let d = v - u;
        let len = d.norm_squared();
        let t = if len > 0.0 { ((p - u).dot(&d) / len).clamp(0.0, 1.0) } else { 0.0 };
        (u + t * d, t)
    };
    let (q0, t0) = seg(a, b);
    let (q1, t1) = seg(b, c);
    let (q2, t2) = seg(c, a);
    let cands = [(q0, [1.0 - t0, t0, 0.0]), (q1, [0.0, 1.0 - t1, t1]), (q2, [t2, 0.0, 1.0 - t2])];
    cands
        .into_iter()
        .min_by(|x, y| (x.0 - p).norm_squared().total_cmp(&(y.0 - p).norm_squared()))
        .expect("three candidates")
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    fn dist_sq(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    bounds: Aabb,
    /// Leaves cover `order[start..start + count]`; inner nodes have `count == 0`.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

#[derive(Debug, Clone)]
pub struct TriangleBvh {
    triangles: Vec<[usize; 3]>,
    verts: Vec<f64>,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl TriangleBvh {
    pub fn new(verts: &[f64], triangles: &[[usize; 3]]) -> Result<Self> {
        if triangles.is_empty() {
            return Err(RigError::Empty("mesh has no triangles".into()));
        }
        let n = verts.len() / 3;
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(RigError::invalid("triangles", "vertex index out of range"));
        }
        let mut bvh = Self {
            triangles: triangles.to_vec(),
            verts: verts.to_vec(),
            nodes: Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1),
            order: (0..triangles.len()).collect(),
        };
        let centroids: Vec<Vec3> = bvh.triangles.iter().map(|t| (vertex(verts, t[0]) + vertex(verts, t[1]) + vertex(verts, t[2])) / 3.0).collect();
        bvh.build(0, triangles.len(), &centroids);
        Ok(bvh)
    }

    fn tri_bounds(&self, t: usize) -> Aabb {
        let mut b = Aabb::EMPTY;
        for &i in &self.triangles[t] {
            b.grow(&vertex(&self.verts, i));
        }
        b
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let idx = self.nodes.len();
        let mut bounds = Aabb::EMPTY;
        let mut cb = Aabb::EMPTY;
        for &t in &self.order[start..end] {
            bounds = bounds.merge(&self.tri_bounds(t));
            cb.grow(&centroids[t]);
        }
        self.nodes.push(Node {
            bounds,
            start,
            count: end - start,
            left: usize::MAX,
            right: usize::MAX,
        });
        if end - start <= LEAF_SIZE {
            return idx;
        }
        let extent = cb.max - cb.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        let node = &mut self.nodes[idx];
        node.left = left;
        node.right = right;
        node.count = 0;
        idx
    }

    /// Updates vertex positions and bounding boxes without changing the tree.
    pub fn refit(&mut self, verts: &[f64]) -> Result<()> {
        if verts.len() != self.verts.len() {
            return Err(RigError::dims("bvh vertices", self.verts.len(), verts.len()));
        }
        self.verts.copy_from_slice(verts);
        // children always come after their parent
        for k in (0..self.nodes.len()).rev() {
            let node = self.nodes[k];
            let bounds = if node.count > 0 {
                self.order[node.start..node.start + node.count].iter().fold(Aabb::EMPTY, |b, &t| b.merge(&self.tri_bounds(t)))
            } else {
                self.nodes[node.left].bounds.merge(&self.nodes[node.right].bounds)
            };
            self.nodes[k].bounds = bounds;
        }
        Ok(())
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn vertices(&self) -> &[f64] {
        &self.verts
    }

    fn test_triangle(&self, t: usize, p: &Vec3) -> ClosestPoint {
        let tri = self.triangles[t];
        let (q, bary) = closest_point_on_triangle(p, &vertex(&self.verts, tri[0]), &vertex(&self.verts, tri[1]), &vertex(&self.verts, tri[2]));
        ClosestPoint {
            triangle: t,
            bary,
            point: q,
            dist_sq: (q - p).norm_squared(),
        }
    }

    /// Exact closest point; ties resolve to the lowest triangle index.
    pub fn closest(&self, p: &Vec3) -> ClosestPoint {
        self.closest_from(p, None)
    }

    /// [`TriangleBvh::closest`] seeded with a candidate triangle, typically
    /// the previous answer for a nearby query. The result does not depend on
    /// the hint; a good hint only prunes more of the tree.
    pub fn closest_from(&self, p: &Vec3, hint: Option<usize>) -> ClosestPoint {
        let mut best = match hint.filter(|&t| t < self.triangles.len()) {
            Some(t) => self.test_triangle(t, p),
            None => ClosestPoint {
                triangle: usize::MAX,
                bary: [0.0; 3],
                point: *p,
                dist_sq: f64::INFINITY,
            },
        };
        // depth is bounded by log2 of the triangle count, far below this
        let mut stack = [(0usize, 0.0f64); 128];
        let mut top = 1;
        stack[0] = (0, self.nodes[0].bounds.dist_sq(p));
        while top > 0 {
            top -= 1;
            let (k, d) = stack[top];
            if d > best.dist_sq {
                continue;
            }
            let node = &self.nodes[k];
            if node.count > 0 {
                for &t in &self.order[node.start..node.start + node.count] {
                    let c = self.test_triangle(t, p);
                    if c.dist_sq < best.dist_sq || (c.dist_sq == best.dist_sq && t < best.triangle) {
                        best = c;
                    }
                }
            } else {
                let dl = self.nodes[node.left].bounds.dist_sq(p);
                let dr = self.nodes[node.right].bounds.dist_sq(p);
                let (near, far) = if dl <= dr { ((node.left, dl), (node.right, dr)) } else { ((node.right, dr), (node.left, dl)) };
                if far.1 <= best.dist_sq {
                    stack[top] = far;
                    top += 1;
                }
                if near.1 <= best.dist_sq {
                    stack[top] = near;
                    top += 1;
                }
            }
        }
        best
    }

    /// O(F) reference query over every triangle.
    pub fn closest_brute_force(&self, p: &Vec3) -> ClosestPoint {
        (0..self.triangles.len())
            .map(|t| self.test_triangle(t, p))
            .reduce(|a, b| if b.dist_sq < a.dist_sq { b } else { a })
            .expect("non-empty mesh")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_regions() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        let (q, w) = closest_point_on_triangle(&Vec3::new(0.25, 0.25, 2.0), &a, &b, &c);
        assert_eq!(q, Vec3::new(0.25, 0.25, 0.0));
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let (q, w) = closest_point_on_triangle(&Vec3::new(0.5, -1.0, 0.0), &a, &b, &c);
        assert_eq!(q, Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(w, [0.5, 0.5, 0.0]);
        let (q, _) = closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert_eq!(q, a);
        let (q, w) = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        assert!((w[1] - 0.5).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_triangle_uses_edges() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(2.0, 0.0, 0.0);
        let (q, w) = closest_point_on_triangle(&Vec3::new(1.5, 1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(1.5, 0.0, 0.0)).norm() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn random_soup(rng: &mut ChaCha8Rng, f: usize) -> (Vec<f64>, Vec<[usize; 3]>) {
        let verts: Vec<f64> = (0..9 * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tris = (0..f).map(|k| [3 * k, 3 * k + 1, 3 * k + 2]).collect();
        (verts, tris)
    }

    #[test]
    fn matches_brute_force_after_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (verts, tris) = random_soup(&mut rng, 300);
        let mut bvh = TriangleBvh::new(&verts, &tris).unwrap();
        for round in 0..2 {
            for _ in 0..200 {
                let p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let a = bvh.closest(&p);
                let b = bvh.closest_brute_force(&p);
                assert!((a.dist_sq - b.dist_sq).abs() <= 1e-12, "round {round}");
            }
            let moved: Vec<f64> = verts.iter().map(|v| v * 1.3 + rng.random_range(-0.1..0.1)).collect();
            bvh.refit(&moved).unwrap();
        }
        assert!(TriangleBvh::new(&verts, &[]).is_err());
    }
}
