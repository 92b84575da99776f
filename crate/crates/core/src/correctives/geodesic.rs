use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::body_model::SkinWeights;
use crate::error::{check_len, Result, RigError};
use crate::mesh::{vertex, MeshTopology};
use crate::skeleton::{bind_state, Skeleton};

/// Vertices whose distance to the joint's bind position is within this factor
/// of the closest influenced vertex form the joint's ring.
const RING_TOLERANCE: f64 = 1.1;

/// Vertices whose dominant skinning joint is `j`, its parent, or one of its
/// children.
pub fn segment(skel: &Skeleton, skin: &SkinWeights, j: usize) -> Vec<bool> {
    (0..skin.num_vertices())
        .map(|i| {
            let d = skin.dominant_joint(i);
            d == j || skel.parent(j) == Some(d) || skel.parent(d) == Some(j)
        })
        .collect()
}

/// The loop of influenced vertices closest to joint `j` in the bind pose.
pub fn joint_ring(verts: &[f64], skin: &SkinWeights, skel: &Skeleton, j: usize) -> Result<Vec<usize>> {
    let center = bind_state(skel).world[j].translation;
    let influenced: Vec<(usize, f64)> = (0..skin.num_vertices())
        .filter(|&i| skin.weight(i, j) > 0.0)
        .map(|i| (i, (vertex(verts, i) - center).norm()))
        .collect();
    let dmin = influenced.iter().map(|&(_, d)| d).fold(f64::INFINITY, f64::min);
    if influenced.is_empty() {
        return Err(RigError::Empty(format!("joint `{}` influences no vertices, its ring is empty", skel.joints()[j].name)));
    }
    Ok(influenced.into_iter().filter(|&(_, d)| d <= dmin * RING_TOLERANCE + 1e-12).map(|(i, _)| i).collect())
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra over the edge graph with Euclidean edge lengths.
pub(crate) fn edge_graph_distances(topo: &MeshTopology, verts: &[f64], sources: &[usize]) -> Vec<f64> {
    let adj = topo.adjacency();
    let mut dist = vec![f64::INFINITY; topo.num_vertices()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(Entry(0.0, s));
    }
    while let Some(Entry(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let pi = vertex(verts, i);
        for &n in &adj[i] {
            let nd = d + (vertex(verts, n) - pi).norm();
            if nd < dist[n] {
                dist[n] = nd;
                heap.push(Entry(nd, n));
            }
        }
    }
    dist
}

/// Geodesic (edge-graph) distance from the ring of joint `j`, normalised by
/// the largest finite distance inside `seg(j)`. Values are clamped to `[0, 1]`
/// and unreachable vertices map to 1.
pub fn geodesic_ring_distance(topo: &MeshTopology, verts: &[f64], skin: &SkinWeights, skel: &Skeleton, j: usize) -> Result<Vec<f64>> {
    check_len("template vertices", 3 * topo.num_vertices(), verts.len())?;
    let ring = joint_ring(verts, skin, skel, j)?;
    let dist = edge_graph_distances(topo, verts, &ring);
    let seg = segment(skel, skin, j);
    let max = dist
        .iter()
        .zip(&seg)
        .filter(|(d, &s)| s && d.is_finite())
        .map(|(d, _)| *d)
        .fold(0.0, f64::max);
    Ok(dist
        .into_iter()
        .map(|d| {
            if !d.is_finite() {
                1.0
            } else if max > 0.0 {
                (d / max).min(1.0)
            } else if d == 0.0 {
                0.0
            } else {
                1.0
            }
        })
        .collect())
}

/// Initial masks `A_j[i] = (1 - d(i, j)) · 1[i ∈ seg(j)]` for every non-root
/// joint, in joint order.
pub fn init_masks(topo: &MeshTopology, verts: &[f64], skin: &SkinWeights, skel: &Skeleton) -> Result<Vec<Vec<f64>>> {
    (0..skel.len())
        .filter(|&j| skel.parent(j).is_some())
        .map(|j| {
            let d = geodesic_ring_distance(topo, verts, skin, skel, j)?;
            let seg = segment(skel, skin, j);
            Ok(d.iter().zip(&seg).map(|(d, &s)| if s { 1.0 - d } else { 0.0 }).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{EulerXYZ, Vec3};
    use crate::skeleton::Joint;

    /// Two-row strip: top vertices 1,3,5 at y=1, bottom 0,2,4 at y=0.
    fn strip(xs: [f64; 3]) -> (MeshTopology, Vec<f64>) {
        let mut v = Vec::new();
        for x in xs {
            v.extend_from_slice(&[x, 0.0, 0.0, x, 1.0, 0.0]);
        }
        let topo = MeshTopology::new(6, vec![[0, 2, 1], [1, 2, 3], [2, 4, 3], [3, 4, 5]]).unwrap();
        (topo, v)
    }

    fn two_joint_rig() -> Skeleton {
        Skeleton::new(vec![
            Joint::new("root", None, Vec3::new(-5.0, 0.0, 0.0), EulerXYZ::ZERO),
            Joint::new("j", Some(0), Vec3::new(5.0, 0.5, 0.0), EulerXYZ::ZERO),
        ])
        .unwrap()
    }

    #[test]
    fn dijkstra_on_strip_matches_hand_computation() {
        let (topo, v) = strip([0.0, 1.0, 3.0]);
        let d = edge_graph_distances(&topo, &v, &[0, 1]);
        assert_eq!(d, vec![0.0, 0.0, 1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn normalised_ring_distance_on_strip() {
        let (topo, v) = strip([0.0, 1.0, 3.0]);
        let skel = two_joint_rig();
        let skin = SkinWeights::new(vec![vec![(1, 1.0)]; 6], 4, 2).unwrap();
        assert_eq!(joint_ring(&v, &skin, &skel, 1).unwrap(), vec![0, 1]);
        let d = geodesic_ring_distance(&topo, &v, &skin, &skel, 1).unwrap();
        let expected = [0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0, 1.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let masks = init_masks(&topo, &v, &skin, &skel).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0][0], 1.0);
        assert_eq!(masks[0][5], 0.0);
    }

    #[test]
    fn unreachable_and_out_of_segment_vertices() {
        // second strip is disconnected from the first
        let (topo_a, mut v) = strip([0.0, 1.0, 2.0]);
        let (_, vb) = strip([10.0, 11.0, 12.0]);
        v.extend(vb);
        let mut tris = topo_a.triangles().to_vec();
        tris.extend(topo_a.triangles().iter().map(|t| [t[0] + 6, t[1] + 6, t[2] + 6]));
        let topo = MeshTopology::new(12, tris).unwrap();
        let skel = Skeleton::new(vec![
            Joint::new("root", None, Vec3::new(-5.0, 0.0, 0.0), EulerXYZ::ZERO),
            Joint::new("a", Some(0), Vec3::new(5.0, 0.5, 0.0), EulerXYZ::ZERO),
            Joint::new("b", Some(1), Vec3::new(0.0, 10.0, 0.0), EulerXYZ::ZERO),
            Joint::new("c", Some(2), Vec3::new(0.0, 10.0, 0.0), EulerXYZ::ZERO),
        ])
        .unwrap();
        let mut w = vec![vec![(1, 1.0)]; 6];
        w.extend(vec![vec![(3, 1.0)]; 6]);
        let skin = SkinWeights::new(w, 4, 4).unwrap();
        let d = geodesic_ring_distance(&topo, &v, &skin, &skel, 1).unwrap();
        assert!(d[6..].iter().all(|&x| x == 1.0));
        let masks = init_masks(&topo, &v, &skin, &skel);
        // joint b influences nothing
        assert!(matches!(masks, Err(RigError::Empty(_))));
        let seg = segment(&skel, &skin, 1);
        assert!(seg[..6].iter().all(|&s| s));
        assert!(seg[6..].iter().all(|&s| !s));
    }
}
