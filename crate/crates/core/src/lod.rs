//! Level-of-detail transfer of per-vertex fields through closest-face
//! barycentric maps.

use rayon::prelude::*;

use crate::body_model::{BlendshapeBasis, LodEntry, RigModel, SkinWeights};
use crate::correctives::{init_masks, CorrectiveModel};
use crate::error::{check_len, Result, RigError};
use crate::fitting::TriangleBvh;
use crate::math::Vec3;
use crate::mesh::{MeshTopology, UniformLaplacian};

/// Per target vertex: source triangle and barycentric coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricMap {
    pub source_vertices: usize,
    pub triangles: Vec<usize>,
    pub corners: Vec<[usize; 3]>,
    pub bary: Vec<[f64; 3]>,
    /// Distance from each target vertex to the source surface.
    pub distances: Vec<f64>,
}

impl BarycentricMap {
    pub fn len(&self) -> usize {
        self.bary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bary.is_empty()
    }

    pub fn max_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }
}

pub fn build_barycentric_map(source_verts: &[f64], source: &MeshTopology, target_verts: &[f64]) -> Result<BarycentricMap> {
    check_len("source vertices", 3 * source.num_vertices(), source_verts.len())?;
    if !target_verts.len().is_multiple_of(3) {
        return Err(RigError::invalid("target vertices", "length is not a multiple of 3"));
    }
    let bvh = TriangleBvh::new(source_verts, source.triangles())?;
    let hits: Vec<_> = target_verts.par_chunks_exact(3).map(|p| bvh.closest(&Vec3::new(p[0], p[1], p[2]))).collect();
    Ok(BarycentricMap {
        source_vertices: source.num_vertices(),
        corners: hits.iter().map(|h| source.triangles()[h.triangle]).collect(),
        triangles: hits.iter().map(|h| h.triangle).collect(),
        bary: hits.iter().map(|h| h.bary).collect(),
        distances: hits.iter().map(|h| h.dist_sq.sqrt()).collect(),
    })
}

/// Interpolates a per-vertex field of dimension `dim` onto the target vertices.
pub fn transfer_field(map: &BarycentricMap, field: &[f64], dim: usize) -> Result<Vec<f64>> {
    check_len("source field", map.source_vertices * dim, field.len())?;
    let mut out = vec![0.0; map.len() * dim];
    for (t, (c, b)) in map.corners.iter().zip(&map.bary).enumerate() {
        for d in 0..dim {
            out[t * dim + d] = b[0] * field[c[0] * dim + d] + b[1] * field[c[1] * dim + d] + b[2] * field[c[2] * dim + d];
        }
    }
    Ok(out)
}

/// Blends the corners' influences, then truncates to `max_influences` and
/// renormalises.
pub fn transfer_skin(map: &BarycentricMap, skin: &SkinWeights, max_influences: usize, num_joints: usize) -> Result<SkinWeights> {
    check_len("skin weight rows", map.source_vertices, skin.num_vertices())?;
    let lists = map
        .corners
        .iter()
        .zip(&map.bary)
        .map(|(c, b)| {
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for (&v, &w) in c.iter().zip(b) {
                for (j, sw) in skin.influences(v) {
                    match acc.iter_mut().find(|e| e.0 == j) {
                        Some(e) => e.1 += w * sw,
                        None => acc.push((j, w * sw)),
                    }
                }
            }
            acc.retain(|e| e.1 > 0.0);
            acc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            acc.truncate(max_influences);
            let total: f64 = acc.iter().map(|e| e.1).sum();
            acc.iter_mut().for_each(|e| e.1 /= total);
            acc
        })
        .collect();
    SkinWeights::new(lists, max_influences, num_joints)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransferOptions {
    /// One uniform Laplacian smoothing pass over transferred blendshapes and
    /// corrective tensors.
    pub smooth: bool,
    /// Re-derive corrective masks from the target mesh instead of transferring them.
    pub reinit_masks: bool,
    /// Influence cap on the target; the source cap when `None`.
    pub max_influences: Option<usize>,
}

fn transfer_basis(map: &BarycentricMap, basis: &BlendshapeBasis, lap: Option<&UniformLaplacian>) -> Result<BlendshapeBasis> {
    let deltas = basis
        .components()
        .map(|c| {
            let t = transfer_field(map, c, 3)?;
            Ok(match lap {
                Some(l) => l.smooth(&t, 3),
                None => t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BlendshapeBasis::new(map.len(), basis.names.clone(), deltas)?.with_std_devs(basis.std_devs.clone())
}

/// Builds the rig for a different mesh resolution of the same surface.
pub fn transfer_rig(rig: &RigModel, target_topology: MeshTopology, target_template: Vec<f64>, opts: TransferOptions) -> Result<RigModel> {
    check_len("target template", 3 * target_topology.num_vertices(), target_template.len())?;
    let map = build_barycentric_map(&rig.template, &rig.topology, &target_template)?;
    log::info!("LOD map: {} target vertices, max surface distance {:.3e}", map.len(), map.max_distance());
    let lap = opts.smooth.then(|| UniformLaplacian::new(&target_topology));
    let identity = transfer_basis(&map, &rig.identity, lap.as_ref())?;
    let expression = transfer_basis(&map, &rig.expression, lap.as_ref())?;
    let k = opts.max_influences.unwrap_or(rig.skin.max_influences());
    let skin = transfer_skin(&map, &rig.skin, k, rig.skeleton.len())?;
    let n = map.len();
    let correctives = match &rig.correctives {
        None => None,
        Some(src) => {
            let c = src.config.embedding;
            let masks: Vec<Vec<f64>> = if opts.reinit_masks {
                init_masks(&target_topology, &target_template, &skin, &rig.skeleton)?
            } else {
                src.joints.iter().map(|jc| transfer_field(&map, &jc.mask, 1)).collect::<Result<_>>()?
            };
            let mut joints = Vec::with_capacity(src.joints.len());
            for (jc, mask) in src.joints.iter().zip(masks) {
                let mut weights = transfer_field(&map, &jc.weights, 3 * c)?;
                let mut mask = mask;
                if let Some(l) = &lap {
                    weights = l.smooth(&weights, 3 * c);
                    if !opts.reinit_masks {
                        mask = l.smooth(&mask, 1);
                    }
                }
                let mut out = jc.clone();
                out.mask = mask;
                out.weights = weights;
                joints.push(out);
            }
            Some(CorrectiveModel {
                config: src.config.clone(),
                num_vertices: n,
                joints,
            })
        }
    };
    let mut out = RigModel::new(
        target_topology,
        target_template,
        identity,
        expression,
        skin,
        rig.skeleton.clone(),
        rig.parameter_transform.clone(),
        correctives,
        rig.skeleton_basis.clone(),
    )?;
    out.identity_regions = rig.identity_regions.clone();
    out.extras = rig.extras.clone();
    out.lods = rig.lods.clone();
    if !out.lods.iter().any(|l| l.vertices == n) {
        let level = out.lods.iter().map(|l| l.level).max().map_or(0, |m| m + 1);
        out.lods.push(LodEntry { level, vertices: n });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `n × n` grid of unit squares in the z = 0 plane.
    fn grid(n: usize) -> (Vec<f64>, MeshTopology) {
        let mut v = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                v.extend_from_slice(&[i as f64, j as f64, 0.0]);
            }
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut quads = Vec::new();
        for j in 0..n {
            for i in 0..n {
                quads.push(vec![idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        let topo = MeshTopology::from_polygons((n + 1) * (n + 1), &quads).unwrap();
        (v, topo)
    }

    #[test]
    fn self_map_and_round_trip() {
        let (v, topo) = grid(4);
        let map = build_barycentric_map(&v, &topo, &v).unwrap();
        for (k, (c, b)) in map.corners.iter().zip(&map.bary).enumerate() {
            let hit = c.iter().zip(b).find(|(_, &w)| (w - 1.0).abs() < 1e-12).map(|(&i, _)| i);
            assert_eq!(hit, Some(k));
        }
        let field: Vec<f64> = (0..v.len()).map(|k| (k as f64).sin()).collect();
        let back = transfer_field(&map, &field, 3).unwrap();
        assert!(back.iter().zip(&field).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn edge_midpoint_gets_half_weights() {
        let (v, topo) = grid(1);
        let map = build_barycentric_map(&v, &topo, &[0.5, 0.0, 0.0]).unwrap();
        let mut b = map.bary[0].to_vec();
        b.sort_by(f64::total_cmp);
        assert!((b[0]).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15 && (b[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_and_linear_fields_are_reproduced() {
        let (v, topo) = grid(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let targets: Vec<f64> = (0..60).flat_map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 0.0]).collect();
        let map = build_barycentric_map(&v, &topo, &targets).unwrap();
        let constant = vec![2.5; topo.num_vertices()];
        assert!(transfer_field(&map, &constant, 1).unwrap().iter().all(|x| (x - 2.5).abs() < 1e-12));
        let linear: Vec<f64> = (0..topo.num_vertices()).map(|i| 0.3 * v[3 * i] - 1.7 * v[3 * i + 1] + 0.2).collect();
        let out = transfer_field(&map, &linear, 1).unwrap();
        for (t, o) in out.iter().enumerate() {
            let expected = 0.3 * targets[3 * t] - 1.7 * targets[3 * t + 1] + 0.2;
            assert!((o - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn offset_surface_reports_distance() {
        let (v, topo) = grid(3);
        let lifted: Vec<f64> = v.iter().enumerate().map(|(k, x)| if k % 3 == 2 { 0.01 } else { *x }).collect();
        let map = build_barycentric_map(&v, &topo, &lifted).unwrap();
        assert!((map.max_distance() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn skin_transfer_recaps_influences() {
        let (v, topo) = grid(1);
        let skin = SkinWeights::new(vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)], vec![(3, 1.0)]], 4, 4).unwrap();
        let map = build_barycentric_map(&v, &topo, &[0.6, 0.3, 0.0]).unwrap();
        let out = transfer_skin(&map, &skin, 2, 4).unwrap();
        let l = out.to_lists();
        assert_eq!(l[0].len(), 2);
        assert!((l[0].iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
