use std::sync::OnceLock;

use proptest::prelude::*;

use rigkit::body_model::{RigModel, SkinWeights};
use rigkit::fitting::{evaluate_data2model, TriangleBvh};
use rigkit::io::{generate_synthetic_rig, SyntheticRigSpec};
use rigkit::lod::{build_barycentric_map, transfer_field};
use rigkit::math::{EulerXYZ, Rotation6D, Transform3, Vec3};
use rigkit::skeleton::{forward_kinematics, Joint, JointParameters, ModelParameters, Skeleton, DOFS_PER_JOINT, SCALE};

fn chain_rig() -> &'static RigModel {
    static RIG: OnceLock<RigModel> = OnceLock::new();
    RIG.get_or_init(|| generate_synthetic_rig(&SyntheticRigSpec::chain(4, 6, 2)).unwrap())
}

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn euler() -> impl Strategy<Value = EulerXYZ> {
    (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64).prop_map(|(x, y, z)| EulerXYZ::new(x, y, z))
}

fn transform() -> impl Strategy<Value = Transform3> {
    (euler(), vec3(), 0.3..3.0f64).prop_map(|(e, t, s)| Transform3::new(e.to_matrix(), t, s))
}

/// Random skeleton given as `(parent choice, offset, prerotation)` per joint.
fn skeleton() -> impl Strategy<Value = Skeleton> {
    prop::collection::vec((0.0..1.0f64, vec3(), euler()), 1..12).prop_map(|spec| {
        let joints = spec
            .iter()
            .enumerate()
            .map(|(j, (u, off, pre))| {
                let parent = (j > 0).then(|| ((u * j as f64) as usize).min(j - 1));
                Joint::new(format!("j{j}"), parent, *off, *pre)
            })
            .collect();
        Skeleton::new(joints).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euler_matrix_round_trip(e in euler()) {
        let back = EulerXYZ::from_matrix(&e.to_matrix());
        prop_assert!((back.to_matrix() - e.to_matrix()).amax() < 1e-12);
    }

    #[test]
    fn rotation_6d_round_trip(e in euler()) {
        let r = e.to_matrix();
        prop_assert!((Rotation6D::from_matrix(&r).to_matrix().unwrap() - r).amax() < 1e-12);
    }

    #[test]
    fn transform_inverse_composes_to_identity(t in transform(), p in vec3()) {
        prop_assert!((t.compose(&t.inverse()).apply(&p) - p).norm() < 1e-10);
        prop_assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-10);
    }

    #[test]
    fn composition_matches_homogeneous_product(a in transform(), b in transform()) {
        let m = a.to_homogeneous() * b.to_homogeneous();
        prop_assert!((a.compose(&b).to_homogeneous() - m).amax() < 1e-10);
    }

    #[test]
    fn rotations_preserve_bone_lengths(skel in skeleton(), seed in prop::collection::vec(-3.0..3.0f64, 3 * 12)) {
        let rest = forward_kinematics(&skel, &JointParameters::zeros(skel.len())).unwrap();
        let mut theta = JointParameters::zeros(skel.len());
        for j in 0..skel.len() {
            for a in 0..3 {
                theta.0[DOFS_PER_JOINT * j + 3 + a] = seed[3 * j + a];
            }
        }
        let posed = forward_kinematics(&skel, &theta).unwrap();
        for j in 1..skel.len() {
            let p = skel.parent(j).unwrap();
            let l0 = (rest[j].translation - rest[p].translation).norm();
            let l1 = (posed[j].translation - posed[p].translation).norm();
            prop_assert!((l0 - l1).abs() < 1e-10);
        }
    }

    #[test]
    fn root_scale_scales_every_bone(skel in skeleton(), s in -1.0..1.0f64) {
        let rest = forward_kinematics(&skel, &JointParameters::zeros(skel.len())).unwrap();
        let mut theta = JointParameters::zeros(skel.len());
        theta.0[SCALE] = s;
        let scaled = forward_kinematics(&skel, &theta).unwrap();
        let f = 2f64.powf(s);
        for j in 1..skel.len() {
            let p = skel.parent(j).unwrap();
            let l0 = (rest[j].translation - rest[p].translation).norm();
            let l1 = (scaled[j].translation - scaled[p].translation).norm();
            prop_assert!((l1 - f * l0).abs() < 1e-10);
        }
    }

    #[test]
    fn skin_weights_are_normalised_and_capped(raw in prop::collection::vec(prop::collection::vec((0usize..6, 0.01..1.0f64), 1..8), 1..20), k in 1usize..5) {
        let lists: Vec<Vec<(usize, f64)>> = raw
            .iter()
            .map(|l| {
                let mut seen = std::collections::BTreeMap::new();
                for &(j, w) in l {
                    *seen.entry(j).or_insert(0.0) += w;
                }
                seen.into_iter().collect()
            })
            .collect();
        let skin = SkinWeights::new(lists, k, 6).unwrap();
        for i in 0..skin.num_vertices() {
            let infl: Vec<_> = skin.influences(i).collect();
            prop_assert!(infl.len() <= k);
            prop_assert!((infl.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_transform_is_linear(a in prop::collection::vec(-1.0..1.0f64, 64), b in prop::collection::vec(-1.0..1.0f64, 64), c in -2.0..2.0f64) {
        let pt = &chain_rig().parameter_transform;
        let n = pt.num_params();
        let (a, b) = (ModelParameters(a[..n].to_vec()), ModelParameters(b[..n].to_vec()));
        let combo = ModelParameters(a.0.iter().zip(&b.0).map(|(x, y)| x + c * y).collect());
        let (ja, jb, jc) = (pt.apply(&a).unwrap(), pt.apply(&b).unwrap(), pt.apply(&combo).unwrap());
        for k in 0..jc.0.len() {
            prop_assert!((jc.0[k] - ja.0[k] - c * jb.0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_blendshapes_superpose(a in prop::collection::vec(-0.3..0.3f64, 4), b in prop::collection::vec(-0.3..0.3f64, 4)) {
        let rig = chain_rig();
        let n = rig.identity.len();
        let zeros = ModelParameters::zeros(rig.parameter_transform.num_params());
        let pad = |v: &[f64]| { let mut p = vec![0.0; n]; p[..v.len().min(n)].copy_from_slice(&v[..v.len().min(n)]); p };
        let (pa, pb) = (pad(&a), pad(&b));
        let sum: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x + y).collect();
        let e = vec![0.0; rig.expression.len()];
        let base = rig.evaluate_rest_mesh(&vec![0.0; n], &e, &zeros).unwrap();
        let ra = rig.evaluate_rest_mesh(&pa, &e, &zeros).unwrap();
        let rb = rig.evaluate_rest_mesh(&pb, &e, &zeros).unwrap();
        let rs = rig.evaluate_rest_mesh(&sum, &e, &zeros).unwrap();
        for i in 0..base.len() {
            prop_assert!((rs[i] - ra[i] - rb[i] + base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn barycentric_transfer_reproduces_constants(points in prop::collection::vec(vec3(), 1..40), value in -5.0..5.0f64) {
        let rig = chain_rig();
        let target: Vec<f64> = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let map = build_barycentric_map(&rig.template, &rig.topology, &target).unwrap();
        let field = vec![value; rig.num_vertices()];
        for v in transfer_field(&map, &field, 1).unwrap() {
            prop_assert!((v - value).abs() < 1e-12);
        }
        for b in &map.bary {
            prop_assert!(b.iter().all(|&w| (-1e-12..=1.0 + 1e-12).contains(&w)));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bvh_agrees_with_brute_force(points in prop::collection::vec(vec3(), 1..30)) {
        let rig = chain_rig();
        let bvh = TriangleBvh::new(&rig.template, rig.topology.triangles()).unwrap();
        for p in &points {
            let a = bvh.closest(p);
            let b = bvh.closest_brute_force(p);
            prop_assert!((a.dist_sq - b.dist_sq).abs() < 1e-12);
            prop_assert!(((a.point - p).norm_squared() - a.dist_sq).abs() < 1e-12);
        }
    }

    #[test]
    fn data2model_vanishes_on_vertices_and_is_nonnegative(idx in prop::collection::vec(0usize..10_000, 1..20), shift in vec3()) {
        let rig = chain_rig();
        let v = rig.num_vertices();
        let on: Vec<f64> = idx.iter().flat_map(|&i| rig.template[3 * (i % v)..3 * (i % v) + 3].to_vec()).collect();
        prop_assert!(evaluate_data2model(&on, &rig.template, &rig.topology, None).unwrap() < 1e-9);
        let off: Vec<f64> = on.chunks(3).flat_map(|p| [p[0] + shift.x, p[1] + shift.y, p[2] + shift.z]).collect();
        prop_assert!(evaluate_data2model(&off, &rig.template, &rig.topology, None).unwrap() >= 0.0);
    }
}
