//! Deterministic synthetic rigs with planted ground truth, and generators for
//! benchmark scans and corrective training data.

use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::body_model::{BlendshapeBasis, ModelInputs, RigModel, SkeletonBasis, SkinWeights};
use crate::correctives::{init_masks, CorrectiveConfig, CorrectiveModel, CorrectiveSample, MASK_FROZEN_VALUE};
use crate::error::{Result, RigError};
use crate::fitting::ScanTarget;
use crate::math::{EulerXYZ, Mat3, Vec3};
use crate::mesh::{vertex, MeshTopology};
use crate::skeleton::{Joint, ModelParameters, ParameterInfo, ParameterKind, ParameterTransform, Skeleton, Triplet, DOFS_PER_JOINT, RX, SCALE, TX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// 17-joint body; `fingers` adds two two-bone fingers per hand.
    Humanoid {
        #[serde(default)]
        fingers: bool,
    },
    /// Planar serial chain of 0.3 m bones.
    Chain { joints: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticRigSpec {
    pub layout: Layout,
    /// Vertices per cross-section ring.
    pub ring_vertices: usize,
    pub rings_per_segment: usize,
    pub identity_components: usize,
    pub expression: bool,
    /// Planted corrective model; none when `None`.
    pub correctives: Option<CorrectiveConfig>,
    pub skeleton_basis: bool,
    pub max_influences: usize,
    pub seed: u64,
}

impl Default for SyntheticRigSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Humanoid { fingers: false },
            ring_vertices: 14,
            rings_per_segment: 6,
            identity_components: 16,
            expression: true,
            correctives: Some(CorrectiveConfig::default()),
            skeleton_basis: false,
            max_influences: 4,
            seed: 0,
        }
    }
}

impl SyntheticRigSpec {
    pub fn chain(joints: usize, ring_vertices: usize, rings_per_segment: usize) -> Self {
        Self {
            layout: Layout::Chain { joints },
            ring_vertices,
            rings_per_segment,
            expression: false,
            ..Self::default()
        }
    }

    /// Same surface with half the vertices per ring; its vertices are a
    /// subset of the full-resolution mesh when `ring_vertices` is even.
    pub fn decimated(&self) -> Self {
        Self {
            ring_vertices: (self.ring_vertices / 2).max(3),
            ..self.clone()
        }
    }

    fn check(&self) -> Result<()> {
        if self.ring_vertices < 3 {
            return Err(RigError::invalid("spec.ring_vertices", "at least 3 vertices per ring required"));
        }
        if self.rings_per_segment == 0 {
            return Err(RigError::invalid("spec.rings_per_segment", "zero segments"));
        }
        if matches!(self.layout, Layout::Chain { joints: 0 }) {
            return Err(RigError::invalid("spec.layout.joints", "zero segments"));
        }
        if self.max_influences == 0 {
            return Err(RigError::invalid("spec.max_influences", "must be positive"));
        }
        Ok(())
    }
}

struct Bone {
    name: String,
    parent: Option<usize>,
    pos: Vec3,
    end: Vec3,
    radius: f64,
}

/// Bones plus the tube chains that carry the surface.
struct Frame {
    bones: Vec<Bone>,
    chains: Vec<Vec<usize>>,
    tip_radius: Vec<f64>,
}

fn humanoid(fingers: bool) -> Frame {
    let mut bones: Vec<Bone> = Vec::new();
    let mut push = |name: &str, parent: Option<usize>, pos: [f64; 3], radius: f64| {
        bones.push(Bone {
            name: name.into(),
            parent,
            pos: Vec3::from(pos),
            end: Vec3::zeros(),
            radius,
        });
        bones.len() - 1
    };
    let pelvis = push("pelvis", None, [0.0, 1.0, 0.0], 0.14);
    let spine = push("spine", Some(pelvis), [0.0, 1.12, 0.0], 0.13);
    let chest = push("chest", Some(spine), [0.0, 1.30, 0.0], 0.14);
    let neck = push("neck", Some(chest), [0.0, 1.52, 0.0], 0.05);
    let head = push("head", Some(neck), [0.0, 1.62, 0.0], 0.09);
    let mut chains = vec![vec![pelvis, spine, chest, neck, head]];
    let mut tips = vec![([0.0, 1.84, 0.0], 0.06)];
    let mut hands = Vec::new();
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let ua = push(&format!("upperarm_{side}"), Some(chest), [0.18 * s, 1.48, 0.0], 0.05);
        let fa = push(&format!("forearm_{side}"), Some(ua), [0.46 * s, 1.48, 0.0], 0.04);
        let hand = push(&format!("hand_{side}"), Some(fa), [0.72 * s, 1.48, 0.0], 0.035);
        chains.push(vec![ua, fa, hand]);
        hands.push(hand);
        tips.push(([0.90 * s, 1.48, 0.0], 0.03));
    }
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let th = push(&format!("thigh_{side}"), Some(pelvis), [0.10 * s, 0.95, 0.0], 0.07);
        let sh = push(&format!("shin_{side}"), Some(th), [0.10 * s, 0.52, 0.0], 0.055);
        let ft = push(&format!("foot_{side}"), Some(sh), [0.10 * s, 0.08, 0.0], 0.045);
        chains.push(vec![th, sh, ft]);
        tips.push(([0.10 * s, 0.03, 0.15], 0.035));
    }
    if fingers {
        for ((side, s), hand) in [("l", 1.0), ("r", -1.0)].into_iter().zip(hands) {
            let i1 = push(&format!("index_1_{side}"), Some(hand), [0.90 * s, 1.48, 0.02], 0.012);
            let i2 = push(&format!("index_2_{side}"), Some(i1), [0.95 * s, 1.48, 0.02], 0.010);
            chains.push(vec![i1, i2]);
            tips.push(([0.99 * s, 1.48, 0.02], 0.008));
            let dir = Vec3::new(0.5 * s, 0.0, 0.85).normalize();
            let base = Vec3::new(0.76 * s, 1.48, 0.04);
            let t1 = push(&format!("thumb_1_{side}"), Some(hand), base.into(), 0.012);
            let t2 = push(&format!("thumb_2_{side}"), Some(t1), (base + 0.04 * dir).into(), 0.010);
            chains.push(vec![t1, t2]);
            tips.push(((base + 0.07 * dir).into(), 0.008));
        }
    }
    finish(bones, chains, tips)
}

fn chain(n: usize) -> Frame {
    let mut bones = Vec::with_capacity(n);
    let mut pos = Vec3::zeros();
    for k in 0..n {
        bones.push(Bone {
            name: format!("joint{k}"),
            parent: k.checked_sub(1),
            pos,
            end: Vec3::zeros(),
            radius: 0.06 - 0.02 * k as f64 / n as f64,
        });
        let a = 0.3 * k as f64;
        pos += 0.3 * Vec3::new(a.cos(), a.sin(), 0.0);
    }
    finish(bones, vec![(0..n).collect()], vec![(pos.into(), 0.04)])
}

fn finish(mut bones: Vec<Bone>, chains: Vec<Vec<usize>>, tips: Vec<([f64; 3], f64)>) -> Frame {
    let mut tip_radius = vec![0.0; bones.len()];
    for (c, (tip, r)) in chains.iter().zip(tips) {
        for w in c.windows(2) {
            bones[w[0]].end = bones[w[1]].pos;
            tip_radius[w[0]] = bones[w[1]].radius;
        }
        let last = *c.last().expect("non-empty chain");
        bones[last].end = Vec3::from(tip);
        tip_radius[last] = r;
    }
    Frame { bones, chains, tip_radius }
}

/// Rotation whose first column is `d`; a function of `d` alone.
fn align_x(d: &Vec3) -> Mat3 {
    let up = if d.y.abs() < 0.9 { Vec3::y() } else { Vec3::z() };
    let y = (up - up.dot(d) * d).normalize();
    Mat3::from_columns(&[*d, y, d.cross(&y)])
}

fn build_skeleton(frame: &Frame) -> Result<Skeleton> {
    let world: Vec<Mat3> = frame.bones.iter().map(|b| align_x(&(b.end - b.pos).normalize())).collect();
    let joints = frame
        .bones
        .iter()
        .enumerate()
        .map(|(j, b)| match b.parent {
            None => Joint::new(&b.name, None, b.pos, EulerXYZ::from_matrix(&world[j])),
            Some(p) => {
                let wp = world[p].transpose();
                Joint::new(&b.name, Some(p), wp * (b.pos - frame.bones[p].pos), EulerXYZ::from_matrix(&(wp * world[j])))
            }
        })
        .collect();
    Skeleton::new(joints)
}

struct Surface {
    verts: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    /// Outward direction used to displace each vertex.
    normals: Vec<Vec3>,
    skin: Vec<Vec<(usize, f64)>>,
}

const BLEND: f64 = 0.25;

fn ring_weights(frame: &Frame, chain: &[usize], k: usize, t: f64) -> Vec<(usize, f64)> {
    let j = chain[k];
    let mut w = vec![(j, 1.0)];
    if let (Some(p), true) = (frame.bones[j].parent, t < BLEND) {
        let wp = 0.5 * (1.0 - t / BLEND);
        w[0].1 -= wp;
        w.push((p, wp));
    }
    if let (Some(&n), true) = (chain.get(k + 1), t > 1.0 - BLEND) {
        let wn = 0.5 * (t - (1.0 - BLEND)) / BLEND;
        w[0].1 -= wn;
        w.push((n, wn));
    }
    w.retain(|e| e.1 > 0.0);
    w
}

fn build_surface(frame: &Frame, n: usize, per_segment: usize) -> Surface {
    let mut s = Surface {
        verts: Vec::new(),
        triangles: Vec::new(),
        normals: Vec::new(),
        skin: Vec::new(),
    };
    let add = |s: &mut Surface, p: Vec3, normal: Vec3, w: Vec<(usize, f64)>| {
        s.verts.extend_from_slice(p.as_slice());
        s.normals.push(normal);
        s.skin.push(w);
        s.normals.len() - 1
    };
    for c in &frame.chains {
        let mut rings: Vec<usize> = Vec::new();
        let mut ring_skin = Vec::new();
        let mut push_ring = |s: &mut Surface, k: usize, t: f64| {
            let b = &frame.bones[c[k]];
            let axis = b.end - b.pos;
            let rot = align_x(&axis.normalize());
            let center = b.pos + t * axis;
            let radius = b.radius + t * (frame.tip_radius[c[k]] - b.radius);
            let w = ring_weights(frame, c, k, t);
            let first = s.normals.len();
            for m in 0..n {
                let a = TAU * m as f64 / n as f64;
                let dir = a.cos() * rot.column(1) + a.sin() * rot.column(2);
                add(s, center + radius * dir, dir, w.clone());
            }
            rings.push(first);
            ring_skin.push(w);
        };
        for k in 0..c.len() {
            for r in 0..per_segment {
                push_ring(&mut s, k, r as f64 / per_segment as f64);
            }
        }
        push_ring(&mut s, c.len() - 1, 1.0);
        for pair in rings.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for m in 0..n {
                let m1 = (m + 1) % n;
                s.triangles.push([a + m, a + m1, b + m1]);
                s.triangles.push([a + m, b + m1, b + m]);
            }
        }
        let first = &frame.bones[c[0]];
        let last = &frame.bones[*c.last().expect("non-empty chain")];
        let start_dir = (first.end - first.pos).normalize();
        let end_dir = (last.end - last.pos).normalize();
        let start = add(&mut s, first.pos, -start_dir, ring_skin[0].clone());
        let end = add(&mut s, last.end, end_dir, ring_skin.last().expect("rings").clone());
        let (r0, r1) = (rings[0], *rings.last().expect("rings"));
        for m in 0..n {
            let m1 = (m + 1) % n;
            s.triangles.push([start, r0 + m1, r0 + m]);
            s.triangles.push([end, r1 + m, r1 + m1]);
        }
    }
    s
}

fn frame_of(spec: &SyntheticRigSpec) -> Frame {
    match spec.layout {
        Layout::Humanoid { fingers } => humanoid(fingers),
        Layout::Chain { joints } => chain(joints),
    }
}

/// Template vertices and topology of the rig `spec` describes.
pub fn synthetic_mesh(spec: &SyntheticRigSpec) -> Result<(Vec<f64>, MeshTopology)> {
    spec.check()?;
    let s = build_surface(&frame_of(spec), spec.ring_vertices, spec.rings_per_segment);
    let topo = MeshTopology::new(s.normals.len(), s.triangles)?;
    Ok((s.verts, topo))
}

fn pose_parameters(skel: &Skeleton) -> (Vec<ParameterInfo>, Vec<Triplet>) {
    let mut params = Vec::new();
    let mut triplets = Vec::new();
    for (j, joint) in skel.joints().iter().enumerate() {
        let dofs: &[(usize, &str)] = if j == 0 {
            &[(0, "tx"), (1, "ty"), (2, "tz"), (3, "rx"), (4, "ry"), (5, "rz")]
        } else {
            &[(3, "rx"), (4, "ry"), (5, "rz")]
        };
        for &(d, suffix) in dofs {
            triplets.push(Triplet {
                row: DOFS_PER_JOINT * j + d,
                col: params.len(),
                weight: 1.0,
            });
            params.push(ParameterInfo {
                name: format!("{}_{suffix}", joint.name),
                kind: ParameterKind::Pose,
                limits: (j > 0).then_some((-2.5, 2.5)),
            });
        }
    }
    (params, triplets)
}

/// `(name, limits, [(joint, dof, weight)])`.
type SkeletonParam<'a> = (&'a str, (f64, f64), Vec<(&'a str, usize, f64)>);

fn skeleton_parameters(layout: &Layout) -> Vec<SkeletonParam<'static>> {
    const LEN: (f64, f64) = (-0.2, 0.2);
    const SCL: (f64, f64) = (-1.0, 1.0);
    match layout {
        Layout::Humanoid { .. } => vec![
            ("spine_length", LEN, vec![("chest", TX, 0.5), ("neck", TX, 0.5)]),
            ("neck_length", LEN, vec![("head", TX, 1.0)]),
            ("arm_length_l", LEN, vec![("forearm_l", TX, 0.5), ("hand_l", TX, 0.5)]),
            ("arm_length_r", LEN, vec![("forearm_r", TX, 0.5), ("hand_r", TX, 0.5)]),
            ("leg_length_l", LEN, vec![("shin_l", TX, 0.5), ("foot_l", TX, 0.5)]),
            ("leg_length_r", LEN, vec![("shin_r", TX, 0.5), ("foot_r", TX, 0.5)]),
            ("hand_scale_l", SCL, vec![("hand_l", SCALE, 1.0)]),
            ("hand_scale_r", SCL, vec![("hand_r", SCALE, 1.0)]),
        ],
        Layout::Chain { .. } => Vec::new(),
    }
}

fn parameter_transform(skel: &Skeleton, layout: &Layout) -> Result<ParameterTransform> {
    let (mut params, mut triplets) = pose_parameters(skel);
    let mut add = |name: String, limits, targets: Vec<(usize, usize, f64)>| {
        for (j, d, w) in targets {
            triplets.push(Triplet {
                row: DOFS_PER_JOINT * j + d,
                col: params.len(),
                weight: w,
            });
        }
        params.push(ParameterInfo {
            name,
            kind: ParameterKind::Skeleton,
            limits: Some(limits),
        });
    };
    match layout {
        Layout::Humanoid { .. } => {
            for (name, limits, targets) in skeleton_parameters(layout) {
                let targets = targets
                    .into_iter()
                    .map(|(joint, d, w)| Ok((skel.find(joint).ok_or_else(|| RigError::UnknownName(joint.into()))?, d, w)))
                    .collect::<Result<_>>()?;
                add(name.into(), limits, targets);
            }
        }
        Layout::Chain { joints } => {
            let n = *joints;
            if n > 1 {
                let w = 1.0 / (n - 1) as f64;
                add("chain_length".into(), (-0.2, 0.2), (1..n).map(|j| (j, TX, w)).collect());
            }
            add("tip_scale".into(), (-1.0, 1.0), vec![(n - 1, SCALE, 1.0)]);
        }
    }
    ParameterTransform::new(skel.len(), params, triplets)
}

/// Symmetric height, arm length and hand scale controls over the humanoid
/// skeleton parameters.
fn humanoid_skeleton_basis(pt: &ParameterTransform) -> Result<SkeletonBasis> {
    let rows: Vec<&str> = pt.skeleton_indices().iter().map(|&i| pt.params()[i].name.as_str()).collect();
    let coeffs: [(&str, &[(&str, f64)]); 3] = [
        ("height", &[("spine_length", 1.0), ("neck_length", 0.5), ("leg_length_l", 1.0), ("leg_length_r", 1.0)]),
        ("arm_length", &[("arm_length_l", 1.0), ("arm_length_r", 1.0)]),
        ("hand_scale", &[("hand_scale_l", 1.0), ("hand_scale_r", 1.0)]),
    ];
    let mut m = vec![0.0; rows.len() * coeffs.len()];
    for (k, (_, entries)) in coeffs.iter().enumerate() {
        for (name, w) in entries.iter() {
            let r = rows.iter().position(|n| n == name).ok_or_else(|| RigError::UnknownName((*name).into()))?;
            m[r * coeffs.len() + k] = *w;
        }
    }
    SkeletonBasis::new(rows.len(), coeffs.iter().map(|c| c.0.to_string()).collect(), m)
}

fn gaussian(d2: f64, width: f64) -> f64 {
    (-d2 / (2.0 * width * width)).exp()
}

/// Smooth normal bumps, orthonormalised; `σ_n = 0.15 · 0.85^n`.
fn identity_basis(verts: &[f64], normals: &[Vec3], count: usize, rng: &mut ChaCha8Rng) -> Result<BlendshapeBasis> {
    let v = normals.len();
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while comps.len() < count.min(3 * v) {
        attempts += 1;
        if attempts > 100 * (count + 1) {
            return Err(RigError::Numeric("could not draw independent identity bumps".into()));
        }
        let c = vertex(verts, rng.random_range(0..v));
        let width = rng.random_range(0.08..0.25);
        let mut d: Vec<f64> = (0..v).flat_map(|i| (normals[i] * gaussian((vertex(verts, i) - c).norm_squared(), width)).data.0[0]).collect();
        for q in &comps {
            let dot: f64 = d.iter().zip(q).map(|(a, b)| a * b).sum();
            d.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-3 {
            continue;
        }
        d.iter_mut().for_each(|x| *x /= norm);
        comps.push(d);
    }
    let names = (0..comps.len()).map(|k| format!("identity_{k}")).collect();
    let sd = (0..comps.len()).map(|k| 0.15 * 0.85f64.powi(k as i32)).collect();
    BlendshapeBasis::new(v, names, comps)?.with_std_devs(sd)
}

/// Four localized face deformations around the head joint, about 1 cm each.
fn expression_basis(verts: &[f64], skel: &Skeleton, skin: &SkinWeights) -> Result<BlendshapeBasis> {
    let v = skin.num_vertices();
    let Some(head) = skel.find("head") else {
        return Ok(BlendshapeBasis::empty(v));
    };
    let h = crate::skeleton::bind_state(skel).world[head].translation;
    type Bump = (Vec3, Vec3);
    let shapes: [(&str, Vec<Bump>); 4] = [
        ("jaw_open", vec![(Vec3::new(0.0, 0.03, 0.09), Vec3::new(0.0, -0.01, 0.0))]),
        ("brow_raise", vec![(Vec3::new(0.0, 0.14, 0.085), Vec3::new(0.0, 0.01, 0.0))]),
        ("cheek_puff", vec![(Vec3::new(0.06, 0.06, 0.06), Vec3::new(0.01, 0.0, 0.0)), (Vec3::new(-0.06, 0.06, 0.06), Vec3::new(-0.01, 0.0, 0.0))]),
        ("smile", vec![(Vec3::new(0.04, 0.04, 0.08), Vec3::new(0.008, 0.005, 0.0)), (Vec3::new(-0.04, 0.04, 0.08), Vec3::new(-0.008, 0.005, 0.0))]),
    ];
    let mut names = Vec::new();
    let mut deltas = Vec::new();
    for (name, bumps) in shapes {
        let mut d = vec![0.0; 3 * v];
        for i in (0..v).filter(|&i| skin.dominant_joint(i) == head) {
            let p = vertex(verts, i);
            for (c, disp) in &bumps {
                let g = gaussian((p - (h + c)).norm_squared(), 0.03);
                for a in 0..3 {
                    d[3 * i + a] += g * disp[a];
                }
            }
        }
        names.push(name.to_string());
        deltas.push(d);
    }
    BlendshapeBasis::new(v, names, deltas)
}

/// Masks keep geodesic-init values above 0.3 (rescaled), the rest frozen;
/// each column of `P_j` is a smooth bump of about 1 cm inside the support.
fn planted_correctives(
    verts: &[f64],
    topo: &MeshTopology,
    skin: &SkinWeights,
    skel: &Skeleton,
    config: CorrectiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CorrectiveModel> {
    let masks = init_masks(topo, verts, skin, skel)?
        .into_iter()
        .map(|m| m.into_iter().map(|a| if a > 0.3 { (a - 0.3) / 0.7 } else { MASK_FROZEN_VALUE }).collect())
        .collect();
    let mut model = CorrectiveModel::new(skel, topo.num_vertices(), config, masks, rng)?;
    let c = model.config.embedding;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for jc in &mut model.joints {
        let support: Vec<usize> = (0..jc.mask.len()).filter(|&i| jc.mask[i] > 0.0).collect();
        if support.is_empty() {
            continue;
        }
        // one bump per embedding channel so every channel is observable
        for k in 0..c {
            let centre = vertex(verts, support[rng.random_range(0..support.len())]);
            let dir = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            for &i in &support {
                let g = 0.01 * gaussian((vertex(verts, i) - centre).norm_squared(), 0.1);
                for d in 0..3 {
                    jc.weights[(3 * i + d) * c + k] = g * dir[d];
                }
            }
        }
    }
    Ok(model)
}

/// Builds the rig `spec` describes. Identical specs give bit-identical rigs.
pub fn generate_synthetic_rig(spec: &SyntheticRigSpec) -> Result<RigModel> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frame = frame_of(spec);
    let skeleton = build_skeleton(&frame)?;
    let surface = build_surface(&frame, spec.ring_vertices, spec.rings_per_segment);
    let v = surface.normals.len();
    let topology = MeshTopology::new(v, surface.triangles)?;
    let skin = SkinWeights::new(surface.skin, spec.max_influences, skeleton.len())?;
    let pt = parameter_transform(&skeleton, &spec.layout)?;
    let identity = identity_basis(&surface.verts, &surface.normals, spec.identity_components, &mut rng)?;
    let expression = if spec.expression {
        expression_basis(&surface.verts, &skeleton, &skin)?
    } else {
        BlendshapeBasis::empty(v)
    };
    let correctives = match &spec.correctives {
        Some(cfg) => Some(planted_correctives(&surface.verts, &topology, &skin, &skeleton, cfg.clone(), &mut rng)?),
        None => None,
    };
    let skeleton_basis = match (&spec.layout, spec.skeleton_basis) {
        (Layout::Humanoid { .. }, true) => Some(humanoid_skeleton_basis(&pt)?),
        _ => None,
    };
    let regions = vec!["body".to_string(); identity.len()];
    let mut rig = RigModel::new(topology, surface.verts, identity, expression, skin, skeleton, pt, correctives, skeleton_basis)?;
    rig.identity_regions = regions;
    Ok(rig)
}

/// Random pose: root translation σ = 5 cm, root rotation σ = 0.2 rad, other
/// joint rotations σ = 0.3 rad, all multiplied by `scale` and clamped to the
/// parameter limits. Skeleton parameters stay zero.
pub fn sample_pose<R: Rng>(rig: &RigModel, rng: &mut R, scale: f64) -> ModelParameters {
    let pt = &rig.parameter_transform;
    let mut theta = ModelParameters::zeros(pt.num_params());
    for &col in pt.pose_indices() {
        let Some(t) = pt.triplets().iter().find(|t| t.col == col) else {
            continue;
        };
        let (j, d) = (t.row / DOFS_PER_JOINT, t.row % DOFS_PER_JOINT);
        let sd = match (rig.skeleton.parent(j).is_none(), d) {
            (true, d) if d < RX => 0.05,
            (true, d) if d < SCALE => 0.2,
            (false, d) if (RX..SCALE).contains(&d) => 0.3,
            _ => 0.0,
        } * scale;
        if sd == 0.0 {
            continue;
        }
        let mut x = Normal::new(0.0, sd).expect("positive sd").sample(rng);
        if let Some((lo, hi)) = pt.params()[col].limits {
            x = x.clamp(lo, hi);
        }
        theta.0[col] = x;
    }
    theta
}

/// Identity coefficients drawn from the basis prior for the first `k`
/// components, zero for the rest.
pub fn sample_identity<R: Rng>(rig: &RigModel, rng: &mut R, k: usize) -> Vec<f64> {
    (0..rig.identity.len())
        .map(|n| match rig.identity.std_devs.get(n) {
            Some(&sd) if n < k && sd > 0.0 => Normal::new(0.0, sd).expect("positive sd").sample(rng),
            _ => 0.0,
        })
        .collect()
}

const EVAL_MASK_PREFIXES: [&str; 4] = ["head", "hand", "index", "thumb"];

/// Vertices excluded from evaluation: head, hands and fingers. `None` when
/// the rig has none of them.
pub fn default_eval_mask(rig: &RigModel) -> Option<Vec<bool>> {
    let joints: Vec<bool> = rig
        .skeleton
        .joints()
        .iter()
        .map(|j| EVAL_MASK_PREFIXES.iter().any(|p| j.name.starts_with(p)))
        .collect();
    if !joints.contains(&true) {
        return None;
    }
    Some((0..rig.num_vertices()).map(|i| joints[rig.skin.dominant_joint(i)]).collect())
}

/// Area-uniform surface samples of the rig posed at `truth`, perturbed by
/// isotropic Gaussian noise of standard deviation `noise`. Keypoints are the
/// head and hand joints when present.
pub fn generate_scan_target<R: Rng>(rig: &RigModel, truth: &ModelInputs, num_points: usize, noise: f64, rng: &mut R) -> Result<ScanTarget> {
    if num_points == 0 {
        return Err(RigError::Empty("scan target needs at least one point".into()));
    }
    let eval = rig.forward(truth)?;
    let tris = rig.topology.triangles();
    let areas: Vec<f64> = tris
        .iter()
        .map(|t| {
            let (a, b, c) = (vertex(&eval.posed, t[0]), vertex(&eval.posed, t[1]), vertex(&eval.posed, t[2]));
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| RigError::Numeric(format!("triangle areas: {e}")))?;
    let jitter = Normal::new(0.0, noise.max(0.0)).map_err(|e| RigError::invalid("noise", e.to_string()))?;
    let mut points = Vec::with_capacity(3 * num_points);
    for _ in 0..num_points {
        let t = tris[pick.sample(rng)];
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (u, v, w) = (1.0 - s, s * (1.0 - r2), s * r2);
        let p = u * vertex(&eval.posed, t[0]) + v * vertex(&eval.posed, t[1]) + w * vertex(&eval.posed, t[2]);
        for a in 0..3 {
            let n = if noise > 0.0 { jitter.sample(rng) } else { 0.0 };
            points.push(p[a] + n);
        }
    }
    let mut target = ScanTarget::new(points)?;
    target.keypoints = ["head", "hand_l", "hand_r"]
        .iter()
        .filter_map(|name| rig.skeleton.find(name).map(|j| (name.to_string(), eval.joint_position(j))))
        .collect();
    target.mask = default_eval_mask(rig);
    Ok(target)
}

/// A benchmark target with the inputs that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticTarget {
    pub truth: ModelInputs,
    pub target: ScanTarget,
}

/// `count` targets with random pose and identity (first `identity_components`
/// components) sampled by `seed`.
pub fn generate_benchmark(rig: &RigModel, count: usize, num_points: usize, noise: f64, identity_components: usize, seed: u64) -> Result<Vec<SyntheticTarget>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut truth = ModelInputs::zeros(rig);
            truth.params = sample_pose(rig, &mut rng, 1.0);
            truth.identity = sample_identity(rig, &mut rng, identity_components);
            let target = generate_scan_target(rig, &truth, num_points, noise, &mut rng)?;
            Ok(SyntheticTarget { truth, target })
        })
        .collect()
}

/// Residual-space samples of the rig's own corrective model at random poses.
pub fn generate_corrective_dataset<R: Rng>(rig: &RigModel, count: usize, rng: &mut R) -> Result<Vec<CorrectiveSample>> {
    let model = rig.correctives.as_ref().ok_or_else(|| RigError::invalid("correctives", "rig has no corrective model to sample"))?;
    (0..count)
        .map(|_| {
            let params = sample_pose(rig, rng, 1.0);
            let pose = rig.parameter_transform.apply_kind(&params, ParameterKind::Pose)?;
            Ok(CorrectiveSample {
                target: model.offsets(&pose),
                params,
            })
        })
        .collect()
}
