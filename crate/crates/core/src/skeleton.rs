//! Joint hierarchy, the sparse parameter transform, forward kinematics and
//! joint-limit penalties.
//!
//! Every joint carries seven degrees of freedom laid out as
//! `(tx, ty, tz, rx, ry, rz, s)`. The local transform of joint `j` is
//!
//! ```text
//! T_off * T_t * T_prerot * T_rot * T_s
//! ```
//!
//! and its world transform is the parent's world transform composed with it.
//! The scale DoF `s` maps to the multiplicative factor `2^s`.

use std::collections::HashMap;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RigError};
use crate::math::{EulerXYZ, Mat3, Transform3, Vec3};

pub const DOFS_PER_JOINT: usize = 7;
pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TZ: usize = 2;
pub const RX: usize = 3;
pub const RY: usize = 4;
pub const RZ: usize = 5;
pub const SCALE: usize = 6;

/// Multiplicative factor for the joint scale DoF.
pub fn scale_factor(s: f64) -> f64 {
    s.exp2()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub prerotation: EulerXYZ,
}

impl Joint {
    pub fn new(name: impl Into<String>, parent: Option<usize>, offset: Vec3, prerotation: EulerXYZ) -> Self {
        Self {
            name: name.into(),
            parent,
            offset,
            prerotation,
        }
    }
}

/// Joints stored parents-first with a single root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    children: Vec<Vec<usize>>,
}

impl Skeleton {
    /// Builds a skeleton from joints already in topological order.
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(RigError::Empty("skeleton has no joints".into()));
        }
        let mut roots = 0;
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None => roots += 1,
                Some(p) if p >= i => {
                    return Err(RigError::invalid(
                        format!("skeleton.joints[{i}].parent"),
                        format!("parent index {p} is not before joint {i} (parents must be stored first)"),
                    ))
                }
                Some(_) => {}
            }
            if !(j.offset.iter().all(|v| v.is_finite())
                && [j.prerotation.rx, j.prerotation.ry, j.prerotation.rz].iter().all(|v| v.is_finite()))
            {
                return Err(RigError::invalid(format!("skeleton.joints[{i}]"), "non-finite offset or pre-rotation"));
            }
        }
        if roots != 1 {
            return Err(RigError::invalid("skeleton.joints", format!("expected exactly one root, found {roots}")));
        }
        let mut names = HashMap::new();
        for (i, j) in joints.iter().enumerate() {
            if names.insert(j.name.as_str(), i).is_some() {
                return Err(RigError::invalid(format!("skeleton.joints[{i}].name"), format!("duplicate name `{}`", j.name)));
            }
        }
        let mut children = vec![Vec::new(); joints.len()];
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                children[p].push(i);
            }
        }
        Ok(Self { joints, children })
    }

    /// Accepts joints in any order, re-sorts them parents-first and returns the
    /// skeleton plus the permutation `new_index[old_index]`.
    pub fn from_unsorted(joints: Vec<Joint>) -> Result<(Self, Vec<usize>)> {
        let n = joints.len();
        let mut kids = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None => roots.push(i),
                Some(p) if p < n => kids[p].push(i),
                Some(p) => {
                    return Err(RigError::invalid(format!("skeleton.joints[{i}].parent"), format!("index {p} out of range")))
                }
            }
        }
        if roots.len() != 1 {
            return Err(RigError::invalid("skeleton.joints", format!("expected exactly one root, found {}", roots.len())));
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![roots[0]];
        while let Some(i) = stack.pop() {
            order.push(i);
            for &c in kids[i].iter().rev() {
                stack.push(c);
            }
        }
        if order.len() != n {
            return Err(RigError::invalid("skeleton.joints", "hierarchy contains a cycle or unreachable joints"));
        }
        let mut new_index = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let sorted = order
            .iter()
            .map(|&old| {
                let mut j = joints[old].clone();
                j.parent = j.parent.map(|p| new_index[p]);
                j
            })
            .collect();
        Ok((Self::new(sorted)?, new_index))
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn num_joint_params(&self) -> usize {
        DOFS_PER_JOINT * self.joints.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.joints[j].parent
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }
}

/// Per-joint DoF vector of length `7 * n_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParameters(pub Vec<f64>);

impl JointParameters {
    pub fn zeros(num_joints: usize) -> Self {
        Self(vec![0.0; DOFS_PER_JOINT * num_joints])
    }

    pub fn joint(&self, j: usize) -> &[f64] {
        &self.0[DOFS_PER_JOINT * j..DOFS_PER_JOINT * (j + 1)]
    }

    pub fn rotation(&self, j: usize) -> EulerXYZ {
        let d = self.joint(j);
        EulerXYZ::new(d[RX], d[RY], d[RZ])
    }
}

/// Model parameter vector `Θ_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters(pub Vec<f64>);

impl ModelParameters {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParameterKind {
    Pose,
    Skeleton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterInfo {
    pub name: String,
    pub kind: ParameterKind,
    pub limits: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// Sparse linear map from model parameters to joint parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTransform {
    num_joint_params: usize,
    params: Vec<ParameterInfo>,
    triplets: Vec<Triplet>,
    pose: Vec<usize>,
    skeleton: Vec<usize>,
}

impl ParameterTransform {
    pub fn new(num_joints: usize, params: Vec<ParameterInfo>, triplets: Vec<Triplet>) -> Result<Self> {
        let rows = DOFS_PER_JOINT * num_joints;
        for (k, t) in triplets.iter().enumerate() {
            if t.row >= rows || t.col >= params.len() || !t.weight.is_finite() {
                return Err(RigError::invalid(
                    format!("parameter_transform.triplets[{k}]"),
                    format!("({}, {}, {}) outside {}x{} or non-finite", t.row, t.col, t.weight, rows, params.len()),
                ));
            }
        }
        for (k, p) in params.iter().enumerate() {
            if let Some((lo, hi)) = p.limits {
                if !(lo <= hi) {
                    return Err(RigError::invalid(
                        format!("parameter_transform.parameters[{k}].limits"),
                        format!("lower bound {lo} exceeds upper bound {hi}"),
                    ));
                }
            }
        }
        let pose = (0..params.len()).filter(|&i| params[i].kind == ParameterKind::Pose).collect();
        let skeleton = (0..params.len()).filter(|&i| params[i].kind == ParameterKind::Skeleton).collect();
        Ok(Self {
            num_joint_params: rows,
            params,
            triplets,
            pose,
            skeleton,
        })
    }

    /// One pose parameter per joint DoF, in joint-major order.
    pub fn identity(num_joints: usize) -> Self {
        let names = ["tx", "ty", "tz", "rx", "ry", "rz", "s"];
        let n = DOFS_PER_JOINT * num_joints;
        let params = (0..n)
            .map(|i| ParameterInfo {
                name: format!("j{}_{}", i / DOFS_PER_JOINT, names[i % DOFS_PER_JOINT]),
                kind: ParameterKind::Pose,
                limits: None,
            })
            .collect();
        let triplets = (0..n).map(|i| Triplet { row: i, col: i, weight: 1.0 }).collect();
        Self::new(num_joints, params, triplets).expect("identity transform is valid")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_joint_params(&self) -> usize {
        self.num_joint_params
    }

    pub fn params(&self) -> &[ParameterInfo] {
        &self.params
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn pose_indices(&self) -> &[usize] {
        &self.pose
    }

    pub fn skeleton_indices(&self) -> &[usize] {
        &self.skeleton
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// `Θ_j = T_p · Θ_p`.
    pub fn apply(&self, theta: &ModelParameters) -> Result<JointParameters> {
        check_len("model parameters", self.params.len(), theta.len())?;
        let mut out = vec![0.0; self.num_joint_params];
        for t in &self.triplets {
            out[t.row] += t.weight * theta.0[t.col];
        }
        Ok(JointParameters(out))
    }

    /// Like [`apply`](Self::apply) but only columns of the given kind contribute.
    pub fn apply_kind(&self, theta: &ModelParameters, kind: ParameterKind) -> Result<JointParameters> {
        check_len("model parameters", self.params.len(), theta.len())?;
        let mut out = vec![0.0; self.num_joint_params];
        for t in &self.triplets {
            if self.params[t.col].kind == kind {
                out[t.row] += t.weight * theta.0[t.col];
            }
        }
        Ok(JointParameters(out))
    }

    /// Accumulates `T_pᵀ · d_joint` into `d_model`, optionally restricted to
    /// one parameter kind.
    pub fn backward(&self, d_joint: &[f64], kind: Option<ParameterKind>, d_model: &mut [f64]) {
        for t in &self.triplets {
            if kind.is_none_or(|k| self.params[t.col].kind == k) {
                d_model[t.col] += t.weight * d_joint[t.row];
            }
        }
    }

    /// Sum over limited parameters of the squared distance to the limit box.
    pub fn joint_limit_penalty(&self, theta: &ModelParameters) -> f64 {
        self.params
            .iter()
            .zip(&theta.0)
            .filter_map(|(p, &v)| p.limits.map(|(lo, hi)| (v - hi).max(0.0).powi(2) + (lo - v).max(0.0).powi(2)))
            .sum()
    }

    /// Adds `scale * ∂penalty/∂θ` into `grad`.
    pub fn joint_limit_gradient(&self, theta: &ModelParameters, scale: f64, grad: &mut [f64]) {
        for (i, (p, &v)) in self.params.iter().zip(&theta.0).enumerate() {
            if let Some((lo, hi)) = p.limits {
                if v > hi {
                    grad[i] += scale * 2.0 * (v - hi);
                } else if v < lo {
                    grad[i] += scale * 2.0 * (v - lo);
                }
            }
        }
    }
}

/// Gradient with respect to a transform's linear part `scale * R` and
/// translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformGrad {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl TransformGrad {
    pub const ZERO: TransformGrad = TransformGrad {
        linear: Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        translation: Vec3::new(0.0, 0.0, 0.0),
    };
}

fn local_transform(joint: &Joint, dofs: &[f64]) -> Transform3 {
    let rot = EulerXYZ::new(dofs[RX], dofs[RY], dofs[RZ]).to_matrix();
    Transform3 {
        rotation: joint.prerotation.to_matrix() * rot,
        translation: joint.offset + Vec3::new(dofs[TX], dofs[TY], dofs[TZ]),
        scale: scale_factor(dofs[SCALE]),
    }
}

/// World transforms for each joint.
pub fn forward_kinematics(skel: &Skeleton, theta: &JointParameters) -> Result<Vec<Transform3>> {
    Ok(ForwardKinematics::new(skel, theta)?.world)
}

/// Forward kinematics pass that keeps what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardKinematics {
    pub world: Vec<Transform3>,
    local: Vec<Transform3>,
    dofs: Vec<f64>,
}

impl ForwardKinematics {
    pub fn new(skel: &Skeleton, theta: &JointParameters) -> Result<Self> {
        check_len("joint parameters", skel.num_joint_params(), theta.0.len())?;
        let mut world: Vec<Transform3> = Vec::with_capacity(skel.len());
        let mut local = Vec::with_capacity(skel.len());
        for (j, joint) in skel.joints().iter().enumerate() {
            let l = local_transform(joint, theta.joint(j));
            let w = match joint.parent {
                Some(p) => world[p].compose(&l),
                None => l,
            };
            local.push(l);
            world.push(w);
        }
        Ok(Self {
            world,
            local,
            dofs: theta.0.clone(),
        })
    }

    /// Propagates gradients on world transforms back to the joint DoFs.
    /// `d_world` is consumed as scratch space.
    pub fn backward(&self, skel: &Skeleton, d_world: &mut [TransformGrad]) -> Vec<f64> {
        let mut d_dofs = vec![0.0; self.dofs.len()];
        for j in (0..skel.len()).rev() {
            let g = d_world[j];
            let l = &self.local[j];
            let (d_lin, d_t) = match skel.parent(j) {
                Some(p) => {
                    let wp = &self.world[p];
                    let mp = wp.linear();
                    let ml = l.linear();
                    let dp = &mut d_world[p];
                    dp.linear += g.linear * ml.transpose() + g.translation * l.translation.transpose();
                    dp.translation += g.translation;
                    (mp.transpose() * g.linear, mp.transpose() * g.translation)
                }
                None => (g.linear, g.translation),
            };
            let joint = &skel.joints()[j];
            let dofs = &self.dofs[DOFS_PER_JOINT * j..DOFS_PER_JOINT * (j + 1)];
            let out = &mut d_dofs[DOFS_PER_JOINT * j..DOFS_PER_JOINT * (j + 1)];
            out[TX] = d_t.x;
            out[TY] = d_t.y;
            out[TZ] = d_t.z;
            let pre = joint.prerotation.to_matrix();
            let euler = EulerXYZ::new(dofs[RX], dofs[RY], dofs[RZ]);
            let f = l.scale;
            // linear = f * pre * R(e)
            out[SCALE] = d_lin.dot(&l.rotation) * f * LN_2;
            let partials = euler.matrix_partials();
            out[RX] = f * d_lin.dot(&(pre * partials[0]));
            out[RY] = f * d_lin.dot(&(pre * partials[1]));
            out[RZ] = f * d_lin.dot(&(pre * partials[2]));
        }
        d_dofs
    }
}

/// Bind pose (all joint DoFs zero) and its inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct BindState {
    pub world: Vec<Transform3>,
    pub inverse: Vec<Transform3>,
}

pub fn bind_state(skel: &Skeleton) -> BindState {
    let world = forward_kinematics(skel, &JointParameters::zeros(skel.len())).expect("zero parameters match skeleton");
    let inverse = world.iter().map(Transform3::inverse).collect();
    BindState { world, inverse }
}
