//! Template mesh, blendshape stacks, skinning weights and full model
//! evaluation.
//!
//! ```text
//! X(β, θ)     = LBS(X̃(βs, βf, θ), FK(T_p · θ'), ω)
//! X̃(βs, βf, θ) = X̄ + Σ βs_n S_n + Σ βf_n F_n + B^p(θ)
//! ```
//!
//! where `θ'` is `θ` with its skeleton columns replaced by `B^k · βk` when a
//! skeleton basis is present and coefficients are supplied. Correctives only
//! see the pose columns of `θ`.

use serde_json::{Map, Value};

use crate::correctives::{CorrectiveForward, CorrectiveModel};
use crate::error::{check_len, Result, RigError};
use crate::mesh::{vertex, MeshTopology};
use crate::skeleton::{
    bind_state, BindState, ForwardKinematics, JointParameters, ModelParameters, ParameterKind, ParameterTransform, Skeleton,
    TransformGrad,
};
use crate::math::{Mat3, Transform3, Vec3};

pub const DEFAULT_MAX_INFLUENCES: usize = 4;

/// Per-vertex `(joint, weight)` influences, padded to `max_influences`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    max_influences: usize,
    joints: Vec<usize>,
    weights: Vec<f64>,
}

impl SkinWeights {
    /// Validates weights, truncating vertices with more than `max_influences`
    /// entries to the largest ones and renormalising (with a warning).
    pub fn new(per_vertex: Vec<Vec<(usize, f64)>>, max_influences: usize, num_joints: usize) -> Result<Self> {
        if max_influences == 0 {
            return Err(RigError::invalid("skin.max_influences", "must be at least 1"));
        }
        let v = per_vertex.len();
        let mut joints = vec![0; v * max_influences];
        let mut weights = vec![0.0; v * max_influences];
        let mut truncated = 0;
        for (i, mut infl) in per_vertex.into_iter().enumerate() {
            infl.retain(|&(_, w)| w != 0.0);
            for &(j, w) in &infl {
                if j >= num_joints {
                    return Err(RigError::invalid(format!("skin.vertex[{i}]"), format!("joint index {j} out of range")));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(RigError::invalid(format!("skin.vertex[{i}]"), format!("weight {w} is negative or non-finite")));
                }
            }
            if infl.len() > max_influences {
                truncated += 1;
                infl.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                infl.truncate(max_influences);
            }
            let total: f64 = infl.iter().map(|p| p.1).sum();
            if !(total > 0.0) {
                return Err(RigError::invalid(format!("skin.vertex[{i}]"), "zero total skinning weight"));
            }
            let renorm = truncated > 0 || (total - 1.0).abs() > 1e-6;
            for (k, (j, w)) in infl.into_iter().enumerate() {
                joints[i * max_influences + k] = j;
                weights[i * max_influences + k] = if renorm { w / total } else { w };
            }
        }
        if truncated > 0 {
            log::warn!("{truncated} vertices had more than {max_influences} skin influences; kept the largest and renormalised");
        }
        Ok(Self {
            max_influences,
            joints,
            weights,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.joints.len() / self.max_influences
    }

    pub fn max_influences(&self) -> usize {
        self.max_influences
    }

    pub fn influences(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let k = self.max_influences;
        self.joints[i * k..(i + 1) * k]
            .iter()
            .zip(&self.weights[i * k..(i + 1) * k])
            .filter(|(_, &w)| w > 0.0)
            .map(|(&j, &w)| (j, w))
    }

    pub fn to_lists(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.num_vertices()).map(|i| self.influences(i).collect()).collect()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.influences(i).filter(|&(jj, _)| jj == j).map(|(_, w)| w).sum()
    }

    /// Joint with the largest weight (lowest index on ties).
    pub fn dominant_joint(&self, i: usize) -> usize {
        self.influences(i)
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, w)| if w > best.1 || (w == best.1 && j < best.0) { (j, w) } else { best })
            .0
    }
}

/// A stack of per-vertex offset fields (`3V` each), stored contiguously.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlendshapeBasis {
    num_vertices: usize,
    pub names: Vec<String>,
    /// Per-component standard deviation of the coefficient (1 when unknown).
    pub std_devs: Vec<f64>,
    data: Vec<f64>,
}

impl BlendshapeBasis {
    pub fn empty(num_vertices: usize) -> Self {
        Self {
            num_vertices,
            ..Default::default()
        }
    }

    pub fn new(num_vertices: usize, names: Vec<String>, deltas: Vec<Vec<f64>>) -> Result<Self> {
        check_len("blendshape names", deltas.len(), names.len())?;
        let mut data = Vec::with_capacity(deltas.len() * 3 * num_vertices);
        for (k, d) in deltas.iter().enumerate() {
            if d.len() != 3 * num_vertices {
                return Err(RigError::invalid(format!("blendshape `{}`", names[k]), format!("length {} != 3V = {}", d.len(), 3 * num_vertices)));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(RigError::invalid(format!("blendshape `{}`", names[k]), "non-finite delta"));
            }
            data.extend_from_slice(d);
        }
        let n = names.len();
        Ok(Self {
            num_vertices,
            names,
            std_devs: vec![1.0; n],
            data,
        })
    }

    pub fn with_std_devs(mut self, std_devs: Vec<f64>) -> Result<Self> {
        check_len("blendshape std devs", self.len(), std_devs.len())?;
        self.std_devs = std_devs;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let n = 3 * self.num_vertices;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn components(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(3 * self.num_vertices.max(1)).take(self.len())
    }

    /// Keeps only the first `n` components.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            num_vertices: self.num_vertices,
            names: self.names[..n].to_vec(),
            std_devs: self.std_devs[..n].to_vec(),
            data: self.data[..n * 3 * self.num_vertices].to_vec(),
        }
    }

    /// `out += Σ coeffs_n · component_n`; `coeffs` may be shorter than the basis.
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [f64]) -> Result<()> {
        if coeffs.len() > self.len() {
            return Err(RigError::dims("blendshape coefficients", self.len(), coeffs.len()));
        }
        for (k, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                for (o, d) in out.iter_mut().zip(self.component(k)) {
                    *o += c * d;
                }
            }
        }
        Ok(())
    }

    /// Gradient with respect to the first `n` coefficients given `d_out`.
    pub fn project(&self, d_out: &[f64], n: usize) -> Vec<f64> {
        (0..n).map(|k| self.component(k).iter().zip(d_out).map(|(a, b)| a * b).sum()).collect()
    }

    /// Converts standard-deviation units to raw coefficients.
    pub fn coefficients_from_std(&self, sd_units: &[f64]) -> Vec<f64> {
        sd_units.iter().zip(&self.std_devs).map(|(u, s)| u * s).collect()
    }
}

/// Dense `n_skel × |βk|` map from skeleton coefficients to the skeleton
/// transformation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonBasis {
    pub names: Vec<String>,
    rows: usize,
    /// Row-major.
    matrix: Vec<f64>,
}

impl SkeletonBasis {
    pub fn new(num_skeleton_params: usize, names: Vec<String>, matrix: Vec<f64>) -> Result<Self> {
        check_len("skeleton basis entries", num_skeleton_params * names.len(), matrix.len())?;
        Ok(Self {
            names,
            rows: num_skeleton_params,
            matrix,
        })
    }

    pub fn identity(num_skeleton_params: usize) -> Self {
        let mut m = vec![0.0; num_skeleton_params * num_skeleton_params];
        for i in 0..num_skeleton_params {
            m[i * num_skeleton_params + i] = 1.0;
        }
        Self {
            names: (0..num_skeleton_params).map(|i| format!("skel_{i}")).collect(),
            rows: num_skeleton_params,
            matrix: m,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.rows
    }

    pub fn num_coefficients(&self) -> usize {
        self.names.len()
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn apply(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_len("skeleton coefficients", self.num_coefficients(), coeffs.len())?;
        let c = self.num_coefficients();
        Ok((0..self.rows).map(|r| self.matrix[r * c..(r + 1) * c].iter().zip(coeffs).map(|(a, b)| a * b).sum()).collect())
    }

    fn apply_transpose(&self, d_out: &[f64]) -> Vec<f64> {
        let c = self.num_coefficients();
        let mut out = vec![0.0; c];
        for r in 0..self.rows {
            for k in 0..c {
                out[k] += self.matrix[r * c + k] * d_out[r];
            }
        }
        out
    }
}

/// Informational level-of-detail table entry.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LodEntry {
    pub level: u32,
    pub vertices: usize,
}

#[derive(Debug, Clone)]
pub struct RigModel {
    pub topology: MeshTopology,
    pub template: Vec<f64>,
    pub identity: BlendshapeBasis,
    pub expression: BlendshapeBasis,
    pub skin: SkinWeights,
    pub skeleton: Skeleton,
    pub parameter_transform: ParameterTransform,
    pub correctives: Option<CorrectiveModel>,
    pub skeleton_basis: Option<SkeletonBasis>,
    pub lods: Vec<LodEntry>,
    /// Region tag per identity component (empty when unknown).
    pub identity_regions: Vec<String>,
    /// Unrecognised header fields, kept for re-saving.
    pub extras: Map<String, Value>,
    bind: BindState,
}

/// Inputs to a full model evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub params: ModelParameters,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub skeleton_coeffs: Option<Vec<f64>>,
    /// Per-vertex rest-space offsets added before skinning.
    pub offsets: Option<Vec<f64>>,
}

impl ModelInputs {
    pub fn zeros(rig: &RigModel) -> Self {
        Self {
            params: ModelParameters::zeros(rig.parameter_transform.num_params()),
            identity: vec![0.0; rig.identity.len()],
            expression: vec![0.0; rig.expression.len()],
            skeleton_coeffs: rig.skeleton_basis.as_ref().map(|b| vec![0.0; b.num_coefficients()]),
            offsets: None,
        }
    }
}

/// Intermediate values of a forward evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub effective_params: ModelParameters,
    pub joint_params: JointParameters,
    pub fk: ForwardKinematics,
    /// `world_k ∘ bind_k⁻¹` per joint.
    pub skinning: Vec<Transform3>,
    pub correctives: Option<CorrectiveForward>,
    pub rest: Vec<f64>,
    pub posed: Vec<f64>,
}

impl Evaluation {
    pub fn joint_position(&self, j: usize) -> Vec3 {
        self.fk.world[j].translation
    }
}

/// Gradients with respect to every differentiable model input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    pub params: Vec<f64>,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    pub skeleton_coeffs: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl RigModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topology: MeshTopology,
        template: Vec<f64>,
        identity: BlendshapeBasis,
        expression: BlendshapeBasis,
        skin: SkinWeights,
        skeleton: Skeleton,
        parameter_transform: ParameterTransform,
        correctives: Option<CorrectiveModel>,
        skeleton_basis: Option<SkeletonBasis>,
    ) -> Result<Self> {
        let bind = bind_state(&skeleton);
        let rig = Self {
            lods: vec![LodEntry {
                level: 1,
                vertices: topology.num_vertices(),
            }],
            topology,
            template,
            identity,
            expression,
            skin,
            skeleton,
            parameter_transform,
            correctives,
            skeleton_basis,
            identity_regions: Vec::new(),
            extras: Map::new(),
            bind,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// Re-checks every cross-component invariant.
    pub fn validate(&self) -> Result<()> {
        let v = self.topology.num_vertices();
        if self.template.len() != 3 * v {
            return Err(RigError::invalid("template", format!("length {} != 3V = {}", self.template.len(), 3 * v)));
        }
        if self.template.iter().any(|x| !x.is_finite()) {
            return Err(RigError::invalid("template", "non-finite coordinate"));
        }
        for (what, b) in [("identity", &self.identity), ("expression", &self.expression)] {
            if b.num_vertices() != v {
                return Err(RigError::invalid(what, format!("basis built for {} vertices, mesh has {v}", b.num_vertices())));
            }
        }
        if self.skin.num_vertices() != v {
            return Err(RigError::invalid("skin", format!("{} weight rows for {v} vertices", self.skin.num_vertices())));
        }
        for i in 0..v {
            if self.skin.influences(i).any(|(j, _)| j >= self.skeleton.len()) {
                return Err(RigError::invalid(format!("skin.vertex[{i}]"), "joint index out of range"));
            }
            let total: f64 = self.skin.influences(i).map(|p| p.1).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(RigError::invalid(format!("skin.vertex[{i}]"), format!("weights sum to {total}")));
            }
        }
        if self.parameter_transform.num_joint_params() != self.skeleton.num_joint_params() {
            return Err(RigError::invalid(
                "parameter_transform",
                format!("maps to {} joint parameters, skeleton has {}", self.parameter_transform.num_joint_params(), self.skeleton.num_joint_params()),
            ));
        }
        if let Some(b) = &self.skeleton_basis {
            let n_skel = self.parameter_transform.skeleton_indices().len();
            if b.num_outputs() != n_skel {
                return Err(RigError::invalid("skeleton_basis", format!("outputs {} values, rig has {n_skel} skeleton parameters", b.num_outputs())));
            }
        }
        if let Some(c) = &self.correctives {
            c.validate(&self.skeleton, v)?;
        }
        if !self.identity_regions.is_empty() && self.identity_regions.len() != self.identity.len() {
            return Err(RigError::invalid("identity.regions", "one region tag per component required"));
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.topology.num_vertices()
    }

    pub fn bind(&self) -> &BindState {
        &self.bind
    }

    /// Replaces the skeleton and refreshes the cached bind state.
    pub fn set_skeleton(&mut self, skeleton: Skeleton) {
        self.bind = bind_state(&skeleton);
        self.skeleton = skeleton;
    }

    fn effective_params(&self, params: &ModelParameters, skel_coeffs: Option<&[f64]>) -> Result<ModelParameters> {
        check_len("model parameters", self.parameter_transform.num_params(), params.len())?;
        let mut eff = params.clone();
        if let Some(coeffs) = skel_coeffs {
            let basis = self
                .skeleton_basis
                .as_ref()
                .ok_or_else(|| RigError::invalid("skeleton_coeffs", "rig has no skeleton basis"))?;
            let values = basis.apply(coeffs)?;
            for (&col, v) in self.parameter_transform.skeleton_indices().iter().zip(values) {
                eff.0[col] = v;
            }
        }
        Ok(eff)
    }

    /// `X̃ = X̄ + S βs + F βf + B^p(θ)`, unposed and unscaled.
    pub fn evaluate_rest_mesh(&self, identity: &[f64], expression: &[f64], params: &ModelParameters) -> Result<Vec<f64>> {
        check_len("identity coefficients", self.identity.len(), identity.len())?;
        check_len("expression coefficients", self.expression.len(), expression.len())?;
        let mut rest = self.template.clone();
        self.identity.accumulate(identity, &mut rest)?;
        self.expression.accumulate(expression, &mut rest)?;
        if let Some(c) = &self.correctives {
            let pose = self.parameter_transform.apply_kind(params, ParameterKind::Pose)?;
            for (r, o) in rest.iter_mut().zip(c.offsets(&pose)) {
                *r += o;
            }
        } else {
            check_len("model parameters", self.parameter_transform.num_params(), params.len())?;
        }
        Ok(rest)
    }

    /// `world ∘ bind⁻¹`, exactly the identity for joints still at their bind transform.
    fn skinning_transforms(&self, world: &[Transform3]) -> Vec<Transform3> {
        world
            .iter()
            .zip(&self.bind.world)
            .zip(&self.bind.inverse)
            .map(|((w, b), inv)| if w == b { Transform3::IDENTITY } else { w.compose(inv) })
            .collect()
    }

    /// Linear blend skinning of rest vertices with the given world transforms.
    pub fn skin(&self, rest: &[f64], world: &[Transform3]) -> Result<Vec<f64>> {
        check_len("rest vertices", 3 * self.num_vertices(), rest.len())?;
        check_len("world transforms", self.skeleton.len(), world.len())?;
        let g = self.skinning_transforms(world);
        Ok(self.skin_with(rest, &g))
    }

    fn skin_with(&self, rest: &[f64], g: &[Transform3]) -> Vec<f64> {
        let identity: Vec<bool> = g.iter().map(|t| *t == Transform3::IDENTITY).collect();
        let mut out = vec![0.0; rest.len()];
        for i in 0..self.num_vertices() {
            if self.skin.influences(i).all(|(j, _)| identity[j]) {
                out[3 * i..3 * i + 3].copy_from_slice(&rest[3 * i..3 * i + 3]);
                continue;
            }
            let x = vertex(rest, i);
            let mut p = Vec3::zeros();
            for (j, w) in self.skin.influences(i) {
                p += w * g[j].apply(&x);
            }
            out[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
        }
        out
    }

    /// Full model evaluation.
    pub fn evaluate(&self, identity: &[f64], expression: &[f64], skeleton_coeffs: Option<&[f64]>, params: &ModelParameters) -> Result<Vec<f64>> {
        let inputs = ModelInputs {
            params: params.clone(),
            identity: identity.to_vec(),
            expression: expression.to_vec(),
            skeleton_coeffs: skeleton_coeffs.map(<[f64]>::to_vec),
            offsets: None,
        };
        Ok(self.forward(&inputs)?.posed)
    }

    /// World joint transforms for the given inputs.
    pub fn joint_transforms(&self, params: &ModelParameters, skeleton_coeffs: Option<&[f64]>) -> Result<Vec<Transform3>> {
        let eff = self.effective_params(params, skeleton_coeffs)?;
        let jp = self.parameter_transform.apply(&eff)?;
        crate::skeleton::forward_kinematics(&self.skeleton, &jp)
    }

    /// Forward pass keeping intermediates for [`RigModel::backward`].
    pub fn forward(&self, inputs: &ModelInputs) -> Result<Evaluation> {
        let eff = self.effective_params(&inputs.params, inputs.skeleton_coeffs.as_deref())?;
        check_len("identity coefficients", self.identity.len(), inputs.identity.len())?;
        check_len("expression coefficients", self.expression.len(), inputs.expression.len())?;
        let joint_params = self.parameter_transform.apply(&eff)?;
        let fk = ForwardKinematics::new(&self.skeleton, &joint_params)?;
        let mut rest = self.template.clone();
        self.identity.accumulate(&inputs.identity, &mut rest)?;
        self.expression.accumulate(&inputs.expression, &mut rest)?;
        if let Some(off) = &inputs.offsets {
            check_len("vertex offsets", rest.len(), off.len())?;
            rest.iter_mut().zip(off).for_each(|(r, o)| *r += o);
        }
        let correctives = match &self.correctives {
            Some(c) => {
                let pose = self.parameter_transform.apply_kind(&inputs.params, ParameterKind::Pose)?;
                let f = c.forward(&pose);
                rest.iter_mut().zip(&f.offsets).for_each(|(r, o)| *r += o);
                Some(f)
            }
            None => None,
        };
        let skinning = self.skinning_transforms(&fk.world);
        let posed = self.skin_with(&rest, &skinning);
        Ok(Evaluation {
            effective_params: eff,
            joint_params,
            fk,
            skinning,
            correctives,
            rest,
            posed,
        })
    }

    /// Back-propagates `d_posed` (and optional extra gradients on the world
    /// joint transforms) to every model input.
    pub fn backward(&self, eval: &Evaluation, d_posed: &[f64], d_world_extra: Option<&[TransformGrad]>, with_skeleton_coeffs: bool) -> InputGradients {
        let n = self.num_vertices();
        let mut d_rest = vec![0.0; 3 * n];
        let mut d_skin = vec![TransformGrad::ZERO; self.skeleton.len()];
        let lin: Vec<Mat3> = eval.skinning.iter().map(Transform3::linear).collect();
        for i in 0..n {
            let dv = Vec3::new(d_posed[3 * i], d_posed[3 * i + 1], d_posed[3 * i + 2]);
            if dv == Vec3::zeros() {
                continue;
            }
            let x = vertex(&eval.rest, i);
            let mut dx = Vec3::zeros();
            for (j, w) in self.skin.influences(i) {
                let wdv = w * dv;
                dx += lin[j].tr_mul(&wdv);
                d_skin[j].linear += wdv * x.transpose();
                d_skin[j].translation += wdv;
            }
            d_rest[3 * i..3 * i + 3].copy_from_slice(dx.as_slice());
        }
        let mut d_world: Vec<TransformGrad> = d_skin
            .iter()
            .zip(&self.bind.inverse)
            .map(|(g, inv)| TransformGrad {
                linear: g.linear * inv.linear().transpose() + g.translation * inv.translation.transpose(),
                translation: g.translation,
            })
            .collect();
        if let Some(extra) = d_world_extra {
            for (d, e) in d_world.iter_mut().zip(extra) {
                d.linear += e.linear;
                d.translation += e.translation;
            }
        }
        let d_joint = eval.fk.backward(&self.skeleton, &mut d_world);
        let pt = &self.parameter_transform;
        let mut d_eff = vec![0.0; pt.num_params()];
        pt.backward(&d_joint, None, &mut d_eff);
        if let (Some(c), Some(f)) = (&self.correctives, &eval.correctives) {
            let d_pose = c.backward(f, &d_rest, pt.num_joint_params(), None, None);
            pt.backward(&d_pose, Some(ParameterKind::Pose), &mut d_eff);
        }
        let mut skeleton_coeffs = Vec::new();
        if with_skeleton_coeffs {
            if let Some(b) = &self.skeleton_basis {
                let d_skel: Vec<f64> = pt.skeleton_indices().iter().map(|&c| d_eff[c]).collect();
                skeleton_coeffs = b.apply_transpose(&d_skel);
                for &c in pt.skeleton_indices() {
                    d_eff[c] = 0.0;
                }
            }
        }
        InputGradients {
            params: d_eff,
            identity: self.identity.project(&d_rest, self.identity.len()),
            expression: self.expression.project(&d_rest, self.expression.len()),
            skeleton_coeffs,
            offsets: d_rest,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::EulerXYZ;
    use crate::skeleton::{Joint, ParameterInfo, Triplet, RZ, TX, TZ};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One triangle per joint along a 3-joint chain, each vertex skinned to
    /// its triangle's joint and the next one.
    fn small_rig(seed: u64) -> RigModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = Skeleton::new(vec![
            Joint::new("root", None, Vec3::zeros(), EulerXYZ::ZERO),
            Joint::new("a", Some(0), Vec3::new(0.0, 1.0, 0.0), EulerXYZ::new(0.0, 0.0, 0.3)),
            Joint::new("b", Some(1), Vec3::new(1.0, 0.0, 0.0), EulerXYZ::ZERO),
        ])
        .unwrap();
        let v = 9;
        let template: Vec<f64> = (0..3 * v).map(|k| (k / 9) as f64 + rng.random_range(-0.3..0.3)).collect();
        let topo = MeshTopology::new(v, vec![[0, 1, 2], [3, 4, 5], [6, 7, 8]]).unwrap();
        let skin = SkinWeights::new(
            (0..v)
                .map(|i| {
                    let j = i / 3;
                    let w = rng.random_range(0.3..1.0);
                    vec![(j, w), ((j + 1) % 3, 1.0 - w)]
                })
                .collect(),
            4,
            3,
        )
        .unwrap();
        let mk = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..n).map(|_| (0..3 * v).map(|_| rng.random_range(-0.1..0.1)).collect()).collect() };
        let identity = BlendshapeBasis::new(v, vec!["s0".into(), "s1".into()], mk(2, &mut rng)).unwrap();
        let expression = BlendshapeBasis::new(v, vec!["f0".into(), "f1".into(), "f2".into()], mk(3, &mut rng)).unwrap();
        let pt = ParameterTransform::identity(3);
        RigModel::new(topo, template, identity, expression, skin, skel, pt, None, None).unwrap()
    }

    #[test]
    fn zero_inputs_reproduce_template() {
        let rig = small_rig(1);
        let inputs = ModelInputs::zeros(&rig);
        let out = rig.evaluate(&inputs.identity, &inputs.expression, None, &inputs.params).unwrap();
        let max_err = out.iter().zip(&rig.template).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err < 1e-15, "{max_err}");
        let rest = rig.evaluate_rest_mesh(&inputs.identity, &inputs.expression, &inputs.params).unwrap();
        assert_eq!(rest, rig.template);
    }

    #[test]
    fn blendshapes_superpose() {
        let rig = small_rig(2);
        let p = ModelParameters::zeros(21);
        let rest = rig.evaluate_rest_mesh(&[1.0, 0.0], &[0.0, 0.0, 0.0], &p).unwrap();
        for k in 0..27 {
            assert_eq!(rest[k], rig.template[k] + rig.identity.component(0)[k]);
        }
        let rest = rig.evaluate_rest_mesh(&[1.0, 0.0], &[0.0, 1.0, 0.0], &p).unwrap();
        for k in 0..27 {
            assert!((rest[k] - (rig.template[k] + rig.identity.component(0)[k] + rig.expression.component(1)[k])).abs() < 1e-15);
        }
        assert!(rig.evaluate_rest_mesh(&[1.0], &[0.0; 3], &p).is_err());
    }

    #[test]
    fn skinning_examples() {
        let rig = small_rig(3);
        let bind = rig.bind().world.clone();
        let out = rig.skin(&rig.template, &bind).unwrap();
        for (a, b) in out.iter().zip(&rig.template) {
            assert!((a - b).abs() < 1e-15);
        }
        // single influence on a translated joint
        let skel = rig.skeleton.clone();
        let topo = MeshTopology::new(3, vec![[0, 1, 2]]).unwrap();
        let skin = SkinWeights::new(vec![vec![(1, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)]], 4, 3).unwrap();
        let tpl = vec![0.1, 0.2, 0.3, 1.0, 1.0, 1.0, -1.0, 0.5, 0.0];
        let r2 = RigModel::new(topo, tpl.clone(), BlendshapeBasis::empty(3), BlendshapeBasis::empty(3), skin, skel, ParameterTransform::identity(3), None, None)
            .unwrap();
        let mut world = r2.bind().world.clone();
        world[1].translation += Vec3::new(0.0, 0.0, 1.0);
        world[2].translation += Vec3::new(0.0, 0.0, 1.0);
        let out = r2.skin(&tpl, &world).unwrap();
        assert!((out[2] - (tpl[2] + 1.0)).abs() < 1e-15);
        assert!((out[5] - (tpl[5] + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_total_weight_is_rejected_and_excess_truncated() {
        assert!(SkinWeights::new(vec![vec![]], 4, 2).is_err());
        assert!(SkinWeights::new(vec![vec![(0, -0.5), (1, 1.5)]], 4, 2).is_err());
        let s = SkinWeights::new(vec![vec![(0, 0.1), (1, 0.4), (2, 0.2), (3, 0.3)]], 2, 4).unwrap();
        let l = s.to_lists();
        assert_eq!(l[0].len(), 2);
        assert_eq!(l[0][0].0, 1);
        assert!((l[0][0].1 - 0.4 / 0.7).abs() < 1e-15);
        assert_eq!(s.dominant_joint(0), 1);
    }

    #[test]
    fn root_translation_moves_all_vertices_equally() {
        let rig = small_rig(4);
        let mut p = ModelParameters::zeros(21);
        p.0[TX] = 0.3;
        p.0[TZ] = -1.2;
        let out = rig.evaluate(&[0.0; 2], &[0.0; 3], None, &p).unwrap();
        for i in 0..9 {
            assert!((out[3 * i] - rig.template[3 * i] - 0.3).abs() < 1e-14);
            assert!((out[3 * i + 2] - rig.template[3 * i + 2] + 1.2).abs() < 1e-14);
        }
    }

    #[test]
    fn skin_is_invariant_to_influence_order() {
        let rig = small_rig(5);
        let mut lists = rig.skin.to_lists();
        lists.iter_mut().for_each(|l| l.reverse());
        let mut rig2 = rig.clone();
        rig2.skin = SkinWeights::new(lists, 4, 3).unwrap();
        let mut p = ModelParameters::zeros(21);
        p.0[7 + RZ] = 0.7;
        p.0[14 + 3] = -0.4;
        let a = rig.evaluate(&[0.2, 0.1], &[0.0; 3], None, &p).unwrap();
        let b = rig2.evaluate(&[0.2, 0.1], &[0.0; 3], None, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn skeleton_basis_overrides_skeleton_columns() {
        let mut rig = small_rig(6);
        let params = vec![
            ParameterInfo { name: "rot".into(), kind: ParameterKind::Pose, limits: None },
            ParameterInfo { name: "len".into(), kind: ParameterKind::Skeleton, limits: None },
        ];
        let triplets = vec![Triplet { row: 7 + RZ, col: 0, weight: 1.0 }, Triplet { row: 14 + TX, col: 1, weight: 1.0 }];
        rig.parameter_transform = ParameterTransform::new(3, params, triplets).unwrap();
        rig.skeleton_basis = Some(SkeletonBasis::new(1, vec!["k".into()], vec![2.0]).unwrap());
        rig.validate().unwrap();
        let theta = ModelParameters(vec![0.2, 5.0]);
        let with_basis = rig.joint_transforms(&theta, Some(&[0.25])).unwrap();
        let raw = rig.joint_transforms(&ModelParameters(vec![0.2, 0.5]), None).unwrap();
        assert!((with_basis[2].translation - raw[2].translation).norm() < 1e-15);
    }
}
