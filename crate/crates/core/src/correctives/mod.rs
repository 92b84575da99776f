//! Sparse non-linear pose correctives.
//!
//! Each corrective joint `j` owns a small bias-free MLP that embeds the 6D
//! rotation deviations of its neighbourhood (parent, itself, up to two
//! children) into a `c`-vector. The embedding is expanded to vertex offsets by
//! `P_j ∈ R^{3V×c}` and gated per vertex by `relu(A_j)`:
//!
//! ```text
//! B^p(θ) = Σ_j relu(A_j) ⊙ (P_j · MLP_j(θ))
//! ```
//!
//! Bias-free layers with an activation satisfying `f(0) = 0` make the
//! correctives vanish exactly at the rest pose.

mod geodesic;
mod train;

pub use geodesic::{geodesic_ring_distance, init_masks, joint_ring, segment};
pub use train::{corrective_loss, train_correctives, CorrectiveSample, TargetSpace, TrainConfig, TrainReport};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RigError};
use crate::math::rotation6d_deviation;
use crate::skeleton::{JointParameters, Skeleton, DOFS_PER_JOINT, RX};

/// Neighbourhood slots: parent, self, first two children.
pub const NEIGHBORHOOD_ARITY: usize = 4;
pub const MASK_FROZEN_VALUE: f64 = -0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveConfig {
    pub hidden: Vec<usize>,
    pub embedding: usize,
    pub activation: Activation,
}

impl Default for CorrectiveConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            embedding: 8,
            activation: Activation::default(),
        }
    }
}

impl CorrectiveConfig {
    pub fn input_dim(&self) -> usize {
        6 * NEIGHBORHOOD_ARITY
    }

    /// `(rows, cols)` of every layer matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.embedding);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Corrective parameters for one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCorrective {
    pub joint: usize,
    /// `None` slots are zero-padded.
    pub neighborhood: [Option<usize>; NEIGHBORHOOD_ARITY],
    /// Bias-free layer matrices, `out × in`, input layer first.
    pub layers: Vec<DMatrix<f64>>,
    /// Unconstrained activation mask `A_j`, one entry per vertex.
    pub mask: Vec<f64>,
    /// `P_j`, row-major `3V × c`.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectiveModel {
    pub config: CorrectiveConfig,
    pub num_vertices: usize,
    pub joints: Vec<JointCorrective>,
}

/// `[parent, j, child0, child1]`. The root's rotation is global orientation
/// and never feeds a corrective, so a root parent becomes a padded slot.
pub fn neighborhood(skel: &Skeleton, j: usize) -> [Option<usize>; NEIGHBORHOOD_ARITY] {
    let mut n = [None; NEIGHBORHOOD_ARITY];
    n[0] = skel.parent(j).filter(|&p| skel.parent(p).is_some());
    n[1] = Some(j);
    for (slot, &c) in skel.children(j).iter().take(NEIGHBORHOOD_ARITY - 2).enumerate() {
        n[2 + slot] = Some(c);
    }
    n
}

impl CorrectiveModel {
    /// Randomly initialised MLPs (Xavier-uniform), zero `P_j`, and the
    /// supplied masks. Every non-root joint gets a corrective.
    pub fn new<R: Rng>(skel: &Skeleton, num_vertices: usize, config: CorrectiveConfig, masks: Vec<Vec<f64>>, rng: &mut R) -> Result<Self> {
        let joints: Vec<usize> = (0..skel.len()).filter(|&j| skel.parent(j).is_some()).collect();
        check_len("corrective masks", joints.len(), masks.len())?;
        let shapes = config.layer_shapes();
        let c = config.embedding;
        let joints = joints
            .into_iter()
            .zip(masks)
            .map(|(j, mask)| {
                check_len("corrective mask length", num_vertices, mask.len())?;
                let layers = shapes
                    .iter()
                    .map(|&(r, cols)| {
                        let bound = (6.0 / (r + cols) as f64).sqrt();
                        DMatrix::from_fn(r, cols, |_, _| rng.random_range(-bound..bound))
                    })
                    .collect();
                Ok(JointCorrective {
                    joint: j,
                    neighborhood: neighborhood(skel, j),
                    layers,
                    mask,
                    weights: vec![0.0; 3 * num_vertices * c],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            num_vertices,
            joints,
        })
    }

    pub fn validate(&self, skel: &Skeleton, num_vertices: usize) -> Result<()> {
        if self.num_vertices != num_vertices {
            return Err(RigError::dims("corrective vertex count", num_vertices, self.num_vertices));
        }
        let shapes = self.config.layer_shapes();
        for (k, jc) in self.joints.iter().enumerate() {
            let field = |what: &str| format!("correctives.joints[{k}].{what}");
            if jc.joint >= skel.len() || jc.neighborhood.iter().flatten().any(|&a| a >= skel.len()) {
                return Err(RigError::invalid(field("joint"), "joint index out of range"));
            }
            if jc.neighborhood.iter().flatten().all(|&a| a != jc.joint) {
                return Err(RigError::invalid(field("neighborhood"), "neighbourhood must contain the joint"));
            }
            if jc.layers.len() != shapes.len()
                || jc.layers.iter().zip(&shapes).any(|(l, &(r, c))| l.nrows() != r || l.ncols() != c)
            {
                return Err(RigError::invalid(field("layers"), "layer shapes do not match the configuration"));
            }
            if jc.mask.len() != num_vertices {
                return Err(RigError::invalid(field("mask"), format!("expected {num_vertices} entries, got {}", jc.mask.len())));
            }
            if jc.weights.len() != 3 * num_vertices * self.config.embedding {
                return Err(RigError::invalid(field("weights"), "expected 3V × c entries"));
            }
            let finite = jc.mask.iter().chain(&jc.weights).all(|v| v.is_finite()) && jc.layers.iter().all(|l| l.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(RigError::invalid(field("values"), "non-finite entries"));
            }
        }
        Ok(())
    }

    /// A zero-valued model with the same shapes, used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for jc in &mut z.joints {
            jc.layers.iter_mut().for_each(|l| l.fill(0.0));
            jc.mask.fill(0.0);
            jc.weights.fill(0.0);
        }
        z
    }

    /// Every trainable tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for jc in &self.joints {
            for l in &jc.layers {
                out.push(l.as_slice());
            }
            out.push(jc.mask.as_slice());
            out.push(jc.weights.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for jc in &mut self.joints {
            for l in &mut jc.layers {
                out.push(l.as_mut_slice());
            }
            out.push(jc.mask.as_mut_slice());
            out.push(jc.weights.as_mut_slice());
        }
        out
    }

    /// Number of `(joint, vertex)` pairs with `relu(A_j)[i] > 0`.
    pub fn mask_support(&self) -> usize {
        self.joints.iter().map(|jc| jc.mask.iter().filter(|&&a| a > 0.0).count()).sum()
    }

    pub fn mask_l1(&self) -> f64 {
        self.joints.iter().map(|jc| jc.mask.iter().map(|a| a.max(0.0)).sum::<f64>()).sum()
    }

    /// Evaluates `NonLinear_j` for corrective `k` of this model.
    pub fn embed(&self, k: usize, pose: &JointParameters) -> Vec<f64> {
        self.forward_joint(&self.joints[k], pose).embedding.as_slice().to_vec()
    }

    fn forward_joint(&self, jc: &JointCorrective, pose: &JointParameters) -> JointForward {
        let mut input = DVector::zeros(self.config.input_dim());
        let mut jac = [[[0.0; 6]; 3]; NEIGHBORHOOD_ARITY];
        for (slot, a) in jc.neighborhood.iter().enumerate() {
            if let Some(a) = *a {
                let (dev, j) = rotation6d_deviation(pose.rotation(a));
                for m in 0..6 {
                    input[6 * slot + m] = dev[m];
                }
                jac[slot] = j;
            }
        }
        let act = self.config.activation;
        let mut acts = vec![input];
        let mut pre = Vec::with_capacity(jc.layers.len().saturating_sub(1));
        let last = jc.layers.len() - 1;
        for (l, w) in jc.layers.iter().enumerate() {
            let z = w * acts.last().expect("layer input");
            if l == last {
                acts.push(z);
            } else {
                acts.push(z.map(|v| act.apply(v)));
                pre.push(z);
            }
        }
        let embedding = acts.pop().expect("embedding");
        JointForward { jac, acts, pre, embedding }
    }

    /// Evaluates all correctives; only the rotation entries of `pose` are read.
    pub fn forward(&self, pose: &JointParameters) -> CorrectiveForward {
        let c = self.config.embedding;
        let mut offsets = vec![0.0; 3 * self.num_vertices];
        let joints: Vec<JointForward> = self.joints.iter().map(|jc| self.forward_joint(jc, pose)).collect();
        for (jc, jf) in self.joints.iter().zip(&joints) {
            let y = jf.embedding.as_slice();
            if y.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (i, &a) in jc.mask.iter().enumerate() {
                if a <= 0.0 {
                    continue;
                }
                for d in 0..3 {
                    let row = &jc.weights[(3 * i + d) * c..(3 * i + d + 1) * c];
                    let u: f64 = row.iter().zip(y).map(|(p, q)| p * q).sum();
                    offsets[3 * i + d] += a * u;
                }
            }
        }
        CorrectiveForward { joints, offsets }
    }

    /// Corrective offsets `B^p` for the given pose joint parameters.
    pub fn offsets(&self, pose: &JointParameters) -> Vec<f64> {
        self.forward(pose).offsets
    }

    /// Back-propagates `d_offsets`. Returns the gradient with respect to the
    /// joint parameters (rotation entries only) and, when `grads` is given,
    /// accumulates parameter gradients into it. `trainable_mask` restricts
    /// which mask entries receive gradient.
    pub fn backward(
        &self,
        fwd: &CorrectiveForward,
        d_offsets: &[f64],
        num_joint_params: usize,
        mut grads: Option<&mut CorrectiveModel>,
        trainable_mask: Option<&[Vec<bool>]>,
    ) -> Vec<f64> {
        let c = self.config.embedding;
        let act = self.config.activation;
        let mut d_pose = vec![0.0; num_joint_params];
        for (k, (jc, jf)) in self.joints.iter().zip(&fwd.joints).enumerate() {
            let y = jf.embedding.as_slice();
            let mut dy = DVector::<f64>::zeros(c);
            let mut g_joint = grads.as_deref_mut().map(|g| &mut g.joints[k]);
            for (i, &a) in jc.mask.iter().enumerate() {
                if a <= 0.0 {
                    continue;
                }
                let mut d_a = 0.0;
                for d in 0..3 {
                    let g = d_offsets[3 * i + d];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &jc.weights[(3 * i + d) * c..(3 * i + d + 1) * c];
                    let mut u = 0.0;
                    for m in 0..c {
                        dy[m] += a * g * row[m];
                        u += row[m] * y[m];
                    }
                    d_a += g * u;
                    if let Some(gj) = g_joint.as_deref_mut() {
                        let grow = &mut gj.weights[(3 * i + d) * c..(3 * i + d + 1) * c];
                        for m in 0..c {
                            grow[m] += a * g * y[m];
                        }
                    }
                }
                if let Some(gj) = g_joint.as_deref_mut() {
                    if trainable_mask.is_none_or(|t| t[k][i]) {
                        gj.mask[i] += d_a;
                    }
                }
            }
            // back through the MLP
            let last = jc.layers.len() - 1;
            let mut dh = dy;
            for l in (0..=last).rev() {
                let dz = if l == last {
                    dh
                } else {
                    dh.zip_map(&jf.pre[l], |g, z| g * act.derivative(z))
                };
                if let Some(gj) = g_joint.as_deref_mut() {
                    gj.layers[l] += &dz * jf.acts[l].transpose();
                }
                dh = jc.layers[l].tr_mul(&dz);
            }
            for (slot, a) in jc.neighborhood.iter().enumerate() {
                if let Some(a) = *a {
                    for e in 0..3 {
                        let s: f64 = (0..6).map(|m| dh[6 * slot + m] * jf.jac[slot][e][m]).sum();
                        d_pose[DOFS_PER_JOINT * a + RX + e] += s;
                    }
                }
            }
        }
        d_pose
    }
}

#[derive(Debug, Clone)]
struct JointForward {
    jac: [[[f64; 6]; 3]; NEIGHBORHOOD_ARITY],
    /// Inputs to each layer; `acts[0]` is the 6D feature vector.
    acts: Vec<DVector<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DVector<f64>>,
    embedding: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct CorrectiveForward {
    joints: Vec<JointForward>,
    pub offsets: Vec<f64>,
}

impl CorrectiveForward {
    pub fn embedding(&self, k: usize) -> &[f64] {
        self.joints[k].embedding.as_slice()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{EulerXYZ, Vec3};
    use crate::skeleton::Joint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> Skeleton {
        Skeleton::new(
            (0..n)
                .map(|i| Joint::new(format!("j{i}"), i.checked_sub(1), Vec3::new(0.0, 0.3, 0.0), EulerXYZ::ZERO))
                .collect(),
        )
        .unwrap()
    }

    fn random_model(skel: &Skeleton, v: usize, config: CorrectiveConfig, seed: u64) -> CorrectiveModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = skel.len() - 1;
        let masks = (0..n).map(|_| (0..v).map(|_| rng.random_range(-0.5..1.0)).collect()).collect();
        let mut m = CorrectiveModel::new(skel, v, config, masks, &mut rng).unwrap();
        for jc in &mut m.joints {
            jc.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        }
        m
    }

    fn random_pose(skel: &Skeleton, seed: u64) -> JointParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        JointParameters((0..7 * skel.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn neighborhoods_follow_hierarchy() {
        let skel = chain(4);
        assert_eq!(neighborhood(&skel, 1), [None, Some(1), Some(2), None]);
        assert_eq!(neighborhood(&skel, 2), [Some(1), Some(2), Some(3), None]);
        assert_eq!(neighborhood(&skel, 3), [Some(2), Some(3), None, None]);
    }

    #[test]
    fn rest_pose_gives_zero_embedding_and_offsets() {
        let skel = chain(5);
        let m = random_model(&skel, 20, CorrectiveConfig::default(), 1);
        let rest = JointParameters::zeros(5);
        for k in 0..m.joints.len() {
            assert!(m.embed(k, &rest).iter().all(|&v| v == 0.0));
        }
        assert!(m.offsets(&rest).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_is_homogeneous_in_weights() {
        let skel = chain(3);
        let cfg = CorrectiveConfig { hidden: vec![], embedding: 3, activation: Activation::default() };
        let mut m = random_model(&skel, 4, cfg, 2);
        let pose = random_pose(&skel, 3);
        let y1 = m.embed(0, &pose);
        m.joints[0].layers[0] *= 2.0;
        let y2 = m.embed(0, &pose);
        for (a, b) in y1.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn embedding_matches_layer_by_layer_oracle() {
        let skel = chain(4);
        let m = random_model(&skel, 5, CorrectiveConfig::default(), 4);
        let pose = random_pose(&skel, 5);
        let jc = &m.joints[1];
        // 6D deviation from explicit matrix columns
        let mut x = vec![0.0; 24];
        for (slot, a) in jc.neighborhood.iter().enumerate() {
            if let Some(a) = a {
                let d = pose.joint(*a);
                let r = crate::math::rot_z(d[5]) * crate::math::rot_y(d[4]) * crate::math::rot_x(d[3]);
                let six = [r[(0, 0)] - 1.0, r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)] - 1.0, r[(2, 1)]];
                x[6 * slot..6 * slot + 6].copy_from_slice(&six);
            }
        }
        let mut h = x;
        for (l, w) in jc.layers.iter().enumerate() {
            let mut out = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out[r] += w[(r, c)] * h[c];
                }
            }
            if l + 1 < jc.layers.len() {
                out.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.01 * *v });
            }
            h = out;
        }
        let got = m.embed(1, &pose);
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn non_positive_masks_silence_everything() {
        let skel = chain(4);
        let mut m = random_model(&skel, 10, CorrectiveConfig::default(), 6);
        for jc in &mut m.joints {
            jc.mask.iter_mut().for_each(|a| *a = -a.abs());
        }
        assert!(m.offsets(&random_pose(&skel, 7)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_vertex_gate_reproduces_scalar_embedding() {
        let skel = chain(2);
        let cfg = CorrectiveConfig { hidden: vec![4], embedding: 1, activation: Activation::Tanh };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = CorrectiveModel::new(&skel, 3, cfg, vec![vec![0.0, 1.0, 0.0]], &mut rng).unwrap();
        m.joints[0].weights.fill(1.0);
        let pose = random_pose(&skel, 9);
        let y = m.embed(0, &pose)[0];
        let off = m.offsets(&pose);
        assert_eq!(&off[0..3], &[0.0; 3]);
        assert_eq!(&off[6..9], &[0.0; 3]);
        for d in 0..3 {
            assert!((off[3 + d] - y).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let skel = chain(5);
        for (seed, act) in [(10u64, Activation::Tanh), (11, Activation::default())] {
            let cfg = CorrectiveConfig { hidden: vec![6, 5], embedding: 3, activation: act };
            let m = random_model(&skel, 8, cfg, seed);
            let pose = random_pose(&skel, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let coeff: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |m: &CorrectiveModel, p: &JointParameters| -> f64 { m.offsets(p).iter().zip(&coeff).map(|(a, b)| a * b).sum() };
            let fwd = m.forward(&pose);
            let mut grads = m.zeros_like();
            let d_pose = m.backward(&fwd, &coeff, pose.0.len(), Some(&mut grads), None);
            let h = 1e-6;
            for k in 0..pose.0.len() {
                let mut p = pose.clone();
                let mut q = pose.clone();
                p.0[k] += h;
                q.0[k] -= h;
                let fd = (loss(&m, &p) - loss(&m, &q)) / (2.0 * h);
                assert!((fd - d_pose[k]).abs() < 1e-6 * (1.0 + fd.abs()), "pose {k}: {fd} vs {}", d_pose[k]);
            }
            let flat_grads: Vec<f64> = grads.tensors().concat();
            let mut idx = 0;
            let n_tensors = m.tensors().len();
            for t in 0..n_tensors {
                let len = m.tensors()[t].len();
                for e in 0..len {
                    let mut mp = m.clone();
                    let mut mm = m.clone();
                    mp.tensors_mut()[t][e] += h;
                    mm.tensors_mut()[t][e] -= h;
                    let fd = (loss(&mp, &pose) - loss(&mm, &pose)) / (2.0 * h);
                    let an = flat_grads[idx];
                    assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "tensor {t}[{e}]: {fd} vs {an}");
                    idx += 1;
                }
            }
        }
    }
}
