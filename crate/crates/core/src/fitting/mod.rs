//! Gradient-based fitting of model parameters (and optional rest-space vertex
//! offsets) to point clouds, and the masked data-to-model metric.
//!
//! ```text
//! E = w_data · Σ_p ‖p − closest(p)‖² + w_kp · Σ_k ‖t_k − J_k‖² + w_limit · limits(θ)
//!   + w_L2 · ‖δ‖² + w_Lap · ‖L δ‖²
//! ```
//!
//! Correspondences are re-queried at every evaluation and held fixed within
//! it, which gives the exact gradient of `E` away from medial-axis ties.

mod bvh;

pub use bvh::{closest_point_on_triangle, ClosestPoint, TriangleBvh};

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{InputGradients, ModelInputs, RigModel};
use crate::error::{check_len, Result, RigError};
use crate::math::Vec3;
use crate::mesh::{vertex, MeshTopology, UniformLaplacian};
use crate::optim::Adam;
use crate::skeleton::{ParameterKind, TransformGrad};

/// Scan to fit: points, optional joint keypoints and a model-vertex mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTarget {
    /// Flat `3M` point coordinates.
    pub points: Vec<f64>,
    pub keypoints: Vec<(String, Vec3)>,
    /// `true` marks model vertices excluded from the data term and metric.
    pub mask: Option<Vec<bool>>,
}

impl ScanTarget {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() || !points.len().is_multiple_of(3) {
            return Err(RigError::Empty("scan target needs at least one 3D point".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(RigError::invalid("scan points", "non-finite coordinate"));
        }
        Ok(Self {
            points,
            keypoints: Vec::new(),
            mask: None,
        })
    }

    pub fn num_points(&self) -> usize {
        self.points.len() / 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub data: f64,
    pub keypoints: f64,
    pub limits: f64,
    pub offset_l2: f64,
    pub offset_laplacian: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            data: 1.0,
            keypoints: 1.0,
            limits: 0.1,
            offset_l2: 1.0,
            offset_laplacian: 10.0,
        }
    }
}

/// Which variable groups the optimiser may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeVariables {
    pub pose: bool,
    pub skeleton: bool,
    pub identity: bool,
    pub expression: bool,
    pub skeleton_coeffs: bool,
    pub offsets: bool,
}

impl Default for FreeVariables {
    fn default() -> Self {
        Self {
            pose: true,
            skeleton: false,
            identity: true,
            expression: false,
            skeleton_coeffs: false,
            offsets: false,
        }
    }
}

impl FreeVariables {
    pub const NONE: FreeVariables = FreeVariables {
        pose: false,
        skeleton: false,
        identity: false,
        expression: false,
        skeleton_coeffs: false,
        offsets: false,
    };

    pub const ALL: FreeVariables = FreeVariables {
        pose: true,
        skeleton: true,
        identity: true,
        expression: true,
        skeleton_coeffs: true,
        offsets: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub free: FreeVariables,
    /// Only the first `n` identity components are optimised.
    pub identity_components: Option<usize>,
    /// Random subset of scan points used for the data term.
    pub max_points: Option<usize>,
    /// Project expression coefficients onto `[0, 1]` after every step.
    pub clamp_expression: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            learning_rate: 0.01,
            weights: LossWeights::default(),
            free: FreeVariables::default(),
            identity_components: None,
            max_points: None,
            clamp_expression: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub keypoints: f64,
    pub limits: f64,
    pub offset_l2: f64,
    pub offset_laplacian: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub variables: ModelInputs,
    /// Objective before each update; one entry per iteration.
    pub trace: Vec<f64>,
    /// Weighted terms at the returned variables.
    pub breakdown: LossBreakdown,
    pub wall_time_s: f64,
}

/// Sum of squared point-to-surface distances and its gradient with respect
/// to the mesh vertices.
pub fn point_to_surface_loss(points: &[f64], verts: &[f64], topo: &MeshTopology) -> Result<(f64, Vec<f64>)> {
    check_len("mesh vertices", 3 * topo.num_vertices(), verts.len())?;
    let bvh = TriangleBvh::new(verts, topo.triangles())?;
    let hits = closest_points(&bvh, points);
    let mut grad = vec![0.0; verts.len()];
    let mut loss = 0.0;
    for (k, h) in hits.iter().enumerate() {
        loss += h.dist_sq;
        accumulate_point_grad(&bvh, h, &vertex(points, k), 1.0, &mut grad);
    }
    Ok((loss, grad))
}

fn closest_points(bvh: &TriangleBvh, points: &[f64]) -> Vec<ClosestPoint> {
    points.par_chunks_exact(3).map(|p| bvh.closest(&Vec3::new(p[0], p[1], p[2]))).collect()
}

/// Acceleration state carried across objective evaluations: the refitted
/// tree and each point's previous closest triangle.
#[derive(Debug, Clone, Default)]
pub struct SurfaceCache {
    bvh: Option<TriangleBvh>,
    hints: Vec<usize>,
}

fn accumulate_point_grad(bvh: &TriangleBvh, h: &ClosestPoint, p: &Vec3, scale: f64, grad: &mut [f64]) {
    let r = p - h.point;
    let tri = bvh.triangles()[h.triangle];
    for (&v, &b) in tri.iter().zip(&h.bary) {
        for d in 0..3 {
            grad[3 * v + d] -= scale * 2.0 * b * r[d];
        }
    }
}

/// Sum of squared distances between joint world positions and targets.
pub fn keypoint_loss(rig: &RigModel, joint_positions: &[Vec3], keypoints: &[(String, Vec3)]) -> Result<f64> {
    keypoints
        .iter()
        .map(|(name, t)| {
            let j = rig.skeleton.find(name).ok_or_else(|| RigError::UnknownName(name.clone()))?;
            Ok((joint_positions[j] - t).norm_squared())
        })
        .sum()
}

/// True when a masked vertex carries weight in the closest point. Tied
/// triangles sharing the closest edge or vertex therefore agree.
fn touches_mask(tri: &[usize; 3], hit: &ClosestPoint, mask: Option<&[bool]>) -> bool {
    mask.is_some_and(|m| tri.iter().zip(hit.bary).any(|(&v, w)| w != 0.0 && m[v]))
}

/// Mean unsquared point-to-surface distance in millimetres, skipping points
/// whose closest surface point is supported by a masked vertex.
pub fn evaluate_data2model(points: &[f64], verts: &[f64], topo: &MeshTopology, mask: Option<&[bool]>) -> Result<f64> {
    let per_point = data2model_distances(points, verts, topo, mask)?;
    Ok(per_point.iter().sum::<f64>() / per_point.len() as f64)
}

/// Per-point distances (mm) of the points kept by the mask.
pub fn data2model_distances(points: &[f64], verts: &[f64], topo: &MeshTopology, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    check_len("mesh vertices", 3 * topo.num_vertices(), verts.len())?;
    if let Some(m) = mask {
        check_len("vertex mask", topo.num_vertices(), m.len())?;
    }
    if points.is_empty() {
        return Err(RigError::Empty("scan has no points".into()));
    }
    let bvh = TriangleBvh::new(verts, topo.triangles())?;
    let kept: Vec<f64> = closest_points(&bvh, points)
        .into_iter()
        .filter(|h| !touches_mask(&bvh.triangles()[h.triangle], h, mask))
        .map(|h| 1000.0 * h.dist_sq.sqrt())
        .collect();
    if kept.is_empty() {
        return Err(RigError::Empty("every scan point maps to a masked region".into()));
    }
    Ok(kept)
}

/// The fitting objective bound to one rig and target.
pub struct FitObjective<'a> {
    rig: &'a RigModel,
    weights: LossWeights,
    points: Vec<f64>,
    mask: Option<Vec<bool>>,
    keypoints: Vec<(usize, Vec3)>,
    laplacian: Option<UniformLaplacian>,
}

impl<'a> FitObjective<'a> {
    pub fn new(rig: &'a RigModel, target: &ScanTarget, cfg: &FitConfig) -> Result<Self> {
        let w = cfg.weights;
        if [w.data, w.keypoints, w.limits, w.offset_l2, w.offset_laplacian].iter().any(|v| !(*v >= 0.0)) {
            return Err(RigError::invalid("loss weights", "must be non-negative"));
        }
        if let Some(m) = &target.mask {
            check_len("target vertex mask", rig.num_vertices(), m.len())?;
        }
        let keypoints = target
            .keypoints
            .iter()
            .map(|(name, p)| rig.skeleton.find(name).map(|j| (j, *p)).ok_or_else(|| RigError::UnknownName(name.clone())))
            .collect::<Result<Vec<_>>>()?;
        let points = match cfg.max_points {
            Some(n) if n < target.num_points() => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut idx = sample(&mut rng, target.num_points(), n).into_vec();
                idx.sort_unstable();
                idx.iter().flat_map(|&i| target.points[3 * i..3 * i + 3].iter().copied()).collect()
            }
            _ => target.points.clone(),
        };
        Ok(Self {
            rig,
            weights: w,
            points,
            mask: target.mask.clone(),
            keypoints,
            laplacian: cfg.free.offsets.then(|| UniformLaplacian::new(&rig.topology)),
        })
    }

    fn check_differentiable(&self, x: &ModelInputs, free: &FreeVariables) -> Result<()> {
        if free.skeleton_coeffs && (self.rig.skeleton_basis.is_none() || x.skeleton_coeffs.is_none()) {
            return Err(RigError::invalid("free variables", "skeleton coefficients are free but the rig has no skeleton basis"));
        }
        if free.offsets && x.offsets.is_none() {
            return Err(RigError::invalid("free variables", "offsets are free but no offset field is present"));
        }
        Ok(())
    }

    /// Loss breakdown and the gradient with respect to every input. `cache`
    /// only speeds up queries; results do not depend on it.
    pub fn evaluate(&self, x: &ModelInputs, cache: &mut SurfaceCache) -> Result<(LossBreakdown, InputGradients)> {
        let rig = self.rig;
        let w = self.weights;
        let eval = rig.forward(x)?;
        let mut bd = LossBreakdown::default();
        let mut d_posed = vec![0.0; eval.posed.len()];
        if w.data > 0.0 {
            match &mut cache.bvh {
                Some(b) => b.refit(&eval.posed)?,
                None => cache.bvh = Some(TriangleBvh::new(&eval.posed, rig.topology.triangles())?),
            }
            let b = cache.bvh.as_ref().expect("bvh initialised");
            let hints = &cache.hints;
            let hits: Vec<ClosestPoint> = self
                .points
                .par_chunks_exact(3)
                .enumerate()
                .map(|(k, p)| b.closest_from(&Vec3::new(p[0], p[1], p[2]), hints.get(k).copied()))
                .collect();
            cache.hints = hits.iter().map(|h| h.triangle).collect();
            let mask = self.mask.as_deref();
            for (k, h) in hits.iter().enumerate() {
                if touches_mask(&b.triangles()[h.triangle], h, mask) {
                    continue;
                }
                bd.data += w.data * h.dist_sq;
                accumulate_point_grad(b, h, &vertex(&self.points, k), w.data, &mut d_posed);
            }
        }
        let mut d_world = vec![TransformGrad::ZERO; rig.skeleton.len()];
        for &(j, t) in &self.keypoints {
            let r = eval.joint_position(j) - t;
            bd.keypoints += w.keypoints * r.norm_squared();
            d_world[j].translation += 2.0 * w.keypoints * r;
        }
        let mut grads = rig.backward(&eval, &d_posed, Some(&d_world), x.skeleton_coeffs.is_some());
        if w.limits > 0.0 {
            bd.limits = w.limits * rig.parameter_transform.joint_limit_penalty(&x.params);
            rig.parameter_transform.joint_limit_gradient(&x.params, w.limits, &mut grads.params);
        }
        if let Some(delta) = &x.offsets {
            bd.offset_l2 = w.offset_l2 * delta.iter().map(|v| v * v).sum::<f64>();
            grads.offsets.iter_mut().zip(delta).for_each(|(g, d)| *g += 2.0 * w.offset_l2 * d);
            if w.offset_laplacian > 0.0 {
                let owned;
                let lap = match &self.laplacian {
                    Some(l) => l,
                    None => {
                        owned = UniformLaplacian::new(&rig.topology);
                        &owned
                    }
                };
                let ld = lap.apply(delta, 3);
                bd.offset_laplacian = w.offset_laplacian * ld.iter().map(|v| v * v).sum::<f64>();
                let g = lap.apply_transpose(&ld, 3);
                grads.offsets.iter_mut().zip(g).for_each(|(o, v)| *o += 2.0 * w.offset_laplacian * v);
            }
        }
        bd.total = bd.data + bd.keypoints + bd.limits + bd.offset_l2 + bd.offset_laplacian;
        Ok((bd, grads))
    }

    /// Objective value only.
    pub fn value(&self, x: &ModelInputs) -> Result<f64> {
        Ok(self.evaluate(x, &mut SurfaceCache::default())?.0.total)
    }

    /// Exact gradient restricted to the free variables (others zero).
    pub fn gradient(&self, x: &ModelInputs, free: &FreeVariables, identity_components: Option<usize>) -> Result<InputGradients> {
        self.check_differentiable(x, free)?;
        let (_, mut g) = self.evaluate(x, &mut SurfaceCache::default())?;
        restrict(self.rig, &mut g, free, identity_components);
        Ok(g)
    }
}

fn restrict(rig: &RigModel, g: &mut InputGradients, free: &FreeVariables, identity_components: Option<usize>) {
    for (k, p) in rig.parameter_transform.params().iter().enumerate() {
        let keep = match p.kind {
            ParameterKind::Pose => free.pose,
            ParameterKind::Skeleton => free.skeleton,
        };
        if !keep {
            g.params[k] = 0.0;
        }
    }
    if !free.identity {
        g.identity.fill(0.0);
    } else if let Some(n) = identity_components {
        g.identity.iter_mut().skip(n).for_each(|v| *v = 0.0);
    }
    if !free.expression {
        g.expression.fill(0.0);
    }
    if !free.skeleton_coeffs {
        g.skeleton_coeffs.fill(0.0);
    }
    if !free.offsets {
        g.offsets.fill(0.0);
    }
}

fn slices_mut(x: &mut ModelInputs) -> Vec<&mut [f64]> {
    let mut v: Vec<&mut [f64]> = vec![x.params.0.as_mut_slice(), x.identity.as_mut_slice(), x.expression.as_mut_slice()];
    if let Some(k) = &mut x.skeleton_coeffs {
        v.push(k.as_mut_slice());
    }
    if let Some(o) = &mut x.offsets {
        v.push(o.as_mut_slice());
    }
    v
}

fn grad_slices<'g>(g: &'g InputGradients, x: &ModelInputs) -> Vec<&'g [f64]> {
    let mut v: Vec<&[f64]> = vec![&g.params, &g.identity, &g.expression];
    if x.skeleton_coeffs.is_some() {
        v.push(&g.skeleton_coeffs);
    }
    if x.offsets.is_some() {
        v.push(&g.offsets);
    }
    v
}

/// Adam on the fitting objective starting from `init` (zeros when `None`).
pub fn fit(rig: &RigModel, target: &ScanTarget, cfg: &FitConfig, init: Option<ModelInputs>) -> Result<FitResult> {
    if cfg.iterations == 0 {
        return Err(RigError::invalid("iterations", "must be at least 1"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(RigError::invalid("learning rate", "must be positive"));
    }
    let start = Instant::now();
    let objective = FitObjective::new(rig, target, cfg)?;
    let mut x = init.unwrap_or_else(|| ModelInputs::zeros(rig));
    if cfg.free.offsets && x.offsets.is_none() {
        x.offsets = Some(vec![0.0; 3 * rig.num_vertices()]);
    }
    if cfg.free.skeleton_coeffs && x.skeleton_coeffs.is_none() {
        x.skeleton_coeffs = rig.skeleton_basis.as_ref().map(|b| vec![0.0; b.num_coefficients()]);
    }
    objective.check_differentiable(&x, &cfg.free)?;
    let n: usize = slices_mut(&mut x).iter().map(|s| s.len()).sum();
    let mut opt = Adam::new(n, cfg.learning_rate);
    let mut cache = SurfaceCache::default();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (bd, mut g) = objective.evaluate(&x, &mut cache)?;
        if !bd.total.is_finite() || g.params.iter().chain(&g.identity).any(|v| !v.is_finite()) {
            return Err(RigError::Diverged {
                iteration: it,
                loss: bd.total,
                last_state: Box::new(x),
            });
        }
        trace.push(bd.total);
        restrict(rig, &mut g, &cfg.free, cfg.identity_components);
        let before = x.clone();
        let grads = grad_slices(&g, &before);
        opt.step(slices_mut(&mut x), grads);
        if cfg.clamp_expression {
            x.expression.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    let (breakdown, _) = objective.evaluate(&x, &mut cache)?;
    if !breakdown.total.is_finite() {
        return Err(RigError::Diverged {
            iteration: cfg.iterations,
            loss: breakdown.total,
            last_state: Box::new(x),
        });
    }
    Ok(FitResult {
        variables: x,
        trace,
        breakdown,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// [`fit`] with free per-vertex rest-space offsets.
pub fn register_nonrigid(rig: &RigModel, target: &ScanTarget, cfg: &FitConfig, init: Option<ModelInputs>) -> Result<FitResult> {
    let mut cfg = cfg.clone();
    cfg.free.offsets = true;
    fit(rig, target, &cfg, init)
}
