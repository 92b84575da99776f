use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorrectiveModel, MASK_FROZEN_VALUE};
use crate::body_model::RigModel;
use crate::error::{check_len, Result, RigError};
use crate::math::{Mat3, Vec3};
use crate::mesh::vertex;
use crate::optim::Adam;
use crate::skeleton::{JointParameters, ModelParameters, ParameterKind};

/// What a sample's target vector describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetSpace {
    /// Unposed residual: the desired `B^p(θ)` directly.
    #[default]
    Residual,
    /// Posed vertices; the template is skinned with the predicted correctives.
    Posed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectiveSample {
    pub params: ModelParameters,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l1: f64,
    pub seed: u64,
    pub target_space: TargetSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 200,
            l1: 0.0,
            seed: 0,
            target_space: TargetSpace::Residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_support: usize,
    pub final_support: usize,
}

struct Prepared {
    pose: JointParameters,
    target: Vec<f64>,
    /// Skinned template and per-vertex blended linear map, for posed targets.
    posed: Option<(Vec<f64>, Vec<Mat3>)>,
}

fn prepare(rig: &RigModel, samples: &[CorrectiveSample], space: TargetSpace) -> Result<Vec<Prepared>> {
    let n = rig.num_vertices();
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            check_len(&format!("corrective sample {k} target"), 3 * n, s.target.len())?;
            let pose = rig.parameter_transform.apply_kind(&s.params, ParameterKind::Pose)?;
            let posed = match space {
                TargetSpace::Residual => None,
                TargetSpace::Posed => {
                    let world = rig.joint_transforms(&s.params, None)?;
                    let base = rig.skin(&rig.template, &world)?;
                    let g: Vec<Mat3> = world.iter().zip(&rig.bind().inverse).map(|(w, b)| w.compose(b).linear()).collect();
                    let lin = (0..n).map(|i| rig.skin.influences(i).fold(Mat3::zeros(), |acc, (j, w)| acc + w * g[j])).collect();
                    Some((base, lin))
                }
            };
            Ok(Prepared {
                pose,
                target: s.target.clone(),
                posed,
            })
        })
        .collect()
}

/// Per-sample squared error and its gradient with respect to the offsets.
fn sample_residual(model: &CorrectiveModel, s: &Prepared) -> (f64, super::CorrectiveForward, Vec<f64>) {
    let fwd = model.forward(&s.pose);
    let mut d = vec![0.0; fwd.offsets.len()];
    let mut loss = 0.0;
    match &s.posed {
        None => {
            for ((g, o), t) in d.iter_mut().zip(&fwd.offsets).zip(&s.target) {
                let r = o - t;
                loss += r * r;
                *g = 2.0 * r;
            }
        }
        Some((base, lin)) => {
            for (i, m) in lin.iter().enumerate() {
                let p = vertex(base, i) + m * vertex(&fwd.offsets, i);
                let r: Vec3 = p - vertex(&s.target, i);
                loss += r.norm_squared();
                let g = m.tr_mul(&(2.0 * r));
                d[3 * i..3 * i + 3].copy_from_slice(g.as_slice());
            }
        }
    }
    (loss, fwd, d)
}

fn batch_objective(model: &CorrectiveModel, batch: &[&Prepared], l1: f64, trainable: Option<&[Vec<bool>]>, grads: Option<&mut CorrectiveModel>) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for s in batch {
        let (loss, fwd, mut d) = sample_residual(model, s);
        total += loss * scale;
        if let Some(g) = grads.as_deref_mut() {
            d.iter_mut().for_each(|v| *v *= scale);
            model.backward(&fwd, &d, s.pose.0.len(), Some(g), trainable);
        }
    }
    total += l1 * model.mask_l1();
    if let Some(g) = grads {
        for (k, (jc, gj)) in model.joints.iter().zip(&mut g.joints).enumerate() {
            for (i, (&a, ga)) in jc.mask.iter().zip(&mut gj.mask).enumerate() {
                if a > 0.0 && trainable.is_none_or(|t| t[k][i]) {
                    *ga += l1;
                }
            }
        }
    }
    total
}

/// Training objective over `samples`: mean per-sample squared vertex error
/// plus `l1 · Σ_j ‖relu(A_j)‖₁`, and its gradient with respect to every
/// tensor of `model`.
pub fn corrective_loss(rig: &RigModel, model: &CorrectiveModel, samples: &[CorrectiveSample], l1: f64, space: TargetSpace) -> Result<(f64, CorrectiveModel)> {
    if samples.is_empty() {
        return Err(RigError::Empty("corrective dataset".into()));
    }
    model.validate(&rig.skeleton, rig.num_vertices())?;
    let prepared = prepare(rig, samples, space)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let mut grads = model.zeros_like();
    let loss = batch_objective(model, &refs, l1, None, Some(&mut grads));
    Ok((loss, grads))
}

/// Trains `model` with Adam on minibatches. Mask entries that start
/// non-positive are pinned to a negative constant and never updated, so the
/// trained support is a subset of the initial support.
pub fn train_correctives(rig: &RigModel, mut model: CorrectiveModel, samples: &[CorrectiveSample], cfg: &TrainConfig) -> Result<(CorrectiveModel, TrainReport)> {
    if samples.is_empty() {
        return Err(RigError::Empty("corrective dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(RigError::invalid("train config", "batch size and epochs must be positive"));
    }
    if !(cfg.l1 >= 0.0) || !(cfg.learning_rate > 0.0) {
        return Err(RigError::invalid("train config", "l1 must be non-negative and the learning rate positive"));
    }
    model.validate(&rig.skeleton, rig.num_vertices())?;
    let prepared = prepare(rig, samples, cfg.target_space)?;
    let trainable: Vec<Vec<bool>> = model.joints.iter().map(|jc| jc.mask.iter().map(|&a| a > 0.0).collect()).collect();
    for (jc, t) in model.joints.iter_mut().zip(&trainable) {
        for (a, &free) in jc.mask.iter_mut().zip(t) {
            if !free {
                *a = MASK_FROZEN_VALUE;
            }
        }
    }
    let all: Vec<&Prepared> = prepared.iter().collect();
    let initial_loss = batch_objective(&model, &all, cfg.l1, None, None);
    let initial_support = model.mask_support();
    let num_params: usize = model.tensors().iter().map(|t| t.len()).sum();
    let mut opt = Adam::new(num_params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&k| &prepared[k]).collect();
            let mut grads = model.zeros_like();
            let loss = batch_objective(&model, &batch, cfg.l1, Some(&trainable), Some(&mut grads));
            if !loss.is_finite() {
                return Err(RigError::Numeric(format!("corrective training loss became {loss} at epoch {epoch}")));
            }
            sum += loss;
            batches += 1;
            let g = grads.tensors().into_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
            opt.step(model.tensors_mut(), g.iter().map(Vec::as_slice));
            for (jc, t) in model.joints.iter_mut().zip(&trainable) {
                for (a, &free) in jc.mask.iter_mut().zip(t) {
                    if !free {
                        *a = MASK_FROZEN_VALUE;
                    }
                }
            }
        }
        let mean = sum / batches as f64;
        log::debug!("corrective epoch {epoch}: loss {mean:.6e}");
        epoch_losses.push(mean);
    }
    let final_loss = batch_objective(&model, &all, cfg.l1, None, None);
    if !final_loss.is_finite() {
        return Err(RigError::Numeric(format!("corrective training ended with loss {final_loss}")));
    }
    let report = TrainReport {
        epoch_losses,
        initial_loss,
        final_loss,
        initial_support,
        final_support: model.mask_support(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correctives::{init_masks, CorrectiveConfig};
    use crate::io::synth::{generate_corrective_dataset, generate_synthetic_rig, sample_pose, SyntheticRigSpec};
    use rand::Rng;

    fn tiny() -> (RigModel, CorrectiveModel, Vec<CorrectiveSample>) {
        let config = CorrectiveConfig {
            hidden: vec![5],
            embedding: 3,
            ..CorrectiveConfig::default()
        };
        let rig = generate_synthetic_rig(&SyntheticRigSpec {
            correctives: Some(config.clone()),
            ..SyntheticRigSpec::chain(4, 4, 2)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = generate_corrective_dataset(&rig, 6, &mut rng).unwrap();
        let masks = (0..rig.skeleton.len() - 1)
            .map(|_| (0..rig.num_vertices()).map(|_| if rng.random_bool(0.7) { rng.random_range(0.1..1.0) } else { -0.5 }).collect())
            .collect();
        let mut model = CorrectiveModel::new(&rig.skeleton, rig.num_vertices(), config, masks, &mut rng).unwrap();
        for t in model.tensors_mut() {
            if t.iter().all(|&v| v == 0.0) {
                t.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
            }
        }
        (rig, model, samples)
    }

    fn finite_difference_check(space: TargetSpace) {
        let (rig, model, mut samples) = tiny();
        if space == TargetSpace::Posed {
            for s in &mut samples {
                let mut x = crate::body_model::ModelInputs::zeros(&rig);
                x.params = s.params.clone();
                s.target = rig.forward(&x).unwrap().posed;
            }
        }
        let l1 = 1e-3;
        let (_, grads) = corrective_loss(&rig, &model, &samples, l1, space).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();
        let base: Vec<f64> = model.tensors().concat();
        let h = 1e-6;
        let mut numeric = vec![0.0; base.len()];
        for (k, n) in numeric.iter_mut().enumerate() {
            let perturbed = |delta: f64| {
                let mut m = model.clone();
                let mut offset = 0;
                for t in m.tensors_mut() {
                    if k >= offset && k < offset + t.len() {
                        t[k - offset] += delta;
                    }
                    offset += t.len();
                }
                corrective_loss(&rig, &m, &samples, l1, space).unwrap().0
            };
            *n = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(diff / scale < 1e-5, "relative gradient error {}", diff / scale);
    }

    #[test]
    fn residual_loss_gradient_matches_finite_differences() {
        finite_difference_check(TargetSpace::Residual);
    }

    #[test]
    fn posed_loss_gradient_matches_finite_differences() {
        finite_difference_check(TargetSpace::Posed);
    }

    #[test]
    fn zero_residuals_shrink_masks() {
        let rig = generate_synthetic_rig(&SyntheticRigSpec::chain(3, 6, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let masks = init_masks(&rig.topology, &rig.template, &rig.skin, &rig.skeleton).unwrap();
        let model = CorrectiveModel::new(&rig.skeleton, rig.num_vertices(), CorrectiveConfig::default(), masks, &mut rng).unwrap();
        let samples: Vec<CorrectiveSample> = (0..16)
            .map(|_| CorrectiveSample {
                params: sample_pose(&rig, &mut rng, 1.0),
                target: vec![0.0; 3 * rig.num_vertices()],
            })
            .collect();
        let cfg = TrainConfig {
            l1: 1e-2,
            learning_rate: 1e-2,
            epochs: 150,
            ..TrainConfig::default()
        };
        let (trained, report) = train_correctives(&rig, model.clone(), &samples, &cfg).unwrap();
        assert!(trained.mask_l1() < 0.05 * model.mask_l1());
        assert!(report.final_loss < 0.05 * report.initial_loss);
        assert!(report.final_support <= report.initial_support);
    }

    #[test]
    fn training_is_deterministic_and_respects_frozen_entries() {
        let (rig, model, samples) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, ra) = train_correctives(&rig, model.clone(), &samples, &cfg).unwrap();
        let (b, rb) = train_correctives(&rig, model.clone(), &samples, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        for (before, after) in model.joints.iter().zip(&a.joints) {
            for (x, y) in before.mask.iter().zip(&after.mask) {
                if *x <= 0.0 {
                    assert_eq!(*y, MASK_FROZEN_VALUE);
                }
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (rig, model, _) = tiny();
        assert!(matches!(train_correctives(&rig, model, &[], &TrainConfig::default()), Err(RigError::Empty(_))));
    }
}
