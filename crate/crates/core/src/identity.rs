//! Partitioned identity space: soft-masked PCA per body region, mirror
//! augmentation and removal of anti-symmetric components.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::body_model::BlendshapeBasis;
use crate::error::{check_len, Result, RigError};
use crate::mesh::vertex;

/// Singular values below this are reported as rank deficiency.
const RANK_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_ASYMMETRY_THRESHOLD: f64 = 0.1;
pub const DEFAULT_SYMMETRY_TOLERANCE: f64 = 1e-4;
/// Component counts per region (body, head, hand).
pub const DEFAULT_REGION_COUNTS: [usize; 3] = [20, 20, 5];

/// Registered neutral shapes on a common topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSet {
    pub shapes: Vec<Vec<f64>>,
    pub subject_ids: Vec<String>,
}

impl ShapeSet {
    pub fn new(shapes: Vec<Vec<f64>>, subject_ids: Vec<String>) -> Result<Self> {
        check_len("subject ids", shapes.len(), subject_ids.len())?;
        let first = shapes.first().ok_or_else(|| RigError::Empty("shape set".into()))?;
        let n = first.len();
        if n == 0 || n % 3 != 0 {
            return Err(RigError::invalid("shapes[0]", format!("length {n} is not a positive multiple of 3")));
        }
        for (k, s) in shapes.iter().enumerate() {
            if s.len() != n {
                return Err(RigError::invalid(format!("shapes[{k}]"), format!("length {} differs from {n}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(RigError::invalid(format!("shapes[{k}]"), "non-finite coordinate"));
            }
        }
        Ok(Self { shapes, subject_ids })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.shapes[0].len() / 3
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.shapes[0].len()];
        for s in &self.shapes {
            m.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / self.len() as f64;
        m.iter_mut().for_each(|a| *a *= inv);
        m
    }
}

/// Per-vertex weights in `[0, 1]` selecting a body region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub name: String,
    pub weights: Vec<f64>,
}

impl RegionMask {
    pub fn new(name: impl Into<String>, weights: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if let Some(i) = weights.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(RigError::invalid(format!("mask `{name}`[{i}]"), format!("weight {} outside [0, 1]", weights[i])));
        }
        Ok(Self { name, weights })
    }

    pub fn ones(name: impl Into<String>, num_vertices: usize) -> Self {
        Self {
            name: name.into(),
            weights: vec![1.0; num_vertices],
        }
    }

    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        field.iter().enumerate().map(|(k, v)| v * self.weights[k / 3]).collect()
    }
}

/// Left/right vertex correspondence under reflection through `x = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryMap {
    perm: Vec<usize>,
}

impl SymmetryMap {
    pub fn from_permutation(perm: Vec<usize>) -> Result<Self> {
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || perm[p] != i {
                return Err(RigError::invalid(format!("symmetry[{i}]"), "map is not an involution"));
            }
        }
        Ok(Self { perm })
    }

    /// Matches every template vertex with the vertex nearest to its mirror
    /// image, requiring a match within `tolerance`.
    pub fn from_template(verts: &[f64], tolerance: f64) -> Result<Self> {
        let n = verts.len() / 3;
        let cell = tolerance.max(f64::MIN_POSITIVE);
        let key = |x: f64, y: f64, z: f64| ((x / cell).floor() as i64, (y / cell).floor() as i64, (z / cell).floor() as i64);
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for i in 0..n {
            let p = vertex(verts, i);
            grid.entry(key(p.x, p.y, p.z)).or_default().push(i);
        }
        let mut perm = Vec::with_capacity(n);
        for i in 0..n {
            let p = vertex(verts, i);
            let q = nalgebra::Vector3::new(-p.x, p.y, p.z);
            let (cx, cy, cz) = key(q.x, q.y, q.z);
            let mut best = (f64::INFINITY, usize::MAX);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        for &j in grid.get(&(cx + dx, cy + dy, cz + dz)).into_iter().flatten() {
                            let d = (vertex(verts, j) - q).norm();
                            if d < best.0 || (d == best.0 && j < best.1) {
                                best = (d, j);
                            }
                        }
                    }
                }
            }
            if best.0 > tolerance {
                return Err(RigError::invalid(format!("symmetry[{i}]"), format!("no mirrored vertex within {tolerance}")));
            }
            perm.push(best.1);
        }
        Self::from_permutation(perm)
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn partner(&self, i: usize) -> usize {
        self.perm[i]
    }

    /// `out_i = reflect_x(field_σ(i))`; valid for positions and displacements.
    pub fn mirror(&self, field: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; field.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            out[3 * i] = -field[3 * p];
            out[3 * i + 1] = field[3 * p + 1];
            out[3 * i + 2] = field[3 * p + 2];
        }
        out
    }
}

/// Appends the mirror image of every shape, preserving the original order.
pub fn mirror_augment(shapes: &ShapeSet, sym: &SymmetryMap) -> Result<ShapeSet> {
    check_len("symmetry map", shapes.num_vertices(), sym.len())?;
    let mut out = shapes.clone();
    for (s, id) in shapes.shapes.iter().zip(&shapes.subject_ids) {
        out.shapes.push(sym.mirror(s));
        out.subject_ids.push(format!("{id}_mirror"));
    }
    Ok(out)
}

/// Result of PCA on mask-weighted shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPca {
    pub region: String,
    /// Mean of the mask-weighted shapes.
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, by decreasing singular value.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub num_samples: usize,
}

impl MaskedPca {
    /// Coefficient standard deviations `σ_k / √(N − 1)`.
    pub fn std_devs(&self) -> Vec<f64> {
        std_devs(&self.singular_values, self.num_samples)
    }

    /// Best reconstruction of `shape` (mask applied) with the first `k` components.
    pub fn reconstruct(&self, mask: &RegionMask, shape: &[f64], k: usize) -> Vec<f64> {
        let x = mask.apply(shape);
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut out = self.mean.clone();
        for c in self.components.iter().take(k) {
            let coeff: f64 = c.iter().zip(&centered).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(c).for_each(|(o, v)| *o += coeff * v);
        }
        out
    }
}

pub fn std_devs(singular_values: &[f64], num_samples: usize) -> Vec<f64> {
    let denom = (num_samples.saturating_sub(1).max(1) as f64).sqrt();
    singular_values.iter().map(|s| s / denom).collect()
}

/// Thin-SVD PCA of the shapes after per-vertex multiplication by `mask`.
pub fn masked_pca(shapes: &ShapeSet, mask: &RegionMask, k: usize) -> Result<MaskedPca> {
    let n = shapes.len();
    let dim = 3 * shapes.num_vertices();
    check_len(&format!("mask `{}`", mask.name), shapes.num_vertices(), mask.weights.len())?;
    if n < 2 {
        return Err(RigError::invalid("shape set", "PCA needs at least two shapes"));
    }
    let max_k = (n - 1).min(dim);
    if k > max_k {
        return Err(RigError::invalid("components", format!("requested {k} components, at most {max_k} available from {n} shapes")));
    }
    let rows: Vec<Vec<f64>> = shapes.shapes.iter().map(|s| mask.apply(s)).collect();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| RigError::Numeric("SVD did not produce right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut c: Vec<f64> = v_t.row(idx).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = c.iter().copied().fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        singular_values.push(svd.singular_values[idx]);
    }
    let deficient = singular_values.iter().filter(|&&s| s < RANK_TOLERANCE).count();
    if deficient > 0 {
        log::warn!("region `{}`: {deficient} of {k} components have singular value below {RANK_TOLERANCE}", mask.name);
    }
    Ok(MaskedPca {
        region: mask.name.clone(),
        mean,
        components,
        singular_values,
        num_samples: n,
    })
}

/// Indices of components that are (nearly) negated by mirroring:
/// `‖C + mirror(C)‖ / ‖C‖ < τ`.
pub fn detect_asymmetric_components(components: &[Vec<f64>], sym: &SymmetryMap, threshold: f64) -> Vec<usize> {
    components
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return false;
            }
            let m = sym.mirror(c);
            let sum = c.iter().zip(&m).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
            sum / norm < threshold
        })
        .map(|(k, _)| k)
        .collect()
}

/// Concatenated regional bases.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpace {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub regions: Vec<String>,
    pub std_devs: Vec<f64>,
}

impl IdentitySpace {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn to_basis(&self) -> Result<BlendshapeBasis> {
        let v = self.mean.len() / 3;
        let mut counters: HashMap<&str, usize> = HashMap::new();
        let names = self
            .regions
            .iter()
            .map(|r| {
                let c = counters.entry(r.as_str()).or_default();
                *c += 1;
                format!("{r}_{:02}", *c - 1)
            })
            .collect();
        BlendshapeBasis::new(v, names, self.components.clone())?.with_std_devs(self.std_devs.clone())
    }
}

/// One region's PCA with the component indices to drop before truncation.
#[derive(Debug, Clone)]
pub struct RegionalResult {
    pub mask: RegionMask,
    pub pca: MaskedPca,
    pub dropped: Vec<usize>,
}

/// Sums regional means and concatenates regional components (after drops),
/// truncating each region to its requested count. Masks must sum to one at
/// every vertex.
pub fn assemble_identity_space(regions: &[RegionalResult], counts: &[usize]) -> Result<IdentitySpace> {
    check_len("region counts", regions.len(), counts.len())?;
    let first = regions.first().ok_or_else(|| RigError::Empty("identity regions".into()))?;
    let v = first.mask.weights.len();
    let mut worst = (0.0_f64, 0usize);
    for i in 0..v {
        let total: f64 = regions.iter().map(|r| r.mask.weights.get(i).copied().unwrap_or(f64::NAN)).sum();
        let dev = (total - 1.0).abs();
        if !(dev <= worst.0) {
            worst = (dev, i);
        }
    }
    if !(worst.0 <= 1e-6) {
        return Err(RigError::invalid("region masks", format!("not a partition of unity: max deviation {:.3e} at vertex {}", worst.0, worst.1)));
    }
    let mut mean = vec![0.0; 3 * v];
    let mut space = IdentitySpace {
        mean: Vec::new(),
        components: Vec::new(),
        singular_values: Vec::new(),
        regions: Vec::new(),
        std_devs: Vec::new(),
    };
    for (r, &count) in regions.iter().zip(counts) {
        check_len(&format!("region `{}` mean", r.mask.name), 3 * v, r.pca.mean.len())?;
        mean.iter_mut().zip(&r.pca.mean).for_each(|(m, x)| *m += x);
        let sds = r.pca.std_devs();
        let kept: Vec<usize> = (0..r.pca.components.len()).filter(|k| !r.dropped.contains(k)).take(count).collect();
        if kept.len() < count {
            return Err(RigError::invalid(
                format!("region `{}`", r.mask.name),
                format!("requested {count} components, {} available after removals", kept.len()),
            ));
        }
        for k in kept {
            space.components.push(r.pca.components[k].clone());
            space.singular_values.push(r.pca.singular_values[k]);
            space.std_devs.push(sds[k]);
            space.regions.push(r.mask.name.clone());
        }
    }
    space.mean = mean;
    Ok(space)
}

#[derive(Debug, Clone)]
pub struct IdentityBuildConfig {
    pub counts: Vec<usize>,
    pub mirror: bool,
    pub drop_asymmetric: bool,
    pub asymmetry_threshold: f64,
    /// Explicit per-region component indices to drop, in addition to detection.
    pub manual_drops: Vec<Vec<usize>>,
}

/// Full pipeline: optional mirroring, per-region PCA (in parallel), optional
/// asymmetric-component removal and assembly.
pub fn build_identity_space(shapes: &ShapeSet, masks: &[RegionMask], sym: Option<&SymmetryMap>, cfg: &IdentityBuildConfig) -> Result<IdentitySpace> {
    check_len("region counts", masks.len(), cfg.counts.len())?;
    let data = match (cfg.mirror, sym) {
        (true, Some(s)) => mirror_augment(shapes, s)?,
        (true, None) => return Err(RigError::invalid("mirror", "mirroring requested without a symmetry map")),
        (false, _) => shapes.clone(),
    };
    if cfg.drop_asymmetric && sym.is_none() {
        return Err(RigError::invalid("drop_asymmetric", "asymmetry detection needs a symmetry map"));
    }
    let regions = masks
        .par_iter()
        .enumerate()
        .map(|(r, mask)| {
            let extra = cfg.manual_drops.get(r).cloned().unwrap_or_default();
            let budget = (cfg.counts[r] + extra.len() + if cfg.drop_asymmetric { 4 } else { 0 }).min(data.len() - 1);
            let pca = masked_pca(&data, mask, budget)?;
            let mut dropped = extra;
            if let (true, Some(s)) = (cfg.drop_asymmetric, sym) {
                let flagged = detect_asymmetric_components(&pca.components, s, cfg.asymmetry_threshold);
                if !flagged.is_empty() {
                    log::info!("region `{}`: removing anti-symmetric components {flagged:?}", mask.name);
                }
                dropped.extend(flagged);
            }
            Ok(RegionalResult {
                mask: mask.clone(),
                pca,
                dropped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_identity_space(&regions, &cfg.counts)
}
