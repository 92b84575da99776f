//! JSON side files: model inputs, keypoints, vertex masks, scan targets and
//! corrective datasets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::mesh_io::{load_points, save_points};
use crate::body_model::{ModelInputs, RigModel};
use crate::correctives::{CorrectiveSample, TargetSpace};
use crate::error::{check_len, Result, RigError};
use crate::fitting::ScanTarget;
use crate::math::Vec3;
use crate::skeleton::ModelParameters;

pub(crate) fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| RigError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RigError::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| RigError::io(path, e))
}

fn number_list(v: &Value, what: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| RigError::invalid(what, "expected an array of numbers"))?;
    arr.iter().map(|x| x.as_f64().ok_or_else(|| RigError::invalid(what, "non-numeric entry"))).collect()
}

/// `{"params": {name: value}, "identity": [...], "expression": [...],
/// "skeleton_coeffs": [...]}`; omitted entries are zero.
pub fn inputs_to_json(rig: &RigModel, x: &ModelInputs) -> Value {
    let mut params = Map::new();
    for (p, v) in rig.parameter_transform.params().iter().zip(&x.params.0) {
        params.insert(p.name.clone(), Value::from(*v));
    }
    let mut out = Map::new();
    out.insert("params".into(), Value::Object(params));
    out.insert("identity".into(), Value::from(x.identity.clone()));
    out.insert("expression".into(), Value::from(x.expression.clone()));
    if let Some(k) = &x.skeleton_coeffs {
        out.insert("skeleton_coeffs".into(), Value::from(k.clone()));
    }
    Value::Object(out)
}

/// Inverse of [`inputs_to_json`]. `params` may also be a full-length array.
pub fn inputs_from_json(rig: &RigModel, v: &Value) -> Result<ModelInputs> {
    let mut x = ModelInputs::zeros(rig);
    let obj = v.as_object().ok_or_else(|| RigError::invalid("model inputs", "expected a JSON object"))?;
    match obj.get("params") {
        None | Some(Value::Null) => {}
        Some(Value::Array(_)) => {
            let p = number_list(&obj["params"], "params")?;
            check_len("params", x.params.len(), p.len())?;
            x.params = ModelParameters(p);
        }
        Some(Value::Object(m)) => {
            for (name, val) in m {
                let k = rig.parameter_transform.find(name).ok_or_else(|| RigError::UnknownName(name.clone()))?;
                x.params.0[k] = val.as_f64().ok_or_else(|| RigError::invalid(format!("params.{name}"), "not a number"))?;
            }
        }
        Some(_) => return Err(RigError::invalid("params", "expected an object or array")),
    }
    for (key, dst) in [("identity", &mut x.identity), ("expression", &mut x.expression)] {
        if let Some(val) = obj.get(key) {
            let src = number_list(val, key)?;
            if src.len() > dst.len() {
                return Err(RigError::dims(key, dst.len(), src.len()));
            }
            dst[..src.len()].copy_from_slice(&src);
        }
    }
    if let Some(val) = obj.get("skeleton_coeffs") {
        let basis = rig.skeleton_basis.as_ref().ok_or_else(|| RigError::invalid("skeleton_coeffs", "rig has no skeleton basis"))?;
        let k = number_list(val, "skeleton_coeffs")?;
        check_len("skeleton_coeffs", basis.num_coefficients(), k.len())?;
        x.skeleton_coeffs = Some(k);
    }
    Ok(x)
}

pub fn load_inputs(rig: &RigModel, path: impl AsRef<Path>) -> Result<ModelInputs> {
    inputs_from_json(rig, &read_json(path.as_ref())?)
}

pub fn save_inputs(rig: &RigModel, path: impl AsRef<Path>, x: &ModelInputs) -> Result<()> {
    write_json(path.as_ref(), &inputs_to_json(rig, x))
}

/// `name=value` pairs separated by commas, e.g. `pelvis_ry=0.3,head_rx=-0.1`.
pub fn parse_inline_params(rig: &RigModel, text: &str) -> Result<ModelInputs> {
    let mut x = ModelInputs::zeros(rig);
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, value) = item.split_once('=').ok_or_else(|| RigError::invalid("inline params", format!("`{item}` is not name=value")))?;
        let k = rig.parameter_transform.find(name.trim()).ok_or_else(|| RigError::UnknownName(name.trim().into()))?;
        x.params.0[k] = value.trim().parse().map_err(|_| RigError::invalid(format!("params.{name}"), format!("`{value}` is not a number")))?;
    }
    Ok(x)
}

/// `{joint_name: [x, y, z]}`.
pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<(String, Vec3)>> {
    let v = read_json(path.as_ref())?;
    let obj = v.as_object().ok_or_else(|| RigError::invalid("keypoints", "expected an object of name: [x, y, z]"))?;
    obj.iter()
        .map(|(name, p)| {
            let c = number_list(p, &format!("keypoints.{name}"))?;
            check_len(&format!("keypoints.{name}"), 3, c.len())?;
            Ok((name.clone(), Vec3::new(c[0], c[1], c[2])))
        })
        .collect()
}

pub fn save_keypoints(path: impl AsRef<Path>, keypoints: &[(String, Vec3)]) -> Result<()> {
    let obj: Map<String, Value> = keypoints.iter().map(|(n, p)| (n.clone(), Value::from(vec![p.x, p.y, p.z]))).collect();
    write_json(path.as_ref(), &Value::Object(obj))
}

/// `{"masked_vertices": [i, ...]}` or a bare index array.
pub fn load_vertex_mask(path: impl AsRef<Path>, num_vertices: usize) -> Result<Vec<bool>> {
    let v = read_json(path.as_ref())?;
    let list = v.get("masked_vertices").unwrap_or(&v);
    let idx = number_list(list, "masked_vertices")?;
    let mut mask = vec![false; num_vertices];
    for i in idx {
        if i < 0.0 || i.fract() != 0.0 || i as usize >= num_vertices {
            return Err(RigError::invalid("masked_vertices", format!("{i} is not a vertex index below {num_vertices}")));
        }
        mask[i as usize] = true;
    }
    Ok(mask)
}

pub fn save_vertex_mask(path: impl AsRef<Path>, mask: &[bool]) -> Result<()> {
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    write_json(path.as_ref(), &serde_json::json!({ "masked_vertices": idx }))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes `<dir>/<stem>.ply` plus `.keypoints.json` and `.mask.json` side
/// files when present. Returns the point-cloud path.
pub fn save_scan_target(dir: impl AsRef<Path>, stem: &str, target: &ScanTarget) -> Result<PathBuf> {
    let ply = dir.as_ref().join(format!("{stem}.ply"));
    save_points(&ply, &target.points)?;
    if !target.keypoints.is_empty() {
        save_keypoints(sibling(&ply, "keypoints.json"), &target.keypoints)?;
    }
    if let Some(m) = &target.mask {
        save_vertex_mask(sibling(&ply, "mask.json"), m)?;
    }
    Ok(ply)
}

/// Loads a point cloud and picks up side files next to it unless explicit
/// paths are given.
pub fn load_scan_target(path: impl AsRef<Path>, keypoints: Option<&Path>, mask: Option<&Path>, num_vertices: usize) -> Result<ScanTarget> {
    let path = path.as_ref();
    let mut target = ScanTarget::new(load_points(path)?)?;
    let kp = keypoints.map(Path::to_path_buf).unwrap_or_else(|| sibling(path, "keypoints.json"));
    if keypoints.is_some() || kp.exists() {
        target.keypoints = load_keypoints(&kp)?;
    }
    let mk = mask.map(Path::to_path_buf).unwrap_or_else(|| sibling(path, "mask.json"));
    if mask.is_some() || mk.exists() {
        target.mask = Some(load_vertex_mask(&mk, num_vertices)?);
    }
    Ok(target)
}

/// Optional `<stem>.init.json` next to a scan.
pub fn init_path(scan: &Path) -> PathBuf {
    sibling(scan, "init.json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    space: String,
    num_vertices: usize,
    params: Vec<Vec<f64>>,
    targets_file: String,
}

/// `dataset.json` with per-sample parameter vectors and a raw little-endian
/// f32 target matrix `[samples, 3V]`.
pub fn save_corrective_dataset(dir: impl AsRef<Path>, samples: &[CorrectiveSample], space: TargetSpace) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RigError::io(dir, e))?;
    let num_vertices = samples.first().map_or(0, |s| s.target.len() / 3);
    let header = DatasetHeader {
        space: match space {
            TargetSpace::Residual => "residual",
            TargetSpace::Posed => "posed",
        }
        .into(),
        num_vertices,
        params: samples.iter().map(|s| s.params.0.clone()).collect(),
        targets_file: "targets.f32".into(),
    };
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.target.iter().flat_map(|&v| (v as f32).to_le_bytes())).collect();
    let bin = dir.join(&header.targets_file);
    fs::write(&bin, bytes).map_err(|e| RigError::io(&bin, e))?;
    write_json(&dir.join("dataset.json"), &header)
}

pub fn load_corrective_dataset(dir: impl AsRef<Path>, rig: &RigModel) -> Result<(Vec<CorrectiveSample>, TargetSpace)> {
    let dir = dir.as_ref();
    let path = dir.join("dataset.json");
    let header: DatasetHeader = serde_json::from_value(read_json(&path)?).map_err(|e| RigError::Format(format!("{}: {e}", path.display())))?;
    let space = match header.space.as_str() {
        "residual" => TargetSpace::Residual,
        "posed" => TargetSpace::Posed,
        other => return Err(RigError::invalid("dataset.space", format!("`{other}` is neither residual nor posed"))),
    };
    check_len("dataset vertices", rig.num_vertices(), header.num_vertices)?;
    let bin = dir.join(&header.targets_file);
    let bytes = fs::read(&bin).map_err(|e| RigError::io(&bin, e))?;
    let row = 3 * header.num_vertices;
    check_len("dataset target bytes", 4 * row * header.params.len(), bytes.len())?;
    let values: Vec<f64> = bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    let samples = header
        .params
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            check_len(&format!("dataset params[{k}]"), rig.parameter_transform.num_params(), p.len())?;
            Ok(CorrectiveSample {
                params: ModelParameters(p),
                target: values[k * row..(k + 1) * row].to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((samples, space))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{generate_synthetic_rig, SyntheticRigSpec};

    fn rig() -> RigModel {
        generate_synthetic_rig(&SyntheticRigSpec::default()).unwrap()
    }

    #[test]
    fn inputs_round_trip() {
        let rig = rig();
        let mut x = ModelInputs::zeros(&rig);
        x.params.0[4] = 0.25;
        x.identity[3] = -0.5;
        x.expression[1] = 0.75;
        let back = inputs_from_json(&rig, &inputs_to_json(&rig, &x)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn inline_params_and_unknown_names() {
        let rig = rig();
        let x = parse_inline_params(&rig, "pelvis_ry=0.3, head_rx=-0.1").unwrap();
        assert_eq!(x.params.0[rig.parameter_transform.find("pelvis_ry").unwrap()], 0.3);
        assert!(matches!(parse_inline_params(&rig, "nope=1"), Err(RigError::UnknownName(_))));
        assert!(parse_inline_params(&rig, "pelvis_ry").is_err());
    }

    #[test]
    fn scan_target_side_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ScanTarget::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        t.keypoints = vec![("head".into(), Vec3::new(0.0, 1.5, 0.25))];
        t.mask = Some(vec![false, true, false, true]);
        let ply = save_scan_target(dir.path(), "target_000", &t).unwrap();
        let back = load_scan_target(&ply, None, None, 4).unwrap();
        assert_eq!(back.points, t.points);
        assert_eq!(back.keypoints, t.keypoints);
        assert_eq!(back.mask, t.mask);
    }

    #[test]
    fn mask_indices_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, "[0, 7]").unwrap();
        assert!(load_vertex_mask(&p, 5).is_err());
        assert_eq!(load_vertex_mask(&p, 8).unwrap().iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn dataset_round_trip_at_f32_precision() {
        let rig = rig();
        let samples = vec![CorrectiveSample {
            params: ModelParameters(vec![0.1; rig.parameter_transform.num_params()]),
            target: (0..3 * rig.num_vertices()).map(|i| i as f64 * 1e-4).collect(),
        }];
        let dir = tempfile::tempdir().unwrap();
        save_corrective_dataset(dir.path(), &samples, TargetSpace::Posed).unwrap();
        let (back, space) = load_corrective_dataset(dir.path(), &rig).unwrap();
        assert_eq!(space, TargetSpace::Posed);
        assert_eq!(back[0].params, samples[0].params);
        for (a, b) in back[0].target.iter().zip(&samples[0].target) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1e-3));
        }
    }
}
