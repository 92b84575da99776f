//! Rig container: `RIGKIT\0\0`, u64 LE header length, JSON header, then a
//! payload of little-endian f32 arrays (row-major) addressed by the header's
//! `sections` table as `(name, byte offset, shape)`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::body_model::{BlendshapeBasis, LodEntry, RigModel, SkeletonBasis, SkinWeights};
use crate::correctives::{CorrectiveConfig, CorrectiveModel, JointCorrective, NEIGHBORHOOD_ARITY};
use crate::error::{Result, RigError};
use crate::math::{EulerXYZ, Vec3};
use crate::mesh::MeshTopology;
use crate::skeleton::{Joint, ParameterInfo, ParameterTransform, Skeleton, Triplet, DOFS_PER_JOINT};

pub const MAGIC: &[u8; 8] = b"RIGKIT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointHeader {
    name: String,
    parent: Option<usize>,
    offset: [f64; 3],
    prerotation_deg: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParameterTransformHeader {
    parameters: Vec<ParameterInfo>,
    /// `(row, col, weight)`.
    triplets: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeshHeader {
    vertices: usize,
    triangles: usize,
    max_influences: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisHeader {
    names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    regions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrectiveJointHeader {
    joint: usize,
    neighborhood: [Option<usize>; NEIGHBORHOOD_ARITY],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrectivesHeader {
    config: CorrectiveConfig,
    joints: Vec<CorrectiveJointHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Section {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    skeleton: Vec<JointHeader>,
    parameter_transform: ParameterTransformHeader,
    mesh: MeshHeader,
    identity: BasisHeader,
    expression: BasisHeader,
    skeleton_basis: Option<BasisHeader>,
    correctives: Option<CorrectivesHeader>,
    lods: Vec<LodEntry>,
    sections: Vec<Section>,
    #[serde(flatten)]
    extras: Map<String, Value>,
}

#[derive(Default)]
struct PayloadWriter {
    sections: Vec<Section>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push<'a>(&mut self, name: impl Into<String>, shape: Vec<usize>, values: impl IntoIterator<Item = &'a f64>) {
        let offset = self.bytes.len();
        let mut count = 0;
        for v in values {
            self.bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            count += 1;
        }
        debug_assert_eq!(count, shape.iter().product::<usize>());
        self.sections.push(Section { name: name.into(), offset, shape });
    }
}

struct PayloadReader<'a> {
    sections: &'a [Section],
    bytes: &'a [u8],
}

impl PayloadReader<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let s = self
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| RigError::Format(format!("missing payload section `{name}`")))?;
        if s.shape != shape {
            return Err(RigError::Format(format!("section `{name}` has shape {:?}, header implies {shape:?}", s.shape)));
        }
        let len = 4 * shape.iter().product::<usize>();
        let end = s.offset.checked_add(len).ok_or_else(|| RigError::Format(format!("section `{name}` offset overflows")))?;
        if end > self.bytes.len() {
            return Err(RigError::Format(format!(
                "section `{name}` is truncated: needs bytes {}..{end} but the payload has {}",
                s.offset,
                self.bytes.len()
            )));
        }
        Ok(self.bytes[s.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }

    fn get_indices(&self, name: &str, shape: &[usize]) -> Result<Vec<usize>> {
        self.get(name, shape)?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(RigError::Format(format!("section `{name}` holds non-integral index {v}")))
                }
            })
            .collect()
    }
}

fn corrective_section(k: usize, what: &str) -> String {
    format!("correctives.{k}.{what}")
}

/// Serialises `rig` into the container byte layout.
pub fn rig_to_bytes(rig: &RigModel) -> Result<Vec<u8>> {
    let v = rig.num_vertices();
    let k = rig.skin.max_influences();
    let mut payload = PayloadWriter::default();
    payload.push("template", vec![v, 3], &rig.template);
    let tris: Vec<f64> = rig.topology.triangles().iter().flatten().map(|&i| i as f64).collect();
    if v >= 16_777_216 {
        return Err(RigError::Format("vertex count exceeds exact f32 index range".into()));
    }
    payload.push("triangles", vec![rig.topology.triangles().len(), 3], &tris);
    for (name, basis) in [("identity", &rig.identity), ("expression", &rig.expression)] {
        let flat: Vec<f64> = basis.components().flat_map(|c| c.iter().copied()).collect();
        payload.push(name, vec![basis.len(), v, 3], &flat);
        payload.push(format!("{name}.std_devs"), vec![basis.len()], &basis.std_devs);
    }
    let mut skin_j = Vec::with_capacity(v * k);
    let mut skin_w = Vec::with_capacity(v * k);
    for i in 0..v {
        let infl: Vec<(usize, f64)> = rig.skin.influences(i).collect();
        for s in 0..k {
            let (j, w) = infl.get(s).copied().unwrap_or((0, 0.0));
            skin_j.push(j as f64);
            skin_w.push(w);
        }
    }
    payload.push("skin.joints", vec![v, k], &skin_j);
    payload.push("skin.weights", vec![v, k], &skin_w);
    if let Some(b) = &rig.skeleton_basis {
        payload.push("skeleton_basis", vec![b.num_outputs(), b.num_coefficients()], b.matrix());
    }
    if let Some(c) = &rig.correctives {
        for (n, jc) in c.joints.iter().enumerate() {
            for (l, layer) in jc.layers.iter().enumerate() {
                // nalgebra is column-major; store row-major
                let rows: Vec<f64> = layer.transpose().as_slice().to_vec();
                payload.push(corrective_section(n, &format!("layer{l}")), vec![layer.nrows(), layer.ncols()], &rows);
            }
            payload.push(corrective_section(n, "mask"), vec![v], &jc.mask);
            payload.push(corrective_section(n, "weights"), vec![3 * v, c.config.embedding], &jc.weights);
        }
    }
    let header = Header {
        format: "rigkit".into(),
        version: FORMAT_VERSION,
        skeleton: rig
            .skeleton
            .joints()
            .iter()
            .map(|j| JointHeader {
                name: j.name.clone(),
                parent: j.parent,
                offset: [j.offset.x, j.offset.y, j.offset.z],
                prerotation_deg: j.prerotation.to_degrees(),
            })
            .collect(),
        parameter_transform: ParameterTransformHeader {
            parameters: rig.parameter_transform.params().to_vec(),
            triplets: rig.parameter_transform.triplets().iter().map(|t| (t.row, t.col, t.weight)).collect(),
        },
        mesh: MeshHeader {
            vertices: v,
            triangles: rig.topology.triangles().len(),
            max_influences: k,
        },
        identity: BasisHeader {
            names: rig.identity.names.clone(),
            regions: rig.identity_regions.clone(),
        },
        expression: BasisHeader {
            names: rig.expression.names.clone(),
            regions: Vec::new(),
        },
        skeleton_basis: rig.skeleton_basis.as_ref().map(|b| BasisHeader {
            names: b.names.clone(),
            regions: Vec::new(),
        }),
        correctives: rig.correctives.as_ref().map(|c| CorrectivesHeader {
            config: c.config.clone(),
            joints: c
                .joints
                .iter()
                .map(|jc| CorrectiveJointHeader {
                    joint: jc.joint,
                    neighborhood: jc.neighborhood,
                })
                .collect(),
        }),
        lods: rig.lods.clone(),
        sections: payload.sections,
        extras: rig.extras.clone(),
    };
    let json = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

/// Parses and fully validates a rig from container bytes.
pub fn rig_from_bytes(bytes: &[u8]) -> Result<RigModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(RigError::Format("not a rig file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() - 16 < hlen {
        return Err(RigError::Format(format!("header is truncated: declares {hlen} bytes, {} available", bytes.len() - 16)));
    }
    let raw: Value = serde_json::from_slice(&bytes[16..16 + hlen])?;
    match raw.get("version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(RigError::Format(format!("unsupported rig version {v} (this build reads version {FORMAT_VERSION})"))),
        None => return Err(RigError::Format("header has no version field".into())),
    }
    let header: Header = serde_json::from_value(raw)?;
    let payload = PayloadReader {
        sections: &header.sections,
        bytes: &bytes[16 + hlen..],
    };
    let v = header.mesh.vertices;
    let k = header.mesh.max_influences;

    let joints = header
        .skeleton
        .iter()
        .map(|j| Joint::new(j.name.clone(), j.parent, Vec3::from(j.offset), EulerXYZ::from_degrees(j.prerotation_deg)))
        .collect::<Vec<_>>();
    // joints may be stored in any order; every joint index below is remapped
    let (skeleton, new_index) = Skeleton::from_unsorted(joints)?;
    let remap = |j: usize| new_index.get(j).copied().unwrap_or(j);
    let triplets = header
        .parameter_transform
        .triplets
        .iter()
        .map(|&(row, col, weight)| Triplet {
            row: DOFS_PER_JOINT * remap(row / DOFS_PER_JOINT) + row % DOFS_PER_JOINT,
            col,
            weight,
        })
        .collect();
    let parameter_transform = ParameterTransform::new(skeleton.len(), header.parameter_transform.parameters.clone(), triplets)?;

    let template = payload.get("template", &[v, 3])?;
    let tri_idx = payload.get_indices("triangles", &[header.mesh.triangles, 3])?;
    let topology = MeshTopology::new(v, tri_idx.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect())?;
    let mut bases = Vec::new();
    for (name, h) in [("identity", &header.identity), ("expression", &header.expression)] {
        let n = h.names.len();
        let flat = payload.get(name, &[n, v, 3])?;
        let deltas = if n == 0 { Vec::new() } else { flat.chunks_exact(3 * v).map(<[f64]>::to_vec).collect() };
        let sds = payload.get(&format!("{name}.std_devs"), &[n])?;
        bases.push(BlendshapeBasis::new(v, h.names.clone(), deltas)?.with_std_devs(sds)?);
    }
    let expression = bases.pop().expect("two bases");
    let identity = bases.pop().expect("two bases");

    let sj = payload.get_indices("skin.joints", &[v, k])?;
    let sw = payload.get("skin.weights", &[v, k])?;
    let lists = (0..v).map(|i| (0..k).map(|s| (remap(sj[i * k + s]), sw[i * k + s])).filter(|e| e.1 != 0.0).collect()).collect();
    let skin = SkinWeights::new(lists, k, skeleton.len())?;

    let skeleton_basis = match &header.skeleton_basis {
        Some(h) => {
            let rows = parameter_transform.skeleton_indices().len();
            let m = payload.get("skeleton_basis", &[rows, h.names.len()])?;
            Some(SkeletonBasis::new(rows, h.names.clone(), m)?)
        }
        None => None,
    };
    let correctives = match &header.correctives {
        Some(h) => {
            let c = h.config.embedding;
            let shapes = h.config.layer_shapes();
            let mut joints = Vec::with_capacity(h.joints.len());
            for (n, jh) in h.joints.iter().enumerate() {
                let layers = shapes
                    .iter()
                    .enumerate()
                    .map(|(l, &(r, cols))| {
                        let rows = payload.get(&corrective_section(n, &format!("layer{l}")), &[r, cols])?;
                        Ok(DMatrix::from_row_slice(r, cols, &rows))
                    })
                    .collect::<Result<Vec<_>>>()?;
                joints.push(JointCorrective {
                    joint: remap(jh.joint),
                    neighborhood: jh.neighborhood.map(|a| a.map(remap)),
                    layers,
                    mask: payload.get(&corrective_section(n, "mask"), &[v])?,
                    weights: payload.get(&corrective_section(n, "weights"), &[3 * v, c])?,
                });
            }
            joints.sort_by_key(|jc| jc.joint);
            Some(CorrectiveModel {
                config: h.config.clone(),
                num_vertices: v,
                joints,
            })
        }
        None => None,
    };
    let mut rig = RigModel::new(topology, template, identity, expression, skin, skeleton, parameter_transform, correctives, skeleton_basis)?;
    rig.identity_regions = header.identity.regions.clone();
    rig.lods = header.lods.clone();
    rig.extras = header.extras.clone();
    rig.validate()?;
    Ok(rig)
}

pub fn save_rig(path: impl AsRef<Path>, rig: &RigModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, rig_to_bytes(rig)?).map_err(|e| RigError::io(path, e))
}

pub fn load_rig(path: impl AsRef<Path>) -> Result<RigModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RigError::io(path, e))?;
    rig_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::ModelInputs;
    use crate::correctives::CorrectiveConfig;
    use crate::io::synth::{generate_synthetic_rig, sample_pose, SyntheticRigSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(correctives: bool) -> RigModel {
        let spec = SyntheticRigSpec {
            correctives: correctives.then(|| CorrectiveConfig {
                hidden: vec![4],
                embedding: 2,
                ..CorrectiveConfig::default()
            }),
            ..SyntheticRigSpec::chain(3, 6, 2)
        };
        generate_synthetic_rig(&spec).unwrap()
    }

    fn split(bytes: &[u8]) -> (Value, &[u8]) {
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        (serde_json::from_slice(&bytes[16..16 + hlen]).unwrap(), &bytes[16 + hlen..])
    }

    fn join(header: &Value, payload: &[u8]) -> Vec<u8> {
        let h = serde_json::to_vec(header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(payload);
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn round_trip_is_stable_after_first_save() {
        let rig = small(true);
        let bytes = rig_to_bytes(&rig).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let loaded = rig_from_bytes(&bytes).unwrap();
        assert!(max_diff(&loaded.template, &rig.template) < 1e-6);
        assert_eq!(loaded.skeleton, rig.skeleton);
        assert_eq!(loaded.topology, rig.topology);
        // values are f32-representable after one trip
        assert_eq!(rig_to_bytes(&loaded).unwrap(), bytes);
    }

    #[test]
    fn angles_are_stored_in_degrees() {
        let rig = small(false);
        let (header, _) = split(&rig_to_bytes(&rig).unwrap());
        let j1 = &header["skeleton"][1]["prerotation_deg"];
        let expected = rig.skeleton.joints()[1].prerotation.to_degrees();
        for a in 0..3 {
            assert!((j1[a].as_f64().unwrap() - expected[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_header_fields_survive() {
        let bytes = rig_to_bytes(&small(false)).unwrap();
        let (mut header, payload) = split(&bytes);
        header["studio_notes"] = serde_json::json!({"author": "x"});
        let loaded = rig_from_bytes(&join(&header, payload)).unwrap();
        let (again, _) = split(&rig_to_bytes(&loaded).unwrap());
        assert_eq!(again["studio_notes"]["author"], "x");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = rig_to_bytes(&small(false)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(rig_from_bytes(&bad), Err(RigError::Format(_))));
        assert!(rig_from_bytes(&bytes[..20]).is_err());
        assert!(rig_from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let (mut header, payload) = split(&bytes);
        header["version"] = 99.into();
        let err = rig_from_bytes(&join(&header, payload)).unwrap_err().to_string();
        assert!(err.contains("99"), "{err}");
    }

    #[test]
    fn unsorted_joints_are_remapped() {
        let rig = rig_from_bytes(&rig_to_bytes(&small(true)).unwrap()).unwrap();
        let bytes = rig_to_bytes(&rig).unwrap();
        let (mut header, payload) = split(&bytes);
        // stored slot s holds original joint order[s]
        let order = [2usize, 0, 1];
        let mut slot = [0usize; 3];
        for (s, &o) in order.iter().enumerate() {
            slot[o] = s;
        }
        let joints = header["skeleton"].as_array().unwrap().clone();
        header["skeleton"] = order
            .iter()
            .map(|&o| {
                let mut j = joints[o].clone();
                if let Some(p) = j["parent"].as_u64() {
                    j["parent"] = (slot[p as usize] as u64).into();
                }
                j
            })
            .collect::<Vec<_>>()
            .into();
        for t in header["parameter_transform"]["triplets"].as_array_mut().unwrap() {
            let row = t[0].as_u64().unwrap() as usize;
            t[0] = ((DOFS_PER_JOINT * slot[row / DOFS_PER_JOINT] + row % DOFS_PER_JOINT) as u64).into();
        }
        for c in header["correctives"]["joints"].as_array_mut().unwrap() {
            c["joint"] = (slot[c["joint"].as_u64().unwrap() as usize] as u64).into();
            for n in c["neighborhood"].as_array_mut().unwrap() {
                if let Some(a) = n.as_u64() {
                    *n = (slot[a as usize] as u64).into();
                }
            }
        }
        let sections: Vec<Section> = serde_json::from_value(header["sections"].clone()).unwrap();
        let skin = sections.iter().find(|s| s.name == "skin.joints").unwrap();
        let mut payload = payload.to_vec();
        for k in 0..skin.shape.iter().product::<usize>() {
            let at = skin.offset + 4 * k;
            let j = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as usize;
            payload[at..at + 4].copy_from_slice(&(slot[j] as f32).to_le_bytes());
        }
        let shuffled = rig_from_bytes(&join(&header, &payload)).unwrap();
        assert_eq!(shuffled.skeleton, rig.skeleton);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = ModelInputs {
                params: sample_pose(&rig, &mut rng, 1.0),
                ..ModelInputs::zeros(&rig)
            };
            assert_eq!(shuffled.forward(&x).unwrap().posed, rig.forward(&x).unwrap().posed);
        }
    }
}
