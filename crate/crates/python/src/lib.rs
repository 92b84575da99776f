//! Python bindings. Arrays cross the boundary as nested lists of floats;
//! numpy arrays are accepted anywhere a sequence is.

use std::collections::{BTreeMap, HashMap};

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rigkit::body_model::{ModelInputs, RigModel};
use rigkit::fitting::{self, FitConfig, FreeVariables, ScanTarget};
use rigkit::identity::{self, RegionMask, ShapeSet};
use rigkit::io::{self, SyntheticRigSpec};
use rigkit::lod::{transfer_rig, TransferOptions};
use rigkit::mesh::MeshTopology;
use rigkit::RigError;

fn py_err(e: RigError) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn flatten(points: Vec<[f64; 3]>) -> Vec<f64> {
    points.into_iter().flatten().collect()
}

fn unflatten(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// A complete rig: mesh, blendshapes, skeleton, skinning and correctives.
#[pyclass(name = "Rig", module = "rigkit")]
pub struct Rig {
    inner: RigModel,
}

enum Params {
    Named(HashMap<String, f64>),
    Dense(Vec<f64>),
}

impl<'a, 'py> FromPyObject<'a, 'py> for Params {
    type Error = PyErr;

    fn extract(ob: Borrowed<'a, 'py, PyAny>) -> PyResult<Self> {
        if let Ok(m) = ob.extract::<HashMap<String, f64>>() {
            return Ok(Params::Named(m));
        }
        Ok(Params::Dense(ob.extract::<Vec<f64>>()?))
    }
}

impl Rig {
    fn inputs(&self, params: Option<Params>, identity: Option<Vec<f64>>, expression: Option<Vec<f64>>) -> PyResult<ModelInputs> {
        let rig = &self.inner;
        let mut x = ModelInputs::zeros(rig);
        match params {
            None => {}
            Some(Params::Dense(v)) => {
                if v.len() != x.params.len() {
                    return Err(PyValueError::new_err(format!("expected {} parameters, got {}", x.params.len(), v.len())));
                }
                x.params.0 = v;
            }
            Some(Params::Named(m)) => {
                for (name, value) in m {
                    let i = rig
                        .parameter_transform
                        .find(&name)
                        .ok_or_else(|| PyValueError::new_err(format!("unknown parameter `{name}`")))?;
                    x.params.0[i] = value;
                }
            }
        }
        for (given, slot, what) in [(identity, &mut x.identity, "identity"), (expression, &mut x.expression, "expression")] {
            if let Some(c) = given {
                if c.len() > slot.len() {
                    return Err(PyValueError::new_err(format!("{what}: {} coefficients for a basis of {}", c.len(), slot.len())));
                }
                slot[..c.len()].copy_from_slice(&c);
            }
        }
        Ok(x)
    }
}

#[pymethods]
impl Rig {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::load_rig(path).map_err(py_err)? })
    }

    /// Procedural rig; `spec` is the generator JSON, the default humanoid otherwise.
    #[staticmethod]
    #[pyo3(signature = (spec=None, seed=None))]
    fn synthetic(spec: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut s: SyntheticRigSpec = match spec {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SyntheticRigSpec::default(),
        };
        if let Some(seed) = seed {
            s.seed = seed;
        }
        Ok(Self { inner: io::generate_synthetic_rig(&s).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_rig(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn joint_names(&self) -> Vec<String> {
        self.inner.skeleton.joints().iter().map(|j| j.name.clone()).collect()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.parameter_transform.params().iter().map(|p| p.name.clone()).collect()
    }

    #[getter]
    fn identity_components(&self) -> usize {
        self.inner.identity.len()
    }

    #[getter]
    fn expression_names(&self) -> Vec<String> {
        self.inner.expression.names.clone()
    }

    #[getter]
    fn has_correctives(&self) -> bool {
        self.inner.correctives.is_some()
    }

    fn template(&self) -> Vec<[f64; 3]> {
        unflatten(&self.inner.template)
    }

    fn triangles(&self) -> Vec<[usize; 3]> {
        self.inner.topology.triangles().to_vec()
    }

    /// Posed vertices. `params` is a name→value dict or a full-length list.
    #[pyo3(signature = (params=None, identity=None, expression=None))]
    fn evaluate(&self, params: Option<Params>, identity: Option<Vec<f64>>, expression: Option<Vec<f64>>) -> PyResult<Vec<[f64; 3]>> {
        let x = self.inputs(params, identity, expression)?;
        Ok(unflatten(&self.inner.forward(&x).map_err(py_err)?.posed))
    }

    #[pyo3(signature = (params=None, identity=None, expression=None))]
    fn joint_positions(&self, params: Option<Params>, identity: Option<Vec<f64>>, expression: Option<Vec<f64>>) -> PyResult<Vec<[f64; 3]>> {
        let x = self.inputs(params, identity, expression)?;
        let eval = self.inner.forward(&x).map_err(py_err)?;
        Ok((0..self.inner.skeleton.len())
            .map(|j| {
                let p = eval.joint_position(j);
                [p.x, p.y, p.z]
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Rig(vertices={}, joints={}, params={}, identity={})",
            self.inner.num_vertices(),
            self.inner.skeleton.len(),
            self.inner.parameter_transform.num_params(),
            self.inner.identity.len()
        )
    }
}

fn parse_free(text: &str) -> PyResult<FreeVariables> {
    let mut f = FreeVariables::NONE;
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "pose" => f.pose = true,
            "skeleton" => f.skeleton = true,
            "shape" | "identity" => f.identity = true,
            "expression" => f.expression = true,
            "skeleton_coeffs" => f.skeleton_coeffs = true,
            "offsets" => f.offsets = true,
            other => return Err(PyValueError::new_err(format!("unknown free group `{other}`"))),
        }
    }
    Ok(f)
}

/// Fits the rig to a point cloud; returns a dict with the fitted inputs,
/// the per-iteration loss trace and the mean data2model error in mm.
#[pyfunction]
#[pyo3(signature = (rig, points, keypoints=None, mask=None, iterations=2500, lr=0.01, components=None, free="pose,shape", max_points=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    rig: &Rig,
    points: Vec<[f64; 3]>,
    keypoints: Option<BTreeMap<String, [f64; 3]>>,
    mask: Option<Vec<bool>>,
    iterations: usize,
    lr: f64,
    components: Option<usize>,
    free: &str,
    max_points: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let rig = &rig.inner;
    let mut target = ScanTarget::new(flatten(points)).map_err(py_err)?;
    target.keypoints = keypoints.unwrap_or_default().into_iter().map(|(k, p)| (k, p.into())).collect();
    target.mask = mask;
    let cfg = FitConfig {
        iterations,
        learning_rate: lr,
        free: parse_free(free)?,
        identity_components: components,
        max_points,
        seed,
        ..FitConfig::default()
    };
    let result = py.detach(|| fitting::fit(rig, &target, &cfg, None)).map_err(py_err)?;
    let posed = rig.forward(&result.variables).map_err(py_err)?.posed;
    let err = fitting::evaluate_data2model(&target.points, &posed, &rig.topology, target.mask.as_deref()).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("params", result.variables.params.0.clone())?;
    out.set_item("identity", result.variables.identity.clone())?;
    out.set_item("expression", result.variables.expression.clone())?;
    out.set_item("trace", result.trace)?;
    out.set_item("vertices", unflatten(&posed))?;
    out.set_item("data2model_mm", err)?;
    out.set_item("wall_time_s", result.wall_time_s)?;
    Ok(out)
}

/// Mean closest-point distance from `points` to the mesh, in mm.
#[pyfunction]
#[pyo3(signature = (points, vertices, triangles, mask=None))]
fn data2model(points: Vec<[f64; 3]>, vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>, mask: Option<Vec<bool>>) -> PyResult<f64> {
    let topo = MeshTopology::new(vertices.len(), triangles).map_err(py_err)?;
    fitting::evaluate_data2model(&flatten(points), &flatten(vertices), &topo, mask.as_deref()).map_err(py_err)
}

/// PCA of mask-weighted shapes; returns mean, components, singular values and std devs.
#[pyfunction]
fn masked_pca<'py>(py: Python<'py>, shapes: Vec<Vec<[f64; 3]>>, weights: Vec<f64>, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let ids = (0..shapes.len()).map(|i| i.to_string()).collect();
    let set = ShapeSet::new(shapes.into_iter().map(flatten).collect(), ids).map_err(py_err)?;
    let mask = RegionMask::new("region", weights).map_err(py_err)?;
    let pca = identity::masked_pca(&set, &mask, k).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mean", unflatten(&pca.mean))?;
    out.set_item("components", pca.components.iter().map(|c| unflatten(c)).collect::<Vec<_>>())?;
    out.set_item("std_devs", pca.std_devs())?;
    out.set_item("singular_values", pca.singular_values)?;
    Ok(out)
}

/// Transfers a rig onto another mesh of the same character.
#[pyfunction]
#[pyo3(signature = (rig, vertices, triangles, smooth=false, reinit_masks=false))]
fn transfer(rig: &Rig, vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>, smooth: bool, reinit_masks: bool) -> PyResult<Rig> {
    let topo = MeshTopology::new(vertices.len(), triangles).map_err(py_err)?;
    let opts = TransferOptions {
        smooth,
        reinit_masks,
        ..TransferOptions::default()
    };
    Ok(Rig {
        inner: transfer_rig(&rig.inner, topo, flatten(vertices), opts).map_err(py_err)?,
    })
}

#[pymodule]
#[pyo3(name = "rigkit")]
fn rigkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Rig>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(data2model, m)?)?;
    m.add_function(wrap_pyfunction!(masked_pca, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    Ok(())
}
