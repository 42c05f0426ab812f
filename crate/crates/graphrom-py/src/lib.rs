//! Python bindings: mesh and field I/O, the synthetic case generator, and a
//! checkpoint-backed surrogate for inference from Python.

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{s, Array2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use graphrom::aero::{integrate_coefficients, moment_reference, AeroReference};
use graphrom::checkpoint::{LevelsCheckpoint, ModelCheckpoint};
use graphrom::dataset;
use graphrom::graph::build_graph;
use graphrom::mesh::{FieldSet as LibFieldSet, SurfaceMesh};
use graphrom::model::{Model, ModelGeometry};
use graphrom::training::Scalers;

fn to_py_err(e: graphrom::Error) -> PyErr {
    match e {
        graphrom::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(values: &Array2<f64>) -> Vec<Vec<f64>> {
    values.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Triangulated surface mesh.
#[pyclass(frozen)]
struct Mesh {
    inner: SurfaceMesh,
}

#[pymethods]
impl Mesh {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Mesh { inner: SurfaceMesh::load(path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py_err)
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.n_cells()
    }

    fn total_area(&self) -> f64 {
        self.inner.total_area()
    }

    fn nodes(&self) -> Vec<(f64, f64, f64)> {
        self.inner.nodes().iter().map(|n| (n[0], n[1], n[2])).collect()
    }

    fn cells(&self) -> Vec<(usize, usize, usize)> {
        self.inner.cells().iter().map(|c| (c[0], c[1], c[2])).collect()
    }

    fn __repr__(&self) -> String {
        format!("Mesh({} nodes, {} cells)", self.inner.n_nodes(), self.inner.n_cells())
    }
}

/// Named per-node field columns.
#[pyclass(frozen, name = "FieldSet")]
struct FieldSet {
    inner: LibFieldSet,
}

#[pymethods]
impl FieldSet {
    #[new]
    fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> PyResult<Self> {
        let ncols = names.len();
        let nrows = values.len();
        let mut flat = Vec::with_capacity(nrows * ncols);
        for (i, row) in values.iter().enumerate() {
            if row.len() != ncols {
                return Err(PyValueError::new_err(format!(
                    "row {i} has {} values for {ncols} field names",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        let values = Array2::from_shape_vec((nrows, ncols), flat)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(FieldSet { inner: LibFieldSet::new(names, values).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(FieldSet { inner: LibFieldSet::load(path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py_err)
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    fn values(&self) -> Vec<Vec<f64>> {
        rows(self.inner.values())
    }

    fn channel(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner
            .channel(name)
            .map(|c| c.to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no field named {name:?}")))
    }

    fn __repr__(&self) -> String {
        format!("FieldSet({:?}, {} nodes)", self.inner.names(), self.inner.n_nodes())
    }
}

/// Analytic transonic-wing case: swept tapered plate with a pseudo-shock.
#[pyclass(frozen, name = "SyntheticCase")]
struct SyntheticCase {
    inner: dataset::SyntheticCase,
}

#[pymethods]
impl SyntheticCase {
    #[new]
    #[pyo3(signature = (*, nx=30, ny=30, chord=1.0, span=1.2, sweep_deg=20.0, taper=0.6,
                        shock_delta=0.08, load_scale=0.45, shock_x0=0.35,
                        shock_per_mach=1.8, shock_per_aoa=0.02))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        nx: usize,
        ny: usize,
        chord: f64,
        span: f64,
        sweep_deg: f64,
        taper: f64,
        shock_delta: f64,
        load_scale: f64,
        shock_x0: f64,
        shock_per_mach: f64,
        shock_per_aoa: f64,
    ) -> PyResult<Self> {
        let inner = dataset::SyntheticCase {
            nx,
            ny,
            chord,
            span,
            sweep_deg,
            taper,
            shock_delta,
            load_scale,
            shock_x0,
            shock_per_mach,
            shock_per_aoa,
        };
        inner.validate().map_err(to_py_err)?;
        Ok(SyntheticCase { inner })
    }

    fn build_mesh(&self) -> PyResult<Mesh> {
        Ok(Mesh { inner: self.inner.build_mesh().map_err(to_py_err)? })
    }

    /// Per-node target rows `[cp, cfx, cfy, cfz]` at one operating point.
    fn fields(&self, aoa: f64, mach: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.fields(aoa, mach).map_err(to_py_err)?))
    }

    /// Chordwise pseudo-shock station as a chord fraction.
    fn shock_position(&self, aoa: f64, mach: f64) -> f64 {
        self.inner.shock_position(aoa, mach)
    }

    #[getter]
    fn chord(&self) -> f64 {
        self.inner.chord
    }
}

/// A trained model reattached to its mesh and pooling levels, ready for
/// inference.
#[pyclass(frozen)]
struct Surrogate {
    mesh: SurfaceMesh,
    model: Model,
    scalers: Scalers,
}

impl Surrogate {
    fn predict_physical(&self, aoa: f64, mach: f64) -> PyResult<Array2<f64>> {
        let features = self.scalers.input_features(&self.mesh, aoa, mach);
        let norm = self.model.predict(&features.view()).map_err(to_py_err)?;
        Ok(self.scalers.denormalize_targets(&norm.view()))
    }
}

#[pymethods]
impl Surrogate {
    /// Load a mesh, a levels checkpoint, and a model checkpoint written by
    /// the pipeline; the three must belong together.
    #[staticmethod]
    fn load(mesh: PathBuf, levels: PathBuf, model: PathBuf) -> PyResult<Self> {
        let mesh = SurfaceMesh::load(mesh).map_err(to_py_err)?;
        let levels = LevelsCheckpoint::load(levels).map_err(to_py_err)?;
        let graph = build_graph(&mesh).map_err(to_py_err)?;
        let geometry =
            Arc::new(ModelGeometry::new(&graph, &levels.levels).map_err(to_py_err)?);
        let (model, scalers) = ModelCheckpoint::load(model)
            .and_then(|c| c.into_model(geometry))
            .map_err(to_py_err)?;
        Ok(Surrogate { mesh, model, scalers })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    #[getter]
    fn field_names(&self) -> Vec<String> {
        ["cp", "cfx", "cfy", "cfz"].map(String::from).to_vec()
    }

    /// Physical-space field rows `[cp, cfx, cfy, cfz]` at one operating
    /// point.
    fn predict(&self, aoa: f64, mach: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.predict_physical(aoa, mach)?))
    }

    /// Integrated `(CL, CD, CMy)` of the predicted fields.
    #[pyo3(signature = (aoa, mach, chord, *, moment_fraction=0.25, span_y=0.0))]
    fn coefficients(
        &self,
        aoa: f64,
        mach: f64,
        chord: f64,
        moment_fraction: f64,
        span_y: f64,
    ) -> PyResult<(f64, f64, f64)> {
        let phys = self.predict_physical(aoa, mach)?;
        let point =
            moment_reference(&self.mesh, moment_fraction, chord, span_y).map_err(to_py_err)?;
        let reference = AeroReference {
            chord,
            area: self.mesh.total_area(),
            moment_point: point,
            alpha_deg: aoa,
        };
        let coefficients = integrate_coefficients(
            &self.mesh,
            &phys.column(0),
            &phys.slice(s![.., 1..4]),
            &reference,
        )
        .map_err(to_py_err)?;
        Ok((coefficients.cl, coefficients.cd, coefficients.cmy))
    }

    fn __repr__(&self) -> String {
        format!("Surrogate({} nodes)", self.mesh.n_nodes())
    }
}

/// Surrogate modeling of surface fields on unstructured meshes.
#[pymodule]
fn graphrom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mesh>()?;
    m.add_class::<FieldSet>()?;
    m.add_class::<SyntheticCase>()?;
    m.add_class::<Surrogate>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
