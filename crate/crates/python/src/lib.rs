//! Python bindings: tensors, convolution layers with their three training
//! steps, tiled execution and the raw matrix kernels.

use std::str::FromStr;

use half::f16;
use odl_kernels::kernels::matmul_counted;
use odl_kernels::transforms;
use odl_kernels::{
    plan_tiles, run_tiled, ConvSpec, Dims, Elem, ElemType, ExecConfig, KernelVariant, LayerState, Layout, Mat, Op,
    Step, Tensor,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: odl_kernels::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: FromStr<Err = odl_kernels::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn pool(workers: usize) -> PyResult<ExecConfig> {
    if workers == 0 {
        return Err(PyValueError::new_err("workers must be at least 1"));
    }
    Ok(ExecConfig::new(workers))
}

/// A CHW/HWC activation or a weight tensor in f32 or f16.
#[pyclass(name = "Tensor", module = "odl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    /// Activation `(c, h, w)` from logical row-major values.
    #[staticmethod]
    #[pyo3(signature = (c, h, w, values, layout = "chw", elem = "f32"))]
    fn activation(c: usize, h: usize, w: usize, values: Vec<f32>, layout: &str, elem: &str) -> PyResult<Self> {
        let t = Tensor::from_logical(Dims::activation(c, h, w), parse(layout)?, parse(elem)?, &values).map_err(err)?;
        Ok(Self(t))
    }

    /// Weights `(c_out, c_in, k_h, k_w)` from logical values. HWC storage
    /// defaults to the one the layer expects for `elem`.
    #[staticmethod]
    #[pyo3(signature = (c_out, c_in, k_h, k_w, values, layout = "chw", elem = "f32", transposed = None))]
    #[allow(clippy::too_many_arguments)]
    fn weights(
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        values: Vec<f32>,
        layout: &str,
        elem: &str,
        transposed: Option<bool>,
    ) -> PyResult<Self> {
        let (layout, elem): (Layout, ElemType) = (parse(layout)?, parse(elem)?);
        let transposed = transposed.unwrap_or_else(|| LayerState::canonical_transposed(layout, elem));
        let dims = Dims::weight(c_out, c_in, k_h, k_w);
        Ok(Self(Tensor::weights_from_logical(dims, layout, transposed, elem, &values).map_err(err)?))
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        match self.0.dims() {
            Dims::Activation { c, h, w } => vec![c, h, w],
            d => d.as_array().to_vec(),
        }
    }

    #[getter]
    fn layout(&self) -> String {
        self.0.layout().to_string()
    }

    #[getter]
    fn elem(&self) -> String {
        self.0.elem().to_string()
    }

    #[getter]
    fn is_weight(&self) -> bool {
        self.0.is_weight()
    }

    #[getter]
    fn is_transposed(&self) -> bool {
        self.0.is_transposed()
    }

    #[getter]
    fn nbytes(&self) -> usize {
        self.0.bytes()
    }

    /// Values in logical row-major order, widened to float.
    fn to_list(&self) -> Vec<f32> {
        self.0.to_logical()
    }

    /// Values in storage order.
    fn raw(&self) -> Vec<f32> {
        (0..self.0.len()).map(|i| self.0.buffer().get_f32(i)).collect()
    }

    fn relayout(&self, layout: &str) -> PyResult<Self> {
        Ok(Self(self.0.relayout(parse(layout)?).map_err(err)?))
    }

    fn convert(&self, elem: &str) -> PyResult<Self> {
        Ok(Self(self.0.convert(parse(elem)?)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        let kind = if self.0.is_weight() { "weights" } else { "activation" };
        let t = if self.0.is_transposed() { ", transposed" } else { "" };
        format!("Tensor({kind} {:?}, {}, {}{t})", self.dims(), self.0.layout(), self.0.elem())
    }
}

/// Convolution geometry: stride 1, symmetric zero padding.
#[pyclass(name = "ConvSpec", module = "odl", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyConvSpec(ConvSpec);

#[pymethods]
impl PyConvSpec {
    #[new]
    #[pyo3(signature = (c_in, h_in, w_in, c_out, k_h, k_w, pad = 0))]
    fn new(c_in: usize, h_in: usize, w_in: usize, c_out: usize, k_h: usize, k_w: usize, pad: usize) -> PyResult<Self> {
        Ok(Self(ConvSpec::new(c_in, h_in, w_in, c_out, k_h, k_w, pad).map_err(err)?))
    }

    #[getter]
    fn c_in(&self) -> usize {
        self.0.c_in
    }

    #[getter]
    fn c_out(&self) -> usize {
        self.0.c_out
    }

    #[getter]
    fn h_out(&self) -> usize {
        self.0.h_out()
    }

    #[getter]
    fn w_out(&self) -> usize {
        self.0.w_out()
    }

    #[getter]
    fn macs(&self) -> u64 {
        self.0.macs()
    }

    fn __repr__(&self) -> String {
        let s = &self.0;
        format!(
            "ConvSpec({}x{}x{} -> {}x{}x{}, k={}x{}, pad={})",
            s.c_in,
            s.h_in,
            s.w_in,
            s.c_out,
            s.h_out(),
            s.w_out(),
            s.k_h,
            s.k_w,
            s.pad
        )
    }
}

/// A Conv2D, PointWise or fully connected layer holding its weights and
/// the input saved by the last forward pass.
#[pyclass(name = "Layer", module = "odl")]
struct PyLayer {
    st: LayerState,
    cfg: ExecConfig,
}

#[pymethods]
impl PyLayer {
    #[new]
    #[pyo3(signature = (op, spec, weights, layout = "chw", elem = "f32", variant = None, workers = 1))]
    fn new(
        op: &str,
        spec: &PyConvSpec,
        weights: &PyTensor,
        layout: &str,
        elem: &str,
        variant: Option<&str>,
        workers: usize,
    ) -> PyResult<Self> {
        let op: Op = parse(op)?;
        let mut st = LayerState::new(op, spec.0, parse(layout)?, parse(elem)?, &weights.0).map_err(err)?;
        if let Some(v) = variant {
            st.set_variant(parse::<KernelVariant>(v)?).map_err(err)?;
        }
        Ok(Self { st, cfg: pool(workers)? })
    }

    #[getter]
    fn variant(&self) -> String {
        self.st.variant().to_string()
    }

    #[setter]
    fn set_variant(&mut self, v: &str) -> PyResult<()> {
        self.st.set_variant(parse(v)?).map_err(err)
    }

    #[getter]
    fn weights(&self) -> PyTensor {
        PyTensor(self.st.weights().clone())
    }

    #[getter]
    fn spec(&self) -> PyConvSpec {
        PyConvSpec(*self.st.spec())
    }

    fn forward(&mut self, x: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor(self.st.forward(&x.0, &self.cfg).map_err(err)?))
    }

    fn backward_input(&self, dy: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor(self.st.backward_input(&dy.0, &self.cfg).map_err(err)?))
    }

    fn backward_weight(&self, dy: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor(self.st.backward_weight(&dy.0, &self.cfg).map_err(err)?))
    }

    /// `(dx, dw)`.
    fn backward(&self, dy: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
        let g = self.st.backward(&dy.0, &self.cfg).map_err(err)?;
        Ok((PyTensor(g.dx), PyTensor(g.dw)))
    }

    /// `W <- W - lr * dW`.
    fn sgd_update(&mut self, dw: &PyTensor, lr: f32) -> PyResult<()> {
        self.st.sgd_update(&dw.0, lr).map_err(err)
    }

    /// Runs one step (`"fw"`, `"bw-ig"` or `"bw-wg"`) tile by tile through a
    /// scratchpad of `l1_bytes`. Returns a dict with the output, the tile
    /// count, the peak scratchpad use and the bytes moved.
    fn run_tiled<'py>(
        &mut self,
        py: Python<'py>,
        input: &PyTensor,
        step: &str,
        l1_bytes: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let step: Step = parse(step)?;
        let plan = plan_tiles(&self.st, step, l1_bytes).map_err(err)?;
        let run = run_tiled(&mut self.st, &input.0, &plan, &self.cfg).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("output", PyTensor(run.output))?;
        d.set_item("tiles", plan.len())?;
        d.set_item("peak", run.peak)?;
        d.set_item("bytes_in", run.log.bytes_in)?;
        d.set_item("bytes_out", run.log.bytes_out)?;
        Ok(d)
    }
}

fn to_mat<T: Elem>(rows: &[Vec<f32>]) -> PyResult<Mat<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let data = rows.iter().flatten().map(|&v| T::from_f32(v)).collect();
    Mat::from_vec(rows.len(), cols, data).map_err(err)
}

fn from_mat<T: Elem>(m: &Mat<T>) -> Vec<Vec<f32>> {
    m.as_slice().chunks(m.cols().max(1)).take(m.rows()).map(|r| r.iter().map(|v| v.to_f32()).collect()).collect()
}

fn run_mm<T: Elem>(
    a: &[Vec<f32>],
    b: &[Vec<f32>],
    v: KernelVariant,
    cfg: &ExecConfig,
) -> PyResult<(Vec<Vec<f32>>, u64)> {
    let (a, b) = (to_mat::<T>(a)?, to_mat::<T>(b)?);
    let (out, counters) = matmul_counted(a.view(), b.view(), v, cfg).map_err(err)?;
    Ok((from_mat(&out), counters.total.mac))
}

/// Matrix product with a kernel variant: `mm-*` computes `A B`, `mm_t-*`
/// computes `A B^T`. Returns the product and the number of MACs executed.
#[pyfunction]
#[pyo3(signature = (a, b, variant = "mm-2x4", elem = "f32", workers = 1))]
fn mm(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>, variant: &str, elem: &str, workers: usize) -> PyResult<(Vec<Vec<f32>>, u64)> {
    let v: KernelVariant = parse(variant)?;
    let cfg = pool(workers)?;
    match parse::<ElemType>(elem)? {
        ElemType::F32 => run_mm::<f32>(&a, &b, v, &cfg),
        ElemType::F16 => run_mm::<f16>(&a, &b, v, &cfg),
    }
}

fn lower(x: &PyTensor, spec: &PyConvSpec, rows: bool) -> PyResult<Vec<Vec<f32>>> {
    let cfg = ExecConfig::default();
    match x.0.elem() {
        ElemType::F32 => {
            let m = if rows {
                transforms::im2row::<f32>(&x.0, &spec.0, &cfg)
            } else {
                transforms::im2col::<f32>(&x.0, &spec.0, &cfg)
            };
            Ok(from_mat(&m.map_err(err)?))
        }
        ElemType::F16 => {
            let m = if rows {
                transforms::im2row::<f16>(&x.0, &spec.0, &cfg)
            } else {
                transforms::im2col::<f16>(&x.0, &spec.0, &cfg)
            };
            Ok(from_mat(&m.map_err(err)?))
        }
    }
}

/// Im2Row lowering: one row per output position.
#[pyfunction]
fn im2row(x: &PyTensor, spec: &PyConvSpec) -> PyResult<Vec<Vec<f32>>> {
    lower(x, spec, true)
}

/// Im2Col lowering: one column per output position.
#[pyfunction]
fn im2col(x: &PyTensor, spec: &PyConvSpec) -> PyResult<Vec<Vec<f32>>> {
    lower(x, spec, false)
}

/// Kernel variants available for an element type.
#[pyfunction]
#[pyo3(signature = (elem = "f32"))]
fn variants(elem: &str) -> PyResult<Vec<String>> {
    Ok(KernelVariant::all(parse(elem)?).into_iter().map(|v| v.to_string()).collect())
}

#[pymodule]
fn odl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConvSpec>()?;
    m.add_class::<PyLayer>()?;
    m.add_function(wrap_pyfunction!(mm, m)?)?;
    m.add_function(wrap_pyfunction!(im2row, m)?)?;
    m.add_function(wrap_pyfunction!(im2col, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
