//! Python bindings: graph construction via the DSL, the built-in variant
//! corpus, the fusion scheduler, and fused/naive execution with traffic
//! accounting.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tensorfuse::algebra::{check_algebra, run_online, run_stable, softmax_algebra};
use tensorfuse::eval::{eval_naive, Bindings};
use tensorfuse::exec::{execute, ExecOptions, TrafficReport};
use tensorfuse::grid::TileConfig;
use tensorfuse::ir::{OpKind, TensorGraph};
use tensorfuse::schedule::{schedule as plan_schedule, KernelSchedule, SchedulerOptions};
use tensorfuse::tensor::{compare, DType, TensorData};
use tensorfuse::variants;
use tensorfuse::{dsl, Error};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_dtype(s: &str) -> PyResult<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(PyValueError::new_err(format!("unknown dtype {s:?}, expected f32 or f64"))),
    }
}

/// A tensor program: named ops over named dimensions.
#[pyclass]
#[derive(Clone)]
struct Graph {
    inner: TensorGraph,
    // variant metadata, if built from the corpus (drives seeded bindings)
    spec: Option<variants::AttentionSpec>,
    tile_cfg: TileConfig,
}

#[pymethods]
impl Graph {
    /// Parse a DSL program.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Graph> {
        let inner = dsl::parse(text).map_err(py_err)?;
        Ok(Graph { inner, spec: None, tile_cfg: TileConfig::empty() })
    }

    fn emit(&self) -> PyResult<String> {
        dsl::emit(&self.inner).map_err(py_err)
    }

    fn node_count(&self) -> usize {
        self.inner.nodes.len()
    }

    fn node_names(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.name.clone()).collect()
    }

    fn input_names(&self) -> Vec<String> {
        self.inner
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, OpKind::Input))
            .map(|n| n.name.clone())
            .collect()
    }

    fn extents(&self) -> BTreeMap<String, usize> {
        self.inner.extents.clone()
    }

    fn __repr__(&self) -> String {
        format!("Graph({} nodes, {} outputs)", self.inner.nodes.len(), self.inner.outputs.len())
    }
}

/// A fused-kernel plan for a graph.
#[pyclass]
struct Schedule {
    inner: KernelSchedule,
    source: Graph,
}

#[pymethods]
impl Schedule {
    fn kernel_count(&self) -> usize {
        self.inner.kernel_count()
    }

    fn kernels(&self) -> Vec<(String, Vec<String>)> {
        let g = &self.inner.graph;
        self.inner
            .kernels
            .iter()
            .map(|k| {
                (
                    k.name.clone(),
                    k.members.iter().map(|&m| g.nodes[m].name.clone()).collect(),
                )
            })
            .collect()
    }

    fn materialized_intermediates(&self) -> Vec<String> {
        let g = &self.inner.graph;
        self.inner
            .materialized_intermediates()
            .iter()
            .map(|&m| g.nodes[m].name.clone())
            .collect()
    }

    fn diagnostics(&self) -> Vec<String> {
        self.inner.diagnostics.clone()
    }

    /// Full plan (kernels, sketches, fusion steps) as a JSON string.
    fn plan_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Schedule({} kernel(s))", self.inner.kernel_count())
    }
}

#[pyfunction]
fn variant_names() -> Vec<String> {
    variants::VARIANT_NAMES.iter().map(|s| s.to_string()).collect()
}

#[pyfunction]
fn corpus_sizes() -> Vec<usize> {
    variants::CORPUS_SIZES.to_vec()
}

/// Build a named corpus variant at sequence length `n`.
#[pyfunction]
#[pyo3(signature = (name, n = 512, dtype = "f64"))]
fn build_variant(name: &str, n: usize, dtype: &str) -> PyResult<Graph> {
    let spec = variants::spec_for(name, n, parse_dtype(dtype)?).map_err(py_err)?;
    let inner = variants::build_variant(&spec).map_err(py_err)?;
    let tile_cfg = variants::tile_hints(&spec);
    Ok(Graph { inner, spec: Some(spec), tile_cfg })
}

/// Run the fusion scheduler over a graph.
#[pyfunction]
#[pyo3(signature = (graph, semantic = true, structural = true, tiled = true, tiles = None))]
fn schedule(
    graph: &Graph,
    semantic: bool,
    structural: bool,
    tiled: bool,
    tiles: Option<BTreeMap<String, usize>>,
) -> PyResult<Schedule> {
    let mut tile_cfg = graph.tile_cfg.clone();
    if let Some(tiles) = tiles {
        for (dim, size) in tiles {
            tile_cfg.set(&dim, size).map_err(py_err)?;
        }
    }
    let opts = SchedulerOptions { semantic, structural, tiled, tile_cfg };
    let inner = plan_schedule(&graph.inner, &softmax_algebra(), &opts).map_err(py_err)?;
    Ok(Schedule { inner, source: graph.clone() })
}

fn seeded_bindings(graph: &Graph, seed: u64) -> Bindings {
    if let Some(spec) = &graph.spec {
        return variants::bindings(&graph.inner, spec, seed);
    }
    dsl_bindings(&graph.inner, seed)
}

// DSL inputs: seeded uniform [−1, 1] per input node, in node order
fn dsl_bindings(graph: &TensorGraph, seed: u64) -> Bindings {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut b = Bindings::new();
    for node in &graph.nodes {
        if !matches!(node.kind, OpKind::Input) {
            continue;
        }
        let extents = graph.extents_of(&node.dims);
        let len: usize = extents.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.insert(node.name.clone(), TensorData::new(node.dims.clone(), extents, data));
    }
    b
}

fn exec_options(graph: &Graph) -> ExecOptions {
    let mut o = ExecOptions { tile_cfg: graph.tile_cfg.clone(), ..ExecOptions::default() };
    let f64_graph = graph
        .spec
        .as_ref()
        .map(|s| s.dtype == DType::F64)
        .unwrap_or(true);
    if f64_graph {
        // F64 tiles double the on-chip footprint; the default cap targets F32
        o.scratchpad_bytes *= 2;
    }
    o
}

fn traffic_dict<'py>(py: Python<'py>, t: &TrafficReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("kernel_count", t.kernel_count)?;
    d.set_item("global_reads", t.global_reads)?;
    d.set_item("global_writes", t.global_writes)?;
    d.set_item("intermediate_elements", t.intermediate_elements)?;
    d.set_item("intermediate_bytes_materialized", t.intermediate_bytes_materialized)?;
    Ok(d)
}

/// Execute a schedule with seeded inputs; returns (outputs, traffic) where
/// outputs maps name -> (extents, flat row-major data).
#[pyfunction]
#[pyo3(signature = (sched, seed = 0))]
fn run<'py>(
    py: Python<'py>,
    sched: &Schedule,
    seed: u64,
) -> PyResult<(Bound<'py, PyDict>, Bound<'py, PyDict>)> {
    let bindings = seeded_bindings(&sched.source, seed);
    let (outputs, traffic, _) =
        execute(&sched.inner, &bindings, &exec_options(&sched.source)).map_err(py_err)?;
    let out = PyDict::new_bound(py);
    for (name, t) in &outputs {
        out.set_item(name, (t.extents.clone(), t.data.clone()))?;
    }
    Ok((out, traffic_dict(py, &traffic)?))
}

/// Execute fused vs the naive oracle over several seeds; returns a dict with
/// the worst relative error and a pass flag at the dtype's tolerance.
#[pyfunction]
#[pyo3(signature = (sched, seeds = 3))]
fn verify<'py>(py: Python<'py>, sched: &Schedule, seeds: u64) -> PyResult<Bound<'py, PyDict>> {
    let dtype = sched
        .source
        .spec
        .as_ref()
        .map(|s| s.dtype)
        .unwrap_or(DType::F64);
    let tol = match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    };
    let eopts = exec_options(&sched.source);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for seed in 0..seeds {
        let bindings = seeded_bindings(&sched.source, seed);
        let (fused, _, _) = execute(&sched.inner, &bindings, &eopts).map_err(py_err)?;
        let naive = eval_naive(&sched.source.inner, &bindings).map_err(py_err)?;
        for (name, t) in &fused {
            let m = compare(t, &naive[name]).map_err(py_err)?;
            max_abs = max_abs.max(m.max_abs);
            max_rel = max_rel.max(m.max_rel);
        }
    }
    let d = PyDict::new_bound(py);
    d.set_item("seeds", seeds)?;
    d.set_item("max_abs", max_abs)?;
    d.set_item("max_rel", max_rel)?;
    d.set_item("tolerance", tol)?;
    d.set_item("pass", max_rel <= tol)?;
    Ok(d)
}

/// Single-pass online (max, rescaled-sum) reduction of a vector.
#[pyfunction]
fn online_reduce(x: Vec<f64>) -> PyResult<(f64, f64)> {
    run_online(&x, &softmax_algebra()).map_err(py_err)
}

/// Two-pass (max, then shifted sum) reduction of a vector.
#[pyfunction]
fn stable_reduce(x: Vec<f64>) -> PyResult<(f64, f64)> {
    run_stable(&x, &softmax_algebra()).map_err(py_err)
}

/// Check the softmax reduction algebra's axioms on sampled inputs.
#[pyfunction]
#[pyo3(signature = (tolerance = 1e-9))]
fn check_softmax_algebra<'py>(py: Python<'py>, tolerance: f64) -> PyResult<Bound<'py, PyDict>> {
    let samples = [-4.0, -1.0, -0.25, 0.0, 0.5, 1.0, 3.0];
    let report = check_algebra(&softmax_algebra(), &samples, tolerance).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("algebra", &report.algebra)?;
    d.set_item("passed", report.passed)?;
    let axioms = PyDict::new_bound(py);
    for a in &report.axioms {
        axioms.set_item(&a.axiom, (a.passed, a.worst_residual))?;
    }
    d.set_item("axioms", axioms)?;
    Ok(d)
}

#[pymodule]
fn tensorfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Schedule>()?;
    m.add_function(wrap_pyfunction!(variant_names, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(build_variant, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(online_reduce, m)?)?;
    m.add_function(wrap_pyfunction!(stable_reduce, m)?)?;
    m.add_function(wrap_pyfunction!(check_softmax_algebra, m)?)?;
    Ok(())
}
